"""Pose and keypoint accuracy metrics and silhouette masks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .geometry import MIN_DEPTH, CameraModel, RigidTransform, project
from .kinematics import capsule_segments, forward_kinematics

PCK_GRID_2D = np.arange(0.0, 51.0, 1.0)  # px
PCK_GRID_3D = np.arange(0.0, 201.0, 4.0)  # mm


def ee_3d_error(T: RigidTransform, x_b, x_c_true) -> float:
    """Distance between the end effector placed by ``T`` and its true camera-frame position."""
    return float(np.linalg.norm(T.apply(np.asarray(x_b, dtype=float)) - np.asarray(x_c_true, dtype=float)))


def reprojection_error_ee(T: RigidTransform, x_b, h_true, cam: CameraModel) -> float:
    """Pixel distance between the end effector projected through ``T`` and ``h_true``."""
    uv = project(cam, T.apply(np.asarray(x_b, dtype=float)))
    return float(np.linalg.norm(uv - np.asarray(h_true, dtype=float)))


@dataclass(frozen=True, eq=False)
class PckCurve:
    thresholds: np.ndarray
    values: np.ndarray
    auc: float

    def rows(self):
        return [(float(t), float(v)) for t, v in zip(self.thresholds, self.values)]


def pck(errors, thresholds) -> PckCurve:
    """Fraction of errors at or below each threshold; the AUC is the plain mean over the grid."""
    e = np.sort(np.asarray(errors, dtype=float).ravel())
    if e.size == 0:
        raise ValueError("no errors to score")
    th = np.asarray(thresholds, dtype=float)
    if th.size == 0 or np.any(np.diff(th) < 0):
        raise ValueError("thresholds must be a non-empty ascending grid")
    values = np.searchsorted(e, th, side="right") / e.size
    return PckCurve(th, values, float(np.mean(values)))


def write_pck_csv(path, curves: dict):
    """One ``threshold,value`` block per named curve."""
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["curve", "threshold", "value"])
        for name, curve in curves.items():
            for t, v in curve.rows():
                wr.writerow([name, repr(t), repr(v)])


@dataclass(frozen=True, eq=False)
class BitMask:
    width: int
    height: int
    bits: np.ndarray  # (height, width) bool, row-major

    def __post_init__(self):
        if self.bits.shape != (self.height, self.width):
            raise ValueError(f"mask bits {self.bits.shape} do not match {self.height}x{self.width}")

    @classmethod
    def empty(cls, cam: CameraModel):
        return cls(cam.width, cam.height, np.zeros((cam.height, cam.width), dtype=bool))

    @property
    def area(self):
        return int(self.bits.sum())

    def to_pgm(self, path):
        with open(path, "wb") as f:
            f.write(f"P5\n{self.width} {self.height}\n255\n".encode())
            f.write((self.bits.astype(np.uint8) * 255).tobytes())


def capsule_spheres(A, B, r):
    """Sphere centers and radii covering each capsule at spacing no larger than half its radius."""
    centers, radii = [], []
    for a, b, rad in zip(A, B, r):
        n = int(math.ceil(np.linalg.norm(b - a) / (0.5 * rad))) + 1
        s = np.linspace(0.0, 1.0, n)[:, None]
        centers.append(a + s * (b - a))
        radii.append(np.full(n, rad))
    if not centers:
        return np.zeros((0, 3)), np.zeros(0)
    return np.concatenate(centers), np.concatenate(radii)


def rasterize_spheres(centers_cam, radii, cam: CameraModel) -> BitMask:
    """Union of filled circles, one per sphere in front of the camera; pixel ``(i, j)`` has center ``(u=j, v=i)``."""
    bits = np.zeros((cam.height, cam.width), dtype=bool)
    for p, rad in zip(np.asarray(centers_cam, dtype=float).reshape(-1, 3), np.asarray(radii).ravel()):
        z = p[2]
        if z <= MIN_DEPTH:
            continue
        u, v = cam.fx * p[0] / z + cam.cx, cam.fy * p[1] / z + cam.cy
        rp = cam.fx * rad / z
        j0, j1 = max(0, int(math.ceil(u - rp))), min(cam.width - 1, int(math.floor(u + rp)))
        i0, i1 = max(0, int(math.ceil(v - rp))), min(cam.height - 1, int(math.floor(v + rp)))
        if j0 > j1 or i0 > i1:
            continue
        jj = np.arange(j0, j1 + 1) - u
        ii = np.arange(i0, i1 + 1) - v
        bits[i0:i1 + 1, j0:j1 + 1] |= (ii[:, None] ** 2 + jj[None, :] ** 2) <= rp * rp
    return BitMask(cam.width, cam.height, bits)


def render_mask(chain, q, T_cb: RigidTransform, cam: CameraModel) -> BitMask:
    """Silhouette of the link capsules seen from ``T_cb``."""
    A, B, r, _ = capsule_segments(chain, forward_kinematics(chain, q))
    centers, radii = capsule_spheres(A, B, r)
    if len(centers) == 0:
        return BitMask.empty(cam)
    return rasterize_spheres(T_cb.apply(centers), radii, cam)


def iou(g: BitMask, p: BitMask) -> float:
    """Intersection over union; two empty masks agree perfectly."""
    if g.bits.shape != p.bits.shape:
        raise ValueError(f"mask sizes differ: {g.bits.shape} vs {p.bits.shape}")
    union = np.count_nonzero(g.bits | p.bits)
    if union == 0:
        return 1.0
    return np.count_nonzero(g.bits & p.bits) / union
