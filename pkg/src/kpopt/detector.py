"""Keypoint detector stand-in and external-detection adapter.

The surrogate reproduces what the keypoint optimizer consumes from a trained
detector: per-keypoint error statistics that get worse with self-occlusion,
with symmetric look-alikes being co-selected, with nearby co-selected
keypoints (crowding), and with scene nuisance.  Because crowding and
confusion depend on the whole selected set, set quality is not separable
into per-keypoint scores.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .kinematics import capsule_segments, forward_kinematics

OCCLUSION_EPS = 1e-4  # m; crossings this close to the keypoint itself are ignored


class DetectionSchemaError(ValueError):
    pass


class UnknownSampleError(DetectionSchemaError):
    pass


# ---------------------------------------------------------------------------
# occlusion geometry


def segment_segment_distance(p1, q1, p2, q2):
    """Closest distance between segments ``[p1, q1]`` and ``[p2, q2]``; broadcasts over leading axes."""
    p1, q1, p2, q2 = (np.asarray(x, dtype=float) for x in (p1, q1, p2, q2))
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = np.sum(d1 * d1, axis=-1)
    e = np.sum(d2 * d2, axis=-1)
    f = np.sum(d2 * r, axis=-1)
    c = np.sum(d1 * r, axis=-1)
    b = np.sum(d1 * d2, axis=-1)
    eps = 1e-15
    a_ok = a > eps
    e_ok = e > eps
    safe_a = np.where(a_ok, a, 1.0)
    safe_e = np.where(e_ok, e, 1.0)
    denom = a * e - b * b
    s_gen = np.where(denom > eps * np.maximum(a * e, eps), (b * f - c * e) / np.where(denom != 0, denom, 1.0), 0.0)
    s_gen = np.clip(s_gen, 0.0, 1.0)
    t_gen = (b * s_gen + f) / safe_e
    s_lo = np.clip(-c / safe_a, 0.0, 1.0)
    s_hi = np.clip((b - c) / safe_a, 0.0, 1.0)
    s = np.where(t_gen < 0, s_lo, np.where(t_gen > 1, s_hi, s_gen))
    t = np.clip(t_gen, 0.0, 1.0)
    # degenerate second segment (a sphere): closest point on the first segment to p2
    s = np.where(e_ok, s, s_lo)
    t = np.where(e_ok, t, 0.0)
    # degenerate first segment
    t = np.where(a_ok, t, np.clip(f / safe_e, 0.0, 1.0) * e_ok)
    s = np.where(a_ok, s, 0.0)
    c1 = p1 + s[..., None] * d1
    c2 = p2 + t[..., None] * d2
    return np.linalg.norm(c1 - c2, axis=-1)


def camera_center_base(cam_pose):
    """Camera center in the base frame for a camera-from-base transform."""
    R = cam_pose.rotation
    return -R.T @ cam_pose.b


def occluded_mask(A, B, radius, center, points, eps=OCCLUSION_EPS):
    """Which ``points (k, 3)`` are hidden from ``center`` by capsules ``(A, B, radius)``."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(A) == 0 or len(points) == 0:
        return np.zeros(len(points), dtype=bool)
    d = points - center
    length = np.linalg.norm(d, axis=1)
    short = length <= eps
    end = points - eps * d / np.where(short, 1.0, length)[:, None]
    dist = segment_segment_distance(center[None, None, :], end[:, None, :], A[None], B[None])
    hit = np.any(dist < radius[None], axis=1)
    return hit & ~short


def occlusion_test(chain, q, cam_pose, point_base) -> bool:
    """True when the point is visible, i.e. no link capsule crosses the camera ray."""
    fk = forward_kinematics(chain, q)
    A, B, r, _ = capsule_segments(chain, fk)
    p = np.asarray(point_base, dtype=float).reshape(1, 3)
    return not bool(occluded_mask(A, B, r, camera_center_base(cam_pose), p)[0])


# ---------------------------------------------------------------------------
# difficulty profile and fitted model


@dataclass(frozen=True)
class KeypointDifficulty:
    sigma_base: float  # px
    miss_base: float = 0.0
    p_sym_base: float = 0.0
    confuser: int | None = None

    def __post_init__(self):
        if self.sigma_base < 0:
            raise ValueError("sigma_base must be non-negative")
        for name in ("miss_base", "p_sym_base"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")


@dataclass(frozen=True)
class DifficultyProfile:
    keypoints: dict  # keypoint id -> KeypointDifficulty
    a_occ: float = 0.0
    a_sym: float = 0.0
    a_crowd: float = 0.0
    a_nuis: float = 0.0
    d0: float = 10.0  # px

    def __post_init__(self):
        for name in ("a_occ", "a_sym", "a_crowd", "a_nuis"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.d0 > 0:
            raise ValueError("d0 must be positive")

    def to_dict(self):
        return {
            "a_occ": self.a_occ, "a_sym": self.a_sym, "a_crowd": self.a_crowd, "a_nuis": self.a_nuis, "d0": self.d0,
            "keypoints": {str(k): {"sigma_base": v.sigma_base, "miss_base": v.miss_base,
                                   "p_sym_base": v.p_sym_base, "confuser": v.confuser}
                          for k, v in sorted(self.keypoints.items())},
        }

    @classmethod
    def from_dict(cls, d, candidate_ids=None):
        """Parse a profile block; ``default`` fills candidates without an explicit entry."""
        default = d.get("default")
        kps = {}
        for k, v in d.get("keypoints", {}).items():
            kps[int(k)] = _kp_difficulty(v, default)
        if candidate_ids is not None:
            for cid in candidate_ids:
                if cid not in kps:
                    if default is None:
                        raise ValueError(f"difficulty profile has no entry for keypoint {cid}")
                    kps[cid] = _kp_difficulty({}, default)
        return cls(kps, float(d.get("a_occ", 0.0)), float(d.get("a_sym", 0.0)), float(d.get("a_crowd", 0.0)),
                   float(d.get("a_nuis", 0.0)), float(d.get("d0", 10.0)))


def _kp_difficulty(v, default):
    merged = dict(default or {})
    merged.update(v)
    conf = merged.get("confuser")
    return KeypointDifficulty(float(merged["sigma_base"]), float(merged.get("miss_base", 0.0)),
                              float(merged.get("p_sym_base", 0.0)), None if conf is None else int(conf))


def train_size_factor(m):
    """Mild noise reduction with more training samples, capped at 2."""
    return min(2.0, 1.0 + 0.25 * math.log10(max(m, 10) / 10.0))


@dataclass(frozen=True, eq=False)
class DetectorModel:
    selected: tuple  # keypoint ids
    candidate_index: np.ndarray  # column of each selected id in the dataset arrays
    sigma_base: np.ndarray
    sigma_eff: np.ndarray
    p_miss: np.ndarray
    p_sym: np.ndarray
    confuser_index: np.ndarray  # dataset column of the confuser, -1 if none
    occlusion_rate: np.ndarray
    mean_pairwise_proj_dist: np.ndarray
    train_size_factor: float
    a_nuis: float
    image_size: tuple = (0, 0)

    def stats(self):
        return {kid: {"sigma_eff": float(s), "p_miss": float(m), "p_sym": float(p), "occlusion_rate": float(o)}
                for kid, s, m, p, o in zip(self.selected, self.sigma_eff, self.p_miss, self.p_sym, self.occlusion_rate)}


@dataclass(frozen=True)
class Detection:
    keypoint_id: int
    pixel: tuple
    rho: float
    status: str = "detected"  # or "missed"
    clamped: bool = False

    @property
    def detected(self):
        return self.status == "detected"


def fit_detector(profile: DifficultyProfile, selected, train, size_factor=None, ids=None) -> DetectorModel:
    """Fit the surrogate's per-keypoint statistics for ``selected`` on the training split.

    ``train`` is a ``Dataset``; its train split is used unless ``ids`` names other samples.
    """
    selected = tuple(int(i) for i in selected)
    if len(set(selected)) != len(selected):
        raise ValueError("selected keypoints must be distinct")
    for kid in selected:
        if kid not in profile.keypoints:
            raise KeyError(f"keypoint {kid} has no difficulty entry")
        if kid not in train.index_of:
            raise KeyError(f"keypoint {kid} is not a dataset candidate")
    ids = train.train_ids if ids is None else tuple(ids)
    if len(ids) == 0:
        raise ValueError("training set is empty")
    cols = np.array([train.index_of[k] for k in selected], dtype=int)
    arr = train.arrays(ids)
    vis = arr.visible[:, cols]
    occ = 1.0 - vis.mean(axis=0)
    uv = arr.pixels[:, cols]  # (S, K, 2)
    d = np.linalg.norm(uv[:, :, None, :] - uv[:, None, :, :], axis=-1)  # (S, K, K)
    valid = np.isfinite(d)
    counts = valid.sum(axis=0)
    sums = np.where(valid, d, 0.0).sum(axis=0)
    dbar = np.where(counts > 0, sums / np.maximum(counts, 1), np.inf)
    K = len(selected)
    off_diag = ~np.eye(K, dtype=bool)
    crowd = 1.0 + profile.a_crowd * np.sum(np.where(off_diag, np.exp(-dbar / profile.d0), 0.0), axis=1)
    factor = train_size_factor(len(ids)) if size_factor is None else float(size_factor)
    diff = [profile.keypoints[k] for k in selected]
    sigma_base = np.array([x.sigma_base for x in diff])
    miss_base = np.array([x.miss_base for x in diff])
    psym_base = np.array([x.p_sym_base for x in diff])
    occ_term = 1.0 + profile.a_occ * occ
    sigma_eff = sigma_base * occ_term * crowd / factor
    p_miss = np.clip(miss_base * occ_term, 0.0, 1.0)
    sel = set(selected)
    conf_sel = np.array([x.confuser is not None and x.confuser in sel for x in diff])
    p_sym = np.clip(np.where(conf_sel, psym_base * (1.0 + profile.a_sym), psym_base), 0.0, 1.0)
    conf_idx = np.array([train.index_of.get(x.confuser, -1) if x.confuser is not None else -1 for x in diff], dtype=int)
    return DetectorModel(selected, cols, sigma_base, sigma_eff, p_miss, p_sym, conf_idx, occ, dbar, factor,
                         profile.a_nuis, (train.camera.width, train.camera.height))


@dataclass(frozen=True, eq=False)
class DetectionArrays:
    """Detections of ``K`` keypoints over ``S`` samples."""

    keypoint_ids: tuple
    sample_ids: tuple
    uv: np.ndarray  # (S, K, 2), NaN where missed
    rho: np.ndarray  # (S, K)
    detected: np.ndarray  # (S, K) bool
    clamped: np.ndarray = None

    def for_sample(self, row):
        out = []
        for k, kid in enumerate(self.keypoint_ids):
            if self.detected[row, k]:
                clamped = bool(self.clamped[row, k]) if self.clamped is not None else False
                out.append(Detection(kid, (float(self.uv[row, k, 0]), float(self.uv[row, k, 1])),
                                     float(self.rho[row, k]), "detected", clamped))
            else:
                out.append(Detection(kid, (math.nan, math.nan), 0.0, "missed"))
        return out


def _confidence(err, sigma):
    sig = np.broadcast_to(sigma, err.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(sig > 0, np.exp(-err / np.where(sig > 0, sig, 1.0)), np.where(err == 0, 1.0, 0.0))
    return np.clip(rho, 0.0, 1.0)


def detect_arrays(model: DetectorModel, pixels, nuisance, rng, clamp=False, visible=None, sample_ids=None):
    """Vectorized surrogate detections.

    ``pixels`` is ``(S, N, 2)`` ground truth for all dataset candidates (NaN
    where not projectable) and ``nuisance`` is ``(S,)``.
    """
    pixels = np.asarray(pixels, dtype=float)
    S = pixels.shape[0]
    K = len(model.selected)
    u_miss = rng.random((S, K))
    u_sym = rng.random((S, K))
    noise = rng.standard_normal((S, K, 2))
    truth = pixels[:, model.candidate_index]
    has_truth = np.all(np.isfinite(truth), axis=2)
    if model.image_size[0] > 0:
        # a keypoint projecting outside the image cannot be found in it
        has_truth &= np.all((truth >= -0.5) & (truth < np.array(model.image_size) - 0.5), axis=2)
    detected = (u_miss >= model.p_miss) & has_truth
    center = truth.copy()
    ci = model.confuser_index
    if np.any(ci >= 0):
        conf_uv = pixels[:, np.where(ci >= 0, ci, 0)]
        conf_ok = (ci >= 0)[None, :] & np.all(np.isfinite(conf_uv), axis=2)
        if visible is not None:
            conf_ok &= np.asarray(visible)[:, np.where(ci >= 0, ci, 0)]
        swap = conf_ok & (u_sym < model.p_sym)
        center = np.where(swap[..., None], conf_uv, center)
    scale = model.sigma_eff[None, :] * np.sqrt(1.0 + model.a_nuis * np.asarray(nuisance, dtype=float)[:, None])
    uv = center + scale[..., None] * noise
    clamped = np.zeros((S, K), dtype=bool)
    if clamp and model.image_size[0] > 0:
        lo = np.zeros(2)
        hi = np.array(model.image_size, dtype=float) - 1.0
        c_uv = np.clip(uv, lo, hi)
        clamped = np.any(c_uv != uv, axis=2) & detected
        uv = c_uv
    err = np.linalg.norm(uv - truth, axis=2)
    rho = np.where(detected, _confidence(err, model.sigma_eff[None, :]), 0.0)
    uv = np.where(detected[..., None], uv, np.nan)
    ids = tuple(range(S)) if sample_ids is None else tuple(sample_ids)
    return DetectionArrays(model.selected, ids, uv, rho, detected, clamped)


def detect(model: DetectorModel, sample, rng, clamp=False):
    """Surrogate detections for one ``SceneSample`` as a list of ``Detection``."""
    arr = detect_arrays(model, sample.pixels[None], np.array([sample.nuisance]), rng, clamp=clamp,
                        visible=sample.visible[None], sample_ids=(sample.sample_id,))
    return arr.for_sample(0)


def detect_dataset(model: DetectorModel, dataset, ids, rng, clamp=False):
    arr = dataset.arrays(ids)
    return detect_arrays(model, arr.pixels, arr.nuisance, rng, clamp=clamp, visible=arr.visible, sample_ids=ids)


# ---------------------------------------------------------------------------
# detections JSONL

_FIELDS = ("sample_id", "keypoint_id", "u", "v", "rho")


def load_external_detections(path, dataset=None):
    """Read ``{sample_id, keypoint_id, u, v, rho}`` records keyed by ``(sample, keypoint)``.

    A missed detection is an absent record.
    """
    known_samples = None if dataset is None else {s.sample_id for s in dataset.samples}
    known_kps = None if dataset is None else set(dataset.index_of)
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DetectionSchemaError(f"line {lineno}: invalid JSON ({exc})") from exc
            if not isinstance(rec, dict) or any(k not in rec for k in _FIELDS):
                raise DetectionSchemaError(f"line {lineno}: record must have fields {', '.join(_FIELDS)}")
            try:
                sid, kid = int(rec["sample_id"]), int(rec["keypoint_id"])
                u, v, rho = float(rec["u"]), float(rec["v"]), float(rec["rho"])
            except (TypeError, ValueError) as exc:
                raise DetectionSchemaError(f"line {lineno}: bad field type ({exc})") from exc
            if not (math.isfinite(u) and math.isfinite(v)) or not 0.0 <= rho <= 1.0:
                raise DetectionSchemaError(f"line {lineno}: non-finite pixel or rho outside [0, 1]")
            if (sid, kid) in out:
                raise DetectionSchemaError(f"line {lineno}: duplicate record for sample {sid}, keypoint {kid}")
            if known_samples is not None and sid not in known_samples:
                raise UnknownSampleError(f"line {lineno}: unknown sample id {sid}")
            if known_kps is not None and kid not in known_kps:
                raise DetectionSchemaError(f"line {lineno}: unknown keypoint id {kid}")
            out[(sid, kid)] = Detection(kid, (u, v), rho)
    return out


def detections_to_arrays(detections, sample_ids, keypoint_ids):
    """Pack a ``(sample, keypoint) -> Detection`` map into ``DetectionArrays``."""
    S, K = len(sample_ids), len(keypoint_ids)
    uv = np.full((S, K, 2), np.nan)
    rho = np.zeros((S, K))
    det = np.zeros((S, K), dtype=bool)
    for i, sid in enumerate(sample_ids):
        for k, kid in enumerate(keypoint_ids):
            d = detections.get((sid, kid))
            if d is not None and d.detected:
                uv[i, k] = d.pixel
                rho[i, k] = d.rho
                det[i, k] = True
    return DetectionArrays(tuple(keypoint_ids), tuple(sample_ids), uv, rho, det)


def write_detections(path, arrays: DetectionArrays):
    with open(path, "w") as f:
        for i, sid in enumerate(arrays.sample_ids):
            for k, kid in enumerate(arrays.keypoint_ids):
                if arrays.detected[i, k]:
                    rec = {"sample_id": int(sid), "keypoint_id": int(kid), "u": float(arrays.uv[i, k, 0]),
                           "v": float(arrays.uv[i, k, 1]), "rho": float(arrays.rho[i, k])}
                    f.write(json.dumps(rec) + "\n")
