"""Rigid-transform algebra and the pinhole camera.

Conventions
-----------
- Quaternions are ``(w, x, y, z)`` with unit norm.
- A ``RigidTransform`` maps points ``p -> R(q) @ p + b``.
- Axis-angle vectors are canonicalized so that ``|omega| <= pi``.
- Pixel coordinates are ``(u, v)`` with ``u`` along image columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# points closer than this to the camera plane cannot be projected
MIN_DEPTH = 1e-9


class NonProjectableError(ValueError):
    """Raised when a point lies on or behind the camera plane."""


class CovarianceError(ValueError):
    """Raised for covariance matrices that are not symmetric PSD."""


def skew(v):
    """Cross-product matrix ``[v]_x``; broadcasts over leading axes."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero-norm quaternion")
    return q / n


def quat_to_matrix(q):
    """Rotation matrix of a unit quaternion (wxyz); broadcasts."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R):
    """Unit quaternion (wxyz, w >= 0) of a single rotation matrix."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    # Shepperd's method: branch on the largest diagonal term for stability
    if tr > 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def axis_angle_to_matrix(omega):
    """Rodrigues' formula; broadcasts over leading axes."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    K = skew(omega)
    K2 = K @ K
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    # Taylor expansions near zero keep the coefficients accurate
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * K2


def canonicalize_axis_angle(omega):
    """Map an axis-angle vector onto the ball ``|omega| <= pi``; broadcasts."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1, keepdims=True)
    wrapped = np.mod(theta + np.pi, 2 * np.pi) - np.pi
    safe = np.where(theta > 0, theta, 1.0)
    return np.where(theta > np.pi, omega / safe * wrapped, omega)


def matrix_to_axis_angle(R):
    """Axis-angle vector of a single rotation matrix, ``|omega| <= pi``."""
    R = np.asarray(R, dtype=float)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    # atan2 stays well conditioned at both ends of [0, pi]
    theta = np.arctan2(0.5 * np.linalg.norm(v), (np.trace(R) - 1.0) / 2.0)
    if theta < 1e-6:
        return 0.5 * v * (1.0 + theta**2 / 6.0)
    if np.pi - theta > 1e-4:
        return theta / (2.0 * np.sin(theta)) * v
    # near pi: recover the axis from the symmetric part
    cos_t = np.cos(theta)
    S = (0.5 * (R + R.T) - cos_t * np.eye(3)) / (1.0 - cos_t)
    i = int(np.argmax(np.diag(S)))
    axis = S[:, i] / np.sqrt(max(S[i, i], 1e-300))
    if np.dot(axis, v) < 0:
        axis = -axis
    return canonicalize_axis_angle(theta * axis / np.linalg.norm(axis))


def matrix_to_axis_angle_batch(R):
    """Axis-angle vectors of a stack of rotations ``(n, 3, 3)``."""
    R = np.asarray(R, dtype=float).reshape(-1, 3, 3)
    v = np.stack([R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]], axis=1)
    theta = np.arctan2(0.5 * np.linalg.norm(v, axis=1), (np.trace(R, axis1=1, axis2=2) - 1.0) / 2.0)
    small = theta < 1e-6
    sin_t = np.where(small, 1.0, np.sin(theta))
    out = np.where(small[:, None], 0.5 * v * (1.0 + theta**2 / 6.0)[:, None], (theta / (2.0 * sin_t))[:, None] * v)
    for i in np.flatnonzero(np.pi - theta <= 1e-4):
        out[i] = matrix_to_axis_angle(R[i])
    return out


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation ``q`` (unit quaternion, wxyz) followed by translation ``b``."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    b: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if n == 0:
            raise ValueError("zero-norm quaternion")
        if abs(n - 1.0) > 1e-12:
            q = q / n
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).reshape(3))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3].copy())

    @classmethod
    def from_rt(cls, R, t):
        return cls(matrix_to_quat(R), np.asarray(t, dtype=float))

    @property
    def rotation(self):
        return quat_to_matrix(self.q)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.b
        return T

    def apply(self, p):
        """Transform points of shape ``(3,)`` or ``(n, 3)``."""
        return rotate_translate(self.rotation, self.b, p)

    def compose(self, other):
        """``self @ other``: apply ``other`` first."""
        return RigidTransform.from_matrix(self.matrix() @ other.matrix())

    def __matmul__(self, other):
        return self.compose(other)

    def inverse(self):
        R = self.rotation
        return RigidTransform.from_rt(R.T, -R.T @ self.b)

    def to_dict(self):
        return {"quaternion": [float(x) for x in self.q], "translation": [float(x) for x in self.b]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d.get("quaternion", [1, 0, 0, 0]), dtype=float), np.array(d.get("translation", [0, 0, 0]), dtype=float))

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.q, other.q) and np.array_equal(self.b, other.b)

    def __repr__(self):
        return f"RigidTransform(q={self.q.tolist()}, b={self.b.tolist()})"


@dataclass(frozen=True, eq=False)
class AxisAngleTransform:
    omega: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", canonicalize_axis_angle(np.asarray(self.omega, dtype=float).reshape(3)))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).reshape(3))


def axis_angle_to_rigid(a: AxisAngleTransform) -> RigidTransform:
    return RigidTransform.from_rt(axis_angle_to_matrix(a.omega), a.b)


def rotate_translate(R, t, p):
    """``R @ p + t`` for points ``(..., 3)``, written out so every row rounds the same way.

    A BLAS matmul may pick a different summation order depending on the
    number of rows, which would make a point's transform depend on the batch.
    """
    p = np.asarray(p, dtype=float)
    x, y, z = p[..., 0:1], p[..., 1:2], p[..., 2:3]
    return R[:, 0] * x + R[:, 1] * y + R[:, 2] * z + t


def rigid_to_axis_angle(T: RigidTransform) -> AxisAngleTransform:
    return AxisAngleTransform(matrix_to_axis_angle(T.rotation), T.b.copy())


def transform_point(T: RigidTransform, p):
    return T.apply(p)


@dataclass(frozen=True)
class CameraModel:
    """Ideal pinhole camera, no distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor):
        """Same camera at ``factor`` times the resolution."""
        return CameraModel(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                           int(round(self.width * factor)), int(round(self.height * factor)))

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera-from-world transform for a camera at ``eye`` whose optical axis points at ``target``.

    Image ``v`` grows away from ``up``.
    """
    eye, target, up = (np.asarray(x, dtype=float) for x in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-12:
        raise ValueError("up vector is parallel to the viewing direction")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])  # rows: camera axes in world coordinates
    return RigidTransform.from_rt(R, -R @ eye)


def project_points(cam: CameraModel, p_cam):
    """Project camera-frame points of shape ``(..., 3)``.

    Returns ``(uv, valid)``; ``uv`` is NaN where ``z <= MIN_DEPTH``.
    """
    p = np.asarray(p_cam, dtype=float)
    z = p[..., 2]
    valid = z > MIN_DEPTH
    zs = np.where(valid, z, np.nan)
    uv = np.stack([cam.fx * p[..., 0] / zs + cam.cx, cam.fy * p[..., 1] / zs + cam.cy], axis=-1)
    return uv, valid


def project(cam: CameraModel, p_cam):
    """Pixel ``(u, v)`` of a single camera-frame point."""
    uv, valid = project_points(cam, np.asarray(p_cam, dtype=float).reshape(1, 3))
    if not valid[0]:
        raise NonProjectableError(f"point at depth {float(np.asarray(p_cam)[2])} is not in front of the camera")
    return uv[0]


def check_psd(S, size, name="covariance", tol=1e-12):
    S = np.asarray(S, dtype=float)
    if S.shape != (size, size):
        raise CovarianceError(f"{name} must be {size}x{size}, got {S.shape}")
    if not np.all(np.isfinite(S)) or not np.allclose(S, S.T, atol=tol, rtol=0):
        raise CovarianceError(f"{name} must be finite and symmetric")
    eig = np.linalg.eigvalsh(S)
    if eig.min() < -tol * max(1.0, abs(eig).max()):
        raise CovarianceError(f"{name} is not positive semi-definite (min eigenvalue {eig.min():.3g})")
    return S


def psd_factor(S):
    """A matrix ``L`` with ``L @ L.T == S`` for a symmetric PSD ``S``."""
    vals, vecs = np.linalg.eigh(S)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def perturb_pose(T_init: RigidTransform, cov, rng) -> RigidTransform:
    """Gaussian draw on the stacked ``[q, b]`` vector, then renormalize ``q``."""
    cov = check_psd(cov, 7, "pose covariance")
    z = rng.standard_normal(7)
    delta = psd_factor(cov) @ z
    if not np.any(delta):
        return T_init
    x = np.concatenate([T_init.q, T_init.b]) + delta
    return RigidTransform(quat_normalize(x[:4]), x[4:])
