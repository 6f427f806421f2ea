"""Particle filter for a constant rigid correction between the nominal and true base frame.

The camera sees the base through ``T_cb_init @ L(omega, b)`` where ``L`` is an
unknown rigid correction that absorbs both hand-eye and joint-offset errors.
Each particle is one guess ``(omega, b)``; keypoint detections reweight the
particles through their reprojection residuals.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (AxisAngleTransform, CameraModel, RigidTransform, axis_angle_to_matrix, axis_angle_to_rigid,
                       canonicalize_axis_angle, check_psd, matrix_to_axis_angle_batch, project, project_points,
                       psd_factor)
from .kinematics import end_effector_position, forward_kinematics, keypoint_positions

log = logging.getLogger(__name__)


def _diag6(s_omega, s_b):
    return np.diag([s_omega**2] * 3 + [s_b**2] * 3)


@dataclass(frozen=True, eq=False)
class TrackerConfig:
    T_cb_init: RigidTransform
    camera: CameraModel
    n_particles: int = 1000
    sigma_init: np.ndarray = field(default_factory=lambda: _diag6(0.1, 0.01))
    sigma_step: np.ndarray = field(default_factory=lambda: _diag6(5e-3, 1e-3))
    alpha: float = 0.01  # 1/px^2
    resample_threshold: float = 0.5
    likelihood: str = "sum"  # or "product"

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least two particles")
        if not self.alpha >= 0:
            raise ValueError("alpha must be non-negative")
        if not 0 < self.resample_threshold <= 1:
            raise ValueError("resample threshold must lie in (0, 1]")
        if self.likelihood not in ("sum", "product"):
            raise ValueError(f"unknown likelihood form {self.likelihood!r}")
        object.__setattr__(self, "sigma_init", check_psd(self.sigma_init, 6, "initial covariance"))
        object.__setattr__(self, "sigma_step", check_psd(self.sigma_step, 6, "motion covariance"))


@dataclass(frozen=True)
class Particle:
    omega: tuple
    b: tuple
    weight: float


@dataclass(frozen=True, eq=False)
class TrackerState:
    omega: np.ndarray  # (n, 3)
    b: np.ndarray  # (n, 3)
    weights: np.ndarray  # (n,)
    t: int = 0
    estimate: tuple = None  # (omega_hat, b_hat)
    events: tuple = ()

    @property
    def n(self):
        return len(self.weights)

    def particles(self):
        return [Particle(tuple(o), tuple(b), float(w)) for o, b, w in zip(self.omega, self.b, self.weights)]

    def ess(self):
        return float(1.0 / np.sum(self.weights**2))


def init_tracker(cfg: TrackerConfig, rng) -> TrackerState:
    x = rng.standard_normal((cfg.n_particles, 6)) @ psd_factor(cfg.sigma_init).T
    n = cfg.n_particles
    state = TrackerState(canonicalize_axis_angle(x[:, :3]), x[:, 3:].copy(), np.full(n, 1.0 / n))
    return replace(state, estimate=estimate(state))


def propagate(state: TrackerState, sigma_step, rng) -> TrackerState:
    """Independent Gaussian random-walk step for every particle."""
    L = psd_factor(check_psd(sigma_step, 6, "motion covariance"))
    x = rng.standard_normal((state.n, 6)) @ L.T
    if not np.any(x):
        return state
    return replace(state, omega=canonicalize_axis_angle(state.omega + x[:, :3]), b=state.b + x[:, 3:])


def correction_transform(omega, b) -> RigidTransform:
    return axis_angle_to_rigid(AxisAngleTransform(omega, b))


def reproject_keypoint(chain, q, cfg: TrackerConfig, particle: Particle, kp):
    """Pixel of ``kp`` seen through the particle's corrected camera pose."""
    p_base = keypoint_positions(chain, q, [kp])[0]
    T = cfg.T_cb_init @ correction_transform(particle.omega, particle.b)
    return project(cfg.camera, T.apply(p_base))


def reproject_batch(omega, b, points_base, cfg: TrackerConfig):
    """Pixels ``(n, k, 2)`` and validity of ``k`` base points under ``n`` particles."""
    R = axis_angle_to_matrix(omega)  # (n, 3, 3)
    p = np.einsum("nij,kj->nki", R, points_base) + b[:, None, :]
    Ri, ti = cfg.T_cb_init.rotation, cfg.T_cb_init.b
    pc = p @ Ri.T + ti
    return project_points(cfg.camera, pc)


def observation_likelihood(state, detections, points_base, cfg: TrackerConfig):
    """Unnormalized per-particle likelihood ``sum_i rho_i exp(-alpha |h_i - m_i|^2)``.

    The product form multiplies the same per-keypoint terms.  Keypoints that a
    particle places behind the camera contribute nothing.
    """
    h = np.array([d.pixel for d in detections], dtype=float).reshape(-1, 2)
    rho = np.array([d.rho for d in detections], dtype=float)
    m, valid = reproject_batch(state.omega, state.b, points_base, cfg)
    r2 = np.sum((np.where(valid[..., None], m, 0.0) - h) ** 2, axis=2)
    terms = np.where(valid, rho * np.exp(-cfg.alpha * r2), 0.0)
    if cfg.likelihood == "sum":
        return terms.sum(axis=1)
    return np.prod(np.where(valid, terms, 1.0), axis=1) * valid.any(axis=1)


def _log_product_likelihood(state, detections, points_base, cfg):
    h = np.array([d.pixel for d in detections], dtype=float).reshape(-1, 2)
    rho = np.array([d.rho for d in detections], dtype=float)
    m, valid = reproject_batch(state.omega, state.b, points_base, cfg)
    r2 = np.sum((np.where(valid[..., None], m, 0.0) - h) ** 2, axis=2)
    with np.errstate(divide="ignore"):
        terms = np.where(valid, np.log(rho) - cfg.alpha * r2, 0.0)
    return np.where(valid.any(axis=1), terms.sum(axis=1), -np.inf)


def weight_particles(state, detections, chain, q, cfg: TrackerConfig, keypoints) -> TrackerState:
    """Multiply particle weights by the observation likelihood and renormalize.

    ``keypoints`` maps keypoint id to ``Keypoint``; missed detections are ignored.
    """
    dets = [d for d in detections if d.detected]
    if not dets:
        raise ValueError("no detected keypoints to weight with")
    pb = keypoint_positions(chain, q, [keypoints[d.keypoint_id] for d in dets])
    events = state.events
    if cfg.likelihood == "product":
        # log domain: a product of many small terms underflows long before the weights are meaningless
        ll = _log_product_likelihood(state, dets, pb, cfg)
        with np.errstate(divide="ignore"):
            ll = ll + np.log(state.weights)
        if np.isfinite(ll).any():
            w = np.exp(ll - ll.max())
        else:
            w = np.zeros(state.n)
    else:
        w = state.weights * observation_likelihood(state, dets, pb, cfg)
    total = w.sum()
    if not (total > 0 and np.isfinite(total)):
        log.warning("step %d: all particle weights vanished, resetting to uniform", state.t)
        events = events + ((state.t, "weights reset to uniform"),)
        w = np.full(state.n, 1.0 / state.n)
    else:
        w = w / total
    return replace(state, weights=w, events=events)


def systematic_indices(weights, u):
    n = len(weights)
    c = np.cumsum(weights)
    c[-1] = 1.0
    return np.minimum(np.searchsorted(c, (u + np.arange(n)) / n, side="right"), n - 1)


def resample(state: TrackerState, rng, threshold=0.5) -> TrackerState:
    """Low-variance resampling when the effective sample size drops below ``threshold * n``."""
    if state.ess() >= threshold * state.n:
        return state
    idx = systematic_indices(state.weights, rng.random())
    return replace(state, omega=state.omega[idx], b=state.b[idx], weights=np.full(state.n, 1.0 / state.n))


def estimate(state: TrackerState):
    """Weighted mean; rotations are averaged in a chart centered on the heaviest particle."""
    w = state.weights / state.weights.sum()
    b_hat = w @ state.b
    k = int(np.argmax(w))
    Rk = axis_angle_to_matrix(state.omega[k])
    rel = np.einsum("ji,njk->nik", Rk, axis_angle_to_matrix(state.omega))
    delta = matrix_to_axis_angle_batch(rel)
    delta[k] = 0.0
    d = w @ delta
    if not np.any(d):
        return state.omega[k].copy(), b_hat
    R = Rk @ axis_angle_to_matrix(d)
    return matrix_to_axis_angle_batch(R[None])[0], b_hat


def track_step(state, q_t, detections_t, cfg: TrackerConfig, rng, chain, keypoints) -> TrackerState:
    """Propagate, weight, resample, estimate.  Without detections only the propagation happens."""
    state = propagate(state, cfg.sigma_step, rng)
    if any(d.detected for d in detections_t):
        state = weight_particles(state, detections_t, chain, q_t, cfg, keypoints)
        state = resample(state, rng, cfg.resample_threshold)
    return replace(state, t=state.t + 1, estimate=estimate(state))


# ---------------------------------------------------------------------------
# sessions


@dataclass(frozen=True)
class FrameResult:
    t: int
    omega: tuple
    b: tuple
    reproj_rmse: float  # px, estimate vs true projections of the tracked keypoints
    ee_error: float  # m
    ess: float

    def to_dict(self):
        return {"t": self.t, "omega": list(self.omega), "b": list(self.b), "reproj_rmse": self.reproj_rmse,
                "ee_error": self.ee_error, "ess": self.ess}


def frame_errors(chain, cfg: TrackerConfig, q, T_cb_true, keypoints, omega, b):
    """Reprojection RMSE of ``keypoints`` and end-effector error for a correction estimate."""
    T_est = cfg.T_cb_init @ correction_transform(omega, b)
    fk = forward_kinematics(chain, q)
    pb = keypoint_positions(chain, q, keypoints, fk=fk)
    uv_est, ok_e = project_points(cfg.camera, T_est.apply(pb))
    uv_true, ok_t = project_points(cfg.camera, T_cb_true.apply(pb))
    ok = ok_e & ok_t
    rmse = float(np.sqrt(np.mean(np.sum((uv_est[ok] - uv_true[ok]) ** 2, axis=1)))) if ok.any() else float("nan")
    ee = end_effector_position(chain, q, fk=fk)
    return rmse, float(np.linalg.norm(T_est.apply(ee) - T_cb_true.apply(ee)))


def run_tracking(chain, cfg: TrackerConfig, frames, detections, keypoints, rng, callback=None):
    """Track over ``frames`` (``SceneSample`` list with true camera poses) and per-frame detection lists.

    Returns the final state and one ``FrameResult`` per frame.
    """
    by_id = {k.id: k for k in keypoints}
    state = init_tracker(cfg, rng)
    out = []
    for frame, dets in zip(frames, detections):
        state = track_step(state, frame.q, dets, cfg, rng, chain, by_id)
        omega, b = state.estimate
        rmse, ee = frame_errors(chain, cfg, frame.q, frame.T_cb, keypoints, omega, b)
        res = FrameResult(frame.sample_id, tuple(map(float, omega)), tuple(map(float, b)), rmse, ee, state.ess())
        out.append(res)
        if callback:
            callback(state, res)
    return state, out
