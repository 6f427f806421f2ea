"""Camera-from-base pose from 2D-3D correspondences.

``epnp`` is the control-point formulation of Lepetit et al. (EPnP): base points
are written as barycentric combinations of four control points (three when the
points are coplanar), the camera-frame control points come from the null space
of a ``2n x 3c`` linear system, and the null-space coefficients are fixed by the
inter-control-point distances.  ``refine_pose`` polishes a pose with
Levenberg-Marquardt on pixel residuals.

The numerical work is done on stacks of problems that share the point count
(``epnp_batch``/``refine_batch``); the single-problem functions are thin
wrappers around a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .geometry import MIN_DEPTH, CameraModel, RigidTransform, axis_angle_to_matrix, skew

PLANAR_TOL = 1e-6  # m, max distance to the best-fit plane for the 3-control-point branch
COLLINEAR_TOL = 1e-9  # m
_BIG = 1e12
_RESTARTS = np.random.default_rng(20090101).standard_normal((12, 4))

# batch status codes
OK, DEGENERATE, BEHIND = 0, 1, 2


class PnPError(ValueError):
    pass


class TooFewPointsError(PnPError):
    pass


class DegenerateConfigurationError(PnPError):
    pass


class BehindCameraError(PnPError):
    pass


@dataclass(frozen=True)
class Correspondence:
    image_point: tuple
    base_point: tuple
    weight: float = 1.0


@dataclass(frozen=True, eq=False)
class PoseEstimate:
    T: RigidTransform
    reprojection_rmse: float


def as_arrays(corrs):
    """``(uv, xyz, w)`` from a list of ``Correspondence`` or a ``(uv, xyz[, w])`` tuple."""
    if isinstance(corrs, tuple) and len(corrs) in (2, 3) and not isinstance(corrs[0], Correspondence):
        uv = np.asarray(corrs[0], dtype=float).reshape(-1, 2)
        X = np.asarray(corrs[1], dtype=float).reshape(-1, 3)
        w = np.ones(len(uv)) if len(corrs) == 2 or corrs[2] is None else np.asarray(corrs[2], dtype=float).reshape(-1)
    else:
        corrs = list(corrs)
        uv = np.array([c.image_point for c in corrs], dtype=float).reshape(-1, 2)
        X = np.array([c.base_point for c in corrs], dtype=float).reshape(-1, 3)
        w = np.array([c.weight for c in corrs], dtype=float)
    if len(uv) != len(X) or len(w) != len(uv):
        raise ValueError("correspondence arrays differ in length")
    if not (np.all(np.isfinite(uv)) and np.all(np.isfinite(X)) and np.all(np.isfinite(w))):
        raise ValueError("correspondences must be finite")
    if np.any(w < 0):
        raise ValueError("correspondence weights must be non-negative")
    return uv, X, w


def _project_batch(R, t, X, cam):
    pc = np.einsum("bij,bnj->bni", R, X) + t[:, None, :]
    z = pc[..., 2]
    front = z > MIN_DEPTH
    zs = np.where(front, z, 1.0)
    proj = np.stack([cam.fx * pc[..., 0] / zs + cam.cx, cam.fy * pc[..., 1] / zs + cam.cy], axis=-1)
    return proj, pc, front


def _rmse_batch(res, w, front):
    sw = w.sum(axis=1)
    sq = np.einsum("bn,bn->b", w, np.einsum("bnc,bnc->bn", res, res))
    out = np.sqrt(sq / np.where(sw > 0, sw, 1.0))
    out = np.where(sw > 0, out, 0.0)
    return np.where(front.all(axis=1), out, np.inf)


def rmse_batch(R, t, uv, X, w, cam):
    proj, _, front = _project_batch(R, t, X, cam)
    return _rmse_batch(proj - uv, w, front)


def reprojection_rmse(T: RigidTransform, corrs, cam: CameraModel) -> float:
    """Weighted root-mean-square pixel residual; ``inf`` if any point is behind the camera."""
    uv, X, w = as_arrays(corrs)
    if len(uv) == 0:
        return 0.0
    return float(rmse_batch(T.rotation[None], T.b[None], uv[None], X[None], w[None], cam)[0])


def _procrustes_batch(X, P):
    """Rigid ``(R, t)`` minimizing ``|R X + t - P|`` per batch item."""
    mx, mp = X.mean(axis=1), P.mean(axis=1)
    H = np.einsum("bni,bnj->bij", X - mx[:, None], P - mp[:, None])
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.swapaxes(Vt, 1, 2) @ np.swapaxes(U, 1, 2)))
    d[d == 0] = 1.0
    D = np.zeros((len(X), 3, 3))
    D[:, 0, 0] = D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = np.swapaxes(Vt, 1, 2) @ D @ np.swapaxes(U, 1, 2)
    return R, mp - np.einsum("bij,bj->bi", R, mx)


def _initial_betas(dots, rho, n_kernel):
    """Linearized null-space coefficients for each N = 1..n_kernel case; list of ``(B, k)``."""
    B = len(rho)
    out = []
    n1 = np.sqrt(dots[:, :, 0, 0])
    b = np.zeros((B, n_kernel))
    b[:, 0] = np.einsum("bp,bp->b", n1, np.sqrt(rho)) / np.einsum("bp,bp->b", n1, n1)
    out.append(b)
    for N in range(2, n_kernel + 1):
        if N == 4:
            # under-determined: keep only the beta_1k products
            idx = [(0, 0), (0, 1), (0, 2), (0, 3)]
        else:
            idx = [(a, c) for a in range(N) for c in range(a, N)]
        if len(idx) > rho.shape[1]:
            continue
        L = np.stack([dots[:, :, a, c] * (2.0 if a != c else 1.0) for a, c in idx], axis=2)
        sol = np.einsum("bmp,bp->bm", np.linalg.pinv(L), rho)
        b = np.zeros((B, n_kernel))
        b1 = np.sqrt(np.abs(sol[:, 0]))
        b[:, 0] = b1
        if N == 4:
            safe = np.where(b1 > 0, b1, 1.0)
            b[:, 1:4] = np.where(b1[:, None] > 0, sol[:, 1:4] / safe[:, None], 0.0)
        else:
            prod = {k: sol[:, m] for m, k in enumerate(idx)}
            for k in range(1, N):
                b[:, k] = np.sign(prod[(0, k)]) * np.sqrt(np.abs(prod[(k, k)]))
        out.append(b)
    return out


def _gauss_newton_betas(beta, diffs, rho, n_iter=10):
    """Fit null-space coefficients to the control-point distances, per batch item."""
    beta = beta.copy()
    k = beta.shape[1]
    ridge = 1e-14 * np.eye(k)
    for _ in range(n_iter):
        v = np.einsum("bk,bpkc->bpc", beta, diffs)
        r = np.einsum("bpc,bpc->bp", v, v) - rho
        J = 2.0 * np.einsum("bpc,bpkc->bpk", v, diffs)
        JtJ = np.einsum("bpk,bpl->bkl", J, J) + ridge
        g = np.einsum("bpk,bp->bk", J, r)
        step = -np.linalg.solve(JtJ, g[..., None])[..., 0]
        step = np.where(np.isfinite(step), step, 0.0)
        beta += step
        if np.max(np.einsum("bk,bk->b", step, step) / np.maximum(1.0, np.einsum("bk,bk->b", beta, beta))) < 1e-24:
            break
    return beta


def _epnp_group(uv, X, w, cam, nc):
    """EPnP for a stack whose items share ``n`` and the control-point count."""
    B, n = X.shape[:2]
    c0 = X.mean(axis=1)
    A = X - c0[:, None]
    _, S, Vt = np.linalg.svd(A, full_matrices=False)
    scale = S[:, : nc - 1] / np.sqrt(n)
    C = np.concatenate([c0[:, None], c0[:, None] + scale[..., None] * Vt[:, : nc - 1]], axis=1)
    alphas = np.empty((B, n, nc))
    alphas[..., 1:] = np.einsum("bnc,bkc->bnk", A, Vt[:, : nc - 1]) / scale[:, None, :]
    alphas[..., 0] = 1.0 - alphas[..., 1:].sum(axis=2)
    xn = (uv[..., 0] - cam.cx) / cam.fx
    yn = (uv[..., 1] - cam.cy) / cam.fy
    M = np.zeros((B, 2 * n, 3 * nc))
    M[:, 0::2, 0::3] = alphas
    M[:, 0::2, 2::3] = -alphas * xn[..., None]
    M[:, 1::2, 1::3] = alphas
    M[:, 1::2, 2::3] = -alphas * yn[..., None]
    M *= np.sqrt(np.repeat(w, 2, axis=1))[..., None]
    _, vecs = np.linalg.eigh(np.einsum("bri,brj->bij", M, M))
    n_kernel = 4 if nc == 4 else 3
    kernels = np.swapaxes(vecs[:, :, :n_kernel], 1, 2).reshape(B, n_kernel, nc, 3)
    pairs = list(combinations(range(nc), 2))
    ia = np.array([a for a, _ in pairs])
    ib = np.array([c for _, c in pairs])
    rho = np.sum((C[:, ia] - C[:, ib]) ** 2, axis=2)
    diffs = np.swapaxes(kernels[:, :, ia] - kernels[:, :, ib], 1, 2)  # (B, pairs, kernels, 3)
    dots = np.einsum("bpkc,bplc->bpkl", diffs, diffs)
    inits = _initial_betas(dots, rho, n_kernel)
    if nc == 4 and n < 6:
        # few points: the four-dimensional null space is genuine and the
        # linearized starts are poor, so add fixed pseudo-random restarts
        s = np.sqrt(rho.mean(axis=1)) / np.sqrt(dots[:, :, 0, 0]).mean(axis=1)
        inits = inits + [np.outer(s, r) for r in _RESTARTS]
    gn_rank = 4 if nc == 4 else 2  # planar: three constraints fix at most two coefficients well
    best_key = np.full(B, np.inf)
    best_R = np.tile(np.eye(3), (B, 1, 1))
    best_t = np.zeros((B, 3))
    best_front = np.zeros(B, dtype=int)
    for init in inits:
        beta = np.zeros((B, n_kernel))
        beta[:, :gn_rank] = _gauss_newton_betas(init[:, :gn_rank], diffs[:, :, :gn_rank], rho)
        if nc == 3:
            beta[:, gn_rank:] = init[:, gn_rank:]
        Cc = np.einsum("bk,bkjc->bjc", beta, kernels)
        Pc = np.einsum("bnj,bjc->bnc", alphas, Cc)
        flip = np.sum(Pc[..., 2] > 0, axis=1) < n / 2.0
        Pc[flip] *= -1.0
        R, t = _procrustes_batch(X, Pc)
        proj, _, front = _project_batch(R, t, X, cam)
        rmse = _rmse_batch(proj - uv, w, front)
        n_front = front.sum(axis=1)
        # prefer more points in front of the camera, then lower residual
        key = (n - n_front) * _BIG + np.minimum(np.where(np.isfinite(rmse), rmse, 0.0), _BIG / 10)
        key = np.where(np.isfinite(key), key, np.inf)
        better = key < best_key
        best_key = np.where(better, key, best_key)
        best_R[better] = R[better]
        best_t[better] = t[better]
        best_front = np.where(better, n_front, best_front)
    return best_R, best_t, best_front


def epnp_batch(uv, X, w, cam):
    """EPnP on stacks ``uv (B, n, 2)``, ``X (B, n, 3)``, ``w (B, n)``.

    Returns ``(R, t, rmse, status)``; ``status`` is ``OK``, ``DEGENERATE`` or ``BEHIND``.
    """
    uv, X, w = np.asarray(uv, float), np.asarray(X, float), np.asarray(w, float)
    B, n = X.shape[:2]
    if n < 4:
        raise TooFewPointsError(f"EPnP needs at least 4 correspondences, got {n}")
    A = X - X.mean(axis=1, keepdims=True)
    _, _, Vt = np.linalg.svd(A, full_matrices=False)
    line_res = A - np.einsum("bn,bc->bnc", np.einsum("bnc,bc->bn", A, Vt[:, 0]), Vt[:, 0])
    collinear = np.max(np.linalg.norm(line_res, axis=2), axis=1) < COLLINEAR_TOL
    planar = np.max(np.abs(np.einsum("bnc,bc->bn", A, Vt[:, 2])), axis=1) < PLANAR_TOL
    R = np.tile(np.eye(3), (B, 1, 1))
    t = np.zeros((B, 3))
    n_front = np.zeros(B, dtype=int)
    for nc, sel in ((4, ~planar & ~collinear), (3, planar & ~collinear)):
        if sel.any():
            R[sel], t[sel], n_front[sel] = _epnp_group(uv[sel], X[sel], w[sel], cam, nc)
    status = np.where(collinear, DEGENERATE, np.where(n_front == 0, BEHIND, OK))
    rmse = rmse_batch(R, t, uv, X, w, cam)
    return R, t, rmse, status


def refine_batch(R, t, uv, X, w, cam, iters=20):
    """Levenberg-Marquardt on pixel residuals for a stack; never worsens any item."""
    R, t = R.copy(), t.copy()
    B, n = X.shape[:2]
    sw = np.sqrt(w)
    proj, pc, front = _project_batch(R, t, X, cam)
    res = proj - uv
    err = _rmse_batch(res, w, front)
    active = np.isfinite(err) & (err > 1e-12)
    mu = np.full(B, 1e-3)
    worse = np.zeros(B, dtype=int)
    for _ in range(iters):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        p = pc[idx]
        z = p[..., 2]
        Jp = np.zeros((len(idx), n, 2, 3))
        Jp[..., 0, 0] = cam.fx / z
        Jp[..., 0, 2] = -cam.fx * p[..., 0] / z**2
        Jp[..., 1, 1] = cam.fy / z
        Jp[..., 1, 2] = -cam.fy * p[..., 1] / z**2
        # left perturbation: pc -> pc + dw x pc + dt
        J = np.concatenate([Jp @ -skew(p), Jp], axis=3) * sw[idx][..., None, None]
        J = J.reshape(len(idx), 2 * n, 6)
        e = (res[idx] * sw[idx][..., None]).reshape(len(idx), 2 * n)
        H = np.einsum("bri,brj->bij", J, J)
        g = np.einsum("bri,br->bi", J, e)
        Hd = H.copy()
        Hd[:, np.arange(6), np.arange(6)] += mu[idx][:, None] * (np.einsum("bii->bi", H) + 1e-12)
        step = -np.linalg.solve(Hd, g[..., None])[..., 0]
        dR = axis_angle_to_matrix(step[:, :3])
        R_new = dR @ R[idx]
        t_new = np.einsum("bij,bj->bi", dR, t[idx]) + step[:, 3:]
        proj_n, pc_n, front_n = _project_batch(R_new, t_new, X[idx], cam)
        res_n = proj_n - uv[idx]
        err_n = _rmse_batch(res_n, w[idx], front_n)
        acc = err_n < err[idx]
        ai = idx[acc]
        converged = (err[ai] - err_n[acc]) < 1e-10 * err[ai]
        R[ai], t[ai], pc[ai], res[ai], err[ai] = R_new[acc], t_new[acc], pc_n[acc], res_n[acc], err_n[acc]
        mu[ai] = np.maximum(mu[ai] / 3.0, 1e-12)
        worse[ai] = 0
        ri = idx[~acc]
        mu[ri] *= 4.0
        worse[ri] += 1
        active[ai[converged | (err[ai] <= 1e-12)]] = False
        # three consecutive non-improving steps: keep the best-so-far
        active[ri[worse[ri] >= 3]] = False
    return R, t, err


def _single(uv, X, w):
    return uv[None], X[None], w[None]


def epnp(corrs, cam: CameraModel) -> PoseEstimate:
    """EPnP pose of the base frame in the camera frame."""
    uv, X, w = as_arrays(corrs)
    if len(uv) < 4:
        raise TooFewPointsError(f"EPnP needs at least 4 correspondences, got {len(uv)}")
    R, t, rmse, status = epnp_batch(*_single(uv, X, w), cam)
    if status[0] == DEGENERATE:
        raise DegenerateConfigurationError("base points are collinear")
    if status[0] == BEHIND:
        raise BehindCameraError("every EPnP solution places the points behind the camera")
    return PoseEstimate(RigidTransform.from_rt(R[0], t[0]), float(rmse[0]))


def refine_pose(initial: PoseEstimate, corrs, cam: CameraModel, iters: int = 20) -> PoseEstimate:
    """Levenberg-Marquardt refinement; never returns a worse pose than ``initial``."""
    if iters <= 0:
        return initial
    uv, X, w = as_arrays(corrs)
    if len(uv) == 0:
        return initial
    R, t, err = refine_batch(initial.T.rotation[None], initial.T.b[None], *_single(uv, X, w), cam, iters)
    if not err[0] < initial.reprojection_rmse:
        return initial
    return PoseEstimate(RigidTransform.from_rt(R[0], t[0]), float(err[0]))


def solve_pnp(corrs, cam: CameraModel, refine_iters: int = 20) -> PoseEstimate:
    """EPnP followed by refinement."""
    est = epnp(corrs, cam)
    return refine_pose(est, corrs, cam, refine_iters)
