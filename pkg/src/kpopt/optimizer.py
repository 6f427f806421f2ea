"""Iterative weighted search for a keypoint subset.

Every candidate carries a weight.  Each iteration draws a subset in
proportion to the weights, fits the detector on that subset, scores each
selected keypoint on the test split (pixel error plus a weighted 3D error
through a PnP pose estimate), and moves weight towards the selected keypoints
with low loss.  The best-scoring subset seen so far is kept.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .detector import DetectionArrays, detect_dataset, fit_detector
from .pnp import OK, epnp_batch, refine_batch

WEIGHT_FLOOR = 1e-6


class QuotaError(ValueError):
    """Requested subset cannot be drawn from the candidate groups."""


class EvaluationError(RuntimeError):
    """No test sample had enough detections for a pose estimate."""


# ---------------------------------------------------------------------------
# weights and sampling


@dataclass(frozen=True, eq=False)
class WeightVector:
    ids: tuple
    w: np.ndarray

    @classmethod
    def uniform(cls, ids):
        ids = tuple(ids)
        return cls(ids, np.full(len(ids), 1.0 / len(ids)))

    def as_dict(self):
        return {i: float(x) for i, x in zip(self.ids, self.w)}


def candidate_groups(candidates):
    """Group name -> member ids, in order of first appearance."""
    groups = {}
    for k in candidates:
        if k.group is None:
            raise QuotaError(f"keypoint {k.id} has no group")
        groups.setdefault(k.group, []).append(k.id)
    return groups


def _draw_without_replacement(w, k, rng):
    w = np.array(w, dtype=float)
    picked = []
    for _ in range(k):
        total = w.sum()
        if not total > 0:
            raise QuotaError("no weight left to draw from")
        c = np.cumsum(w)
        i = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
        i = min(i, len(w) - 1)
        while w[i] == 0:  # landed on a drawn item through rounding
            i -= 1
        picked.append(i)
        w[i] = 0.0
    return picked


def sample_keypoints(W: WeightVector, K, groups=None, rng=None, quotas=None):
    """Draw ``K`` distinct ids, each pick with probability proportional to the remaining weights.

    With ``groups`` (name -> ids) the draw happens inside each group, ``quotas``
    picks per group (default one each), and the quotas must add up to ``K``.
    """
    pos = {i: n for n, i in enumerate(W.ids)}
    if groups is None:
        if not 1 <= K <= len(W.ids):
            raise QuotaError(f"cannot draw {K} of {len(W.ids)} candidates")
        return tuple(W.ids[i] for i in _draw_without_replacement(W.w, K, rng))
    quotas = {g: 1 for g in groups} if quotas is None else quotas
    if sum(quotas.get(g, 0) for g in groups) != K:
        raise QuotaError(f"group quotas sum to {sum(quotas.values())}, expected K = {K}")
    out = []
    for g, members in groups.items():
        n = quotas.get(g, 0)
        if n > len(members):
            raise QuotaError(f"group {g!r} has {len(members)} candidates, quota {n}")
        if n:
            idx = [pos[m] for m in members]
            out.extend(members[j] for j in _draw_without_replacement(W.w[idx], n, rng))
    return tuple(out)


def update_weights(W: WeightVector, selected, losses, gamma) -> WeightVector:
    """Reallocate the selected keypoints' total weight by ``softmax(-gamma * loss)``."""
    losses = np.asarray(losses, dtype=float)
    if len(selected) == 0:
        raise ValueError("empty selection")
    if not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite")
    pos = np.array([W.ids.index(i) for i in selected], dtype=int)
    a = -gamma * losses
    e = np.exp(a - a.max())
    w = W.w.copy()
    w[pos] = W.w[pos].sum() * e / e.sum()
    return WeightVector(W.ids, w)


def apply_floor(W: WeightVector, floor=WEIGHT_FLOOR) -> WeightVector:
    return WeightVector(W.ids, np.maximum(W.w, floor))


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True, eq=False)
class Evaluation:
    keypoint_ids: tuple
    loss_2d: np.ndarray
    loss_3d: np.ndarray
    loss_total: np.ndarray
    sample_ids: tuple
    pnp_ok: np.ndarray  # (S,) pose estimated for this sample
    R: np.ndarray  # (S, 3, 3), NaN where no pose
    t: np.ndarray  # (S, 3)
    detections: DetectionArrays = field(repr=False, default=None)

    @property
    def mean_error(self):
        return float(np.mean(self.loss_total))

    @property
    def n_pnp_skipped(self):
        return int(np.sum(~self.pnp_ok))


def _chunks(n, parts):
    bounds = np.linspace(0, n, max(1, min(parts, n)) + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def estimate_poses(det: DetectionArrays, points_base, cam, refine_iters=20, threads=1):
    """Per-sample camera-from-base pose from that sample's detections.

    Samples with fewer than four detections, or whose EPnP solution is
    degenerate, get NaN and ``ok = False``.
    """
    S, K = det.detected.shape
    R = np.full((S, 3, 3), np.nan)
    t = np.full((S, 3), np.nan)
    ok = np.zeros(S, dtype=bool)
    n_det = det.detected.sum(axis=1)
    for n in np.unique(n_det[n_det >= 4]):
        rows = np.flatnonzero(n_det == n)
        order = np.argsort(~det.detected[rows], axis=1, kind="stable")[:, :n]
        uv = np.take_along_axis(det.uv[rows], order[..., None], axis=1)
        X = np.take_along_axis(points_base[rows], order[..., None], axis=1)
        w = np.ones(uv.shape[:2])

        def solve(sl):
            Rg, tg, _, status = epnp_batch(uv[sl], X[sl], w[sl], cam)
            if refine_iters > 0:
                Rg, tg, _ = refine_batch(Rg, tg, uv[sl], X[sl], w[sl], cam, refine_iters)
            return Rg, tg, status

        parts = _chunks(len(rows), threads)
        if threads > 1 and len(parts) > 1:
            with ThreadPoolExecutor(threads) as ex:
                results = list(ex.map(solve, parts))
        else:
            results = [solve(sl) for sl in parts]
        for sl, (Rg, tg, status) in zip(parts, results):
            good = status == OK
            r = rows[sl]
            R[r[good]], t[r[good]], ok[r[good]] = Rg[good], tg[good], True
    return R, t, ok


def evaluate_performance(selected, model, test, lam, rng=None, detections=None, miss_penalty=None,
                         refine_iters=20, threads=1, compute_pose=None) -> Evaluation:
    """Per-keypoint losses of ``selected`` on the test split.

    The 2D loss averages pixel error over produced detections (or charges
    ``miss_penalty`` px per miss when given).  The 3D loss averages, over
    samples with a pose estimate, the distance between each keypoint placed
    by the estimated pose and its true camera-frame position.  A keypoint
    that is never detected is charged the image diagonal.
    """
    selected = tuple(selected)
    ids = test.test_ids
    if not ids:
        raise ValueError("test split is empty")
    if detections is None:
        detections = detect_dataset(model, test, ids, rng)
    cols = np.array([test.index_of[k] for k in selected], dtype=int)
    arr = test.arrays(ids)
    truth = arr.pixels[:, cols]
    valid = detections.detected & np.all(np.isfinite(truth), axis=2)
    err = np.linalg.norm(np.where(valid[..., None], detections.uv - truth, 0.0), axis=2)
    cam = test.camera
    diag = math.hypot(cam.width, cam.height)
    if miss_penalty is None:
        count = valid.sum(axis=0)
        loss_2d = np.where(count > 0, np.where(valid, err, 0.0).sum(axis=0) / np.maximum(count, 1), diag)
    else:
        loss_2d = np.where(valid, err, float(miss_penalty)).mean(axis=0)
    S = len(ids)
    if compute_pose is None:
        compute_pose = lam > 0
    if compute_pose:
        pb = arr.points_base[:, cols]
        masked = DetectionArrays(detections.keypoint_ids, detections.sample_ids, detections.uv, detections.rho, valid)
        R, t, ok = estimate_poses(masked, pb, cam, refine_iters, threads)
        if not ok.any():
            raise EvaluationError(f"all {S} test samples skipped: fewer than 4 usable detections for {selected}")
        est = np.einsum("sij,skj->ski", R[ok], pb[ok]) + t[ok][:, None, :]
        loss_3d = np.linalg.norm(est - arr.points_cam[ok][:, cols], axis=2).mean(axis=0)
    else:
        R, t, ok = np.full((S, 3, 3), np.nan), np.full((S, 3), np.nan), np.zeros(S, dtype=bool)
        loss_3d = np.zeros(len(selected))
    total = loss_2d + lam * loss_3d if lam > 0 else loss_2d.copy()
    return Evaluation(selected, loss_2d, loss_3d, total, ids, ok, R, t, detections)


# ---------------------------------------------------------------------------
# main loop


@dataclass(frozen=True)
class OptimizationConfig:
    K: int
    T: int = 15
    gamma: float = 1.0
    lam: float = 50.0
    seed: int = 0
    constraint: str = "per-group"  # or "global"
    quotas: dict = None
    miss_penalty: float = None
    refine_iters: int = 20
    threads: int = 1

    def __post_init__(self):
        if self.K < 1 or self.T < 1:
            raise ValueError("K and T must be at least 1")
        if not self.gamma > 0 or self.lam < 0:
            raise ValueError("gamma must be positive and lambda non-negative")
        if self.constraint not in ("global", "per-group"):
            raise ValueError(f"unknown constraint mode {self.constraint!r}")


@dataclass
class IterationRecord:
    iteration: int
    selected: tuple
    losses: dict = None  # id -> total loss
    mean_error: float = math.nan
    weights: dict = None  # after the update
    pnp_skipped: int = 0
    failure: str = None


@dataclass
class OptimizationResult:
    best_set: tuple
    best_error: float
    history: list
    config: OptimizationConfig = None

    def best_so_far(self):
        """Running minimum of the per-iteration mean error."""
        out, best = [], math.inf
        for h in self.history:
            if not math.isnan(h.mean_error):
                best = min(best, h.mean_error)
            out.append(best)
        return out

    def to_dict(self):
        cfg = None if self.config is None else {k: getattr(self.config, k) for k in self.config.__dataclass_fields__}
        return {"best_set": list(self.best_set), "best_error": self.best_error, "config": cfg,
                "history": [{"iteration": h.iteration, "selected": list(h.selected),
                             "losses": None if h.losses is None else {str(k): v for k, v in h.losses.items()},
                             "mean_error": None if math.isnan(h.mean_error) else h.mean_error,
                             "weights": {str(k): v for k, v in h.weights.items()},
                             "pnp_skipped": h.pnp_skipped, "failure": h.failure} for h in self.history]}

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
            f.write("\n")

    def write_convergence_csv(self, path):
        with open(path, "w", newline="") as f:
            wr = csv.writer(f, lineterminator="\n")
            wr.writerow(["iteration", "mean_error", "best_error"])
            for h, b in zip(self.history, self.best_so_far()):
                wr.writerow([h.iteration, "" if math.isnan(h.mean_error) else repr(h.mean_error),
                             "" if math.isinf(b) else repr(b)])


def optimize(candidates, chain, cam, profile, dataset, cfg: OptimizationConfig, log=None) -> OptimizationResult:
    """Run the weighted subset search for ``cfg.T`` iterations.

    ``chain`` and ``cam`` must be the ones ``dataset`` was generated with; they
    are accepted for interface symmetry and checked.
    """
    candidates = tuple(candidates)
    if chain is not None and chain.digest() != dataset.chain.digest():
        raise ValueError("dataset was generated for a different robot")
    if cam is not None and cam != dataset.camera:
        raise ValueError("dataset was generated with a different camera")
    if not dataset.train_ids or not dataset.test_ids:
        raise ValueError("dataset needs both a train and a test split")
    ids = tuple(k.id for k in candidates)
    if cfg.K > len(ids):
        raise QuotaError(f"K = {cfg.K} exceeds the {len(ids)} candidates")
    groups = candidate_groups(candidates) if cfg.constraint == "per-group" else None
    W = WeightVector.uniform(ids)
    rng = np.random.default_rng(cfg.seed)
    history = []
    best_set, best_error = None, math.inf
    for t in range(1, cfg.T + 1):
        selected = sample_keypoints(W, cfg.K, groups, rng, cfg.quotas)
        det_rng = np.random.default_rng([cfg.seed, t])
        rec = IterationRecord(t, selected)
        try:
            model = fit_detector(profile, selected, dataset)
            ev = evaluate_performance(selected, model, dataset, cfg.lam, det_rng, miss_penalty=cfg.miss_penalty,
                                      refine_iters=cfg.refine_iters, threads=cfg.threads)
        except EvaluationError as exc:
            rec.failure = str(exc)
            rec.weights = W.as_dict()
            history.append(rec)
            if log:
                log(f"iteration {t}: evaluation failed ({exc})")
            continue
        rec.losses = {k: float(v) for k, v in zip(selected, ev.loss_total)}
        rec.mean_error = ev.mean_error
        rec.pnp_skipped = ev.n_pnp_skipped
        if rec.mean_error < best_error:
            best_set, best_error = tuple(sorted(selected)), rec.mean_error
        W = apply_floor(update_weights(W, selected, ev.loss_total, cfg.gamma))
        rec.weights = W.as_dict()
        history.append(rec)
        if log:
            log(f"iteration {t}: error {rec.mean_error:.4f}, best {best_error:.4f}")
    if best_set is None:
        raise EvaluationError("every iteration failed to evaluate")
    return OptimizationResult(best_set, best_error, history, cfg)
