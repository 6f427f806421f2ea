"""Synthetic scene generation and dataset files.

No images are rendered.  A scene is a joint configuration, a camera pose and
a scalar nuisance level; ground truth for every candidate keypoint is its
camera-frame position, pixel projection and visibility.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .detector import camera_center_base, occluded_mask
from .geometry import CameraModel, RigidTransform, check_psd, perturb_pose, project_points
from .kinematics import (Keypoint, capsule_segments, chain_to_document, forward_kinematics, keypoint_positions, load_robot,
                         sample_joint_config)

SCHEMA_VERSION = 1


class GenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class ChecksumError(DatasetFormatError):
    pass


@dataclass(frozen=True, eq=False)
class RandomizationConfig:
    camera_pose: RigidTransform  # nominal camera-from-base
    pose_covariance: np.ndarray = field(default_factory=lambda: np.zeros((7, 7)))
    lights_range: tuple = (1, 3)
    distractor_range: tuple = (0, 10)
    image_noise_range: tuple = (0.0, 0.05)
    color_noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pose_covariance", check_psd(self.pose_covariance, 7, "pose covariance"))
        lo, hi = self.lights_range
        if not 1 <= lo <= hi <= 3:
            raise ValueError("lights range must lie within 1..3 and be non-empty")
        for name in ("distractor_range", "image_noise_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must be a non-empty non-negative range")
        if self.color_noise_sigma < 0:
            raise ValueError("color noise sigma must be non-negative")

    def to_dict(self):
        return {"camera_pose": self.camera_pose.to_dict(), "pose_covariance": self.pose_covariance.tolist(),
                "lights_range": list(self.lights_range), "distractor_range": list(self.distractor_range),
                "image_noise_range": list(self.image_noise_range), "color_noise_sigma": self.color_noise_sigma,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        cov = d.get("pose_covariance")
        if cov is None:
            # diagonal shorthand: quaternion sigma and translation sigma (m)
            sq, sb = float(d.get("quaternion_sigma", 0.0)), float(d.get("translation_sigma", 0.0))
            cov = np.diag([sq**2] * 4 + [sb**2] * 3)
        return cls(RigidTransform.from_dict(d["camera_pose"]), np.asarray(cov, dtype=float),
                   tuple(int(x) for x in d.get("lights_range", (1, 3))),
                   tuple(int(x) for x in d.get("distractor_range", (0, 10))),
                   tuple(float(x) for x in d.get("image_noise_range", (0.0, 0.05))),
                   float(d.get("color_noise_sigma", 0.05)), int(d.get("seed", 0)))


@dataclass(frozen=True, eq=False)
class SceneSample:
    sample_id: int
    q: np.ndarray
    T_cb: RigidTransform
    nuisance: float
    draws: dict
    pixels: np.ndarray  # (N, 2), NaN behind the camera
    points_cam: np.ndarray  # (N, 3)
    visible: np.ndarray  # (N,) bool
    points_base: np.ndarray = field(default=None, repr=False)

    def __eq__(self, other):
        if not isinstance(other, SceneSample):
            return NotImplemented
        return (self.sample_id == other.sample_id and self.T_cb == other.T_cb and self.nuisance == other.nuisance
                and self.draws == other.draws and np.array_equal(self.q, other.q)
                and np.array_equal(self.pixels, other.pixels, equal_nan=True)
                and np.array_equal(self.points_cam, other.points_cam) and np.array_equal(self.visible, other.visible))


@dataclass(frozen=True, eq=False)
class SampleArrays:
    """Stacked ground truth of several samples, rows in the requested order."""

    ids: tuple
    q: np.ndarray
    R: np.ndarray  # (S, 3, 3) camera-from-base rotations
    t: np.ndarray  # (S, 3)
    pixels: np.ndarray  # (S, N, 2)
    points_cam: np.ndarray  # (S, N, 3)
    points_base: np.ndarray  # (S, N, 3)
    visible: np.ndarray  # (S, N)
    nuisance: np.ndarray  # (S,)


@dataclass(eq=False)
class Dataset:
    samples: list
    train_ids: tuple
    test_ids: tuple
    chain: object
    camera: CameraModel
    candidates: tuple
    randomization: RandomizationConfig = None

    def __post_init__(self):
        self.candidates = tuple(self.candidates)
        self.train_ids = tuple(int(i) for i in self.train_ids)
        self.test_ids = tuple(int(i) for i in self.test_ids)
        self.index_of = {k.id: n for n, k in enumerate(self.candidates)}
        self._row = {s.sample_id: n for n, s in enumerate(self.samples)}
        if set(self.train_ids) & set(self.test_ids):
            raise ValueError("train and test splits overlap")
        if sorted(self.train_ids + self.test_ids) != sorted(self._row):
            raise ValueError("splits must cover every sample exactly once")
        self._stack = None

    def sample(self, sample_id):
        return self.samples[self._row[sample_id]]

    def arrays(self, ids=None) -> SampleArrays:
        if self._stack is None:
            s = self.samples
            self._stack = dict(
                q=np.array([x.q for x in s]), R=np.array([x.T_cb.rotation for x in s]).reshape(-1, 3, 3),
                t=np.array([x.T_cb.b for x in s]).reshape(-1, 3),
                pixels=np.array([x.pixels for x in s]).reshape(len(s), -1, 2),
                points_cam=np.array([x.points_cam for x in s]).reshape(len(s), -1, 3),
                points_base=np.array([x.points_base for x in s]).reshape(len(s), -1, 3),
                visible=np.array([x.visible for x in s], dtype=bool).reshape(len(s), -1),
                nuisance=np.array([x.nuisance for x in s], dtype=float))
        ids = tuple(s.sample_id for s in self.samples) if ids is None else tuple(ids)
        rows = np.array([self._row[i] for i in ids], dtype=int)
        return SampleArrays(ids, **{k: v[rows] for k, v in self._stack.items()})

    def visibility_rates(self):
        vis = np.array([s.visible for s in self.samples], dtype=float)
        return {k.id: float(r) for k, r in zip(self.candidates, vis.mean(axis=0))}


# ---------------------------------------------------------------------------
# generation


def _base_seed(rng, rc):
    if rng is None:
        return int(rc.seed)
    if isinstance(rng, (int, np.integer)):
        return int(rng)
    return int(rng.integers(2**63))


def _draw_nuisance(rc, rng):
    lights = int(rng.integers(rc.lights_range[0], rc.lights_range[1] + 1))
    distractors = int(rng.integers(rc.distractor_range[0], rc.distractor_range[1] + 1))
    noise = float(rng.uniform(*rc.image_noise_range)) if rc.image_noise_range[1] > rc.image_noise_range[0] \
        else float(rc.image_noise_range[0])
    color = (rng.standard_normal(3) * rc.color_noise_sigma).tolist()

    def norm(x, lo, hi):
        return (x - lo) / (hi - lo) if hi > lo else 0.0

    parts = [(lights - 1) / 2.0, norm(distractors, *rc.distractor_range), norm(noise, *rc.image_noise_range)]
    draws = {"lights": lights, "distractors": distractors, "image_noise": noise, "color": color}
    return float(np.mean(parts)), draws


def ground_truth(chain, cam, candidates, q, T_cb):
    """Base points, camera points, pixels and visibility for one configuration."""
    fk = forward_kinematics(chain, q)
    p_base = keypoint_positions(chain, q, candidates, fk=fk)
    p_cam = T_cb.apply(p_base)
    uv, in_front = project_points(cam, p_cam)
    A, B, r, _ = capsule_segments(chain, fk)
    occluded = occluded_mask(A, B, r, camera_center_base(T_cb), p_base)
    return p_base, p_cam, uv, in_front & ~occluded


def make_sample(chain, cam, candidates, sample_id, q, T_cb, nuisance, draws):
    p_base, p_cam, uv, vis = ground_truth(chain, cam, candidates, q, T_cb)
    return SceneSample(int(sample_id), np.asarray(q, dtype=float), T_cb, float(nuisance), draws, uv, p_cam, vis,
                       p_base)


def _random_sample(chain, cam, candidates, rc, base, sample_id):
    rng = np.random.default_rng([base, sample_id])
    q = sample_joint_config(chain, rng)
    T_cb = perturb_pose(rc.camera_pose, rc.pose_covariance, rng)
    nuisance, draws = _draw_nuisance(rc, rng)
    return make_sample(chain, cam, candidates, sample_id, q, T_cb, nuisance, draws)


def generate_dataset(chain, cam, candidates, rc: RandomizationConfig, M_train, M_test, rng=None) -> Dataset:
    """Draw ``M_train + M_test`` independent scenes; the first ``M_train`` ids form the train split.

    Each sample uses its own stream seeded by ``(seed, sample_id)``, so the
    result does not depend on generation order.  ``rng`` may be a seed, a
    ``Generator`` or ``None`` (use ``rc.seed``).
    """
    if M_train < 1 or M_test < 1:
        raise ValueError("need at least one train and one test sample")
    candidates = tuple(candidates)
    base = _base_seed(rng, rc)
    M = M_train + M_test
    samples = [_random_sample(chain, cam, candidates, rc, base, i) for i in range(M)]
    in_front = np.zeros(len(candidates), dtype=bool)
    for s in samples:
        in_front |= np.isfinite(s.pixels[:, 0])
    if not in_front.all():
        _probe_in_front(chain, cam, candidates, rc, base, M, in_front)
    return Dataset(samples, range(M_train), range(M_train, M), chain, cam, candidates, rc)


def _probe_in_front(chain, cam, candidates, rc, base, M, in_front):
    """Extra draws (not kept) checking that every keypoint can face the camera at all."""
    for attempt in range(100 * M):
        rng = np.random.default_rng([base, M, attempt])
        q = sample_joint_config(chain, rng)
        T_cb = perturb_pose(rc.camera_pose, rc.pose_covariance, rng)
        p_cam = T_cb.apply(keypoint_positions(chain, q, candidates))
        in_front |= project_points(cam, p_cam)[1]
        if in_front.all():
            return
    missing = [candidates[i].id for i in np.flatnonzero(~in_front)]
    raise GenerationError(f"keypoint(s) {missing} never in front of the camera in {100 * M} attempts")


def smooth_trajectory(chain, n_frames, rng, amplitude=0.35, period=(60.0, 160.0)):
    """Joint values following independent sinusoids around the middle of each range."""
    lo, hi = chain.lower_limits, chain.upper_limits
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    phase = rng.uniform(0.0, 2 * np.pi, chain.n_joints)
    per = rng.uniform(period[0], period[1], chain.n_joints)
    t = np.arange(n_frames)[:, None]
    return mid + amplitude * half * np.sin(2 * np.pi * t / per + phase)


def generate_sequence(chain, cam, candidates, T_cb, n_frames, rng, rc=None, amplitude=0.35,
                      period=(60.0, 160.0)) -> Dataset:
    """A tracking sequence: smooth joint motion seen by a fixed camera; every frame is in the test split."""
    candidates = tuple(candidates)
    if rc is None:
        rc = RandomizationConfig(T_cb)
    qs = smooth_trajectory(chain, n_frames, rng, amplitude, period)
    base = int(rng.integers(2**63))
    samples = []
    for i in range(n_frames):
        nuisance, draws = _draw_nuisance(rc, np.random.default_rng([base, i]))
        samples.append(make_sample(chain, cam, candidates, i, qs[i], T_cb, nuisance, draws))
    return Dataset(samples, (), range(n_frames), chain, cam, candidates, rc)


# ---------------------------------------------------------------------------
# persistence


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _sample_record(s: SceneSample):
    pixels = [[None, None] if not np.all(np.isfinite(p)) else p.tolist() for p in s.pixels]
    return {"sample_id": s.sample_id, "q": s.q.tolist(), "T_cb": s.T_cb.to_dict(), "nuisance": s.nuisance,
            "draws": s.draws, "pixels": pixels, "points_cam": s.points_cam.tolist(), "visible": s.visible.tolist()}


def _candidate_record(k: Keypoint):
    return {"id": k.id, "link": k.link, "offset": list(k.offset), "group": k.group}


def dataset_lines(ds: Dataset):
    body = [_dumps(_sample_record(s)) + "\n" for s in ds.samples]
    checksum = hashlib.sha256("".join(body).encode()).hexdigest()
    doc = ds.chain.document if ds.chain.document is not None else chain_to_document(ds.chain)
    header = {"schema_version": SCHEMA_VERSION, "chain_hash": ds.chain.digest(), "chain": doc,
              "candidates": [_candidate_record(k) for k in ds.candidates], "camera": ds.camera.to_dict(),
              "randomization_config": None if ds.randomization is None else ds.randomization.to_dict(),
              "split": {"train": list(ds.train_ids), "test": list(ds.test_ids)},
              "n_samples": len(ds.samples), "checksum": checksum}
    return [_dumps(header) + "\n"] + body


def save_dataset(ds: Dataset, path):
    with open(path, "w") as f:
        f.writelines(dataset_lines(ds))


def load_dataset(path) -> Dataset:
    with open(path) as f:
        lines = f.readlines()
    if not lines:
        raise ChecksumError(f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: unreadable header ({exc})") from exc
    if header.get("schema_version") != SCHEMA_VERSION:
        raise VersionMismatchError(f"{path}: schema version {header.get('schema_version')}, expected {SCHEMA_VERSION}")
    body = lines[1:]
    if len(body) != header["n_samples"] or hashlib.sha256("".join(body).encode()).hexdigest() != header["checksum"]:
        raise ChecksumError(f"{path}: sample records do not match the header checksum (truncated or edited)")
    chain, _ = load_robot(header["chain"])
    if chain.digest() != header["chain_hash"]:
        raise ChecksumError(f"{path}: robot description does not match its hash")
    candidates = tuple(Keypoint(int(c["id"]), int(c["link"]), tuple(c["offset"]), c["group"])
                       for c in header["candidates"])
    cam = CameraModel.from_dict(header["camera"])
    rc = header["randomization_config"]
    rc = None if rc is None else RandomizationConfig.from_dict(rc)
    samples = []
    for line in body:
        r = json.loads(line)
        q = np.array(r["q"], dtype=float)
        T = RigidTransform.from_dict(r["T_cb"])
        pixels = np.array([[math.nan, math.nan] if p[0] is None else p for p in r["pixels"]], dtype=float)
        p_base = keypoint_positions(chain, q, candidates)
        samples.append(SceneSample(int(r["sample_id"]), q, T, float(r["nuisance"]), r["draws"],
                                   pixels.reshape(-1, 2), np.array(r["points_cam"], dtype=float).reshape(-1, 3),
                                   np.array(r["visible"], dtype=bool), p_base))
    return Dataset(samples, header["split"]["train"], header["split"]["test"], chain, cam, candidates, rc)
