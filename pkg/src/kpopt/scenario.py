"""Scenario files: one JSON document naming the robot, camera, detector profile and run settings."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .datagen import RandomizationConfig
from .detector import DifficultyProfile
from .geometry import AxisAngleTransform, CameraModel, RigidTransform, axis_angle_to_rigid, look_at
from .kinematics import ChainError, load_robot
from .optimizer import OptimizationConfig
from .tracker import TrackerConfig, _diag6


class ScenarioError(ValueError):
    """Missing or malformed scenario input."""


def data_path(name) -> Path:
    """Path of a file shipped in the package data directory."""
    return Path(str(resources.files("kpopt") / "data" / name))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass(eq=False)
class Scenario:
    name: str
    chain: object
    candidates: tuple
    camera: CameraModel
    profile: DifficultyProfile
    randomization: RandomizationConfig
    optimizer: dict = field(default_factory=dict)
    tracker: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)
    seed: int = 0
    inputs: dict = field(default_factory=dict)  # file name -> sha256

    @property
    def keypoints(self):
        return {k.id: k for k in self.candidates}

    def optimization_config(self, **overrides) -> OptimizationConfig:
        d = {"K": 7, "T": 15, "gamma": 1.0, "lam": 50.0, "constraint": "per-group", "seed": self.seed}
        d.update({("lam" if k == "lambda" else k): v for k, v in self.optimizer.items()})
        d.update({k: v for k, v in overrides.items() if v is not None})
        return OptimizationConfig(int(d["K"]), int(d["T"]), float(d["gamma"]), float(d["lam"]), int(d["seed"]),
                                  d["constraint"], d.get("quotas"), d.get("miss_penalty"),
                                  int(d.get("refine_iters", 20)), int(d.get("threads", 1)))

    def lumped_error(self) -> RigidTransform:
        le = self.tracker.get("lumped_error", {"omega": [0, 0, 0], "b": [0, 0, 0]})
        a = AxisAngleTransform(np.asarray(le["omega"], dtype=float), np.asarray(le["b"], dtype=float))
        return axis_angle_to_rigid(a)

    def tracker_config(self, **overrides) -> TrackerConfig:
        d = dict(self.tracker)
        d.update({k: v for k, v in overrides.items() if v is not None})
        si = d.get("sigma_init", {"omega": 0.1, "b": 0.01})
        ss = d.get("sigma_step", {"omega": 5e-3, "b": 1e-3})
        return TrackerConfig(self.randomization.camera_pose, self.camera, int(d.get("n_particles", 1000)),
                             _diag6(si["omega"], si["b"]), _diag6(ss["omega"], ss["b"]), float(d.get("alpha", 0.01)),
                             float(d.get("resample_threshold", 0.5)), d.get("likelihood", "sum"))


def parse_pose(d) -> RigidTransform:
    if "look_at" in d:
        la = d["look_at"]
        return look_at(la["eye"], la["target"], la.get("up", (0, 0, 1)))
    return RigidTransform.from_dict(d)


def load_scenario(path) -> Scenario:
    """Read a scenario file; relative paths inside it resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise ScenarioError(f"scenario file not found: {path}")
    inputs = {path.name: file_digest(path)}
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON ({exc})") from exc
    base = path.parent
    try:
        robot_path = base / doc["robot"]
        if not robot_path.is_file():
            raise ScenarioError(f"robot config not found: {robot_path}")
        inputs[robot_path.name] = file_digest(robot_path)
        chain, keypoints = load_robot(robot_path)
        camera = CameraModel.from_dict(doc["camera"])
        rd = dict(doc["randomization"])
        rd["camera_pose"] = parse_pose(rd["camera_pose"]).to_dict()
        rd.setdefault("seed", doc.get("seed", 0))
        rc = RandomizationConfig.from_dict(rd)
        prof = doc["difficulty"]
        if isinstance(prof, str):
            prof_path = base / prof
            if not prof_path.is_file():
                raise ScenarioError(f"difficulty profile not found: {prof_path}")
            inputs[prof_path.name] = file_digest(prof_path)
            prof = json.loads(prof_path.read_text())
        ids = [k.id for k in keypoints]
        profile = DifficultyProfile.from_dict(prof, ids)
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError, ChainError) as exc:
        raise ScenarioError(f"{path}: {type(exc).__name__}: {exc}") from exc
    return Scenario(doc.get("name", path.stem), chain, tuple(keypoints), camera, profile, rc,
                    doc.get("optimizer", {}), doc.get("tracker", {}), doc.get("dataset", {}),
                    int(doc.get("seed", 0)), inputs)
