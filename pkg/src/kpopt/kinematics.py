"""Articulated chains, forward kinematics and keypoint positions.

Each link ``n`` carries the joint that connects it to its parent.  The link
frame is ``T_parent @ fixed_transform @ joint(q_n)``, with the joint rotating
about (or sliding along) ``joint_axis`` expressed in the frame after the fixed
transform.  Link 0 is the robot base and must be fixed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import RigidTransform, axis_angle_to_matrix

JOINT_TYPES = ("revolute", "prismatic", "fixed")


class ChainError(ValueError):
    """Invalid robot description."""


@dataclass(frozen=True)
class Capsule:
    a: tuple
    b: tuple
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ChainError(f"capsule radius must be positive, got {self.radius}")


@dataclass(frozen=True, eq=False)
class Link:
    name: str
    parent: int
    joint_type: str = "fixed"
    joint_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    fixed_transform: np.ndarray = field(default_factory=lambda: np.eye(4))
    limits: tuple = (0.0, 0.0)
    capsules: tuple = ()


@dataclass(frozen=True)
class Keypoint:
    id: int
    link: int
    offset: tuple
    group: str | None = None


@dataclass(frozen=True, eq=False)
class KinematicChain:
    name: str
    links: tuple
    end_effector: tuple = None  # (link index, offset) or None for the last link origin
    document: dict = field(default=None, repr=False)

    def __post_init__(self):
        _validate_links(self.links)
        object.__setattr__(self, "_joint_links", tuple(i for i, l in enumerate(self.links) if l.joint_type != "fixed"))

    @property
    def n_links(self):
        return len(self.links)

    @property
    def joint_links(self):
        """Indices of links carrying a non-fixed joint, in joint-vector order."""
        return self._joint_links

    @property
    def n_joints(self):
        return len(self._joint_links)

    @property
    def lower_limits(self):
        return np.array([self.links[i].limits[0] for i in self._joint_links], dtype=float)

    @property
    def upper_limits(self):
        return np.array([self.links[i].limits[1] for i in self._joint_links], dtype=float)

    def link_index(self, name):
        for i, l in enumerate(self.links):
            if l.name == name:
                return i
        raise KeyError(name)

    def digest(self):
        """Stable hash of the robot description."""
        doc = self.document if self.document is not None else chain_to_document(self)
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _validate_links(links):
    if not links:
        raise ChainError("chain has no links")
    for n, link in enumerate(links):
        if link.joint_type not in JOINT_TYPES:
            raise ChainError(f"link {link.name!r}: unknown joint type {link.joint_type!r}")
        if n == 0:
            if link.parent != -1 or link.joint_type != "fixed":
                raise ChainError("link 0 must be the fixed root (parent -1)")
        elif not 0 <= link.parent < n:
            # parents must precede children; anything else is a cycle or a forward reference
            raise ChainError(f"link {link.name!r}: parent {link.parent} must precede it (cycle or bad ordering)")
        lo, hi = link.limits
        if lo > hi:
            raise ChainError(f"link {link.name!r}: joint limits inverted ({lo} > {hi})")
        if link.joint_type != "fixed" and abs(np.linalg.norm(link.joint_axis) - 1.0) > 1e-9:
            raise ChainError(f"link {link.name!r}: joint axis is not a unit vector")
        R = link.fixed_transform[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ChainError(f"link {link.name!r}: fixed transform is not a rigid rotation")


def _unit_axis(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise ChainError("zero joint axis")
    return v / n


def load_chain(config) -> KinematicChain:
    """Build a chain from a robot-config document (dict, JSON text or path)."""
    return load_robot(config)[0]


def load_robot(config) -> tuple[KinematicChain, list[Keypoint]]:
    """Chain plus its keypoint candidates from one robot-config document."""
    if isinstance(config, (str, Path)) and not str(config).lstrip().startswith("{"):
        with open(config) as f:
            config = json.load(f)
    elif isinstance(config, str):
        try:
            config = json.loads(config)
        except json.JSONDecodeError as exc:
            raise ChainError(f"robot config is not valid JSON: {exc}") from exc
    try:
        return _parse_chain(config)
    except (KeyError, TypeError, IndexError) as exc:
        raise ChainError(f"malformed robot config: {exc!r}") from exc


def _parse_chain(doc):
    links = []
    for entry in doc["links"]:
        joint = entry.get("joint", {"type": "fixed"})
        jtype = joint.get("type", "fixed")
        tf = entry.get("transform", {})
        q = np.asarray(tf.get("quaternion", [1, 0, 0, 0]), dtype=float)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ChainError(f"link {entry['name']!r}: transform quaternion is not unit length")
        T = RigidTransform(q, tf.get("translation", [0, 0, 0])).matrix()
        axis = _unit_axis(joint.get("axis", [0, 0, 1])) if jtype != "fixed" else np.array([0.0, 0.0, 1.0])
        limits = tuple(float(x) for x in joint.get("limits", [0.0, 0.0]))
        capsules = tuple(
            Capsule(tuple(map(float, c["a"])), tuple(map(float, c["b"])), float(c["radius"]))
            for c in entry.get("capsules", [])
        )
        parent = entry.get("parent", -1)
        if isinstance(parent, str):
            names = [l.name for l in links]
            if parent not in names:
                raise ChainError(f"link {entry['name']!r}: parent {parent!r} is not an earlier link (cycle or bad ordering)")
            parent = names.index(parent)
        links.append(Link(entry["name"], int(parent), jtype, axis, T, limits, capsules))
    ee = doc.get("end_effector")
    end_effector = None
    if ee is not None:
        end_effector = (_link_ref(ee["link"], links), tuple(map(float, ee.get("offset", [0, 0, 0]))))
    chain = KinematicChain(doc.get("name", "robot"), tuple(links), end_effector, doc)
    keypoints = []
    seen = set()
    for kp in doc.get("keypoints", []):
        kid = int(kp["id"])
        if kid in seen:
            raise ChainError(f"duplicate keypoint id {kid}")
        seen.add(kid)
        link = _link_ref(kp["link"], links)
        group = kp.get("group")
        keypoints.append(Keypoint(kid, link, tuple(map(float, kp["offset"])), None if group is None else str(group)))
    return chain, keypoints


def _link_ref(ref, links):
    if isinstance(ref, str):
        for i, l in enumerate(links):
            if l.name == ref:
                return i
        raise ChainError(f"unknown link {ref!r}")
    idx = int(ref)
    if not 0 <= idx < len(links):
        raise ChainError(f"link index {idx} out of range")
    return idx


def chain_to_document(chain: KinematicChain, keypoints=()):
    links = []
    for link in chain.links:
        T = RigidTransform.from_matrix(link.fixed_transform)
        entry = {"name": link.name, "parent": link.parent,
                 "joint": {"type": link.joint_type, "axis": link.joint_axis.tolist(), "limits": list(link.limits)},
                 "transform": T.to_dict(),
                 "capsules": [{"a": list(c.a), "b": list(c.b), "radius": c.radius} for c in link.capsules]}
        links.append(entry)
    doc = {"name": chain.name, "links": links,
           "keypoints": [{"id": k.id, "link": k.link, "offset": list(k.offset), "group": k.group} for k in keypoints]}
    if chain.end_effector is not None:
        doc["end_effector"] = {"link": chain.end_effector[0], "offset": list(chain.end_effector[1])}
    return doc


def joint_transform(link: Link, value: float):
    """Homogeneous motion of a single joint at ``value``."""
    T = np.eye(4)
    if link.joint_type == "revolute":
        T[:3, :3] = axis_angle_to_matrix(link.joint_axis * value)
    elif link.joint_type == "prismatic":
        T[:3, 3] = link.joint_axis * value
    return T


def forward_kinematics(chain: KinematicChain, q) -> np.ndarray:
    """Base-to-link transforms, shape ``(n_links, 4, 4)``."""
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.shape[0] != chain.n_joints:
        raise ValueError(f"expected {chain.n_joints} joint values, got {q.shape[0]}")
    values = np.zeros(chain.n_links)
    values[list(chain.joint_links)] = q
    out = np.empty((chain.n_links, 4, 4))
    for n, link in enumerate(chain.links):
        local = link.fixed_transform @ joint_transform(link, values[n]) if link.joint_type != "fixed" else link.fixed_transform
        out[n] = local if n == 0 else out[link.parent] @ local
    return out


def keypoint_offsets(keypoints):
    """Stacked ``(link indices, homogeneous offsets)`` for a keypoint list."""
    links = np.array([k.link for k in keypoints], dtype=int)
    offsets = np.ones((len(keypoints), 4))
    if len(keypoints):
        offsets[:, :3] = np.array([k.offset for k in keypoints], dtype=float)
    return links, offsets


def keypoint_positions(chain, q, keypoints, fk=None):
    """Base-frame positions of many keypoints, shape ``(n, 3)``."""
    if fk is None:
        fk = forward_kinematics(chain, q)
    links, offsets = keypoint_offsets(keypoints)
    if np.any((links < 0) | (links >= chain.n_links)):
        raise ValueError("keypoint link index out of range")
    T = fk[links]
    o = offsets[:, None, :3]
    return T[:, :3, 0] * o[..., 0] + T[:, :3, 1] * o[..., 1] + T[:, :3, 2] * o[..., 2] + T[:, :3, 3]


def keypoint_base_position(chain, q, kp: Keypoint):
    return keypoint_positions(chain, q, [kp])[0]


def end_effector_position(chain, q, fk=None):
    if fk is None:
        fk = forward_kinematics(chain, q)
    if chain.end_effector is None:
        return fk[-1, :3, 3].copy()
    link, offset = chain.end_effector
    return fk[link, :3, :3] @ np.asarray(offset) + fk[link, :3, 3]


def sample_joint_config(chain, rng):
    """Joint values uniform within limits."""
    if chain.n_joints == 0:
        raise ValueError("chain has no movable joints")
    lo, hi = chain.lower_limits, chain.upper_limits
    return lo + (hi - lo) * rng.random(chain.n_joints)


def capsule_segments(chain, fk):
    """World-frame capsule endpoints and radii: ``(A, B, r)`` with ``A, B`` of shape ``(c, 3)``."""
    A, B, r, owner = [], [], [], []
    for n, link in enumerate(chain.links):
        for c in link.capsules:
            A.append(fk[n, :3, :3] @ np.asarray(c.a) + fk[n, :3, 3])
            B.append(fk[n, :3, :3] @ np.asarray(c.b) + fk[n, :3, 3])
            r.append(c.radius)
            owner.append(n)
    if not A:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=int)
    return np.array(A), np.array(B), np.array(r), np.array(owner)
