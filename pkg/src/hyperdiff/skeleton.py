"""The 17-joint human skeleton, its kinematic tree and its two hypergraphs."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

JOINT_NAMES = (
    "hip", "rhip", "rknee", "rfoot", "lhip", "lknee", "lfoot",
    "spine", "thorax", "neck", "head",
    "lshoulder", "lelbow", "lwrist", "rshoulder", "relbow", "rwrist",
)

KINEMATIC_EDGES = (
    ("hip", "rhip"), ("rhip", "rknee"), ("rknee", "rfoot"),
    ("hip", "lhip"), ("lhip", "lknee"), ("lknee", "lfoot"),
    ("hip", "spine"), ("spine", "thorax"),
    ("thorax", "neck"), ("neck", "head"),
    ("thorax", "lshoulder"), ("lshoulder", "lelbow"), ("lelbow", "lwrist"),
    ("thorax", "rshoulder"), ("rshoulder", "relbow"), ("relbow", "rwrist"),
)

PART_HYPEREDGES = (
    ("hip", "spine", "thorax"),
    ("thorax", "neck", "head"),
    ("hip", "rhip", "rknee"),
    ("rknee", "rfoot"),
    ("hip", "lhip", "lknee"),
    ("lknee", "lfoot"),
    ("relbow", "rwrist"),
    ("lelbow", "lwrist"),
    ("thorax", "rshoulder", "relbow"),
    ("thorax", "lshoulder", "lelbow"),
)

BODY_HYPEREDGES = (
    ("hip", "rhip", "lhip", "spine", "thorax", "neck", "head", "lshoulder", "rshoulder"),
    ("rhip", "rknee", "rfoot"),
    ("lhip", "lknee", "lfoot"),
    ("rshoulder", "relbow", "rwrist"),
    ("lshoulder", "lelbow", "lwrist"),
)

SCALES = ("part", "body")


class SkeletonError(ValueError):
    pass


@dataclass(frozen=True)
class Skeleton:
    """Joint names in index order plus edges and hyperedges given by name."""

    joints: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]
    part_hyperedges: tuple[tuple[str, ...], ...]
    body_hyperedges: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        self.validate()

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    def index(self, name: str) -> int:
        try:
            return self.joints.index(name)
        except ValueError:
            raise SkeletonError(f"unknown joint {name!r}") from None

    def hyperedges(self, scale: str) -> tuple[tuple[str, ...], ...]:
        if scale == "part":
            return self.part_hyperedges
        if scale == "body":
            return self.body_hyperedges
        raise SkeletonError(f"unknown hypergraph scale {scale!r}; expected one of {SCALES}")

    def parents(self) -> list[int]:
        """Parent index of each joint in the tree rooted at joint 0 (root gets -1)."""
        nbrs = {i: [] for i in range(self.num_joints)}
        for a, b in self.edges:
            i, j = self.index(a), self.index(b)
            nbrs[i].append(j)
            nbrs[j].append(i)
        parent = [-2] * self.num_joints
        parent[0] = -1
        order = [0]
        for i in order:
            for j in nbrs[i]:
                if parent[j] == -2:
                    parent[j] = i
                    order.append(j)
        return parent

    def validate(self) -> None:
        if len(set(self.joints)) != len(self.joints):
            raise SkeletonError("joint names must be unique")
        if not self.joints:
            raise SkeletonError("skeleton needs at least one joint")
        known = set(self.joints)
        for a, b in self.edges:
            for n in (a, b):
                if n not in known:
                    raise SkeletonError(f"edge ({a}, {b}) references unknown joint {n!r}")
            if a == b:
                raise SkeletonError(f"edge ({a}, {b}) is a self-loop")
        for scale in SCALES:
            for k, he in enumerate(self.hyperedges(scale)):
                for n in he:
                    if n not in known:
                        raise SkeletonError(f"{scale} hyperedge {k + 1} references unknown joint {n!r}")
                # a one-joint skeleton can only carry singleton hyperedges
                need = 2 if len(self.joints) > 1 else 1
                if len(set(he)) < need or len(set(he)) != len(he):
                    raise SkeletonError(f"{scale} hyperedge {k + 1} must have at least {need} distinct members")
        j = len(self.joints)
        if len(self.edges) != j - 1:
            raise SkeletonError(f"kinematic edges must form a tree: expected {j - 1} edges, got {len(self.edges)}")
        if -2 in self.parents():
            raise SkeletonError("kinematic edges must form a tree: graph is not connected")


def default_skeleton() -> Skeleton:
    return Skeleton(JOINT_NAMES, KINEMATIC_EDGES, PART_HYPEREDGES, BODY_HYPEREDGES)


def incidence(skeleton: Skeleton, scale: str) -> np.ndarray:
    """J x E 0/1 matrix; column e marks the members of hyperedge e."""
    edges = skeleton.hyperedges(scale)
    h = np.zeros((skeleton.num_joints, len(edges)))
    for e, members in enumerate(edges):
        for name in members:
            h[skeleton.index(name), e] = 1.0
    return h


def adjacency(skeleton: Skeleton) -> np.ndarray:
    """Symmetric 0/1 kinematic adjacency with zero diagonal."""
    j = skeleton.num_joints
    a = np.zeros((j, j))
    for u, v in skeleton.edges:
        i, k = skeleton.index(u), skeleton.index(v)
        a[i, k] = a[k, i] = 1.0
    return a


# ----------------------------------------------------------------------
# file format


def skeleton_to_dict(skeleton: Skeleton) -> dict:
    return {
        "joints": list(skeleton.joints),
        "edges": [list(e) for e in skeleton.edges],
        "part_hyperedges": [list(e) for e in skeleton.part_hyperedges],
        "body_hyperedges": [list(e) for e in skeleton.body_hyperedges],
    }


def skeleton_from_dict(doc: dict, source: str = "<dict>") -> Skeleton:
    if not isinstance(doc, dict):
        raise SkeletonError(f"{source}: top level must be an object")
    for key in ("joints", "edges", "part_hyperedges", "body_hyperedges"):
        if key not in doc:
            raise SkeletonError(f"{source}: missing field {key!r}")
        if not isinstance(doc[key], list):
            raise SkeletonError(f"{source}: field {key!r} must be a list")
    if not all(isinstance(n, str) for n in doc["joints"]):
        raise SkeletonError(f"{source}: field 'joints' must hold strings")
    for k, e in enumerate(doc["edges"]):
        if not (isinstance(e, list) and len(e) == 2):
            raise SkeletonError(f"{source}: edges[{k}] must be a pair of joint names")
    for key in ("part_hyperedges", "body_hyperedges"):
        for k, e in enumerate(doc[key]):
            if not isinstance(e, list):
                raise SkeletonError(f"{source}: {key}[{k}] must be a list of joint names")
    try:
        return Skeleton(
            tuple(doc["joints"]),
            tuple(tuple(e) for e in doc["edges"]),
            tuple(tuple(e) for e in doc["part_hyperedges"]),
            tuple(tuple(e) for e in doc["body_hyperedges"]),
        )
    except SkeletonError as exc:
        raise SkeletonError(f"{source}: {exc}") from None


def save_skeleton(skeleton: Skeleton, path) -> None:
    Path(path).write_text(json.dumps(skeleton_to_dict(skeleton), indent=2) + "\n", encoding="utf-8")


def load_skeleton(path) -> Skeleton:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SkeletonError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return skeleton_from_dict(doc, str(path))


def resolve_skeleton(source: str | None) -> Skeleton:
    """``None`` or ``"default"`` gives the built-in skeleton, anything else is a path."""
    if source in (None, "default"):
        return default_skeleton()
    return load_skeleton(source)
