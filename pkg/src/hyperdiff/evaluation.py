"""Pose metrics, hypothesis aggregation, pose-record files and a synthetic pose generator."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .numerics import make_rng
from .skeleton import Skeleton

ROOT = 0
AUC_THRESHOLDS = np.arange(0.0, 151.0, 5.0)


class RecordError(ValueError):
    pass


# ----------------------------------------------------------------------
# metrics (inputs in millimetres)


def root_relative(pose: np.ndarray) -> np.ndarray:
    pose = np.asarray(pose, dtype=float)
    return pose - pose[..., ROOT:ROOT + 1, :]


def joint_errors(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-joint Euclidean distances after root alignment, shape ``(..., J)``."""
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return np.linalg.norm(root_relative(pred) - root_relative(gt), axis=-1)


def mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    return float(joint_errors(pred, gt).mean())


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Best similarity transform (rotation, scale, translation) of ``pred`` onto ``gt``."""
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    p0, g0 = pred - mu_p, gt - mu_g
    var_g = (g0 ** 2).sum()
    if var_g < 1e-12:
        raise ValueError("ground-truth pose is degenerate (all joints coincide)")
    var_p = (p0 ** 2).sum()
    if var_p < 1e-300:
        return np.broadcast_to(mu_g, gt.shape).copy()
    u, s, vt = np.linalg.svd(p0.T @ g0)
    d = np.ones(3)
    d[-1] = np.sign(np.linalg.det(u @ vt)) or 1.0
    rot = u @ np.diag(d) @ vt            # acts on row vectors: p0 @ rot
    scale = (s * d).sum() / var_p
    return scale * p0 @ rot + mu_g


def p_mpjpe(pred: np.ndarray, gt: np.ndarray) -> float:
    aligned = procrustes_align(pred, gt)
    return float(np.linalg.norm(aligned - np.asarray(gt, dtype=float), axis=-1).mean())


def pck_from_errors(err: np.ndarray, threshold: float = 150.0) -> float:
    """Percentage of per-joint errors strictly below ``threshold`` mm.

    A zero error always counts as correct, including at a 0 mm threshold.
    """
    err = np.asarray(err, dtype=float)
    if err.size == 0:
        raise ValueError("pck of an empty set")
    return float(100.0 * ((err < threshold) | (err == 0.0)).mean())


def auc_from_errors(err: np.ndarray) -> float:
    """Mean PCK over thresholds 0, 5, ..., 150 mm."""
    err = np.asarray(err, dtype=float)
    if err.size == 0:
        raise ValueError("auc of an empty set")
    return float(np.mean([pck_from_errors(err, th) for th in AUC_THRESHOLDS]))


def pck(pred_set: np.ndarray, gt_set: np.ndarray, threshold: float = 150.0) -> float:
    return pck_from_errors(joint_errors(pred_set, gt_set), threshold)


def auc(pred_set: np.ndarray, gt_set: np.ndarray) -> float:
    return auc_from_errors(joint_errors(pred_set, gt_set))


@dataclass
class Aggregate:
    mean_pose: np.ndarray
    best_index: int | None = None


def aggregate_hypotheses(hyps: np.ndarray, gt: np.ndarray | None = None) -> Aggregate:
    hyps = np.asarray(hyps, dtype=float)
    mean_pose = hyps.mean(axis=0)
    best = None
    if gt is not None:
        best = int(np.argmin([mpjpe(h, gt) for h in hyps]))
    return Aggregate(mean_pose, best)


@dataclass
class MetricReport:
    """Averages over records, all in mm except the percentages.

    ``mpjpe_mean_hyp`` averages the error of every hypothesis,
    ``mpjpe_best_hyp`` keeps the best hypothesis per record and
    ``mpjpe_mean_pose`` scores the per-joint average of the hypotheses.
    P-MPJPE, PCK and AUC are computed on the averaged pose.
    """

    count: int
    hypotheses: int
    mpjpe_mean_hyp: float
    mpjpe_best_hyp: float
    mpjpe_mean_pose: float
    p_mpjpe: float
    pck150: float
    auc: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        rows = [
            ("records", f"{self.count}"),
            ("hypotheses", f"{self.hypotheses}"),
            ("mpjpe_mean_hyp (mm)", f"{self.mpjpe_mean_hyp:.6f}"),
            ("mpjpe_best_hyp (mm)", f"{self.mpjpe_best_hyp:.6f}"),
            ("mpjpe_mean_pose (mm)", f"{self.mpjpe_mean_pose:.6f}"),
            ("p_mpjpe (mm)", f"{self.p_mpjpe:.6f}"),
            ("pck150 (%)", f"{self.pck150:.6f}"),
            ("auc (%)", f"{self.auc:.6f}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"


def evaluate(hyps: np.ndarray, gts: np.ndarray) -> MetricReport:
    """Score hypotheses of shape ``(N, H, J, 3)`` against ``(N, J, 3)`` ground truth."""
    hyps, gts = np.asarray(hyps, dtype=float), np.asarray(gts, dtype=float)
    if hyps.ndim != 4 or hyps.shape[0] != gts.shape[0] or hyps.shape[2:] != gts.shape[1:]:
        raise ValueError(f"hypotheses {hyps.shape} do not match ground truth {gts.shape}")
    if hyps.shape[0] == 0:
        raise ValueError("nothing to evaluate")
    per_hyp = joint_errors(hyps, np.broadcast_to(gts[:, None], hyps.shape)).mean(axis=-1)          # N x H
    mean_poses = hyps.mean(axis=1)
    return MetricReport(
        count=int(hyps.shape[0]),
        hypotheses=int(hyps.shape[1]),
        mpjpe_mean_hyp=float(per_hyp.mean()),
        mpjpe_best_hyp=float(per_hyp.min(axis=1).mean()),
        mpjpe_mean_pose=float(joint_errors(mean_poses, gts).mean()),
        p_mpjpe=float(np.mean([p_mpjpe(p, g) for p, g in zip(mean_poses, gts)])),
        pck150=pck(mean_poses, gts),
        auc=auc(mean_poses, gts),
    )


# ----------------------------------------------------------------------
# pose-record files (one JSON object per line)


@dataclass
class PoseRecord:
    id: str
    x: np.ndarray
    y: np.ndarray | None = None

    def __eq__(self, other):
        if not isinstance(other, PoseRecord):
            return NotImplemented
        if self.id != other.id or not np.array_equal(self.x, other.x):
            return False
        if (self.y is None) != (other.y is None):
            return False
        return self.y is None or np.array_equal(self.y, other.y)


def _matrix(value, cols: int, num_joints: int, what: str, rid: str) -> np.ndarray:
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise RecordError(f"record {rid!r}: field {what!r} is not a numeric matrix") from None
    if arr.shape != (num_joints, cols):
        raise RecordError(f"record {rid!r}: field {what!r} has shape {arr.shape}, expected ({num_joints}, {cols})")
    if not np.all(np.isfinite(arr)):
        raise RecordError(f"record {rid!r}: field {what!r} has non-finite values")
    return arr


def _parse_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"{path}:{lineno}: parse error: {exc.msg}") from None
            if not isinstance(doc, dict) or "id" not in doc:
                raise RecordError(f"{path}:{lineno}: expected an object with an 'id' field")
            yield lineno, doc


def load_records(path, num_joints: int = 17) -> list[PoseRecord]:
    records, seen = [], set()
    for lineno, doc in _parse_lines(path):
        rid = str(doc["id"])
        if rid in seen:
            raise RecordError(f"{path}:{lineno}: duplicate record id {rid!r}")
        seen.add(rid)
        if "x" not in doc:
            raise RecordError(f"record {rid!r}: missing field 'x'")
        x = _matrix(doc["x"], 2, num_joints, "x", rid)
        y = _matrix(doc["y"], 3, num_joints, "y", rid) if doc.get("y") is not None else None
        records.append(PoseRecord(rid, x, y))
    return records


def _rows(arr: np.ndarray) -> list:
    # float() keeps repr-precision so values round-trip exactly through JSON
    return [[float(v) for v in row] for row in np.asarray(arr)]


def save_records(records: Sequence[PoseRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            doc = {"id": r.id, "x": _rows(r.x)}
            if r.y is not None:
                doc["y"] = _rows(r.y)
            fh.write(json.dumps(doc) + "\n")


def save_predictions(records: Sequence[PoseRecord], hyps: np.ndarray, path) -> None:
    """One line per (record, hypothesis) carrying ``hyp`` and ``y_hat``."""
    hyps = np.asarray(hyps, dtype=float)
    if hyps.shape[0] != len(records):
        raise ValueError(f"{len(records)} records but {hyps.shape[0]} hypothesis sets")
    with open(path, "w", encoding="utf-8") as fh:
        for r, hs in zip(records, hyps):
            for h, pose in enumerate(hs):
                doc = {"id": r.id, "x": _rows(r.x)}
                if r.y is not None:
                    doc["y"] = _rows(r.y)
                doc.update(hyp=h, y_hat=_rows(pose))
                fh.write(json.dumps(doc) + "\n")


def load_predictions(path, num_joints: int = 17) -> dict[str, np.ndarray]:
    """Map record id to its hypotheses stacked as ``(H, J, 3)`` in ``hyp`` order."""
    grouped: dict[str, dict[int, np.ndarray]] = {}
    for lineno, doc in _parse_lines(path):
        rid = str(doc["id"])
        if "y_hat" not in doc or "hyp" not in doc:
            raise RecordError(f"{path}:{lineno}: prediction for {rid!r} needs 'hyp' and 'y_hat'")
        h = int(doc["hyp"])
        slot = grouped.setdefault(rid, {})
        if h in slot:
            raise RecordError(f"{path}:{lineno}: duplicate hypothesis {h} for {rid!r}")
        slot[h] = _matrix(doc["y_hat"], 3, num_joints, "y_hat", rid)
    out = {}
    for rid, slot in grouped.items():
        if sorted(slot) != list(range(len(slot))):
            raise RecordError(f"record {rid!r}: hypothesis indices {sorted(slot)} are not 0..H-1")
        out[rid] = np.stack([slot[h] for h in range(len(slot))])
    return out


# ----------------------------------------------------------------------
# synthetic poses

# rest-pose bone offsets (mm) from parent, y up, z towards the camera
_REST_OFFSETS = {
    "hip": (0.0, 0.0, 0.0),
    "rhip": (-130.0, 0.0, 0.0), "rknee": (0.0, -440.0, 0.0), "rfoot": (0.0, -440.0, 0.0),
    "lhip": (130.0, 0.0, 0.0), "lknee": (0.0, -440.0, 0.0), "lfoot": (0.0, -440.0, 0.0),
    "spine": (0.0, 230.0, 0.0), "thorax": (0.0, 250.0, 0.0),
    "neck": (0.0, 110.0, 0.0), "head": (0.0, 120.0, 0.0),
    "lshoulder": (150.0, 0.0, 0.0), "lelbow": (0.0, -280.0, 0.0), "lwrist": (0.0, -250.0, 0.0),
    "rshoulder": (-150.0, 0.0, 0.0), "relbow": (0.0, -280.0, 0.0), "rwrist": (0.0, -250.0, 0.0),
}


def rest_offsets(skeleton: Skeleton) -> np.ndarray:
    """Parent-relative bone vectors; unknown joint names get a 100 mm upward bone."""
    return np.array([_REST_OFFSETS.get(n, (0.0, 100.0, 0.0)) if i else (0.0, 0.0, 0.0)
                     for i, n in enumerate(skeleton.joints)])


def synth_dataset(n: int, skeleton: Skeleton, seed: int, noise_2d: float = 0.0,
                  max_angle: float = 0.5, max_yaw: float = np.pi / 3) -> list[PoseRecord]:
    """Random poses from bounded joint rotations of a rest pose (bone lengths fixed).

    Each joint's local rotation has a random axis and an angle of at most
    ``max_angle`` rad; the root also gets a yaw of at most ``max_yaw``.  2D
    keypoints are the orthographic projection (x, y) plus optional Gaussian
    noise of std ``noise_2d``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = make_rng(seed)
    # separate stream so the 3D poses do not depend on the noise level
    noise_rng = make_rng(seed, 1)
    parents = skeleton.parents()
    order = _topological(parents)
    offsets = rest_offsets(skeleton)
    j = skeleton.num_joints
    records = []
    for k in range(n):
        axes = rng.standard_normal((j, 3))
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        angles = rng.uniform(0.0, max_angle, size=j)
        local = Rotation.from_rotvec(axes * angles[:, None])
        yaw = Rotation.from_rotvec([0.0, rng.uniform(-max_yaw, max_yaw), 0.0])
        glob = [None] * j
        pos = np.zeros((j, 3))
        for i in order:
            p = parents[i]
            if p < 0:
                glob[i] = yaw * local[i]
                continue
            pos[i] = pos[p] + glob[p].apply(offsets[i])
            glob[i] = glob[p] * local[i]
        x = pos[:, :2].copy()
        if noise_2d > 0:
            x = x + noise_2d * noise_rng.standard_normal(x.shape)
        records.append(PoseRecord(f"synth_{k:05d}", x, pos))
    return records


def _topological(parents: list[int]) -> list[int]:
    children = {i: [] for i in range(len(parents))}
    root = parents.index(-1)
    for i, p in enumerate(parents):
        if p >= 0:
            children[p].append(i)
    order = [root]
    for i in order:
        order.extend(children[i])
    return order


def bone_lengths(pose: np.ndarray, skeleton: Skeleton) -> np.ndarray:
    parents = skeleton.parents()
    return np.array([np.linalg.norm(pose[i] - pose[p]) for i, p in enumerate(parents) if p >= 0])
