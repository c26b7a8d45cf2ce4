"""Denoiser training loop and sampling-based prediction."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .denoiser import DenoiserModel
from .diffusion import DiffusionSchedule, SamplerConfig, q_sample, sample
from .evaluation import PoseRecord, root_relative

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    # "constant" or "cosine" (anneal to zero over the run)
    lr_schedule: str = "constant"
    # independent (t, noise) draws of each record inside one batch
    draws_per_record: int = 1
    # poses are divided by this (mm) before entering the network;
    # None picks the standard deviation of the training poses
    pose_scale: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def root_relative_2d(x: np.ndarray) -> np.ndarray:
    return x - x[..., :1, :]


def mse_loss(pred: nx.Tensor, target: np.ndarray) -> nx.Tensor:
    diff = nx.sub(pred, target)
    return nx.mean(nx.mul(diff, diff))


def stack_records(records: Sequence[PoseRecord], need_y: bool = True):
    x = np.stack([r.x for r in records])
    if not need_y:
        return x, None
    missing = [r.id for r in records if r.y is None]
    if missing:
        raise TrainingError(f"records without 3D ground truth: {missing[:5]}{' ...' if len(missing) > 5 else ''}")
    return x, np.stack([r.y for r in records])


def resolve_pose_scale(records: Sequence[PoseRecord], cfg: TrainConfig) -> float:
    if cfg.pose_scale is not None:
        return float(cfg.pose_scale)
    _, y = stack_records(records)
    std = float(root_relative(y).std())
    return std if std > 0 else 1.0


def train(model: DenoiserModel, records: Sequence[PoseRecord], schedule: DiffusionSchedule,
          cfg: TrainConfig, on_epoch: Callable[[int, float], None] | None = None) -> list[float]:
    """Fit ``model`` to predict clean poses from noised ones; returns mean loss per epoch.

    ``cfg.pose_scale`` must be resolved (see ``resolve_pose_scale``).
    """
    if cfg.pose_scale is None:
        raise ValueError("resolve the pose scale before training")
    x_all, y_all = stack_records(records)
    x_all = root_relative_2d(x_all) / cfg.pose_scale
    y_all = root_relative(y_all) / cfg.pose_scale
    n = len(records)
    rng = nx.make_rng(cfg.seed, 1)
    opt = nx.Adam(model.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    if cfg.lr_schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown lr schedule {cfg.lr_schedule!r}")
    steps_per_epoch = -(-n // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = np.repeat(order[start:start + cfg.batch_size], cfg.draws_per_record)
            y0, x = y_all[idx], x_all[idx]
            t = rng.integers(1, schedule.T + 1, size=len(idx))
            eps = rng.standard_normal(y0.shape)
            y_t = q_sample(y0, t, eps, schedule)
            if cfg.lr_schedule == "cosine":
                opt.lr = 0.5 * cfg.lr * (1 + math.cos(math.pi * step / total_steps))
            step += 1
            opt.zero_grad()
            loss = mse_loss(model.forward(y_t, x, t, mode="train"), y0)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch starting {start}")
            nx.backward(loss)
            opt.step()
            total += value * len(idx)
            count += len(idx)
        history.append(total / count)
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    return history


def predict(model: DenoiserModel, records: Sequence[PoseRecord], sampler: SamplerConfig,
            schedule: DiffusionSchedule, pose_scale: float) -> np.ndarray:
    """Sample hypotheses for every record; returns ``(N, H, J, 3)`` in mm."""
    x, _ = stack_records(records, need_y=False)
    x = root_relative_2d(x)

    def denoise(y_t, x_in, t):
        return model.forward(y_t, x_in, t, mode="eval").data

    return sample(denoise, x / pose_scale, sampler, schedule) * pose_scale
