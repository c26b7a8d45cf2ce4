"""Cosine noise schedule, forward noising, DDIM-style reverse steps and
multi-hypothesis sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import make_rng

log = logging.getLogger(__name__)

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-timestep tables indexed by t = 0..T (entry 0 is the clean state)."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of [0, {self.T}]: {t}")
        return self.alpha_bars[t]


def cosine_schedule(T: int) -> DiffusionSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    steps = np.arange(T + 1, dtype=float)
    f = np.cos(((steps / T + COSINE_OFFSET) / (1 + COSINE_OFFSET)) * math.pi / 2) ** 2
    ratio = f / f[0]
    betas = np.minimum(1.0 - ratio[1:] / ratio[:-1], MAX_BETA)
    alphas = 1.0 - betas
    # recomputed from the clipped betas so that the tables stay consistent
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return DiffusionSchedule(
        T=T,
        betas=np.concatenate([[0.0], betas]),
        alphas=np.concatenate([[1.0], alphas]),
        alpha_bars=alpha_bars,
    )


def _per_sample(values: np.ndarray, like: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.ndim == 0:
        return values
    return values.reshape(values.shape + (1,) * (like.ndim - values.ndim))


def _check_t(t, schedule: DiffusionSchedule, lo: int = 1):
    t = np.asarray(t)
    if np.any(t < lo) or np.any(t > schedule.T):
        raise ValueError(f"timestep must lie in [{lo}, {schedule.T}], got {t}")
    return t


def q_sample(y0: np.ndarray, t, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """Noise a clean pose to timestep ``t`` (scalar or one per batch row)."""
    t = _check_t(t, schedule)
    ab = _per_sample(schedule.alpha_bars[t], y0)
    return np.sqrt(ab) * y0 + eps * np.sqrt(1.0 - ab)


def epsilon_hat(y_t: np.ndarray, y0_hat: np.ndarray, t, schedule: DiffusionSchedule) -> np.ndarray:
    """Noise implied by ``y_t`` given a clean-pose estimate."""
    t = _check_t(t, schedule)
    ab = _per_sample(schedule.alpha_bars[t], y_t)
    return (y_t - np.sqrt(ab) * y0_hat) / np.sqrt(1.0 - ab)


def sigma(t, t_next, schedule: DiffusionSchedule):
    t = _check_t(t, schedule)
    t_next = _check_t(t_next, schedule, lo=0)
    ab, ab_next = schedule.alpha_bars[t], schedule.alpha_bars[t_next]
    return np.sqrt((1.0 - ab_next) / (1.0 - ab)) * np.sqrt(1.0 - ab / ab_next)


def ddim_step(y_t: np.ndarray, y0_hat: np.ndarray, t: int, t_next: int, eps_draw: np.ndarray,
              schedule: DiffusionSchedule, radicand: str = "ddim") -> np.ndarray:
    """Move from timestep ``t`` to the earlier ``t_next``.

    ``radicand="ddim"`` scales the predicted noise by sqrt(1 - abar' - sigma^2),
    which keeps the marginal variance at 1 - abar'.  ``radicand="printed"``
    uses sqrt(1 + abar - sigma^2) instead, for comparison only.
    """
    if not t_next < t:
        raise ValueError(f"t_next ({t_next}) must be smaller than t ({t})")
    eps_t = epsilon_hat(y_t, y0_hat, t, schedule)
    sig = sigma(t, t_next, schedule)
    ab, ab_next = schedule.alpha_bars[t], schedule.alpha_bars[t_next]
    if radicand == "ddim":
        rad = 1.0 - ab_next - sig ** 2
    elif radicand == "printed":
        rad = 1.0 + ab - sig ** 2
    else:
        raise ValueError(f"unknown radicand variant {radicand!r}")
    if rad < 0:
        log.debug("negative radicand %.3e at t=%d -> %d, clamped to 0", rad, t, t_next)
    rad = max(rad, 0.0)
    return np.sqrt(ab_next) * y0_hat + eps_t * math.sqrt(rad) + sig * eps_draw


def iteration_schedule(T: int, K: int) -> list[tuple[int, int]]:
    """(t, t') pairs for K reverse iterations; the last t' is 0 (emit the estimate)."""
    if not 1 <= K <= T:
        raise ValueError(f"need 1 <= K <= T, got K={K}, T={T}")
    ts = [int(round(T * (1 - k / K))) for k in range(K)]
    if len(set(ts)) != len(ts) or min(ts) < 1:
        raise ValueError(f"timesteps collide after rounding for T={T}, K={K}: {ts}")
    return list(zip(ts, ts[1:] + [0]))


@dataclass(frozen=True)
class SamplerConfig:
    hypotheses: int = 1
    iterations: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.hypotheses < 1:
            raise ValueError(f"hypotheses must be >= 1, got {self.hypotheses}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")


Denoise = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def sample(denoise: Denoise, x: np.ndarray, config: SamplerConfig,
           schedule: DiffusionSchedule, radicand: str = "ddim") -> np.ndarray:
    """Draw ``H`` pose hypotheses per 2D input.

    ``denoise(y_t, x, t)`` maps batched arrays to clean-pose estimates.
    All hypotheses are stacked into one batch per iteration.  Hypothesis h
    draws its noise from its own stream keyed by ``(seed, h)``, so results do
    not depend on evaluation order.  Returns an array of shape ``(B, H, J, 3)``.
    """
    x = np.asarray(x, dtype=float)
    b, j = x.shape[:2]
    h = config.hypotheses
    steps = iteration_schedule(schedule.T, config.iterations)
    streams = [make_rng(config.seed, k) for k in range(h)]

    def draw():
        return np.stack([s.standard_normal((b, j, 3)) for s in streams], axis=1).reshape(h * b, j, 3)

    # rows ordered (batch, hypothesis)
    xs = np.repeat(x, h, axis=0)
    y = draw()
    y0_hat = None
    for t, t_next in steps:
        y0_hat = np.asarray(denoise(y, xs, np.full(b * h, t)), dtype=float)
        if t_next == 0:
            break
        y = ddim_step(y, y0_hat, t, t_next, draw(), schedule, radicand)
    return y0_hat.reshape(b, h, j, 3)

