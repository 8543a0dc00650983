"""Cosine noise schedule and the closed-form forward noising process.

Timestep convention: noising steps are indexed ``t = 0 .. T-1``. Step ``t``
uses ``alpha_bar[t + 1]``, so every trained step carries nonzero noise and
``alpha_bar[0] == 1`` stays reserved for clean data.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from cclr.errors import ArgumentError, ConfigError

DEFAULT_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Precomputed float64 schedule tables.

    ``alpha_bar`` has ``T + 1`` entries and follows the cosine formula
    exactly. ``beta`` and ``alpha`` have ``T`` entries; ``beta[i]`` is the
    variance of the step taking ``alpha_bar[i]`` to ``alpha_bar[i + 1]``,
    clipped to ``MAX_BETA``.
    """

    T: int
    s: float
    alpha_bar: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        for arr in (self.alpha_bar, self.beta, self.alpha):
            arr.setflags(write=False)

    def signal_coef(self, t) -> np.ndarray:
        """``sqrt(alpha_bar)`` for noising step(s) ``t``."""
        return np.sqrt(self.alpha_bar[np.asarray(t) + 1])

    def noise_coef(self, t) -> np.ndarray:
        """``sqrt(1 - alpha_bar)`` for noising step(s) ``t``."""
        return np.sqrt(1.0 - self.alpha_bar[np.asarray(t) + 1])

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "beta", "alpha", "alpha_bar"])
            writer.writerow([0, "", "", repr(float(self.alpha_bar[0]))])
            for i in range(self.T):
                writer.writerow(
                    [
                        i + 1,
                        repr(float(self.beta[i])),
                        repr(float(self.alpha[i])),
                        repr(float(self.alpha_bar[i + 1])),
                    ]
                )


def _cosine_f(t: np.ndarray, T: int, s: float) -> np.ndarray:
    return np.cos((t / T + s) / (1.0 + s) * (math.pi / 2)) ** 2


def build_cosine_schedule(T: int, s: float = DEFAULT_OFFSET) -> NoiseSchedule:
    if isinstance(T, bool) or not isinstance(T, (int, np.integer)) or T < 2:
        raise ConfigError(f"T must be an integer >= 2, got {T!r}")
    if not (isinstance(s, (int, float)) and math.isfinite(s) and s > 0):
        raise ConfigError(f"schedule offset s must be > 0, got {s!r}")
    T = int(T)
    steps = np.arange(T + 1, dtype=np.float64)
    f = _cosine_f(steps, T, float(s))
    alpha_bar = f / f[0]
    alpha_bar[0] = 1.0
    beta = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], 0.0, MAX_BETA)
    alpha = 1.0 - beta
    return NoiseSchedule(T=T, s=float(s), alpha_bar=alpha_bar, beta=beta, alpha=alpha)


def noise_sample(schedule: NoiseSchedule, x0, t, eps):
    """Draw ``x_t = sqrt(ab) * x0 + sqrt(1 - ab) * eps`` row by row.

    Works on numpy arrays or torch tensors; the result has the type and
    dtype of ``x0``. ``eps`` is supplied by the caller.
    """
    if tuple(x0.shape) != tuple(eps.shape):
        raise ArgumentError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    t_np = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if t_np.ndim != 1 or t_np.shape[0] != x0.shape[0]:
        raise ArgumentError(f"t must have one entry per batch row ({x0.shape[0]}), got shape {t_np.shape}")
    if t_np.size and (t_np.min() < 0 or t_np.max() > schedule.T - 1):
        raise ArgumentError(f"timesteps must lie in [0, {schedule.T - 1}]")
    bshape = (-1,) + (1,) * (x0.ndim - 1)
    a = schedule.signal_coef(t_np).reshape(bshape)
    b = schedule.noise_coef(t_np).reshape(bshape)
    if isinstance(x0, torch.Tensor):
        a = torch.as_tensor(a, dtype=x0.dtype, device=x0.device)
        b = torch.as_tensor(b, dtype=x0.dtype, device=x0.device)
    else:
        a = a.astype(x0.dtype, copy=False)
        b = b.astype(x0.dtype, copy=False)
    return a * x0 + b * eps
