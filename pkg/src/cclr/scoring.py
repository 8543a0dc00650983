"""Per-sample ELBO estimates and the complexity-corrected likelihood ratio.

For one image ``x0`` the inference batch holds ``n_bs`` copies noised at
evenly spaced timesteps ``ts`` over ``[0, T-1]`` with weights
``w = linspace(0.5, 1.5, n_bs)``.

* full ELBO: ``mean(w * losses)`` for one pass over all slots.
* partial ELBO: ``n = T/k`` passes, combined per slot across passes, then
  ``mean(w[:m] * combined[:m])`` with ``m = floor(n_bs * k/T)``, the slots
  with ``t < k``.
* ``cclr = partial - full``; higher means more in-distribution.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch
from scipy.special import logsumexp

from cclr.errors import ArgumentError, ConfigError, DataError, DivergenceError
from cclr.rng import torch_generator
from cclr.schedule import NoiseSchedule, noise_sample

COMBINE_MODES = ("normalized_logsumexp", "logsumexp", "mean")


def parse_fraction(value) -> Fraction:
    """Parse ``"1/5"``-style rationals; floats go through their decimal text."""
    if isinstance(value, Fraction):
        return value
    try:
        if isinstance(value, float):
            return Fraction(repr(value))
        return Fraction(str(value).strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot parse k/T value {value!r}") from exc


def format_fraction(frac: Fraction) -> str:
    return f"{frac.numerator}/{frac.denominator}"


@dataclass(frozen=True)
class ScoreConfig:
    k_over_T: Fraction = Fraction(1, 5)
    n_bs: int = 100
    seed: int = 0
    combine: str = "normalized_logsumexp"

    def __post_init__(self):
        object.__setattr__(self, "k_over_T", parse_fraction(self.k_over_T))
        self.validate()

    def validate(self) -> None:
        k = self.k_over_T
        if not (0 < k <= 1):
            raise ConfigError(f"k/T must lie in (0, 1], got {k}")
        if k.numerator != 1:
            raise ConfigError(f"T/k must be an integer number of passes, got k/T = {k}")
        if self.n_bs < 2:
            raise ConfigError(f"n_bs must be >= 2, got {self.n_bs}")
        if self.n_bs * k < 1:
            raise ConfigError(f"n_bs * k/T must be >= 1 (n_bs={self.n_bs}, k/T={k})")
        if self.combine not in COMBINE_MODES:
            raise ConfigError(f"combine must be one of {COMBINE_MODES}, got {self.combine!r}")

    @property
    def n_passes(self) -> int:
        return self.k_over_T.denominator

    @property
    def prefix_length(self) -> int:
        return math.floor(self.n_bs * self.k_over_T)


@dataclass(frozen=True)
class ScoreResult:
    elbo_full: float
    elbo_partial: float
    cclr: float

    @classmethod
    def from_terms(cls, full: float, partial: float) -> "ScoreResult":
        return cls(float(full), float(partial), float(partial) - float(full))


def inference_timesteps(T: int, n_bs: int) -> np.ndarray:
    """``round(i * (T-1) / (n_bs-1))`` for ``i = 0 .. n_bs-1``, rounding half up."""
    i = np.arange(n_bs, dtype=np.float64)
    return np.floor(i * (T - 1) / (n_bs - 1) + 0.5).astype(np.int64)


def inference_weights(n_bs: int) -> np.ndarray:
    return np.linspace(0.5, 1.5, n_bs)


def combine_passes(losses: np.ndarray, how: str = "normalized_logsumexp") -> np.ndarray:
    """Reduce an ``(n, n_bs)`` stack of per-pass losses along the pass axis."""
    losses = np.asarray(losses, dtype=np.float64)
    if how == "normalized_logsumexp":
        return logsumexp(losses, axis=0) - math.log(losses.shape[0])
    if how == "logsumexp":
        return logsumexp(losses, axis=0)
    if how == "mean":
        return losses.mean(axis=0)
    raise ConfigError(f"unknown combine mode {how!r}")


def full_elbo_from_losses(losses, weights=None) -> float:
    losses = np.asarray(losses, dtype=np.float64)
    w = inference_weights(len(losses)) if weights is None else weights
    return float(np.mean(w * losses))


def partial_elbo_from_losses(losses, prefix: int, how: str = "normalized_logsumexp", weights=None) -> float:
    losses = np.atleast_2d(np.asarray(losses, dtype=np.float64))
    w = inference_weights(losses.shape[1]) if weights is None else weights
    combined = combine_passes(losses, how)
    return float(np.mean(w[:prefix] * combined[:prefix]))


@torch.no_grad()
def diffuse_losses(model, schedule: NoiseSchedule, xs, ts, generator: torch.Generator, keep: int | None = None) -> np.ndarray:
    """Per-row mean absolute error between predicted and injected noise.

    Noise is drawn for every row so the stream position does not depend on
    ``keep``; the model is only evaluated on the first ``keep`` rows.
    """
    ts = torch.as_tensor(np.asarray(ts), dtype=torch.int64)
    if ts.ndim != 1 or ts.shape[0] != xs.shape[0]:
        raise ArgumentError(f"ts has {tuple(ts.shape)} entries for {xs.shape[0]} rows")
    eps = torch.randn(xs.shape, generator=generator, dtype=xs.dtype)
    keep = xs.shape[0] if keep is None else keep
    xs, ts, eps = xs[:keep], ts[:keep], eps[:keep]
    x_t = noise_sample(schedule, xs, ts, eps)
    residual = (model(x_t, ts) - eps).abs().flatten(1).mean(dim=1)
    return residual.to(torch.float64).numpy()


def expand(x0, n_bs: int) -> torch.Tensor:
    x0 = torch.as_tensor(x0)
    if x0.ndim != 3:
        raise ArgumentError(f"expected a single C x H x W image, got shape {tuple(x0.shape)}")
    return x0.unsqueeze(0).expand(n_bs, *x0.shape).contiguous()


def full_stream(seed: int, index: int) -> torch.Generator:
    return torch_generator(seed, index, "full")


def partial_stream(seed: int, index: int, n_passes: int) -> torch.Generator:
    return torch_generator(seed, index, "partial", n_passes)


def elbo_full(model, schedule: NoiseSchedule, x0, config: ScoreConfig, generator=None, index: int = 0) -> float:
    if generator is None:
        generator = full_stream(config.seed, index)
    xs = expand(x0, config.n_bs)
    ts = inference_timesteps(schedule.T, config.n_bs)
    return full_elbo_from_losses(diffuse_losses(model, schedule, xs, ts, generator))


def elbo_partial(model, schedule: NoiseSchedule, x0, config: ScoreConfig, generator=None, index: int = 0) -> float:
    if generator is None:
        generator = partial_stream(config.seed, index, config.n_passes)
    xs = expand(x0, config.n_bs)
    ts = inference_timesteps(schedule.T, config.n_bs)
    m = config.prefix_length
    passes = [diffuse_losses(model, schedule, xs, ts, generator, keep=m) for _ in range(config.n_passes)]
    w = inference_weights(config.n_bs)
    return partial_elbo_from_losses(np.stack(passes), m, config.combine, weights=w)


def _check_finite(result: ScoreResult, index: int) -> ScoreResult:
    if not all(math.isfinite(v) for v in (result.elbo_full, result.elbo_partial, result.cclr)):
        raise DivergenceError(f"non-finite score for sample {index}: {result}")
    return result


def cclr_score(model, schedule: NoiseSchedule, x0, config: ScoreConfig, index: int = 0) -> ScoreResult:
    """Score one image with noise streams keyed by ``(config.seed, index)``."""
    full = elbo_full(model, schedule, x0, config, index=index)
    partial = elbo_partial(model, schedule, x0, config, index=index)
    return _check_finite(ScoreResult.from_terms(full, partial), index)


def _as_tensor_images(images):
    if isinstance(images, torch.Tensor):
        return images
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))


def _parallel_map(fn, n: int, threads: int):
    if threads <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n)))


def score_dataset(model, schedule: NoiseSchedule, images, config: ScoreConfig, threads: int = 1, indices=None) -> list[ScoreResult]:
    """Score every image in order. ``indices`` overrides the stream key of
    each image; by default the key is its position."""
    images = _as_tensor_images(images)
    if len(images) == 0:
        raise DataError("no images to score")
    keys = list(range(len(images))) if indices is None else list(indices)
    if len(keys) != len(images):
        raise ArgumentError("indices must match the number of images")
    return _parallel_map(lambda i: cclr_score(model, schedule, images[i], config, keys[i]), len(images), threads)


@dataclass
class SweepScores:
    """Scores of one image set for several thresholds sharing one full-ELBO pass."""

    elbo_full: np.ndarray
    elbo_partial: dict[Fraction, np.ndarray]

    def cclr(self, k_over_T: Fraction) -> np.ndarray:
        return self.elbo_partial[k_over_T] - self.elbo_full

    def results(self, k_over_T: Fraction) -> list[ScoreResult]:
        return [
            ScoreResult.from_terms(f, p) for f, p in zip(self.elbo_full, self.elbo_partial[k_over_T])
        ]


def score_sweep(
    model,
    schedule: NoiseSchedule,
    images,
    sweep,
    n_bs: int = 100,
    seed: int = 0,
    combine: str = "normalized_logsumexp",
    threads: int = 1,
    indices=None,
) -> SweepScores:
    """Equivalent to ``score_dataset`` for each ``k/T`` in ``sweep``, with the
    full ELBO computed once per image."""
    images = _as_tensor_images(images)
    if len(images) == 0:
        raise DataError("no images to score")
    configs = [ScoreConfig(parse_fraction(k), n_bs, seed, combine) for k in sweep]
    base = configs[0] if configs else ScoreConfig(1, n_bs, seed, combine)
    keys = list(range(len(images))) if indices is None else list(indices)

    def one(i):
        full = elbo_full(model, schedule, images[i], base, index=keys[i])
        parts = [elbo_partial(model, schedule, images[i], c, index=keys[i]) for c in configs]
        for c, p in zip(configs, parts):
            _check_finite(ScoreResult.from_terms(full, p), keys[i])
        return full, parts

    rows = _parallel_map(one, len(images), threads)
    full = np.array([r[0] for r in rows])
    partial = {c.k_over_T: np.array([r[1][j] for r in rows]) for j, c in enumerate(configs)}
    return SweepScores(full, partial)
