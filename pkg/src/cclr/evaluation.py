"""AUROC, per-timestep loss profiles and single-step reconstructions."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import torch
from scipy.stats import rankdata

from cclr.data import Dataset
from cclr.errors import ArgumentError, ConfigError, DataError
from cclr.rng import numpy_generator, torch_generator
from cclr.schedule import NoiseSchedule, noise_sample
from cclr.scoring import SweepScores, format_fraction, parse_fraction, score_sweep
from cclr.training import timestep_weight

TABLE_SWEEP = ("1/2", "1/3", "1/5", "1/10", "1/20")
BASELINE = "elbo_full"


def _finite_array(values, name) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ArgumentError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ArgumentError(f"{name} contains non-finite values")
    return arr


def auroc(positive_scores, negative_scores) -> float:
    """P(random positive > random negative), ties counted as one half.

    Computed from the Mann-Whitney rank sum with average ranks for ties.
    """
    pos = _finite_array(positive_scores, "positive_scores")
    neg = _finite_array(negative_scores, "negative_scores")
    ranks = rankdata(np.concatenate([pos, neg]), method="average")
    n_pos, n_neg = pos.size, neg.size
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class LossProfile:
    label: str
    centers: np.ndarray
    means: np.ndarray
    stderrs: np.ndarray

    def __iter__(self):
        return iter(zip(self.centers, self.means, self.stderrs))


def bin_centers(num_bins: int) -> np.ndarray:
    return (np.arange(num_bins) + 0.5) / num_bins


def _bin_timesteps(T: int, num_bins: int) -> list[np.ndarray]:
    edges = np.floor(np.arange(num_bins + 1) * T / num_bins).astype(int)
    bins = [np.arange(edges[j], edges[j + 1]) for j in range(num_bins)]
    if any(len(b) == 0 for b in bins):
        raise ConfigError(f"num_bins={num_bins} exceeds T={T}")
    return bins


@torch.no_grad()
def loss_profile(
    model,
    schedule: NoiseSchedule,
    dataset: Dataset,
    num_bins: int = 20,
    samples_per_bin: int = 200,
    seed: int = 0,
    weighted: bool = False,
) -> LossProfile:
    """Mean per-pixel L1 noise residual in each ``t/T`` bin.

    Each bin draws ``samples_per_bin`` (image, t, eps) triples from a stream
    keyed by ``(seed, label, bin)``.
    """
    if len(dataset) == 0:
        raise DataError(f"dataset {dataset.label!r} is empty")
    if num_bins < 1 or samples_per_bin < 2:
        raise ConfigError("need num_bins >= 1 and samples_per_bin >= 2")
    images = torch.from_numpy(np.ascontiguousarray(dataset.images))
    means, errs = [], []
    for j, steps in enumerate(_bin_timesteps(schedule.T, num_bins)):
        pick = numpy_generator(seed, dataset.label, "profile", j)
        idx = pick.integers(0, len(images), samples_per_bin)
        t = torch.from_numpy(pick.choice(steps, samples_per_bin))
        x0 = images[idx]
        eps = torch.randn(x0.shape, generator=torch_generator(seed, dataset.label, "profile", j), dtype=x0.dtype)
        x_t = noise_sample(schedule, x0, t, eps)
        loss = (model(x_t, t) - eps).abs().flatten(1).mean(dim=1).double()
        if weighted:
            loss = loss * timestep_weight(t.double(), schedule.T)
        loss = loss.numpy()
        means.append(loss.mean())
        errs.append(loss.std(ddof=1) / math.sqrt(len(loss)))
    return LossProfile(dataset.label, bin_centers(num_bins), np.array(means), np.array(errs))


def write_profile_csv(path, profiles) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_center", "label", "mean", "stderr"])
        for prof in profiles:
            for c, m, e in prof:
                writer.writerow([repr(float(c)), prof.label, repr(float(m)), repr(float(e))])


@dataclass
class Reconstruction:
    x_t: np.ndarray
    x0_hat: np.ndarray
    loss_map: np.ndarray


@torch.no_grad()
def single_step_reconstruct(model, schedule: NoiseSchedule, x0, t: int, generator=None, eps=None) -> Reconstruction:
    """Noise ``x0`` to step ``t`` and invert the forward process in one step
    using the predicted noise."""
    if not (0 <= int(t) <= schedule.T - 1):
        raise ArgumentError(f"t must lie in [0, {schedule.T - 1}], got {t}")
    x0 = torch.as_tensor(x0)
    single = x0.ndim == 3
    if single:
        x0 = x0.unsqueeze(0)
    ts = torch.full((x0.shape[0],), int(t), dtype=torch.int64)
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = noise_sample(schedule, x0, ts, eps)
    eps_hat = model(x_t, ts)
    a = float(schedule.signal_coef(int(t)))
    b = float(schedule.noise_coef(int(t)))
    x0_hat = ((x_t - b * eps_hat) / a).clamp(-1.0, 1.0)
    loss_map = (eps_hat - eps).abs()
    out = [v.numpy() for v in (x_t, x0_hat, loss_map)]
    if single:
        out = [v[0] for v in out]
    return Reconstruction(*out)


@dataclass
class EvalReport:
    """AUROC of one score against ID-as-positive, plus the scores behind it."""

    name: str
    auroc: float
    id_scores: np.ndarray
    ood_scores: np.ndarray
    k_over_T: Fraction | None = None

    def __post_init__(self):
        if len(self.id_scores) == 0 or len(self.ood_scores) == 0:
            raise ArgumentError("EvalReport needs nonempty score lists")
        if not 0.0 <= self.auroc <= 1.0:
            raise ArgumentError(f"auroc out of range: {self.auroc}")


def column_name(k_over_T: Fraction | None) -> str:
    return BASELINE if k_over_T is None else f"cclr_{format_fraction(k_over_T)}"


def reports_from_scores(id_scores: SweepScores, ood_scores: SweepScores, sweep) -> list[EvalReport]:
    """Baseline first (ID score = -elbo_full), then one report per ``k/T``."""
    reports = [
        EvalReport(
            BASELINE,
            auroc(-id_scores.elbo_full, -ood_scores.elbo_full),
            -id_scores.elbo_full,
            -ood_scores.elbo_full,
        )
    ]
    for k in sweep:
        k = parse_fraction(k)
        a, b = id_scores.cclr(k), ood_scores.cclr(k)
        reports.append(EvalReport(column_name(k), auroc(a, b), a, b, k))
    return reports


@dataclass
class Experiment:
    reports: list[EvalReport]
    id_scores: SweepScores
    ood_scores: SweepScores
    sweep: list[Fraction]
    meta: dict = field(default_factory=dict)

    def auroc_table(self) -> dict[str, float]:
        return {r.name: r.auroc for r in self.reports}


def run_experiment(
    model,
    schedule: NoiseSchedule,
    id_set: Dataset,
    ood_set: Dataset,
    sweep=TABLE_SWEEP,
    n_bs: int = 100,
    seed: int = 0,
    combine: str = "normalized_logsumexp",
    threads: int = 1,
) -> Experiment:
    if len(id_set) == 0 or len(ood_set) == 0:
        raise DataError("both ID and OOD sets must be nonempty")
    sweep = [parse_fraction(k) for k in sweep]
    id_scores = score_sweep(model, schedule, id_set.images, sweep, n_bs, seed, combine, threads)
    # OOD rows take stream keys after the ID rows so no two samples share noise.
    ood_keys = range(len(id_set), len(id_set) + len(ood_set))
    ood_scores = score_sweep(model, schedule, ood_set.images, sweep, n_bs, seed, combine, threads, indices=ood_keys)
    meta = {
        "seed": seed,
        "n_bs": n_bs,
        "T": schedule.T,
        "s": schedule.s,
        "combine": combine,
        "n_id": len(id_set),
        "n_ood": len(ood_set),
        "id_label": id_set.label,
        "ood_label": ood_set.label,
    }
    return Experiment(reports_from_scores(id_scores, ood_scores, sweep), id_scores, ood_scores, sweep, meta)


def write_report_json(path, experiment: Experiment, config_echo: dict | None = None) -> None:
    doc = {
        "auroc": experiment.auroc_table(),
        "sweep": [format_fraction(k) for k in experiment.sweep],
        "meta": experiment.meta,
        "config": config_echo or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_summary_csv(path, experiment: Experiment) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([r.name for r in experiment.reports])
        writer.writerow([repr(r.auroc) for r in experiment.reports])


def write_sweep_samples_csv(path, experiment: Experiment) -> None:
    """Long format: one row per (sample, k/T)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "label", "k_over_T", "elbo_full", "elbo_partial", "cclr", "ood_score"])
        offset = 0
        for label, scores in (("ID", experiment.id_scores), ("OOD", experiment.ood_scores)):
            for k in experiment.sweep:
                for i, (full, part) in enumerate(zip(scores.elbo_full, scores.elbo_partial[k])):
                    cclr = part - full
                    writer.writerow(
                        [offset + i, label, format_fraction(k), repr(float(full)), repr(float(part)), repr(float(cclr)), repr(float(-cclr))]
                    )
            offset += len(scores.elbo_full)
