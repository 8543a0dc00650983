"""Weighted L1 noise-prediction training."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from cclr.checkpoint import load_checkpoint, save_checkpoint
from cclr.data import Dataset
from cclr.denoiser import UNet
from cclr.errors import ConfigError, DataError, DivergenceError
from cclr.rng import numpy_generator, torch_generator
from cclr.schedule import NoiseSchedule, build_cosine_schedule, noise_sample

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 2.0e-5
    batch_size: int = 64
    seed: int = 0
    use_weight: bool = True
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")


@dataclass
class TrainResult:
    model: UNet
    losses: list[float] = field(default_factory=list)
    holdout_losses: list[float] = field(default_factory=list)


def timestep_weight(t, T: int):
    """Linear importance weight, 0.5 at ``t = 0`` rising to 1.5 at ``t = T - 1``."""
    return 0.5 + t / (T - 1)


def sample_timesteps(generator: torch.Generator, n: int, T: int) -> torch.Tensor:
    return torch.randint(0, T, (n,), generator=generator)


def noise_prediction_loss(predictor, schedule: NoiseSchedule, x0, t, eps, use_weight: bool = True):
    """Batch mean of the per-row mean absolute noise residual."""
    x_t = noise_sample(schedule, x0, t, eps)
    residual = (predictor(x_t, t) - eps).abs().flatten(1).mean(dim=1)
    if use_weight:
        residual = residual * timestep_weight(t.to(residual.dtype), schedule.T)
    return residual.mean()


def make_optimizer(model: UNet, learning_rate: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)


def training_step(model, optimizer, schedule: NoiseSchedule, x0, generator, use_weight=True) -> float:
    t = sample_timesteps(generator, x0.shape[0], schedule.T)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    optimizer.zero_grad(set_to_none=True)
    loss = noise_prediction_loss(model, schedule, x0, t, eps, use_weight)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite training loss {value}")
    loss.backward()
    optimizer.step()
    return value


@torch.no_grad()
def evaluate_loss(model, schedule: NoiseSchedule, images: np.ndarray, seed: int, use_weight=True, batch_size=256) -> float:
    """Mean loss over ``images`` with a fixed, seed-keyed draw of ``(t, eps)``."""
    gen = torch_generator(seed, "holdout")
    total = 0.0
    for start in range(0, len(images), batch_size):
        x0 = torch.from_numpy(images[start : start + batch_size])
        t = sample_timesteps(gen, x0.shape[0], schedule.T)
        eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        total += float(noise_prediction_loss(model, schedule, x0, t, eps, use_weight)) * x0.shape[0]
    return total / len(images)


def _optimizer_tensors(model: UNet, optimizer) -> tuple[dict, int]:
    tensors = {}
    step = 0
    names = {id(p): n for n, p in model.named_parameters()}
    for p in model.parameters():
        state = optimizer.state.get(p)
        if not state:
            continue
        n = names[id(p)]
        tensors[f"optim.exp_avg.{n}"] = state["exp_avg"].numpy()
        tensors[f"optim.exp_avg_sq.{n}"] = state["exp_avg_sq"].numpy()
        step = int(state["step"])
    return tensors, step


def _restore_optimizer(model: UNet, optimizer, extra: dict, step: int) -> None:
    for n, p in model.named_parameters():
        key = f"optim.exp_avg.{n}"
        if key not in extra:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(extra[key].copy()),
            "exp_avg_sq": torch.from_numpy(extra[f"optim.exp_avg_sq.{n}"].copy()),
        }


def save_training_checkpoint(path, model, optimizer, schedule: NoiseSchedule, config: TrainConfig, epoch: int) -> None:
    tensors, step = _optimizer_tensors(model, optimizer)
    header = {
        "schedule.T": schedule.T,
        "schedule.s": schedule.s,
        "train.epoch": epoch,
        "train.seed": config.seed,
        "train.learning_rate": config.learning_rate,
        "train.use_weight": config.use_weight,
        "train.optim_step": step,
    }
    save_checkpoint(path, model, header, tensors)


def schedule_from_header(header: dict) -> NoiseSchedule:
    try:
        return build_cosine_schedule(int(header["schedule.T"]), float(header["schedule.s"]))
    except KeyError as exc:
        raise DataError(f"checkpoint header lacks {exc}") from exc


def write_loss_csv(path, losses) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss"])
        for epoch, loss in enumerate(losses, start=1):
            writer.writerow([epoch, repr(float(loss))])


def train(
    model: UNet,
    dataset: Dataset,
    schedule: NoiseSchedule,
    config: TrainConfig,
    out_dir=None,
    holdout: Dataset | None = None,
    resume_from=None,
) -> TrainResult:
    """Train in place. Each epoch draws its shuffle, timesteps and noise from
    streams keyed by ``(seed, epoch)``, so resuming at an epoch boundary
    reproduces the uninterrupted run."""
    config.validate()
    if len(dataset) == 0:
        raise DataError("training dataset is empty")
    cfg = model.config
    if dataset.images.shape[1:] != (cfg.image_channels, cfg.image_size, cfg.image_size):
        raise DataError(
            f"dataset images {dataset.images.shape[1:]} do not match model input "
            f"({cfg.image_channels}, {cfg.image_size}, {cfg.image_size})"
        )
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    optimizer = make_optimizer(model, config.learning_rate)
    result = TrainResult(model)
    start_epoch = 0
    if resume_from is not None:
        loaded, header, extra = load_checkpoint(resume_from)
        model.load_state_dict(loaded.state_dict())
        _restore_optimizer(model, optimizer, extra, int(header.get("train.optim_step", 0)))
        start_epoch = int(header.get("train.epoch", 0))

    if holdout is not None:
        result.holdout_losses.append(evaluate_loss(model, schedule, holdout.images, config.seed, config.use_weight))

    images = dataset.images
    n = len(images)
    for epoch in range(start_epoch, config.epochs):
        model.train()
        order = numpy_generator(config.seed, "shuffle", epoch).permutation(n)
        gen = torch_generator(config.seed, "train", epoch)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            x0 = torch.from_numpy(images[order[start : start + config.batch_size]])
            batch_losses.append(training_step(model, optimizer, schedule, x0, gen, config.use_weight) * x0.shape[0])
        epoch_loss = sum(batch_losses) / n
        result.losses.append(epoch_loss)
        model.eval()
        if holdout is not None:
            result.holdout_losses.append(evaluate_loss(model, schedule, holdout.images, config.seed, config.use_weight))
        log.info("epoch %d/%d loss %.5f", epoch + 1, config.epochs, epoch_loss)
        if out_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_training_checkpoint(out_dir / f"epoch_{epoch + 1:04d}.ckpt", model, optimizer, schedule, config, epoch + 1)

    model.eval()
    if out_dir is not None:
        save_training_checkpoint(out_dir / "model.ckpt", model, optimizer, schedule, config, config.epochs)
        write_loss_csv(out_dir / "loss.csv", result.losses)
    return result
