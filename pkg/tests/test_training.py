import math

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from cclr.checkpoint import load_checkpoint
from cclr.data import Dataset
from cclr.denoiser import DenoiserConfig, init_model, parameter_checksum
from cclr.errors import ConfigError, DataError, DivergenceError
from cclr.schedule import build_cosine_schedule
from cclr.training import (
    TrainConfig,
    make_optimizer,
    noise_prediction_loss,
    sample_timesteps,
    timestep_weight,
    train,
    training_step,
)

from helpers import OracleStub, ZeroStub

TINY = DenoiserConfig(4, (1, 2), 1, 8, 8)


@pytest.fixture(scope="module")
def schedule():
    return build_cosine_schedule(50)


def const_set(n=64, value=0.5):
    return Dataset(np.full((n, 1, 8, 8), value, np.float32), "const")


def test_weight_endpoints_and_mean():
    T = 1000
    w = timestep_weight(np.arange(T), T)
    assert w[0] == 0.5 and w[-1] == 1.5
    assert abs(w.mean() - 1.0) < 1e-12


def test_oracle_loss_is_zero(schedule):
    x0 = torch.from_numpy(np.random.default_rng(0).uniform(-1, 1, (16, 1, 8, 8)))
    t = torch.arange(16) * 3
    eps = torch.randn(x0.shape, dtype=x0.dtype, generator=torch.Generator().manual_seed(0))

    class BatchOracle(torch.nn.Module):
        def forward(self, x_t, t):
            a = torch.as_tensor(np.sqrt(schedule.alpha_bar[t.numpy() + 1]))[:, None, None, None]
            return (x_t - a * x0) / torch.sqrt(1 - a**2)

    assert float(noise_prediction_loss(BatchOracle(), schedule, x0, t, eps)) == pytest.approx(0.0, abs=1e-10)


def test_zero_predictor_loss_is_mean_abs_normal(schedule):
    gen = torch.Generator().manual_seed(1)
    x0 = torch.zeros(512, 1, 16, 16)
    t = sample_timesteps(gen, 512, schedule.T)
    eps = torch.randn(x0.shape, generator=gen)
    loss = float(noise_prediction_loss(ZeroStub(), schedule, x0, t, eps, use_weight=False))
    # 131072 draws of |N(0,1)|: standard error ~ 0.0017
    assert loss == pytest.approx(math.sqrt(2 / math.pi), abs=0.006)


def test_uniform_timesteps_chi_square(schedule):
    gen = torch.Generator().manual_seed(0)
    t = sample_timesteps(gen, 50 * 400, schedule.T).numpy()
    counts = np.bincount(t, minlength=schedule.T)
    assert counts.size == schedule.T
    assert chisquare(counts).pvalue > 0.01


def test_training_step_deterministic(schedule):
    x0 = torch.from_numpy(np.random.default_rng(0).uniform(-1, 1, (8, 1, 8, 8)).astype(np.float32))
    runs = []
    for _ in range(2):
        model = init_model(TINY, 0)
        opt = make_optimizer(model, 1e-3)
        gen = torch.Generator().manual_seed(4)
        runs.append([training_step(model, opt, schedule, x0, gen) for _ in range(5)])
    assert runs[0] == runs[1]
    assert all(math.isfinite(v) for v in runs[0])


def test_zero_learning_rate_leaves_parameters(schedule):
    model = init_model(TINY, 0)
    before = parameter_checksum(model)
    opt = make_optimizer(model, 0.0)
    x0 = torch.zeros(4, 1, 8, 8)
    training_step(model, opt, schedule, x0, torch.Generator().manual_seed(0))
    assert parameter_checksum(model) == before


def test_divergence_raises(schedule):
    model = init_model(TINY, 0)
    with torch.no_grad():
        model.conv_out.bias.fill_(float("nan"))
    opt = make_optimizer(model, 1e-3)
    with pytest.raises(DivergenceError):
        training_step(model, opt, schedule, torch.zeros(2, 1, 8, 8), torch.Generator())


def test_constant_images_learned_quickly(schedule):
    # Initial loss is measured on a held-out slice before the first update.
    model = init_model(DenoiserConfig(8, (1, 2), 1, 8, 8), 0)
    cfg = TrainConfig(epochs=5, learning_rate=3e-3, batch_size=16)
    res = train(model, const_set(256), schedule, cfg, holdout=const_set(64))
    assert len(res.losses) == 5
    assert res.holdout_losses[0] == pytest.approx(math.sqrt(2 / math.pi), rel=0.05)
    assert res.holdout_losses[-1] < 0.25 * res.holdout_losses[0], res.holdout_losses


def test_loss_decreases_over_windows(schedule):
    model = init_model(TINY, 0)
    res = train(model, const_set(), schedule, TrainConfig(epochs=9, learning_rate=3e-3, batch_size=8))
    windows = np.convolve(res.losses, np.ones(3) / 3, mode="valid")
    assert np.all(np.diff(windows) < 0), windows


def test_holdout_loss_improves(schedule):
    model = init_model(TINY, 0)
    res = train(model, const_set(), schedule, TrainConfig(epochs=3, learning_rate=3e-3, batch_size=8), holdout=const_set(16))
    assert len(res.holdout_losses) == 4
    assert res.holdout_losses[-1] < res.holdout_losses[0]


@pytest.mark.parametrize("kwargs", [dict(epochs=0), dict(learning_rate=-1.0), dict(learning_rate=float("nan")), dict(batch_size=0)])
def test_bad_config_rejected(kwargs, schedule):
    with pytest.raises(ConfigError):
        train(init_model(TINY, 0), const_set(), schedule, TrainConfig(**kwargs))


def test_bad_dataset_rejected(schedule):
    with pytest.raises(DataError):
        train(init_model(TINY, 0), Dataset(np.zeros((0, 1, 8, 8), np.float32), "e"), schedule, TrainConfig(epochs=1))
    with pytest.raises(DataError):
        train(init_model(TINY, 0), Dataset(np.zeros((3, 1, 16, 16), np.float32), "big"), schedule, TrainConfig(epochs=1))


def test_same_seed_same_trajectory(schedule):
    data = Dataset(np.random.default_rng(0).uniform(-1, 1, (24, 1, 8, 8)).astype(np.float32), "r")
    cfg = TrainConfig(epochs=2, learning_rate=1e-3, batch_size=8, seed=3)
    a = train(init_model(TINY, 0), data, schedule, cfg)
    b = train(init_model(TINY, 0), data, schedule, cfg)
    assert a.losses == b.losses
    assert parameter_checksum(a.model) == parameter_checksum(b.model)


def test_resume_matches_uninterrupted(tmp_path, schedule):
    data = Dataset(np.random.default_rng(0).uniform(-1, 1, (24, 1, 8, 8)).astype(np.float32), "r")
    cfg = TrainConfig(epochs=4, learning_rate=1e-3, batch_size=8, seed=1, checkpoint_every=2)
    full = train(init_model(TINY, 0), data, schedule, cfg, out_dir=tmp_path / "a")
    resumed = train(init_model(TINY, 5), data, schedule, cfg, out_dir=tmp_path / "b", resume_from=tmp_path / "a" / "epoch_0002.ckpt")
    assert resumed.losses == full.losses[2:]
    assert parameter_checksum(resumed.model) == parameter_checksum(full.model)


def test_outputs_written(tmp_path, schedule):
    cfg = TrainConfig(epochs=2, learning_rate=1e-3, batch_size=16, checkpoint_every=1)
    train(init_model(TINY, 0), const_set(32), schedule, cfg, out_dir=tmp_path)
    assert (tmp_path / "epoch_0001.ckpt").exists() and (tmp_path / "epoch_0002.ckpt").exists()
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,mean_loss" and len(lines) == 3
    model, header, _ = load_checkpoint(tmp_path / "model.ckpt")
    assert header["schedule.T"] == 50 and header["train.epoch"] == 2
    assert model.config == TINY
