"""Shared test stubs and oracles."""

import math
DEBUG = False

import numpy as np
import torch
import torch.nn as nn

from cclr.schedule import build_cosine_schedule, noise_sample


class OracleStub(nn.Module):
    """Recovers the injected noise exactly from x_t, given the true x0.

    Running with ``x0`` fixed makes ``eps_hat = (x_t - a x0) / b``, so the
    residual is zero up to rounding.
    """

    def __init__(self, schedule, x0):
        super().__init__()
        self.schedule = schedule
        self.x0 = torch.as_tensor(x0)

    def forward(self, x_t, t):
        a = torch.as_tensor(np.sqrt(self.schedule.alpha_bar[t.numpy() + 1]), dtype=x_t.dtype)
        b = torch.as_tensor(np.sqrt(1 - self.schedule.alpha_bar[t.numpy() + 1]), dtype=x_t.dtype)
        x0 = self.x0.to(x_t.dtype).expand_as(x_t)
        return (x_t - a[:, None, None, None] * x0) / b[:, None, None, None]


class ZeroStub(nn.Module):
    def forward(self, x_t, t):
        return torch.zeros_like(x_t)


class EpsRecorder(nn.Module):
    """Returns whatever ``eps`` the test sets, ignoring the input."""

    def __init__(self):
        super().__init__()
        self.eps = None

    def forward(self, x_t, t):
        return self.eps


def randomize_parameters(model, seed=0, scale=1.0):
    """Re-draw every parameter so that no gradient is trivially zero."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            fan_in = p[0].numel() if p.ndim > 1 else p.numel()
            bound = scale / math.sqrt(fan_in)
            p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
    return model


def l1_training_loss(model, x0, t, eps, schedule):
    x_t = noise_sample(schedule, x0, t, eps)
    return (model(x_t, t) - eps).abs().mean()


def directional_fd_check(model, seed=0, h=1e-5, batch=2):
    """Per-parameter relative error between the analytic directional
    derivative and a central finite difference of the L1 loss."""
    cfg = model.config
    gen = torch.Generator().manual_seed(seed)
    schedule = build_cosine_schedule(100)
    shape = (batch, cfg.image_channels, cfg.image_size, cfg.image_size)
    x0 = torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1
    eps = torch.randn(shape, generator=gen, dtype=torch.float64)
    t = torch.randint(0, 100, (batch,), generator=gen)

    model.zero_grad()
    l1_training_loss(model, x0, t, eps, schedule).backward()
    errors = {}
    for name, p in model.named_parameters():
        direction = torch.randn(p.shape, generator=gen, dtype=torch.float64)
        direction /= direction.norm()
        analytic = float((p.grad * direction).sum())
        with torch.no_grad():
            orig = p.detach().clone()
            p.copy_(orig + h * direction)
            up = float(l1_training_loss(model, x0, t, eps, schedule))
            p.copy_(orig - h * direction)
            down = float(l1_training_loss(model, x0, t, eps, schedule))
            p.copy_(orig)
        numeric = (up - down) / (2 * h)
        # Floor keeps round-off on structurally zero gradients (a bias feeding a
        # one-channel group norm) from reading as relative error.
        denom = max(abs(analytic), abs(numeric), 1e-7)
        errors[name] = abs(analytic - numeric) / denom
        if DEBUG: print(name, analytic, numeric, up, down)
    return errors
