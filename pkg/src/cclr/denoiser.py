"""Noise-prediction U-Net with sinusoidal time conditioning."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from cclr.errors import ArgumentError, ConfigError

MAX_GROUPS = 8


@dataclass(frozen=True)
class DenoiserConfig:
    base_features: int = 64
    multipliers: tuple[int, ...] = (1, 2, 4, 8)
    image_channels: int = 1
    image_size: int = 32
    time_embed_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "multipliers", tuple(int(m) for m in self.multipliers))
        self.validate()

    def validate(self) -> None:
        if self.base_features < 1:
            raise ConfigError("base_features must be positive")
        if not self.multipliers or any(m < 1 for m in self.multipliers):
            raise ConfigError("multipliers must be a nonempty list of positive integers")
        if self.image_channels not in (1, 3):
            raise ConfigError(f"image_channels must be 1 or 3, got {self.image_channels}")
        size = self.image_size
        if size < 8 or size & (size - 1):
            raise ConfigError(f"image_size must be a power of two >= 8, got {size}")
        if size >> (len(self.multipliers) - 1) < 4:
            raise ConfigError(
                f"{len(self.multipliers)} levels take {size}x{size} below 4x4"
            )
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be a positive even integer")

    @property
    def level_channels(self) -> list[int]:
        return [self.base_features * m for m in self.multipliers]

    @property
    def level_resolutions(self) -> list[int]:
        return [self.image_size >> i for i in range(len(self.multipliers))]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["multipliers"] = list(self.multipliers)
        return d


def time_embedding(t, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding: ``[sin(t * f_j), cos(t * f_j)]`` with
    ``f_j = max_period ** (-j / half)`` for ``j = 0 .. half-1``."""
    if dim < 2 or dim % 2:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    t = torch.as_tensor(t)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _groups(channels: int) -> int:
    return math.gcd(channels, MAX_GROUPS)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        # Added after the norm: narrow groups would otherwise cancel the offset.
        h = self.norm2(h) + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class UNet(nn.Module):
    """Residual U-Net: one block per resolution level going down, a middle
    block, and one block per level coming back up on concatenated skips."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        chans = config.level_channels
        d = config.time_embed_dim
        temb_dim = 4 * d
        self.time_mlp = nn.Sequential(nn.Linear(d, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(config.image_channels, config.base_features, 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        prev = config.base_features
        for i, ch in enumerate(chans):
            self.down_blocks.append(ResBlock(prev, ch, temb_dim))
            if i < len(chans) - 1:
                self.downsamples.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            prev = ch

        self.mid = ResBlock(prev, prev, temb_dim)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(len(chans))):
            ch = chans[i]
            self.up_blocks.append(ResBlock(prev + ch, ch, temb_dim))
            if i > 0:
                self.upsamples.append(nn.Conv2d(ch, ch, 3, padding=1))
            prev = ch

        self.norm_out = nn.GroupNorm(_groups(prev), prev)
        self.conv_out = nn.Conv2d(prev, config.image_channels, 3, padding=1)

    def forward(self, x, t):
        temb = self.time_mlp(time_embedding(t, self.config.time_embed_dim).to(x.dtype))
        h = self.conv_in(x)
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, temb)
            skips.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)
        h = self.mid(h, temb)
        for j, block in enumerate(self.up_blocks):
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
            if j < len(self.upsamples):
                h = self.upsamples[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


def _reset_parameters(model: UNet, generator: torch.Generator) -> None:
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            fan_in = module.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                module.weight.uniform_(-bound, bound, generator=generator)
                module.bias.uniform_(-bound, bound, generator=generator)
        elif isinstance(module, nn.GroupNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)
    nn.init.zeros_(model.conv_out.weight)
    nn.init.zeros_(model.conv_out.bias)


def init_model(config: DenoiserConfig, seed: int) -> UNet:
    config.validate()
    model = UNet(config)
    gen = torch.Generator().manual_seed(int(seed))
    _reset_parameters(model, gen)
    return model


def expected_param_count(config: DenoiserConfig) -> int:
    """Closed-form parameter count of ``UNet(config)``."""

    def conv(i, o, k):
        return i * o * k * k + o

    def gn(c):
        return 2 * c

    def lin(i, o):
        return i * o + o

    def res(i, o, e):
        n = gn(i) + conv(i, o, 3) + lin(e, o) + gn(o) + conv(o, o, 3)
        return n + (conv(i, o, 1) if i != o else 0)

    d = config.time_embed_dim
    e = 4 * d
    chans = config.level_channels
    total = lin(d, e) + lin(e, e) + conv(config.image_channels, config.base_features, 3)
    prev = config.base_features
    for i, ch in enumerate(chans):
        total += res(prev, ch, e)
        if i < len(chans) - 1:
            total += conv(ch, ch, 3)
        prev = ch
    total += res(prev, prev, e)
    for i in reversed(range(len(chans))):
        ch = chans[i]
        total += res(prev + ch, ch, e)
        if i > 0:
            total += conv(ch, ch, 3)
        prev = ch
    return total + gn(prev) + conv(prev, config.image_channels, 3)


def predict_noise(model: UNet, x_t: torch.Tensor, t) -> torch.Tensor:
    cfg = model.config
    expected = (cfg.image_channels, cfg.image_size, cfg.image_size)
    if x_t.ndim != 4 or tuple(x_t.shape[1:]) != expected:
        raise ArgumentError(f"expected batch of shape (N, {expected}), got {tuple(x_t.shape)}")
    t = torch.as_tensor(t)
    if t.ndim != 1 or t.shape[0] != x_t.shape[0]:
        raise ArgumentError("t must have one entry per batch row")
    return model(x_t, t)


def parameter_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in model.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.detach().cpu().numpy()).tobytes())
    return h.hexdigest()
