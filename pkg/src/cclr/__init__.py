"""Likelihood-ratio OOD detection with a discrete-time denoising diffusion model."""

from cclr.errors import ArgumentError, ConfigError, DataError, DivergenceError
from cclr.schedule import NoiseSchedule, build_cosine_schedule, noise_sample

__all__ = [
    "ArgumentError",
    "ConfigError",
    "DataError",
    "DivergenceError",
    "NoiseSchedule",
    "build_cosine_schedule",
    "noise_sample",
]

__version__ = "0.1.0"
