"""Dataset loaders, preprocessing and synthetic complexity pairs.

Images are held as float32 arrays of shape ``(N, C, H, W)`` scaled to
``[-1, 1]``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cclr.errors import ArgumentError, ConfigError, DataError
from cclr.rng import numpy_generator

IDX_IMAGE_MAGIC = 0x00000803
CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE
LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclass
class Dataset:
    images: np.ndarray
    label: str

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if self.images.shape[1] not in (1, 3):
            raise DataError(f"images must have 1 or 3 channels, got {self.images.shape[1]}")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def size(self) -> int:
        return self.images.shape[2]

    def subset(self, indices) -> "Dataset":
        return Dataset(self.images[np.asarray(indices)], self.label)


def bytes_to_unit(pixels: np.ndarray) -> np.ndarray:
    """Map uint8 ``0..255`` onto ``[-1, 1]``."""
    return (pixels.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def unit_to_bytes(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((images.astype(np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def _check_limit(limit):
    if limit is not None and limit < 1:
        raise ConfigError(f"limit must be positive, got {limit}")


def load_idx(images_path, limit: int | None = None, label: str | None = None) -> Dataset:
    _check_limit(limit)
    path = Path(images_path)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot open dataset {path}: {exc}") from exc
    with fh:
        head = fh.read(16)
        if len(head) < 16:
            raise DataError(f"{path}: truncated IDX header ({len(head)} bytes)")
        magic, count, rows, cols = struct.unpack(">IIII", head)
        if magic != IDX_IMAGE_MAGIC:
            raise DataError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
        if rows == 0 or cols == 0:
            raise DataError(f"{path}: zero image dimension {rows}x{cols}")
        n = count if limit is None else min(count, limit)
        want = n * rows * cols
        payload = fh.read(want)
    if len(payload) < want:
        raise DataError(f"{path}: truncated payload at offset {16 + len(payload)}, expected {want} bytes")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(n, 1, rows, cols)
    return Dataset(bytes_to_unit(pixels), label or path.stem)


def write_idx(path, images: np.ndarray) -> None:
    """Write single-channel images in ``[-1, 1]`` as an IDX image file."""
    if images.ndim == 4:
        if images.shape[1] != 1:
            raise ArgumentError("IDX stores single-channel images only")
        images = images[:, 0]
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        fh.write(unit_to_bytes(images).tobytes())


def load_cifar_binary(path, limit: int | None = None, label: str | None = None) -> Dataset:
    """Read 3073-byte records: one label byte, then the R, G and B planes."""
    _check_limit(limit)
    path = Path(path)
    try:
        size = path.stat().st_size
    except OSError as exc:
        raise DataError(f"cannot open dataset {path}: {exc}") from exc
    if size == 0 or size % CIFAR_RECORD:
        whole = size // CIFAR_RECORD
        raise DataError(
            f"{path}: length {size} is not a multiple of {CIFAR_RECORD}; "
            f"partial record at offset {whole * CIFAR_RECORD}"
        )
    n = size // CIFAR_RECORD if limit is None else min(size // CIFAR_RECORD, limit)
    with open(path, "rb") as fh:
        raw = fh.read(n * CIFAR_RECORD)
    records = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    pixels = records[:, 1:].reshape(n, 3, CIFAR_SIDE, CIFAR_SIDE)
    return Dataset(bytes_to_unit(pixels), label or path.stem)


def write_cifar_binary(path, images: np.ndarray, labels=None) -> None:
    n = images.shape[0]
    if images.shape[1:] != (3, CIFAR_SIDE, CIFAR_SIDE):
        raise ArgumentError(f"CIFAR records hold 3x32x32 images, got {images.shape[1:]}")
    labels = np.zeros(n, dtype=np.uint8) if labels is None else np.asarray(labels, dtype=np.uint8)
    body = unit_to_bytes(images).reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(np.concatenate([labels[:, None], body], axis=1).tobytes())


def _bilinear_matrix(src: int, dst: int) -> np.ndarray:
    # Half-pixel centres, edge clamped, no antialiasing.
    m = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for i in range(dst):
        x = max((i + 0.5) * scale - 0.5, 0.0)
        lo = min(int(np.floor(x)), src - 1)
        hi = min(lo + 1, src - 1)
        frac = x - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def resize_bilinear(images: np.ndarray, size: int) -> np.ndarray:
    h, w = images.shape[-2:]
    if h == size and w == size:
        return images
    rows = _bilinear_matrix(h, size)
    cols = _bilinear_matrix(w, size)
    out = np.einsum("ih,nchw,jw->ncij", rows, images.astype(np.float64), cols)
    return out.astype(images.dtype)


def preprocess(dataset: Dataset, target_size: int, target_channels: int) -> Dataset:
    if target_size < 8:
        raise ConfigError(f"target_size must be >= 8, got {target_size}")
    if target_channels not in (1, 3):
        raise ConfigError(f"unsupported channel count {target_channels}")
    images = dataset.images
    if images.shape[1] != target_channels:
        if target_channels == 3:
            images = np.repeat(images, 3, axis=1)
        else:
            images = np.einsum("c,nchw->nhw", LUMA, images.astype(np.float64))[:, None]
            images = images.astype(np.float32)
    images = resize_bilinear(images, target_size)
    if images is dataset.images:
        return dataset
    return Dataset(np.clip(images, -1.0, 1.0).astype(np.float32), dataset.label)


def total_variation(images: np.ndarray) -> np.ndarray:
    """Per-image mean absolute difference between neighbouring pixels."""
    dx = np.abs(np.diff(images, axis=-1)).mean(axis=(-3, -2, -1))
    dy = np.abs(np.diff(images, axis=-2)).mean(axis=(-3, -2, -1))
    return dx + dy


BACKGROUND = -1.0


def _lowpass_field(rng, radius, size, cutoff):
    amp = np.exp(-0.5 * (radius / cutoff) ** 2)
    amp[0, 0] = 0.0
    field = np.fft.irfft2(amp * np.exp(1j * rng.uniform(0, 2 * np.pi, size=amp.shape)), s=(size, size))
    return field / field.std()


def _textures(rng: np.random.Generator, n: int, size: int, channels: int) -> np.ndarray:
    """Textured blobs on a flat background.

    A smooth random envelope thresholded at a random quantile picks the
    object region; inside it, a power-law random-phase field (slope drawn per
    image, so many images carry strong high-frequency energy) rides on a
    random level.
    """
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    radius = np.sqrt(fx**2 + fy**2)
    out = np.full((n, channels, size, size), BACKGROUND)
    for i in range(n):
        envelope = _lowpass_field(rng, radius, size, 0.08)
        mask = envelope > np.quantile(envelope, 1 - rng.uniform(0.5, 0.85))
        amp = 1.0 / (radius + 1.0 / size) ** rng.uniform(0.3, 1.0)
        amp[0, 0] = 0.0
        level = rng.uniform(-0.2, 0.5)
        for c in range(channels):
            phase = rng.uniform(0, 2 * np.pi, size=amp.shape)
            field = np.fft.irfft2(amp * np.exp(1j * phase), s=(size, size))
            field /= field.std()
            out[i, c][mask] = (level + 0.7 * field)[mask]
    return np.clip(out, -1.0, 1.0)


def _smooth(rng: np.random.Generator, n: int, size: int, channels: int) -> np.ndarray:
    """Two or three long bars, each a gentle linear ramp, on the same flat
    background as the textures."""
    coords = (np.arange(size) + 0.5) / size - 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    out = np.full((n, channels, size, size), BACKGROUND)
    for i in range(n):
        for _ in range(rng.integers(2, 4)):
            thick = rng.integers(2, 4)
            length = rng.integers(size // 2, size - 1)
            h, w = (thick, length) if rng.random() < 0.5 else (length, thick)
            y0 = rng.integers(0, size - h + 1)
            x0 = rng.integers(0, size - w + 1)
            theta = rng.uniform(0, 2 * np.pi)
            ramp = rng.uniform(0.0, 0.6) + rng.uniform(0.3, 1.0) * (np.cos(theta) * xx + np.sin(theta) * yy)
            out[i, :, y0 : y0 + h, x0 : x0 + w] = ramp[y0 : y0 + h, x0 : x0 + w]
    return np.clip(out, -1.0, 1.0)


def make_synthetic_pair(size: int, n_images: int, seed: int, channels: int = 1) -> tuple[Dataset, Dataset]:
    """Return ``(high, low)`` complexity sets sharing a flat -1 background.

    The shared background matters: without it the two sets differ mostly in
    their mean level and a small model never shows the low-noise loss
    inversion between them.
    """
    if size < 8:
        raise ConfigError(f"size must be >= 8, got {size}")
    if n_images < 1:
        raise ConfigError(f"n_images must be positive, got {n_images}")
    high_rng = numpy_generator(seed, "synthetic-high")
    low_rng = numpy_generator(seed, "synthetic-low")
    high = _textures(high_rng, n_images, size, channels).astype(np.float32)
    low = _smooth(low_rng, n_images, size, channels).astype(np.float32)
    return Dataset(high, "high_complexity"), Dataset(low, "low_complexity")
