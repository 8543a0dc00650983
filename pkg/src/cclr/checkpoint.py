"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"CCLRCKPT"                    8-byte magic
    u32 version
    u32 header length, header      UTF-8 ``key=value`` lines
    u32 tensor count
    per tensor:
        u16 name length, name      UTF-8
        u8 ndim, u32 * ndim dims
        float32 payload            row-major, little-endian
    u32 CRC-32 of every preceding byte

Header values are JSON-encoded so lists and booleans survive the round trip.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from cclr.denoiser import DenoiserConfig, UNet, init_model
from cclr.errors import DataError

MAGIC = b"CCLRCKPT"
VERSION = 1
_F32 = np.dtype("<f4")


def _encode_header(header: dict) -> bytes:
    lines = []
    for key in sorted(header):
        if "=" in key or "\n" in key:
            raise ValueError(f"bad header key {key!r}")
        lines.append(f"{key}={json.dumps(header[key], sort_keys=True)}")
    return "\n".join(lines).encode("utf-8")


def _decode_header(raw: bytes) -> dict:
    header = {}
    for line in raw.decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        header[key] = json.loads(value)
    return header


def write_container(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    hdr = _encode_header(header)
    parts += [struct.pack("<I", len(hdr)), hdr, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d.
        arr = np.asarray(arr, dtype=_F32)
        if not arr.flags.c_contiguous:
            arr = arr.copy()
        bname = name.encode("utf-8")
        parts.append(struct.pack("<H", len(bname)) + bname)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    payload = body + struct.pack("<I", zlib.crc32(body))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(payload)
        tmp.replace(path)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < 24 or data[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise DataError(f"{path}: checksum mismatch, file is corrupt")
    view = memoryview(data)[:-4]
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise DataError(f"{path}: truncated at offset {pos}")
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    (version,) = take("<I")
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = take("<I")
    header = _decode_header(bytes(view[pos : pos + hlen]))
    pos += hlen
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = bytes(view[pos : pos + nlen]).decode("utf-8")
        pos += nlen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        nbytes = 4 * n
        if pos + nbytes > len(view):
            raise DataError(f"{path}: truncated tensor {name!r} at offset {pos}")
        tensors[name] = np.frombuffer(view[pos : pos + nbytes], dtype=_F32).reshape(shape).copy()
        pos += nbytes
    if pos != len(view):
        raise DataError(f"{path}: {len(view) - pos} trailing bytes")
    return header, tensors


def save_checkpoint(path, model: UNet, extra_header: dict | None = None, extra_tensors=None) -> None:
    header = {f"model.{k}": v for k, v in model.config.to_dict().items()}
    header.update(extra_header or {})
    tensors = {f"param.{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    tensors.update(extra_tensors or {})
    write_container(path, header, tensors)


def load_checkpoint(path) -> tuple[UNet, dict, dict[str, np.ndarray]]:
    """Return ``(model, header, non-parameter tensors)``."""
    header, tensors = read_container(path)
    try:
        cfg = DenoiserConfig(
            **{k[len("model.") :]: v for k, v in header.items() if k.startswith("model.")}
        )
    except TypeError as exc:
        raise DataError(f"{path}: bad model header: {exc}") from exc
    model = init_model(cfg, seed=0)
    state = {}
    extra = {}
    for name, arr in tensors.items():
        if name.startswith("param."):
            state[name[len("param.") :]] = torch.from_numpy(arr)
        else:
            extra[name] = arr
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise DataError(f"{path}: parameters do not match model config: {exc}") from exc
    return model, header, extra
