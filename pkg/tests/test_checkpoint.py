import struct

import numpy as np
import pytest
import torch

from cclr.checkpoint import MAGIC, load_checkpoint, read_container, save_checkpoint, write_container
from cclr.denoiser import DenoiserConfig, init_model, parameter_checksum
from cclr.errors import DataError

from helpers import randomize_parameters


def test_container_round_trip(tmp_path):
    tensors = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "scalar": np.array(2.5, np.float32)}
    header = {"x": 3, "flag": True, "mults": [1, 2], "name": "a=b"}
    write_container(tmp_path / "c", header, tensors)
    got_header, got = read_container(tmp_path / "c")
    assert got_header == header
    assert set(got) == {"a", "scalar"}
    np.testing.assert_array_equal(got["a"], tensors["a"])
    assert got["scalar"].shape == ()


def test_layout_is_little_endian(tmp_path):
    write_container(tmp_path / "c", {}, {"v": np.array([1.0], np.float32)})
    raw = (tmp_path / "c").read_bytes()
    assert raw[:8] == MAGIC
    assert struct.unpack("<I", raw[8:12]) == (1,)
    assert raw[-8:-4] == struct.pack("<f", 1.0)


def test_model_round_trip(tmp_path):
    model = randomize_parameters(init_model(DenoiserConfig(4, (1, 2), 1, 8, 8), 0), seed=2).float()
    save_checkpoint(tmp_path / "m.ckpt", model, {"schedule.T": 50})
    loaded, header, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert parameter_checksum(loaded) == parameter_checksum(model)
    assert loaded.config == model.config
    assert header["schedule.T"] == 50 and extra == {}
    x = torch.randn(2, 1, 8, 8)
    with torch.no_grad():
        assert torch.equal(loaded(x, torch.tensor([1, 2])), model(x, torch.tensor([1, 2])))


@pytest.mark.parametrize("offset", [9, 40, -20, -1])
def test_corruption_detected(tmp_path, offset):
    model = init_model(DenoiserConfig(4, (1, 2), 1, 8, 8), 0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    raw = bytearray(path.read_bytes())
    raw[offset] ^= 0x10
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_truncation_detected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, init_model(DenoiserConfig(4, (1, 2), 1, 8, 8), 0))
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_not_a_checkpoint(tmp_path):
    (tmp_path / "junk").write_bytes(b"hello world, this is not it")
    with pytest.raises(DataError, match="not a checkpoint"):
        read_container(tmp_path / "junk")
    with pytest.raises(DataError):
        read_container(tmp_path / "missing")
