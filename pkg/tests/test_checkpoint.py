from __future__ import annotations

import json
import struct

import numpy as np
import pytest

from vfl_workbench.checkpoint import (
    MAGIC,
    decode_container,
    encode_container,
    load_checkpoint,
    load_params,
    save_checkpoint,
)
from vfl_workbench.errors import CheckpointFormatError
from vfl_workbench.lora import LoraAdapter
from vfl_workbench.model import Params


def test_params_roundtrip(tmp_path, tiny_model):
    path = tmp_path / "base.ckpt"
    save_checkpoint(tiny_model, path)
    loaded = load_params(path)
    assert loaded.config == tiny_model.config
    assert loaded.checksum() == tiny_model.checksum()


def test_save_load_save_is_byte_identical(tmp_path, tiny_model):
    first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(tiny_model, first)
    save_checkpoint(load_params(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_file_starts_with_magic_and_sorted_header(tmp_path, tiny_model):
    path = tmp_path / "base.ckpt"
    save_checkpoint(tiny_model, path)
    data = path.read_bytes()
    assert data.startswith(MAGIC)
    (length,) = struct.unpack("<I", data[len(MAGIC):len(MAGIC) + 4])
    header = json.loads(data[len(MAGIC) + 4:len(MAGIC) + 4 + length])
    assert header == tiny_model.config.to_dict()
    assert list(header) == sorted(header)


def test_adapter_roundtrip(tmp_path, tiny_config):
    adapter = LoraAdapter.create(tiny_config, [0, 2], rank=3, alpha=6.0, targets=["wk", "wo"], seed=9)
    path = tmp_path / "adapter.ckpt"
    save_checkpoint(adapter, path)
    loaded = load_checkpoint(path)
    assert isinstance(loaded, LoraAdapter)
    assert (loaded.layer_mask, loaded.rank, loaded.alpha, loaded.targets) == ((0, 2), 3, 6.0, ("wk", "wo"))
    for name, array in adapter.tensors.items():
        np.testing.assert_array_equal(loaded.tensors[name], array)


def test_load_params_rejects_adapter(tmp_path, tiny_config):
    path = tmp_path / "adapter.ckpt"
    save_checkpoint(LoraAdapter.create(tiny_config, [1]), path)
    with pytest.raises(CheckpointFormatError):
        load_params(path)


def test_truncated_file(tmp_path, tiny_model):
    data = encode_container(tiny_model.config.to_dict(), tiny_model.named_arrays())
    for cut in (3, len(MAGIC) + 2, len(data) // 2, len(data) - 1):
        with pytest.raises(CheckpointFormatError):
            decode_container(data[:cut])


def test_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_unreadable_header():
    data = MAGIC + struct.pack("<I", 3) + b"{x]"
    with pytest.raises(CheckpointFormatError):
        decode_container(data)
    data = MAGIC + struct.pack("<I", 2) + b"[]"
    with pytest.raises(CheckpointFormatError):
        decode_container(data)


def test_duplicate_tensor():
    one = encode_container({}, {"w": np.ones(2, dtype=np.float32)})
    body = one[len(MAGIC) + 4 + 2:]
    with pytest.raises(CheckpointFormatError):
        decode_container(one + body)


def test_wrong_shapes_are_format_errors(tmp_path, tiny_model):
    arrays = tiny_model.named_arrays()
    arrays["lm_head"] = arrays["lm_head"][:, :3]
    path = tmp_path / "bad.ckpt"
    path.write_bytes(encode_container(tiny_model.config.to_dict(), arrays))
    with pytest.raises(CheckpointFormatError):
        load_params(path)


def test_invalid_config_is_a_format_error(tmp_path, tiny_model):
    header = {**tiny_model.config.to_dict(), "n_heads": 5}
    path = tmp_path / "bad.ckpt"
    path.write_bytes(encode_container(header, tiny_model.named_arrays()))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_float64_params_are_stored_as_float32(tmp_path, tiny_model):
    wide = Params(tiny_model.config, {n: a.astype(np.float64) for n, a in tiny_model.tensors.items()})
    path = tmp_path / "wide.ckpt"
    save_checkpoint(wide, path)
    assert load_params(path).checksum() == tiny_model.checksum()
