"""Binary checkpoint container shared by base models and LoRA adapters.

Layout (all integers little-endian u32)::

    b"VFLCKPT1"
    header length, UTF-8 JSON header (ModelConfig fields; adapters add "adapter")
    per tensor, sorted by name:
        name length, UTF-8 name, rank, dims..., raw little-endian float32 data

Save then load then save yields byte-identical files.
"""

from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import CheckpointFormatError
from .model import ModelConfig, Params

logger = logging.getLogger(__name__)

MAGIC = b"VFLCKPT1"
_U32 = struct.Struct("<I")


def encode_container(header: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> bytes:
    header_bytes = json.dumps(dict(header), sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, _U32.pack(len(header_bytes)), header_bytes]
    for name in sorted(tensors):
        array = np.ascontiguousarray(tensors[name], dtype="<f4")
        name_bytes = name.encode("utf-8")
        chunks.append(_U32.pack(len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(_U32.pack(array.ndim))
        chunks.extend(_U32.pack(d) for d in array.shape)
        chunks.append(array.tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        end = self.offset + n
        if end > len(self.data):
            raise CheckpointFormatError(f"{self.source}: truncated while reading {what}")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def decode_container(data: bytes, source: str = "<bytes>") -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    reader = _Reader(data, source)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError(f"{source}: not a checkpoint (bad magic)")
    try:
        header = json.loads(reader.take(reader.u32("header length"), "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{source}: unreadable header ({exc})") from exc
    if not isinstance(header, dict):
        raise CheckpointFormatError(f"{source}: header is not a JSON object")

    tensors: dict[str, np.ndarray] = {}
    while reader.offset < len(data):
        try:
            name = reader.take(reader.u32("name length"), "tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"{source}: tensor name is not UTF-8") from exc
        rank = reader.u32(f"{name} rank")
        dims = tuple(reader.u32(f"{name} dims") for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64))
        raw = reader.take(4 * count, f"{name} data")
        if name in tensors:
            raise CheckpointFormatError(f"{source}: duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    return header, tensors


def write_container(path: str | Path, header: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.write_bytes(encode_container(header, tensors))
    logger.info("Wrote checkpoint %s (%d tensors)", path, len(tensors))


def read_container(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    path = Path(path)
    return decode_container(path.read_bytes(), str(path))


def _config_from_header(header: dict[str, Any], source: str) -> ModelConfig:
    fields = {k: v for k, v in header.items() if k != "adapter"}
    try:
        return ModelConfig.from_dict(fields)
    except (TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"{source}: invalid model config ({exc})") from exc


def save_checkpoint(item: Any, path: str | Path) -> None:
    """Write ``Params`` or a ``LoraAdapter``; adapters carry an ``adapter`` header entry."""
    header = item.config.to_dict()
    adapter_header = getattr(item, "adapter_header", None)
    if adapter_header is not None:
        header["adapter"] = adapter_header()
    write_container(path, header, item.named_arrays())


def load_checkpoint(path: str | Path):
    """Read a base model (``Params``) or an adapter (``LoraAdapter``), per the header flag."""
    from .lora import LoraAdapter

    header, tensors = read_container(path)
    config = _config_from_header(header, str(path))
    try:
        if "adapter" in header:
            return LoraAdapter.from_header(config, header["adapter"], tensors)
        return Params(config, tensors)
    except ValueError as exc:
        raise CheckpointFormatError(f"{path}: {exc}") from exc


def load_params(path: str | Path) -> Params:
    item = load_checkpoint(path)
    if not isinstance(item, Params):
        raise CheckpointFormatError(f"{path}: expected a base model checkpoint, found an adapter")
    return item


__all__ = [
    "MAGIC",
    "decode_container",
    "encode_container",
    "load_checkpoint",
    "load_params",
    "read_container",
    "save_checkpoint",
    "write_container",
]
