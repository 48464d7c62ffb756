"""Toy multimodal decoder-only transformer.

An image is cut into ``N_v`` patches, each flattened patch is mapped by one
linear projection (standing in for the vision encoder plus connector) and
placed as a contiguous vision span right after BOS, followed by the prompt
text: the joint input ``[U; W]``. Blocks are pre-norm (RMS norm) with causal
multi-head attention and a GELU feed-forward; positions are learned absolute
embeddings added once at the input, so K/V rows can be spliced or pruned
without re-encoding positions.

Every forward pass is built from ``numkit`` primitives. Inference runs without
a tape; training binds parameters onto a tape and calls ``batch_loss``.

The KV cache keeps, per layer, the key/value rows and the position id of each
row. Layers may hold different row counts (vision rows pruned from layer k
onwards), but every decode step appends exactly one row to every layer.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from . import numkit as nk
from .errors import CapacityError, ContractError, ShapeError
from .tokenizer import EOS_ID, IMG_ID, VOCAB_SIZE

logger = logging.getLogger(__name__)

_MASK_VALUE = -1e9

# Vision span starts right after BOS
VISION_START = 1


# ---------------------------------------------------------------------------
# Configuration and parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = VOCAB_SIZE
    image_size: int = 32
    channels: int = 1
    patch_size: int = 8
    max_seq: int = 128
    norm_eps: float = 1e-5

    def __post_init__(self) -> None:
        for f in fields(self):
            if f.name != "norm_eps" and getattr(self, f.name) < 1:
                raise ContractError(f"ModelConfig.{f.name} must be >= 1, got {getattr(self, f.name)}")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.image_size % self.patch_size:
            raise ContractError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.norm_eps <= 0:
            raise ContractError("norm_eps must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_vision(self) -> int:
        return self.grid ** 2

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.image_size, self.image_size, self.channels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**dict(data))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name and shape of every learnable tensor, derived from the config alone."""
    d, ff, vocab = config.d_model, config.d_ff, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "patch_proj.weight": (config.patch_dim, d),
        "patch_proj.bias": (d,),
        "tok_emb": (vocab, d),
        "pos_emb": (config.max_seq, d),
        "final_norm": (d,),
        "lm_head": (d, vocab),
    }
    for layer in range(config.n_layers):
        p = f"layers.{layer}."
        shapes[p + "attn_norm"] = (d,)
        shapes[p + "wq"] = (d, d)
        shapes[p + "wk"] = (d, d)
        shapes[p + "wv"] = (d, d)
        shapes[p + "wo"] = (d, d)
        shapes[p + "ffn_norm"] = (d,)
        shapes[p + "w_ff1"] = (d, ff)
        shapes[p + "w_ff2"] = (ff, d)
    return dict(sorted(shapes.items()))


class ModelLike(Protocol):
    """Anything the forward pass can run: base ``Params`` or a LoRA-adapted model."""

    config: ModelConfig

    def named_arrays(self) -> dict[str, np.ndarray]: ...

    def lora_pair(self, layer: int, target: str) -> tuple[str, str, float] | None: ...


class Params:
    """All learnable tensors of the toy model, keyed by name."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, np.ndarray]):
        expected = param_shapes(config)
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        if missing or extra:
            raise ContractError(f"parameter names do not match config (missing={missing}, unexpected={extra})")
        arrays = {}
        for name, shape in expected.items():
            array = np.asarray(tensors[name])
            if array.shape != shape:
                raise ShapeError(f"{name}: expected {list(shape)}, got {list(array.shape)}")
            if not np.issubdtype(array.dtype, np.floating):
                array = array.astype(np.float32)
            arrays[name] = array
        self.config = config
        self.tensors = arrays

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> Params:
        """Seeded small-uniform init: fan-in scaled matrices, unit norms, zero bias."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in param_shapes(config).items():
            if name.endswith("norm"):
                tensors[name] = np.ones(shape, dtype=np.float32)
            elif name == "patch_proj.bias":
                tensors[name] = np.zeros(shape, dtype=np.float32)
            elif name in ("tok_emb", "pos_emb"):
                tensors[name] = rng.uniform(-0.1, 0.1, size=shape).astype(np.float32)
            else:
                bound = 1.0 / math.sqrt(shape[0])
                tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def base(self) -> Params:
        return self

    def named_arrays(self) -> dict[str, np.ndarray]:
        return dict(self.tensors)

    def lora_pair(self, layer: int, target: str) -> None:
        return None

    def replace(self, updates: Mapping[str, np.ndarray]) -> Params:
        merged = dict(self.tensors)
        merged.update(updates)
        return Params(self.config, merged)

    def copy(self) -> Params:
        return Params(self.config, {n: a.copy() for n, a in self.tensors.items()})

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.tensors):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self.tensors[name]).tobytes())
        return digest.hexdigest()


def count_parameters(arrays: Mapping[str, np.ndarray]) -> int:
    return int(sum(a.size for a in arrays.values()))


def bind(model: ModelLike, tape: nk.Tape | None = None, trainable: Iterable[str] = ()) -> dict[str, nk.Tensor]:
    """Wrap the model's arrays as tensors; names in ``trainable`` are watched on ``tape``."""
    dtype = nk.default_dtype()
    arrays = model.named_arrays()
    trainable = set(trainable)
    unknown = trainable - set(arrays)
    if unknown:
        raise ContractError(f"cannot train unknown parameters: {sorted(unknown)}")
    bound = {}
    for name in sorted(arrays):
        if tape is not None and name in trainable:
            bound[name] = tape.watch(name, arrays[name])
        else:
            bound[name] = nk.Tensor(np.asarray(arrays[name], dtype=dtype))
    return bound


# ---------------------------------------------------------------------------
# Sequences and cache
# ---------------------------------------------------------------------------

@dataclass
class MultimodalSequence:
    """Token ids with an explicit vision span of IMG placeholders.

    ``vision_span`` is a row range into ``tokens``. ``positions`` defaults to
    ``0..len-1``; the text-only oracle keeps the original ids of text rows.
    ``answer`` holds the teacher-forced answer tokens (ending with EOS).
    """

    tokens: list[int]
    vision_span: tuple[int, int]
    image: np.ndarray | None = None
    answer: list[int] = field(default_factory=list)
    positions: list[int] | None = None

    def __post_init__(self) -> None:
        self.tokens = [int(t) for t in self.tokens]
        self.answer = [int(t) for t in self.answer]
        start, end = (int(v) for v in self.vision_span)
        self.vision_span = (start, end)
        if not 0 <= start <= end <= len(self.tokens):
            raise ContractError(f"vision span {self.vision_span} outside sequence of length {len(self.tokens)}")
        if end > start:
            if self.image is None:
                raise ContractError("a non-empty vision span needs an image")
            if any(t != IMG_ID for t in self.tokens[start:end]):
                raise ContractError("vision span must hold IMG placeholders only")
        if self.positions is not None:
            self.positions = [int(p) for p in self.positions]
            if len(self.positions) != len(self.tokens):
                raise ContractError("positions and tokens differ in length")
            if any(b <= a for a, b in zip(self.positions, self.positions[1:])):
                raise ContractError("position ids must be strictly increasing")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def n_vision(self) -> int:
        return self.vision_span[1] - self.vision_span[0]

    def position_ids(self) -> np.ndarray:
        if self.positions is None:
            return np.arange(len(self.tokens), dtype=np.int64)
        return np.asarray(self.positions, dtype=np.int64)

    def vision_mask(self) -> np.ndarray:
        mask = np.zeros(len(self.tokens), dtype=bool)
        mask[self.vision_span[0]:self.vision_span[1]] = True
        return mask

    def vision_positions(self) -> tuple[int, int]:
        """Vision span expressed in position ids (empty spans map to (0, 0))."""
        if self.n_vision == 0:
            return (0, 0)
        pos = self.position_ids()
        return (int(pos[self.vision_span[0]]), int(pos[self.vision_span[1] - 1]) + 1)

    def prefix(self, length: int) -> MultimodalSequence:
        """The first ``length`` tokens, without answer."""
        if length < self.vision_span[1] or length < 1:
            raise ContractError(f"prefix of length {length} would cut the vision span")
        return MultimodalSequence(
            tokens=self.tokens[:length],
            vision_span=self.vision_span,
            image=self.image,
            positions=None if self.positions is None else self.positions[:length],
        )

    def extend_prompt(self, tokens: Sequence[int]) -> MultimodalSequence:
        """Append tokens to the prompt (contiguous positions), dropping the answer."""
        positions = None
        if self.positions is not None:
            last = self.positions[-1]
            positions = self.positions + [last + 1 + i for i in range(len(tokens))]
        return MultimodalSequence(
            tokens=self.tokens + list(tokens),
            vision_span=self.vision_span,
            image=self.image,
            positions=positions,
        )

    def text_only(self) -> MultimodalSequence:
        """Same text rows with their original position ids and no vision span."""
        keep = ~self.vision_mask()
        start = self.vision_span[0]
        return MultimodalSequence(
            tokens=[t for t, k in zip(self.tokens, keep) if k],
            vision_span=(start, start),
            image=None,
            answer=list(self.answer),
            positions=[int(p) for p, k in zip(self.position_ids(), keep) if k],
        )


@dataclass
class KvCache:
    """Per-layer key/value rows (rows x d_model) with the position id of each row."""

    config: ModelConfig
    keys: list[np.ndarray]
    values: list[np.ndarray]
    positions: list[np.ndarray]
    vision_span: tuple[int, int]
    next_position: int = 0

    @classmethod
    def empty(cls, config: ModelConfig, vision_span: tuple[int, int], dtype: type | None = None) -> KvCache:
        dtype = dtype or nk.default_dtype()
        L, d = config.n_layers, config.d_model
        return cls(
            config=config,
            keys=[np.zeros((0, d), dtype=dtype) for _ in range(L)],
            values=[np.zeros((0, d), dtype=dtype) for _ in range(L)],
            positions=[np.zeros(0, dtype=np.int64) for _ in range(L)],
            vision_span=vision_span,
        )

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    def rows(self, layer: int) -> int:
        return len(self.positions[layer])

    def is_empty(self) -> bool:
        return all(self.rows(layer) == 0 for layer in range(self.n_layers))

    def vision_rows(self, layer: int) -> np.ndarray:
        start, end = self.vision_span
        pos = self.positions[layer]
        return np.flatnonzero((pos >= start) & (pos < end))

    def append(self, layer: int, k_rows: np.ndarray, v_rows: np.ndarray, positions: np.ndarray) -> None:
        positions = np.asarray(positions, dtype=np.int64)
        if self.rows(layer) and len(positions) and positions[0] <= self.positions[layer][-1]:
            raise ContractError("cached position ids must stay strictly increasing")
        self.keys[layer] = np.concatenate([self.keys[layer], k_rows])
        self.values[layer] = np.concatenate([self.values[layer], v_rows])
        self.positions[layer] = np.concatenate([self.positions[layer], positions])

    def copy(self) -> KvCache:
        return KvCache(
            config=self.config,
            keys=[k.copy() for k in self.keys],
            values=[v.copy() for v in self.values],
            positions=[p.copy() for p in self.positions],
            vision_span=self.vision_span,
            next_position=self.next_position,
        )


# ---------------------------------------------------------------------------
# Forward building blocks
# ---------------------------------------------------------------------------

def patchify(image: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Flatten an (H, W, C) raster into N_v row-major patches of patch_dim values."""
    image = np.asarray(image)
    if image.shape != config.image_shape:
        raise ShapeError(f"image dims {list(image.shape)} do not match config {list(config.image_shape)}")
    g, p, c = config.grid, config.patch_size, config.channels
    return image.reshape(g, p, g, p, c).transpose(0, 2, 1, 3, 4).reshape(g * g, p * p * c)


def _project(model: ModelLike, w: Mapping[str, nk.Tensor], layer: int, target: str, flat: nk.Tensor) -> nk.Tensor:
    y = nk.matmul(flat, w[f"layers.{layer}.{target}"])
    pair = model.lora_pair(layer, target)
    if pair is not None:
        a_name, b_name, scaling = pair
        delta = nk.matmul(nk.matmul(flat, w[a_name]), w[b_name])
        y = nk.add(y, nk.scale(delta, scaling))
    return y


def _causal_bias(q_pos: np.ndarray, k_pos: np.ndarray, dtype: type) -> nk.Tensor:
    allowed = k_pos[None, :] <= q_pos[:, None]
    return nk.Tensor(np.where(allowed, 0.0, _MASK_VALUE).astype(dtype))


def _layer(
    model: ModelLike,
    w: Mapping[str, nk.Tensor],
    layer: int,
    x: nk.Tensor,
    q_pos: np.ndarray,
    past: tuple[np.ndarray, np.ndarray, np.ndarray] | None,
) -> tuple[nk.Tensor, np.ndarray, np.ndarray]:
    """One pre-norm block over x (B, T, d); also returns this call's K/V rows (B, T, d)."""
    cfg = model.config
    B, T, d = x.shape
    H, dh = cfg.n_heads, cfg.head_dim
    p = f"layers.{layer}."

    flat = nk.reshape(nk.rms_norm(x, w[p + "attn_norm"], cfg.norm_eps), (B * T, d))
    q = _project(model, w, layer, "wq", flat)
    k = nk.reshape(_project(model, w, layer, "wk", flat), (B, T, d))
    v = nk.reshape(_project(model, w, layer, "wv", flat), (B, T, d))

    k_all, v_all, k_pos = k, v, q_pos
    if past is not None and len(past[2]):
        if B != 1:
            raise ContractError("cached attention runs on a single sequence")
        past_k, past_v, past_pos = past
        dtype = k.data.dtype
        k_all = nk.concat([nk.Tensor(past_k[None].astype(dtype, copy=False)), k], axis=1)
        v_all = nk.concat([nk.Tensor(past_v[None].astype(dtype, copy=False)), v], axis=1)
        k_pos = np.concatenate([past_pos, q_pos])
    S = len(k_pos)

    qh = nk.transpose(nk.reshape(q, (B, T, H, dh)), (0, 2, 1, 3))
    kh = nk.transpose(nk.reshape(k_all, (B, S, H, dh)), (0, 2, 3, 1))
    vh = nk.transpose(nk.reshape(v_all, (B, S, H, dh)), (0, 2, 1, 3))
    scores = nk.scale(nk.matmul(qh, kh), 1.0 / math.sqrt(dh))
    scores = nk.bias_add(scores, _causal_bias(q_pos, k_pos, scores.data.dtype))
    attn = nk.matmul(nk.row_softmax(scores), vh)
    merged = nk.reshape(nk.transpose(attn, (0, 2, 1, 3)), (B * T, d))
    x = nk.add(x, nk.reshape(nk.matmul(merged, w[p + "wo"]), (B, T, d)))

    h2 = nk.reshape(nk.rms_norm(x, w[p + "ffn_norm"], cfg.norm_eps), (B * T, d))
    ff = nk.matmul(nk.gelu(nk.matmul(h2, w[p + "w_ff1"])), w[p + "w_ff2"])
    x = nk.add(x, nk.reshape(ff, (B, T, d)))
    return x, k.data, v.data


def _logits(model: ModelLike, w: Mapping[str, nk.Tensor], x: nk.Tensor) -> nk.Tensor:
    B, T, d = x.shape
    h = nk.rms_norm(x, w["final_norm"], model.config.norm_eps)
    return nk.matmul(nk.reshape(h, (B * T, d)), w["lm_head"])


def _embed(
    model: ModelLike,
    w: Mapping[str, nk.Tensor],
    tokens: np.ndarray,
    images: np.ndarray | None,
    vision_span: tuple[int, int],
    positions: np.ndarray,
) -> nk.Tensor:
    """Joint input [U; W] for a (B, T) token batch sharing one vision span."""
    cfg = model.config
    B, T = tokens.shape
    d = cfg.d_model
    start, end = vision_span

    def text_rows(lo: int, hi: int) -> nk.Tensor:
        ids = tokens[:, lo:hi].reshape(-1)
        return nk.reshape(nk.take(w["tok_emb"], ids, axis=0), (B, hi - lo, d))

    pieces = []
    if start > 0:
        pieces.append(text_rows(0, start))
    if end > start:
        if end - start != cfg.n_vision:
            raise ShapeError(f"vision span holds {end - start} positions, config expects {cfg.n_vision}")
        patches = np.stack([patchify(img, cfg) for img in images]).astype(nk.default_dtype())
        u = _project_patches(w, nk.Tensor(patches.reshape(B * cfg.n_vision, cfg.patch_dim)))
        pieces.append(nk.reshape(u, (B, end - start, d)))
    if end < T:
        pieces.append(text_rows(end, T))

    x = pieces[0] if len(pieces) == 1 else nk.concat(pieces, axis=1)
    return nk.bias_add(x, nk.take(w["pos_emb"], positions, axis=0))


def _project_patches(w: Mapping[str, nk.Tensor], patches: nk.Tensor) -> nk.Tensor:
    return nk.bias_add(nk.matmul(patches, w["patch_proj.weight"]), w["patch_proj.bias"])


def _check_capacity(config: ModelConfig, positions: np.ndarray) -> None:
    if len(positions) > config.max_seq or (len(positions) and positions[-1] >= config.max_seq):
        raise CapacityError(
            f"sequence needs position {int(positions[-1]) if len(positions) else 0}, max_seq is {config.max_seq}"
        )


def _run_layers(
    model: ModelLike,
    w: Mapping[str, nk.Tensor],
    x: nk.Tensor,
    q_pos: np.ndarray,
    cache: KvCache | None,
    *,
    start: int = 0,
    drop_from: int | None = None,
    keep_rows: np.ndarray | None = None,
    record: list[np.ndarray] | None = None,
) -> nk.Tensor:
    """Run layers ``start..L-1``; rows not in ``keep_rows`` leave the stream at ``drop_from``."""
    for layer in range(start, model.config.n_layers):
        if layer == drop_from and keep_rows is not None and not keep_rows.all():
            kept = np.flatnonzero(keep_rows)
            x = nk.take(x, kept, axis=1)
            q_pos = q_pos[kept]
            keep_rows = None
        if record is not None:
            record.append(x.data)
        x, k_rows, v_rows = _layer(model, w, layer, x, q_pos, None)
        if cache is not None:
            cache.append(layer, k_rows[0], v_rows[0], q_pos)
    if record is not None:
        record.append(x.data)
    return x


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def embed_image(model: ModelLike, image: np.ndarray, start: int = VISION_START) -> np.ndarray:
    """Vision embeddings U^0 (N_v x d_model): patch projection plus position embedding."""
    cfg = model.config
    w = bind(model)
    patches = nk.Tensor(patchify(image, cfg).astype(nk.default_dtype()))
    rows = np.arange(start, start + cfg.n_vision)
    _check_capacity(cfg, rows)
    return nk.bias_add(_project_patches(w, patches), nk.take(w["pos_emb"], rows, axis=0)).data


def run_prefill(
    model: ModelLike,
    seq: MultimodalSequence,
    drop_from: int | None = None,
    record: list[np.ndarray] | None = None,
) -> tuple[KvCache, np.ndarray]:
    """Prefill ``seq``; vision rows leave the residual stream at layer ``drop_from``.

    ``drop_from=None`` (or L) is the plain prefill. When ``record`` is given,
    it receives the residual stream entering every layer plus the final one.
    """
    cfg = model.config
    if len(seq) < 1:
        raise ContractError("cannot prefill an empty sequence")
    positions = seq.position_ids()
    _check_capacity(cfg, positions)
    w = bind(model)
    images = None if seq.image is None else np.asarray(seq.image)[None]
    x = _embed(model, w, np.asarray([seq.tokens], dtype=np.int64), images, seq.vision_span, positions)
    cache = KvCache.empty(cfg, seq.vision_positions(), dtype=x.data.dtype)
    x = _run_layers(
        model, w, x, positions, cache,
        drop_from=cfg.n_layers if drop_from is None else drop_from,
        keep_rows=~seq.vision_mask(),
        record=record,
    )
    cache.next_position = int(positions[-1]) + 1
    return cache, _logits(model, w, x).data[-1]


def resume_prefill(
    model: ModelLike,
    seq: MultimodalSequence,
    layer_inputs: Sequence[np.ndarray],
    full_cache: KvCache,
    drop_from: int,
) -> tuple[KvCache, np.ndarray]:
    """Finish a drop-at-``drop_from`` prefill from a recorded full prefill of ``seq``."""
    cfg = model.config
    w = bind(model)
    cache = KvCache.empty(cfg, full_cache.vision_span, dtype=full_cache.keys[0].dtype)
    for layer in range(drop_from):
        cache.keys[layer] = full_cache.keys[layer].copy()
        cache.values[layer] = full_cache.values[layer].copy()
        cache.positions[layer] = full_cache.positions[layer].copy()
    x = nk.Tensor(layer_inputs[drop_from])
    if drop_from < cfg.n_layers:
        x = _run_layers(
            model, w, x, seq.position_ids(), cache,
            start=drop_from, drop_from=drop_from, keep_rows=~seq.vision_mask(),
        )
    cache.next_position = full_cache.next_position
    return cache, _logits(model, w, x).data[-1]


def prefill(model: ModelLike, seq: MultimodalSequence) -> tuple[KvCache, np.ndarray]:
    """Build the KV cache for every input position; returns it with the last-position logits."""
    return run_prefill(model, seq)


def decode_step(
    model: ModelLike,
    cache: KvCache,
    token_id: int,
    w: Mapping[str, nk.Tensor] | None = None,
) -> np.ndarray:
    """Feed one token at ``cache.next_position``; grows every layer by one row in place."""
    cfg = model.config
    if cache.config != cfg:
        raise ContractError("cache was built for a different model config")
    if cache.is_empty():
        raise ContractError("decode_step needs a prefilled cache")
    if not 0 <= token_id < cfg.vocab_size:
        raise ContractError(f"token id {token_id} outside vocabulary of {cfg.vocab_size}")
    position = cache.next_position
    if position >= cfg.max_seq:
        raise CapacityError(f"cache is full at {cfg.max_seq} positions")

    w = w if w is not None else bind(model)
    q_pos = np.array([position], dtype=np.int64)
    x = nk.reshape(nk.take(w["tok_emb"], [token_id], axis=0), (1, 1, cfg.d_model))
    x = nk.bias_add(x, nk.take(w["pos_emb"], q_pos, axis=0))
    for layer in range(cfg.n_layers):
        past = (cache.keys[layer], cache.values[layer], cache.positions[layer])
        x, k_rows, v_rows = _layer(model, w, layer, x, q_pos, past)
        cache.append(layer, k_rows[0], v_rows[0], q_pos)
    cache.next_position = position + 1
    return _logits(model, w, x).data[-1]


def full_forward(model: ModelLike, seq: MultimodalSequence) -> np.ndarray:
    """No-cache logits for every position of ``seq`` (T x vocab)."""
    positions = seq.position_ids()
    _check_capacity(model.config, positions)
    w = bind(model)
    images = None if seq.image is None else np.asarray(seq.image)[None]
    x = _embed(model, w, np.asarray([seq.tokens], dtype=np.int64), images, seq.vision_span, positions)
    x = _run_layers(model, w, x, positions, None)
    return _logits(model, w, x).data


def prefill_context(
    model: ModelLike,
    seq: MultimodalSequence,
    drop_from: int | None = None,
) -> tuple[KvCache, int]:
    """Prefill all prompt tokens but the last; returns the cache and the held-back token.

    Generation feeds the held-back token as its first decode step, so every
    answer token comes from a decoding-time query over the cache.
    """
    if len(seq) < 2 or len(seq) - 1 < seq.vision_span[1]:
        raise ContractError("generation needs at least one prompt token after the vision span")
    cache, _ = run_prefill(model, seq.prefix(len(seq) - 1), drop_from=drop_from)
    cache.next_position = int(seq.position_ids()[-1])
    return cache, seq.tokens[-1]


def greedy_continue(
    model: ModelLike,
    cache: KvCache,
    logits: np.ndarray,
    max_new: int,
    eos_id: int = EOS_ID,
    w: Mapping[str, nk.Tensor] | None = None,
) -> list[int]:
    """Greedy argmax decoding from ``logits`` (lowest id wins ties); EOS is not returned."""
    if max_new < 1:
        raise ContractError(f"max_new must be >= 1, got {max_new}")
    w = w if w is not None else bind(model)
    out: list[int] = []
    while True:
        token = int(np.argmax(logits))
        if token == eos_id:
            break
        out.append(token)
        if len(out) >= max_new:
            break
        logits = decode_step(model, cache, token, w)
    return out


def generate_from_cache(
    model: ModelLike,
    cache: KvCache,
    query_token: int,
    max_new: int,
    eos_id: int = EOS_ID,
) -> list[int]:
    w = bind(model)
    logits = decode_step(model, cache, query_token, w)
    return greedy_continue(model, cache, logits, max_new, eos_id, w)


def generate(model: ModelLike, seq: MultimodalSequence, max_new: int, eos_id: int = EOS_ID) -> list[int]:
    """Greedy decoding of up to ``max_new`` tokens; stops early at EOS."""
    if max_new < 1:
        raise ContractError(f"max_new must be >= 1, got {max_new}")
    cache, query = prefill_context(model, seq)
    return generate_from_cache(model, cache, query, max_new, eos_id)


def _check_answer(model: ModelLike, seq: MultimodalSequence) -> None:
    if not seq.answer:
        raise ContractError("teacher forcing needs a non-empty answer")
    bad = [t for t in seq.answer if not 0 <= t < model.config.vocab_size]
    if bad:
        raise ContractError(f"answer tokens {bad} outside vocabulary of {model.config.vocab_size}")


def teacher_forced_logprobs(
    model: ModelLike,
    cache: KvCache,
    logits: np.ndarray,
    answer: Sequence[int],
) -> list[float]:
    """log P(y_t | y_<t, context) for each answer token, decoding the true tokens."""
    w = bind(model)
    out = []
    for i, token in enumerate(answer):
        logp = nk.log_softmax(nk.Tensor(logits)).data
        out.append(float(logp[token]))
        if i + 1 < len(answer):
            logits = decode_step(model, cache, token, w)
    return out


def step_logprobs(model: ModelLike, seq: MultimodalSequence) -> list[float]:
    _check_answer(model, seq)
    cache, logits = prefill(model, seq)
    return teacher_forced_logprobs(model, cache, logits, seq.answer)


def sum_logprobs(steps: Iterable[float]) -> float:
    """In-order sum, so chained per-step values reproduce the joint exactly."""
    total = 0.0
    for value in steps:
        total += value
    return total


def sequence_logprob(model: ModelLike, seq: MultimodalSequence) -> float:
    """log P(y | U, W), teacher-forced over ``seq.answer``."""
    return sum_logprobs(step_logprobs(model, seq))


def batch_loss(model: ModelLike, w: Mapping[str, nk.Tensor], batch: Sequence[MultimodalSequence]) -> nk.Tensor:
    """Mean cross-entropy over answer tokens of a right-padded batch.

    Every sequence must share the vision span and use default positions.
    Padding sits after each sequence's last real token, so causal attention
    never lets a real row see it.
    """
    if not batch:
        raise ContractError("empty training batch")
    span = batch[0].vision_span
    rows = []
    for seq in batch:
        if seq.vision_span != span or seq.positions is not None:
            raise ContractError("batched sequences must share the vision span and default positions")
        _check_answer(model, seq)
        full = seq.tokens + seq.answer
        rows.append((full[:-1], full[1:], len(seq.tokens) - 1))

    T = max(len(inputs) for inputs, _, _ in rows)
    positions = np.arange(T, dtype=np.int64)
    _check_capacity(model.config, positions)
    tokens = np.zeros((len(batch), T), dtype=np.int64)
    targets = np.zeros((len(batch), T), dtype=np.int64)
    weights = np.zeros((len(batch), T), dtype=np.float64)
    for i, (inputs, shifted, first_answer) in enumerate(rows):
        tokens[i, :len(inputs)] = inputs
        targets[i, :len(shifted)] = shifted
        weights[i, first_answer:len(shifted)] = 1.0

    images = None
    if span[1] > span[0]:
        images = np.stack([np.asarray(seq.image) for seq in batch])
    x = _embed(model, w, tokens, images, span, positions)
    x = _run_layers(model, w, x, positions, None)
    return nk.softmax_cross_entropy(_logits(model, w, x), targets.reshape(-1), weights.reshape(-1))


__all__ = [
    "KvCache",
    "ModelConfig",
    "ModelLike",
    "MultimodalSequence",
    "Params",
    "VISION_START",
    "batch_loss",
    "bind",
    "count_parameters",
    "decode_step",
    "embed_image",
    "full_forward",
    "generate",
    "generate_from_cache",
    "greedy_continue",
    "param_shapes",
    "patchify",
    "prefill",
    "prefill_context",
    "resume_prefill",
    "run_prefill",
    "sequence_logprob",
    "step_logprobs",
    "sum_logprobs",
    "teacher_forced_logprobs",
]
