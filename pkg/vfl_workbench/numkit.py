"""Dense tensor kernels and reverse-mode differentiation over a fixed op set.

Tensors wrap numpy arrays. An operation whose inputs belong to a ``Tape`` is
recorded on that tape in execution order, so the tape is topologically ordered
by construction; ``backward`` walks it in reverse and returns the gradient of
every watched parameter. Operations on tensors without a tape just compute.

Precision defaults to float32. ``float64_mode()`` switches newly created
tensors to float64 for gradient verification, and ``check_finite()`` turns on
NaN/Inf detection. Both modes are context-local, so threads evaluating in
parallel keep their own setting.

There is no broadcasting beyond ``bias_add`` (bias shape equals the trailing
dims of the input) and the row-wise ops, which act on the last axis.
"""

from __future__ import annotations

import contextvars
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

_DTYPE: contextvars.ContextVar[type] = contextvars.ContextVar("numkit_dtype", default=np.float32)
_CHECK_FINITE: contextvars.ContextVar[bool] = contextvars.ContextVar("numkit_check_finite", default=False)


# ---------------------------------------------------------------------------
# Precision and checking modes
# ---------------------------------------------------------------------------

def default_dtype() -> type:
    """Floating dtype used for tensors created in the current context."""
    return _DTYPE.get()


@contextmanager
def float64_mode() -> Iterator[None]:
    """Create tensors in float64 for the duration of the block."""
    token = _DTYPE.set(np.float64)
    try:
        yield
    finally:
        _DTYPE.reset(token)


@contextmanager
def check_finite() -> Iterator[None]:
    """Raise ``NonFiniteError`` as soon as any kernel emits NaN or Inf."""
    token = _CHECK_FINITE.set(True)
    try:
        yield
    finally:
        _CHECK_FINITE.reset(token)


# ---------------------------------------------------------------------------
# Tensor and Tape
# ---------------------------------------------------------------------------

class Tensor:
    """An array value, optionally registered on a tape under an integer id."""

    __slots__ = ("data", "tape", "tid")

    def __init__(self, data: np.ndarray, tape: Tape | None = None, tid: int | None = None):
        self.data = data
        self.tape = tape
        self.tid = tid

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None and self.tape.requires_grad(self.tid)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got dims {self.dims}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        where = f", tid={self.tid}" if self.tape is not None else ""
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype}{where})"


def tensor(values: Any, dtype: type | None = None) -> Tensor:
    """Constant tensor (copied) in the context's default precision."""
    return Tensor(np.array(values, dtype=dtype or default_dtype()))


def as_tensor(value: Tensor | np.ndarray) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value))


@dataclass(frozen=True)
class TapeEntry:
    op: str
    inputs: tuple[int, ...]
    output: int
    attrs: Mapping[str, Any]


class Tape:
    """Ordered record of primitive applications over registered tensors.

    Single-owner: one thread records on a tape at a time.
    """

    def __init__(self) -> None:
        self._values: list[np.ndarray] = []
        self._requires_grad: list[bool] = []
        self._is_leaf: list[bool] = []
        self.entries: list[TapeEntry] = []
        self.params: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def _register(self, data: np.ndarray, requires_grad: bool, leaf: bool) -> Tensor:
        tid = len(self._values)
        self._values.append(data)
        self._requires_grad.append(requires_grad)
        self._is_leaf.append(leaf)
        return Tensor(data, self, tid)

    def watch(self, name: str, array: np.ndarray) -> Tensor:
        """Register a named parameter leaf whose gradient ``backward`` returns."""
        if name in self.params:
            raise ContractError(f"parameter {name!r} is already watched on this tape")
        data = np.array(array, dtype=default_dtype())
        t = self._register(data, requires_grad=True, leaf=True)
        self.params[name] = t.tid
        return t

    def constant(self, array: np.ndarray) -> Tensor:
        return self._register(np.asarray(array), requires_grad=False, leaf=True)

    def adopt(self, t: Tensor) -> Tensor:
        if t.tape is self:
            return t
        if t.tape is not None:
            raise ContractError("tensor belongs to a different tape")
        return self.constant(t.data)

    def requires_grad(self, tid: int) -> bool:
        return self._requires_grad[tid]

    def value(self, tid: int) -> np.ndarray:
        return self._values[tid]

    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, attrs: Mapping[str, Any]) -> Tensor:
        needs = any(self._requires_grad[t.tid] for t in inputs)
        result = self._register(out, requires_grad=needs, leaf=False)
        self.entries.append(TapeEntry(op, tuple(t.tid for t in inputs), result.tid, dict(attrs)))
        return result

    def recorded_outputs(self) -> list[np.ndarray]:
        return [self._values[e.output] for e in self.entries]

    def replay(self) -> list[np.ndarray]:
        """Re-run every entry from the leaves and return the fresh outputs in order."""
        fresh: dict[int, np.ndarray] = {
            tid: value for tid, value in enumerate(self._values) if self._is_leaf[tid]
        }
        outputs = []
        for entry in self.entries:
            out = _PRIMITIVES[entry.op].forward(*(fresh[i] for i in entry.inputs), **entry.attrs)
            fresh[entry.output] = out
            outputs.append(out)
        return outputs


# ---------------------------------------------------------------------------
# Primitive kernels: forward and vector-Jacobian product
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Primitive:
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., tuple[np.ndarray | None, ...]]


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _matmul_fwd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    return np.matmul(a, b)


def _matmul_vjp(g, out, a, b):
    return np.matmul(g, _swap(b)), np.matmul(_swap(a), g)


def _add_fwd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {list(a.shape)} and {list(b.shape)} differ")
    return a + b


def _add_vjp(g, out, a, b):
    return g, g


def _bias_add_fwd(x: np.ndarray, b: np.ndarray) -> np.ndarray:
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"bias_add: bias {list(b.shape)} does not match trailing dims of {list(x.shape)}")
    return x + b


def _bias_add_vjp(g, out, x, b):
    if b.ndim == x.ndim:
        return g, g
    return g, g.reshape((-1,) + b.shape).sum(axis=0)


def _scale_fwd(x: np.ndarray, factor: float) -> np.ndarray:
    return x * x.dtype.type(factor)


def _scale_vjp(g, out, x, factor):
    return (g * g.dtype.type(factor),)


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_fwd(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def _gelu_vjp(g, out, x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)


def _row_softmax_fwd(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _row_softmax_vjp(g, out, x):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _log_softmax_fwd(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _log_softmax_vjp(g, out, x):
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


def _rms_scale(x: np.ndarray, eps: float) -> np.ndarray:
    return 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)


def _rms_norm_fwd(x: np.ndarray, gamma: np.ndarray, eps: float) -> np.ndarray:
    if gamma.shape != x.shape[-1:]:
        raise ShapeError(f"rms_norm: gamma {list(gamma.shape)} does not match last dim of {list(x.shape)}")
    return gamma * (x * _rms_scale(x, eps))


def _rms_norm_vjp(g, out, x, gamma, eps):
    r = _rms_scale(x, eps)
    xhat = x * r
    dgamma = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
    dxhat = g * gamma
    dx = r * (dxhat - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma


def _reshape_fwd(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if math.prod(shape) != x.size:
        raise ShapeError(f"reshape: cannot view {list(x.shape)} as {list(shape)}")
    return x.reshape(shape)


def _reshape_vjp(g, out, x, shape):
    return (g.reshape(x.shape),)


def _transpose_fwd(x: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {list(axes)} invalid for rank {x.ndim}")
    return np.ascontiguousarray(x.transpose(axes))


def _transpose_vjp(g, out, x, axes):
    return (g.transpose(np.argsort(axes)),)


def _take_fwd(x: np.ndarray, indices: np.ndarray, axis: int) -> np.ndarray:
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[axis]):
        raise ContractError(f"take: index out of range for axis of size {x.shape[axis]}")
    return np.take(x, indices, axis=axis)


def _take_vjp(g, out, x, indices, axis):
    gx = np.zeros_like(x)
    np.add.at(np.moveaxis(gx, axis, 0), indices, np.moveaxis(g, axis, 0))
    return (gx,)


def _concat_fwd(*xs: np.ndarray, axis: int) -> np.ndarray:
    return np.concatenate(xs, axis=axis)


def _concat_vjp(g, out, *xs, axis):
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _sum_all_fwd(x: np.ndarray) -> np.ndarray:
    return np.asarray(x.sum(), dtype=x.dtype)


def _sum_all_vjp(g, out, x):
    return (np.full_like(x, g),)


def _ce_denominator(weights: np.ndarray) -> float:
    total = float(weights.sum())
    return total if total > 0 else 1.0


def _softmax_ce_fwd(logits: np.ndarray, targets: np.ndarray, weights: np.ndarray) -> np.ndarray:
    if logits.ndim != 2 or targets.shape != (logits.shape[0],) or weights.shape != targets.shape:
        raise ShapeError(
            f"softmax_cross_entropy: logits {list(logits.shape)}, targets {list(targets.shape)}, "
            f"weights {list(weights.shape)}"
        )
    logp = _log_softmax_fwd(logits)
    picked = logp[np.arange(len(targets)), targets]
    loss = -(weights.astype(logits.dtype) * picked).sum() / logits.dtype.type(_ce_denominator(weights))
    return np.asarray(loss, dtype=logits.dtype)


def _softmax_ce_vjp(g, out, logits, targets, weights):
    w = weights.astype(logits.dtype)
    grad = _row_softmax_fwd(logits) * w[:, None]
    grad[np.arange(len(targets)), targets] -= w
    return (grad * (g / logits.dtype.type(_ce_denominator(weights))),)


_PRIMITIVES: dict[str, Primitive] = {
    "matmul": Primitive(_matmul_fwd, _matmul_vjp),
    "add": Primitive(_add_fwd, _add_vjp),
    "bias_add": Primitive(_bias_add_fwd, _bias_add_vjp),
    "scale": Primitive(_scale_fwd, _scale_vjp),
    "gelu": Primitive(_gelu_fwd, _gelu_vjp),
    "row_softmax": Primitive(_row_softmax_fwd, _row_softmax_vjp),
    "log_softmax": Primitive(_log_softmax_fwd, _log_softmax_vjp),
    "rms_norm": Primitive(_rms_norm_fwd, _rms_norm_vjp),
    "reshape": Primitive(_reshape_fwd, _reshape_vjp),
    "transpose": Primitive(_transpose_fwd, _transpose_vjp),
    "take": Primitive(_take_fwd, _take_vjp),
    "concat": Primitive(_concat_fwd, _concat_vjp),
    "sum_all": Primitive(_sum_all_fwd, _sum_all_vjp),
    "softmax_cross_entropy": Primitive(_softmax_ce_fwd, _softmax_ce_vjp),
}


def _apply(op: str, inputs: Sequence[Tensor], **attrs: Any) -> Tensor:
    out = _PRIMITIVES[op].forward(*(t.data for t in inputs), **attrs)
    if _CHECK_FINITE.get() and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = next((t.tape for t in inputs if t.tape is not None), None)
    if tape is None:
        return Tensor(out)
    return tape.record(op, [tape.adopt(t) for t in inputs], out, attrs)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """c[..., i, j] = sum_t a[..., i, t] * b[..., t, j]; leading dims must agree."""
    return _apply("matmul", (a, b))


def add(a: Tensor, b: Tensor) -> Tensor:
    return _apply("add", (a, b))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    return _apply("bias_add", (x, b))


def scale(x: Tensor, factor: float) -> Tensor:
    return _apply("scale", (x,), factor=float(factor))


def gelu(x: Tensor) -> Tensor:
    return _apply("gelu", (x,))


def row_softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    return _apply("row_softmax", (x,))


def log_softmax(x: Tensor) -> Tensor:
    return _apply("log_softmax", (x,))


def rms_norm(x: Tensor, gamma: Tensor, eps: float) -> Tensor:
    """y = gamma * x / sqrt(mean(x^2) + eps) over the last axis."""
    if not eps > 0:
        raise ContractError(f"rms_norm: eps must be positive, got {eps}")
    return _apply("rms_norm", (x, gamma), eps=float(eps))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _apply("reshape", (x,), shape=tuple(int(s) for s in shape))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    return _apply("transpose", (x,), axes=tuple(int(a) for a in axes))


def take(x: Tensor, indices: Sequence[int] | np.ndarray, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis``; repeated indices accumulate gradient."""
    return _apply("take", (x,), indices=np.asarray(indices, dtype=np.int64), axis=int(axis))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if not xs:
        raise ContractError("concat needs at least one tensor")
    return _apply("concat", tuple(xs), axis=int(axis))


def sum_all(x: Tensor) -> Tensor:
    return _apply("sum_all", (x,))


def softmax_cross_entropy(logits: Tensor, targets: Sequence[int] | np.ndarray, weights: Sequence[float] | np.ndarray) -> Tensor:
    """Weighted mean of -log softmax(logits)[target] over rows; zero-weight rows are ignored."""
    return _apply(
        "softmax_cross_entropy",
        (logits,),
        targets=np.asarray(targets, dtype=np.int64),
        weights=np.asarray(weights, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Return dLoss/dP for every watched parameter; unused parameters get zeros."""
    if loss.tape is not tape:
        raise ContractError("loss was not recorded on this tape")
    if loss.data.size != 1:
        raise ContractError(f"loss must be a scalar tensor, got dims {loss.dims}")

    grads: dict[int, np.ndarray] = {loss.tid: np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g = grads.pop(entry.output, None)
        if g is None:
            continue
        wanted = [tape.requires_grad(tid) for tid in entry.inputs]
        if not any(wanted):
            continue
        inputs = [tape.value(tid) for tid in entry.inputs]
        parts = _PRIMITIVES[entry.op].vjp(g, tape.value(entry.output), *inputs, **entry.attrs)
        for tid, part, need in zip(entry.inputs, parts, wanted):
            if not need or part is None:
                continue
            grads[tid] = grads[tid] + part if tid in grads else part

    return {
        name: grads[tid] if tid in grads else np.zeros_like(tape.value(tid))
        for name, tid in tape.params.items()
    }


def numerical_gradient(
    fn: Callable[[Mapping[str, np.ndarray]], float],
    arrays: Mapping[str, np.ndarray],
    h: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central finite differences of scalar ``fn`` with respect to every entry of ``arrays``."""
    point = {name: np.array(a, dtype=np.float64) for name, a in arrays.items()}
    result = {}
    for name in sorted(point):
        base = point[name]
        grad = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            up = fn(point)
            flat[i] = saved - h
            down = fn(point)
            flat[i] = saved
            grad.reshape(-1)[i] = (up - down) / (2 * h)
        result[name] = grad
    return result


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale gradients so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(np.square(grads[n], dtype=np.float64))) for n in sorted(grads)))
    if max_norm <= 0 or norm <= max_norm:
        return dict(grads), norm
    factor = max_norm / (norm + 1e-6)
    return {n: g * g.dtype.type(factor) for n, g in grads.items()}, norm


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamHyper:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray]) -> AdamState:
        return cls(
            step=0,
            m={n: np.zeros_like(p) for n, p in params.items()},
            v={n: np.zeros_like(p) for n, p in params.items()},
        )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    hyper: AdamHyper,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new arrays and leaves inputs untouched."""
    step = state.step + 1
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    c1 = 1.0 - hyper.beta1 ** step
    c2 = 1.0 - hyper.beta2 ** step

    for name in sorted(params):
        p = params[name]
        if name not in grads or name not in state.m:
            raise ContractError(f"adam_step: no gradient or state for {name!r}")
        g, m, v = grads[name], state.m[name], state.v[name]
        if not (p.shape == g.shape == m.shape == v.shape):
            raise ShapeError(
                f"adam_step: {name!r} param {list(p.shape)}, grad {list(g.shape)}, state {list(m.shape)}"
            )
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        new_params[name] = (p - hyper.lr * update).astype(p.dtype, copy=False)
        new_m[name] = m.astype(p.dtype, copy=False)
        new_v[name] = v.astype(p.dtype, copy=False)

    return new_params, AdamState(step=step, m=new_m, v=new_v)


__all__ = [
    "AdamHyper",
    "AdamState",
    "Tape",
    "TapeEntry",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "bias_add",
    "check_finite",
    "clip_grad_norm",
    "concat",
    "default_dtype",
    "float64_mode",
    "gelu",
    "log_softmax",
    "matmul",
    "numerical_gradient",
    "reshape",
    "rms_norm",
    "row_softmax",
    "scale",
    "softmax_cross_entropy",
    "sum_all",
    "take",
    "tensor",
    "transpose",
]
