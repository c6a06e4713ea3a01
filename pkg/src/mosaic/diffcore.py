"""Differentiable dense-tensor core.

Float64 tensors, a dynamically recorded gradient tape, reverse-mode
backpropagation, and an Adam update rule. The tape is a Wengert list:
operations append themselves in execution order (which is automatically
topological), and ``backward`` replays the list in reverse.

Broadcasting is deliberately restricted to scalar-times-tensor and
row-wise bias addition so every gradient rule stays auditable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError

__all__ = [
    "AdamState",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "backward",
    "concat",
    "cross_entropy",
    "exp",
    "extract_patches",
    "l2_normalize",
    "matmul",
    "mean",
    "mul",
    "relu",
    "reshape",
    "slice_axis",
    "softmax",
    "sub",
    "tensor_sum",
    "transpose",
    "zero_grads",
]


class Tensor:
    """A dense float64 array with optional gradient tracking.

    ``value`` is always C-contiguous float64; ``data`` exposes the
    row-major flat view. Tensors with ``requires_grad=False`` are treated
    as frozen constants and are never touched by the optimizer.
    """

    __slots__ = ("value", "requires_grad", "grad", "tape")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def data(self) -> np.ndarray:
        """Row-major flat view of the underlying storage."""
        return self.value.reshape(-1)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Thin operator sugar over the module-level ops.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# Tape


@dataclass
class _TapeEntry:
    output: Tensor
    inputs: tuple[Tensor, ...]
    grad_fn: object  # callable(out_grad) -> tuple of per-input grads (or None)


class Tape:
    """Wengert list of executed operations.

    Use as a context manager around a forward pass; operations involving a
    grad-requiring tensor record themselves while the tape is active.
    Outside any tape, ops run in inference mode and track nothing.
    """

    def __init__(self):
        self.entries: list[_TapeEntry] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self.entries)


_TAPE_STACK: list[Tape] = []

_FINITE_CHECKS = False


def set_finite_checks(enabled: bool) -> None:
    """Toggle per-operation finiteness assertions (used by the test suite)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    if _FINITE_CHECKS and not np.all(np.isfinite(value)):
        raise ContractError("operation produced a non-finite value")
    out = Tensor(value)
    tape = _TAPE_STACK[-1] if _TAPE_STACK else None
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.entries.append(_TapeEntry(out, inputs, grad_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    The loss must be a scalar recorded on a tape. Gradients accumulate, so
    call :func:`zero_grads` on parameters between steps.
    """
    if loss.ndim != 0:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise ContractError("loss was not recorded on an active tape")
    tape = loss.tape
    flowing: dict[int, np.ndarray] = {id(loss): np.asarray(1.0)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for entry in reversed(tape.entries):
        out_grad = flowing.get(id(entry.output))
        if out_grad is None:
            continue
        input_grads = entry.grad_fn(out_grad)
        for tensor, g in zip(entry.inputs, input_grads):
            if g is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in flowing:
                flowing[key] = flowing[key] + g
            else:
                flowing[key] = np.asarray(g, dtype=np.float64)
            holders[key] = tensor
    for key, tensor in holders.items():
        if not tensor.requires_grad:
            continue
        g = np.ascontiguousarray(flowing[key], dtype=np.float64)
        tensor.grad = g if tensor.grad is None else tensor.grad + g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: incompatible shapes {a.shape} and {b.shape}"
        )
    a_val, b_val = a.value, b.value

    def grad_fn(g):
        return g @ b_val.T, a_val.T @ g

    return _emit(a_val @ b_val, (a, b), grad_fn)


def _binary_mode(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "scalar_rhs"
    if a.ndim == 0:
        return "scalar_lhs"
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return "row_bias"
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also supports scalar offsets and row-wise bias."""
    mode = _binary_mode(a, b, "add")

    def grad_fn(g):
        if mode == "same":
            return g, g
        if mode == "scalar_rhs":
            return g, np.sum(g)
        if mode == "scalar_lhs":
            return np.sum(g), g
        return g, np.sum(g, axis=0)

    return _emit(a.value + b.value, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference with the same shape rules as :func:`add`."""
    mode = _binary_mode(a, b, "sub")

    def grad_fn(g):
        if mode == "same":
            return g, -g
        if mode == "scalar_rhs":
            return g, -np.sum(g)
        if mode == "scalar_lhs":
            return np.sum(g), -g
        return g, -np.sum(g, axis=0)

    return _emit(a.value - b.value, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; either side may be a scalar."""
    mode = _binary_mode(a, b, "mul")
    if mode == "row_bias":
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    a_val, b_val = a.value, b.value

    def grad_fn(g):
        if mode == "same":
            return g * b_val, g * a_val
        if mode == "scalar_rhs":
            return g * b_val, np.sum(g * a_val)
        return np.sum(g * b_val), g * a_val

    return _emit(a_val * b_val, (a, b), grad_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0

    def grad_fn(g):
        return (g * mask,)

    return _emit(np.where(mask, x.value, 0.0), (x,), grad_fn)


def exp(x: Tensor) -> Tensor:
    out_val = np.exp(x.value)

    def grad_fn(g):
        return (g * out_val,)

    return _emit(out_val, (x,), grad_fn)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    """Arithmetic mean over all entries or along one axis."""
    if axis is None:
        n = x.size
        shape = x.shape

        def grad_fn(g):
            return (np.full(shape, float(g) / n),)

        return _emit(np.mean(x.value), (x,), grad_fn)
    _check_axis(x, axis, "mean")
    n = x.shape[axis]
    shape = x.shape

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),)

    return _emit(np.mean(x.value, axis=axis), (x,), grad_fn)


def tensor_sum(x: Tensor, axis: int | None = None) -> Tensor:
    """Sum over all entries or along one axis."""
    if axis is None:
        shape = x.shape

        def grad_fn(g):
            return (np.full(shape, float(g)),)

        return _emit(np.sum(x.value), (x,), grad_fn)
    _check_axis(x, axis, "sum")
    shape = x.shape

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit(np.sum(x.value, axis=axis), (x,), grad_fn)


def _check_axis(x: Tensor, axis: int, op: str) -> None:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"{op}: axis {axis} invalid for shape {x.shape}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis``; outputs are positive and sum to one."""
    _check_axis(x, axis, "softmax")
    shifted = x.value - np.max(x.value, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_val = e / np.sum(e, axis=axis, keepdims=True)

    def grad_fn(g):
        inner = np.sum(g * out_val, axis=axis, keepdims=True)
        return (out_val * (g - inner),)

    return _emit(out_val, (x,), grad_fn)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the labelled class per row."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    n, c = logits.shape
    labels = [int(l) for l in labels]
    if len(labels) != n:
        raise DimensionError(
            f"cross_entropy: {len(labels)} labels for {n} logit rows"
        )
    for l in labels:
        if not 0 <= l < c:
            raise IndexError(f"cross_entropy: label {l} out of range for {c} classes")
    idx = np.asarray(labels)
    shifted = logits.value - np.max(logits.value, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    log_probs = shifted - lse
    loss = -np.mean(log_probs[np.arange(n), idx])

    def grad_fn(g):
        p = np.exp(log_probs)
        p[np.arange(n), idx] -= 1.0
        return (p * (float(g) / n),)

    return _emit(np.asarray(loss), (logits,), grad_fn)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale a vector, or each row of a matrix, to unit Euclidean norm.

    A zero row signals upstream corruption and raises
    :class:`DegenerateInputError` rather than being epsilon-fixed.
    """
    if x.ndim == 1:
        norm = float(np.linalg.norm(x.value))
        if norm == 0.0:
            raise DegenerateInputError("l2_normalize: zero vector")
        y = x.value / norm

        def grad_fn(g):
            return ((g - np.dot(g, y) * y) / norm,)

        return _emit(y, (x,), grad_fn)
    if x.ndim == 2:
        norms = np.linalg.norm(x.value, axis=1, keepdims=True)
        zero_rows = np.flatnonzero(norms[:, 0] == 0.0)
        if zero_rows.size:
            raise DegenerateInputError(f"l2_normalize: zero row at index {zero_rows[0]}")
        y = x.value / norms

        def grad_fn(g):
            inner = np.sum(g * y, axis=1, keepdims=True)
            return ((g - inner * y) / norms,)

        return _emit(y, (x,), grad_fn)
    raise DimensionError(f"l2_normalize: expected 1-D or 2-D input, got {x.shape}")


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate tensors along ``axis``."""
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat: no tensors given")
    ndim = tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise DimensionError(
                f"concat: rank mismatch between {tensors[0].shape} and {t.shape}"
            )
    axis = axis if axis >= 0 else axis + ndim
    if not 0 <= axis < ndim:
        raise DimensionError(f"concat: axis {axis} invalid for rank {ndim}")
    for t in tensors[1:]:
        for d in range(ndim):
            if d != axis and t.shape[d] != tensors[0].shape[d]:
                raise DimensionError(
                    f"concat: incompatible shapes {tensors[0].shape} and {t.shape}"
                )
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        pieces = []
        for i in range(len(sizes)):
            sl = [slice(None)] * ndim
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _emit(
        np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors), grad_fn
    )


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose: expected 2-D input, got {x.shape}")

    def grad_fn(g):
        return (g.T,)

    return _emit(x.value.T.copy(), (x,), grad_fn)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    old_shape = x.shape

    def grad_fn(g):
        return (g.reshape(old_shape),)

    return _emit(x.value.reshape(shape), (x,), grad_fn)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start, stop)`` along one axis."""
    _check_axis(x, axis, "slice")
    axis = axis if axis >= 0 else axis + x.ndim
    extent = x.shape[axis]
    if not (0 <= start <= stop <= extent):
        raise DimensionError(
            f"slice: range [{start}, {stop}) invalid for axis {axis} of {x.shape}"
        )
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape)
        full[sl] = g
        return (full,)

    return _emit(x.value[sl].copy(), (x,), grad_fn)


def extract_patches(x: Tensor, kh: int, kw: int, sh: int, sw: int) -> Tensor:
    """Gather sliding-window patches from an (H, W, C) tensor.

    Returns shape (num_positions, kh*kw*C) with positions in row-major
    order, i.e. the im2col layout used by the convolutional stack. The
    gradient is the exact scatter-add of the gather.
    """
    if x.ndim != 3:
        raise DimensionError(f"extract_patches: expected (H, W, C) input, got {x.shape}")
    h, w, c = x.shape
    if kh > h or kw > w:
        raise DimensionError(
            f"extract_patches: kernel ({kh}, {kw}) larger than input ({h}, {w})"
        )
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    # Flat gather indices, built once per call from the shape arithmetic.
    base = (np.arange(kh)[:, None] * w + np.arange(kw)[None, :]) * c
    base = (base[:, :, None] + np.arange(c)[None, None, :]).reshape(-1)
    starts = (
        (np.arange(oh)[:, None] * sh * w + np.arange(ow)[None, :] * sw) * c
    ).reshape(-1)
    idx = starts[:, None] + base[None, :]
    flat = x.value.reshape(-1)
    n = flat.size

    def grad_fn(g):
        acc = np.zeros(n)
        np.add.at(acc, idx.reshape(-1), g.reshape(-1))
        return (acc.reshape(x.shape),)

    return _emit(flat[idx], (x,), grad_fn)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Per-parameter Adam accumulators plus the shared step counter."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params, learning_rate: float, **kwargs) -> "AdamState":
        state = cls(learning_rate=learning_rate, **kwargs)
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
        return state


def adam_step(params, grads, state: AdamState):
    """One Adam update with bias correction; mutates params and state in place."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError(
            f"adam_step: {len(params)} params, {len(grads)} grads, "
            f"{len(state.m)} state slots"
        )
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(
                f"adam_step: shape mismatch param {p.shape} vs grad {g.shape}"
            )
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / bias1
        v_hat = state.v[i] / bias2
        p.value -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state


def finite_difference_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function; the gradient oracle."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * h)
    return g
