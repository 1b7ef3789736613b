"""Dense float32 tensors with a reverse-mode tape.

Data is row-major numpy float32 and every differentiable op records one node
on the active tape. The op set is deliberately small: enough to express a
decoder LM forward pass, a cross-entropy loss, and an optimizer, nothing else.
Ops called with no tape active just compute (the inference path).
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "NondeterministicError",
    "apply_op",
    "backward",
    "grad_check_fd",
    "set_debug_checks",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "reshape",
    "transpose",
    "tsum",
    "tmean",
    "silu",
    "softmax_rows",
    "embedding",
    "cross_entropy",
    "zeros",
    "ones",
    "MacCounter",
    "mac_scope",
    "write_tensor",
    "read_tensor",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Tape misuse: double backward, non-scalar loss, loss not on tape."""


class NondeterministicError(RuntimeError):
    """A function handed to the gradient checker returned different values twice."""


_TLS = threading.local()

_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle the post-op finite check (NaN/Inf detection on forward outputs)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def _tape_stack() -> list:
    stack = getattr(_TLS, "tapes", None)
    if stack is None:
        stack = _TLS.tapes = []
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


# ---------------------------------------------------------------------------
# MAC instrumentation
# ---------------------------------------------------------------------------


class MacCounter:
    """Counts multiply-accumulates observed during forward computation.

    `linear` collects m*n*k of every projection/FFN matmul. Attention
    score/value products are reported by the attention ops themselves into
    `self_attn` / `cross_attn` on a KV-width basis (each attended (query,
    cache-row) pair costs kv_width multiplies per pass, for K and for V),
    matching the convention of the analytic cost model; the raw matmuls
    inside attention are suppressed from `linear` to avoid double counting.
    """

    __slots__ = ("linear", "self_attn", "cross_attn", "_suppress")

    def __init__(self):
        self.linear = 0
        self.self_attn = 0
        self.cross_attn = 0
        self._suppress = 0

    @property
    def total(self) -> int:
        return self.linear + self.self_attn + self.cross_attn

    def add_attention(self, kind: str, macs: int) -> None:
        if kind == "self":
            self.self_attn += macs
        else:
            self.cross_attn += macs


class _SuppressLinear:
    def __init__(self, counter):
        self.counter = counter

    def __enter__(self):
        if self.counter is not None:
            self.counter._suppress += 1

    def __exit__(self, *exc):
        if self.counter is not None:
            self.counter._suppress -= 1


def _mac_stack() -> list:
    stack = getattr(_TLS, "macs", None)
    if stack is None:
        stack = _TLS.macs = []
    return stack


def active_mac_counter() -> MacCounter | None:
    stack = _mac_stack()
    return stack[-1] if stack else None


def suppress_linear_macs() -> _SuppressLinear:
    return _SuppressLinear(active_mac_counter())


class mac_scope:
    """Context manager installing a fresh MacCounter for the enclosed ops."""

    def __enter__(self) -> MacCounter:
        self.counter = MacCounter()
        _mac_stack().append(self.counter)
        return self.counter

    def __exit__(self, *exc):
        popped = _mac_stack().pop()
        assert popped is self.counter


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """Dense float32 array with an optional gradient buffer.

    Immutable after creation except for `grad`, which `backward` populates on
    leaves with `requires_grad=True`.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __float__(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"cannot convert shape {self.shape} tensor to float")
        return self.item()

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of ops; a context manager that becomes the active tape."""

    def __init__(self):
        self.ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False
        self._out_ids: set[int] = set()

    def _record(self, out: Tensor, inputs: tuple, backward_fn: Callable) -> None:
        self.ops.append((out, inputs, backward_fn))
        self._out_ids.add(id(out))

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.ops)


def apply_op(inputs: tuple, out_data: np.ndarray, backward_fn: Callable, name: str = "op") -> Tensor:
    """Wrap `out_data` as a Tensor, recording the op if a tape is active.

    `backward_fn(out_grad)` must return one gradient array (or None) per
    input, each already reduced to that input's exact shape.
    """
    if _debug_checks and not np.all(np.isfinite(out_data)):
        raise ArithmeticError(f"non-finite values produced by {name}")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(out, tuple(inputs), backward_fn)
    else:
        out.requires_grad = False
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate `grad` on every requires_grad leaf reachable from `loss`.

    Gradients add across multiple uses of a leaf, so weights shared between
    loop iterations receive the sum of per-iteration contributions.
    """
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if id(loss) not in tape._out_ids:
        raise TapeError("loss was not produced on this tape")
    if tape.consumed:
        raise TapeError("tape already consumed; rebuild the graph to call backward again")
    tape.consumed = True

    table: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    out_ids = tape._out_ids
    for out, inputs, backward_fn in reversed(tape.ops):
        out_grad = table.pop(id(out), None)
        if out_grad is None:
            continue
        for tin, gin in zip(inputs, backward_fn(out_grad)):
            if gin is None or not tin.requires_grad:
                continue
            if id(tin) in out_ids:
                key = id(tin)
                held = table.get(key)
                table[key] = gin if held is None else held + gin
            elif tin.grad is None:
                tin.grad = np.array(gin, dtype=np.float32, copy=True)
            else:
                tin.grad += gin


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.astype(np.float32, copy=False)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_op((a, b), out, bwd, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return apply_op((a, b), out, bwd, "sub")


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        return (-g,)

    return apply_op((a,), -a.data, bwd, "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad * bd

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return apply_op((a, b), out, bwd, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; batch dims broadcast like numpy matmul."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions incompatible: {a.shape} x {b.shape}") from None
    ad, bd = a.data, b.data
    out = ad @ bd

    counter = active_mac_counter()
    if counter is not None and not counter._suppress:
        counter.linear += out.size * a.shape[-1]

    def bwd(g):
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), a.shape)
        gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return apply_op((a, b), out, bwd, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return apply_op((a,), out, bwd, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    """Permute axes; output is materialized contiguous (no strided views)."""
    a = _as_tensor(a)
    axes = tuple(axes)
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(np.transpose(g, inverse)),)

    return apply_op((a,), out, bwd, "transpose")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(np.float32),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).astype(np.float32),)

    return apply_op((a,), np.asarray(out, dtype=np.float32), bwd, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    s = tsum(a, axis=axis, keepdims=keepdims)
    return mul(s, np.float32(1.0 / count))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), the beta=1 swish."""
    a = _as_tensor(a)
    sig = _sigmoid(a.data)
    out = a.data * sig

    def bwd(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return apply_op((a,), out, bwd, "silu")


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the trailing dimension, stabilized by max subtraction."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return apply_op((a,), y, bwd, "softmax_rows")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]; backward scatter-adds."""
    ids = np.asarray(ids)
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return apply_op((table,), out, bwd, "embedding")


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean masked next-token cross-entropy over all leading positions.

    `targets` holds class indices shaped like `logits` minus the vocab axis;
    `mask` (same shape, 0/1) selects which positions contribute. Scalar out.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} != logits positions {logits.shape[:-1]}")
    vocab = logits.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    tflat = targets.reshape(-1)
    if mask is None:
        mflat = np.ones(tflat.shape[0], dtype=np.float32)
    else:
        mflat = np.asarray(mask, dtype=np.float32).reshape(-1)
    denom = mflat.sum()
    if denom <= 0:
        raise ShapeError("cross_entropy mask selects no positions")

    m = flat.max(axis=-1, keepdims=True)
    e = np.exp(flat - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = (flat - m) - np.log(z)
    rows = np.arange(tflat.shape[0])
    nll = -logp[rows, tflat]
    loss = np.asarray((nll * mflat).sum() / denom, dtype=np.float32)

    def bwd(g):
        p = e / z
        p[rows, tflat] -= 1.0
        p *= (mflat / denom)[:, None] * g.reshape(())
        return (p.reshape(logits.shape).astype(np.float32),)

    return apply_op((logits,), loss, bwd, "cross_entropy")


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


def grad_check_fd(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
    max_coords_per_tensor: int = 8,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare tape gradients of `f(params)` against central differences.

    Large tensors are checked on a sample of coordinates: the ones with the
    largest tape gradients (best finite-difference signal-to-noise in
    float32) unless an `rng` asks for uniform sampling. Returns the max
    relative error `|fd - tape| / max(|fd|, |tape|, 1e-8)`. `f` must be
    deterministic; a double forward evaluation guards against hidden
    randomness.
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")

    first = float(f(params))
    second = float(f(params))
    if first != second:
        raise NondeterministicError(
            f"f returned {first!r} then {second!r} on identical inputs"
        )

    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f(params)
    backward(loss, tape)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p, g in zip(params, saved):
        p.grad = g

    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        if p.size <= max_coords_per_tensor:
            coords = np.arange(p.size)
        elif rng is not None:
            coords = rng.choice(p.size, size=max_coords_per_tensor, replace=False)
        else:
            coords = np.argsort(-np.abs(an.reshape(-1)))[:max_coords_per_tensor]
        for c in coords:
            orig = flat[c]
            flat[c] = orig + np.float32(eps)
            hi = flat[c]
            f_plus = float(f(params))
            flat[c] = orig - np.float32(eps)
            lo = flat[c]
            f_minus = float(f(params))
            flat[c] = orig
            # Use the realized float32 step, not the nominal eps.
            fd = (f_plus - f_minus) / (float(hi) - float(lo))
            a = float(an.reshape(-1)[c])
            err = abs(fd - a) / max(abs(fd), abs(a), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Flat binary serialization
# ---------------------------------------------------------------------------


def write_tensor(fh, t) -> None:
    """Header (rank then dims, little-endian uint64) + float32 LE payload."""
    arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype=np.float32)
    fh.write(struct.pack("<Q", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype("<f4", copy=False).tobytes())


def read_tensor(fh) -> np.ndarray:
    rank = struct.unpack("<Q", fh.read(8))[0]
    dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
