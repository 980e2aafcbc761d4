"""Dense tensors with tape-based reverse-mode autodiff.

Every primitive computes its forward pass with numpy and, when a tape is
active and at least one input requires a gradient, records a node holding a
closure that maps the output gradient to input gradients.  ``backward`` then
replays the tape in reverse.

    >>> tape = Tape()
    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with tape:
    ...     loss = sum_(mul(x, x))
    >>> backward(tape, loss)
    >>> x.grad
    array([2., 4.])
"""
from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special

from .errors import ConfigError, ContractError, DimensionError

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "matrrec_active_tape", default=None
)


def _as_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ConfigError(f"unsupported tensor precision {dt}; use float32 or float64")
    return dt


class Tensor:
    """An n-dimensional float array that can take part in gradient tapes."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
        self.data = np.asarray(data, dtype=_as_dtype(dtype), order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; primitives evaluated inside the block are
    appended in execution order, which is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``out`` as a Tensor and put a node on the active tape if needed.

    ``backward_fn(g)`` must return one gradient (or None) per input.
    """
    needs = any(t.requires_grad for t in inputs)
    dtype = inputs[0].dtype if inputs else out.dtype
    result = Tensor(out, requires_grad=needs, dtype=dtype)
    tape = _ACTIVE_TAPE.get()
    if needs and tape is not None:
        tape.nodes.append(Node(tuple(inputs), result, backward_fn, op))
    return result


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss`` on ``tape``.

    Gradients accumulate (``+=``) into existing buffers, so micro-batches
    can be summed by calling this repeatedly before an optimizer step.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    if id(loss) not in produced:
        raise ContractError("loss tensor was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in produced:
                leaves[key] = inp
            prev = grads.get(key)
            grads[key] = ig if prev is None else prev + ig
    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.dtype, copy=False)
        if g.shape != leaf.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match tensor {leaf.shape}")
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return record("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return record("sub", out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    ad, bd = a.data, b.data
    out = ad * bd
    return record(
        "mul",
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(x: Tensor) -> Tensor:
    return record("neg", -x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return record("scale", x.data * c, (x,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def _bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return record("matmul", out, (a, b), _bw)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    shape = x.shape

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", np.asarray(out), (x,), _bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def index(x: Tensor, key) -> Tensor:
    """Basic or advanced indexing; the backward pass scatters with ``add.at``."""
    out = np.array(x.data[key])
    shape = x.shape

    def _bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, key, g)
        return (full,)

    return record("index", out, (x,), _bw)


def split_last(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != x.shape[-1]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover last extent of {x.shape}")
    parts, start = [], 0
    for s in sizes:
        parts.append(_slice_last(x, start, start + s))
        start += s
    return parts


def _slice_last(x: Tensor, lo: int, hi: int) -> Tensor:
    shape = x.shape

    def _bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., lo:hi] = g
        return (full,)

    return record("slice", np.ascontiguousarray(x.data[..., lo:hi]), (x,), _bw)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return record("concat", out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)))


def gather_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor (rows may repeat)."""
    rows = np.asarray(rows, dtype=np.intp)
    shape = x.shape

    def _bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, rows, g)
        return (full,)

    return record("gather_rows", x.data[rows], (x,), _bw)


# ---------------------------------------------------------------------------
# pointwise nonlinearities


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record("exp", out, (x,), lambda g: (g * out,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd / _SQRT2))
    out = xd * cdf

    def _bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return record("gelu", out.astype(xd.dtype, copy=False), (x,), _bw)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = special.expit(xd)
    out = xd * sig
    return record("silu", out, (x,), lambda g: (g * sig * (1.0 + xd * (1.0 - sig)),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(0.0, xd).astype(xd.dtype, copy=False)
    return record("softplus", out, (x,), lambda g: (g * special.expit(xd),))


_UNARY = {"gelu": gelu, "silu": silu, "softplus": softplus, "exp": exp}
_BINARY = {"add": add, "mul": mul}


def elementwise(kind: str, x, y=None) -> Tensor:
    """Dispatch a pointwise primitive by name."""
    if kind in _UNARY:
        return _UNARY[kind](x)
    if kind in _BINARY:
        if y is None:
            raise ContractError(f"elementwise {kind!r} needs two operands")
        return _BINARY[kind](x, y)
    raise ConfigError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# normalisation and probability


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax.

    ``mask`` (broadcastable boolean, True = keep) removes entries before
    normalising; a slice with nothing kept comes out as all zeros.
    """
    xd = x.data
    if mask is None:
        z = xd - xd.max(axis=axis, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=axis, keepdims=True)
    else:
        keep = np.broadcast_to(mask, xd.shape)
        z = np.where(keep, xd, -np.inf)
        m = z.max(axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(keep, np.exp(z - m), 0.0)
        s = e.sum(axis=axis, keepdims=True)
        out = np.divide(e, s, out=np.zeros_like(e), where=s > 0)
    out = out.astype(xd.dtype, copy=False)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record("softmax", out, (x,), _bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise over the last axis with population variance, then scale/shift."""
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} vs input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def _bw(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return record("layer_norm", out.astype(xd.dtype, copy=False), (x, gamma, beta), _bw)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; the identity outside training or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= p
    factor = (keep / (1.0 - p)).astype(x.dtype)
    return record("dropout", x.data * factor, (x,), lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# sequence primitives


def causal_conv1d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Depthwise causal convolution over axis 1 of a [B, L, C] tensor.

    out[:, t] = bias + sum_j kernel[j] * x[:, t - (K-1) + j]; earlier
    positions are implicitly zero.
    """
    if x.ndim != 3:
        raise DimensionError(f"causal_conv1d expects [B, L, C], got {x.shape}")
    K, C = kernel.shape
    if K < 1 or C != x.shape[2] or bias.shape != (C,):
        raise DimensionError(f"conv kernel {kernel.shape} / bias {bias.shape} vs input {x.shape}")
    B, L, _ = x.shape
    xp = np.concatenate([np.zeros((B, K - 1, C), dtype=x.dtype), x.data], axis=1)
    kd = kernel.data
    out = np.broadcast_to(bias.data, (B, L, C)).copy()
    for j in range(K):
        out += kd[j] * xp[:, j : j + L]

    def _bw(g):
        gpad = np.zeros((B, L + K - 1, C), dtype=g.dtype)
        gk = np.empty_like(kd)
        for j in range(K):
            gpad[:, j : j + L] += g * kd[j]
            gk[j] = (g * xp[:, j : j + L]).sum(axis=(0, 1))
        return gpad[:, K - 1 :], gk, g.sum(axis=(0, 1))

    return record("causal_conv1d", out, (x, kernel, bias), _bw)


def embedding(table: Tensor, ids: np.ndarray, padding_idx: int | None = 0) -> Tensor:
    """Row lookup; the padding row never receives gradient."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding id out of range [0, {table.shape[0] - 1}]")
    shape = table.shape

    def _bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        if padding_idx is not None:
            full[padding_idx] = 0.0
        return (full,)

    return record("embedding", table.data[ids], (table,), _bw)
