"""Model building blocks: embedding, Mamba block, attention, FFN, head."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DimensionError
from .numerics import Tensor

LN_EPS = 1e-12
INIT_STD = 0.02


def _normal(rng: np.random.Generator, shape, dtype, std: float = INIT_STD, name=None) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, dtype=dtype, name=name)


def _const(value, shape, dtype, name=None) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True, dtype=dtype, name=name)


class ParamGroup:
    """Mixin: iterate Tensor fields in declaration order."""

    def parameters(self) -> list[Tensor]:
        return [getattr(self, f.name) for f in fields(self) if isinstance(getattr(self, f.name), Tensor)]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Tensor):
                out.append((prefix + f.name, v))
        return out


@dataclass
class NormParams(ParamGroup):
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, d: int, dtype) -> "NormParams":
        return cls(_const(1.0, (d,), dtype), _const(0.0, (d,), dtype))


@dataclass
class EmbeddingTable(ParamGroup):
    """Item table of shape (n_items + 1, D); row 0 is the frozen padding row."""

    weight: Tensor

    @classmethod
    def init(cls, n_items: int, d: int, rng, dtype) -> "EmbeddingTable":
        if n_items < 1 or d < 1:
            raise ConfigError("embedding needs at least one item and one dimension")
        w = rng.normal(0.0, INIT_STD, size=(n_items + 1, d))
        w[0] = 0.0
        return cls(Tensor(w, requires_grad=True, dtype=dtype))

    @property
    def n_items(self) -> int:
        return self.weight.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class MambaBlockParams(ParamGroup):
    in_proj: Tensor  # [D, 2E]
    conv_kernel: Tensor  # [K, E]
    conv_bias: Tensor  # [E]
    x_proj: Tensor  # [E, dt_rank + 2S]
    dt_proj: Tensor  # [dt_rank, E]
    dt_bias: Tensor  # [E]
    A_log: Tensor  # [E, S]
    D_skip: Tensor  # [E]
    out_proj: Tensor  # [E, D]

    @classmethod
    def init(cls, d_model: int, d_state: int, conv_kernel: int, expand: int, rng, dtype,
             dt_min: float = 1e-3, dt_max: float = 1e-1) -> "MambaBlockParams":
        e = expand * d_model
        r = dt_rank(d_model)
        in_proj = _normal(rng, (d_model, 2 * e), dtype)
        bound = 1.0 / math.sqrt(conv_kernel)
        conv_k = Tensor(rng.uniform(-bound, bound, size=(conv_kernel, e)), requires_grad=True, dtype=dtype)
        conv_b = _const(0.0, (e,), dtype)
        x_proj = _normal(rng, (e, r + 2 * d_state), dtype)
        dt_proj = _normal(rng, (r, e), dtype)
        # softplus(dt_bias) lands log-uniformly in [dt_min, dt_max]
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=e))
        dt_b = Tensor(dt + np.log(-np.expm1(-dt)), requires_grad=True, dtype=dtype)
        a_log = Tensor(np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (e, 1))),
                       requires_grad=True, dtype=dtype)
        d_skip = _const(1.0, (e,), dtype)
        out_proj = _normal(rng, (e, d_model), dtype)
        return cls(in_proj, conv_k, conv_b, x_proj, dt_proj, dt_b, a_log, d_skip, out_proj)

    @property
    def d_inner(self) -> int:
        return self.D_skip.shape[0]

    @property
    def d_state(self) -> int:
        return self.A_log.shape[1]

    @property
    def dt_rank(self) -> int:
        return self.dt_proj.shape[0]


@dataclass
class AttentionParams(ParamGroup):
    """Per-head projections are stored side by side: head i owns columns i*d_k:(i+1)*d_k."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    n_heads: int = 1

    @classmethod
    def init(cls, d_model: int, n_heads: int, rng, dtype) -> "AttentionParams":
        if n_heads < 1 or d_model % n_heads:
            raise ConfigError(f"head count {n_heads} must divide d_model {d_model}")
        mats = [_normal(rng, (d_model, d_model), dtype) for _ in range(4)]
        return cls(*mats, n_heads=n_heads)

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1] // self.n_heads


@dataclass
class FfnParams(ParamGroup):
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, d_model: int, rng, dtype) -> "FfnParams":
        inner = 4 * d_model
        return cls(
            _normal(rng, (d_model, inner), dtype),
            _const(0.0, (inner,), dtype),
            _normal(rng, (inner, d_model), dtype),
            _const(0.0, (d_model,), dtype),
        )


def dt_rank(d_model: int) -> int:
    return math.ceil(d_model / 16)


def mamba_param_count(d_model: int, d_state: int, conv_kernel: int, expand: int) -> int:
    e, r = expand * d_model, dt_rank(d_model)
    return (d_model * 2 * e + conv_kernel * e + e + e * (r + 2 * d_state)
            + r * e + e + e * d_state + e + e * d_model)


# ---------------------------------------------------------------------------


def embed_sequence(items: np.ndarray, table: EmbeddingTable, norm: NormParams, p_drop: float,
                   training: bool, rng=None) -> Tensor:
    """Lookup, dropout, then layer norm."""
    items = np.asarray(items)
    if items.size and items.max() > table.n_items:
        raise ContractError(f"item id {int(items.max())} is outside the vocabulary of {table.n_items}")
    if items.size and items.min() < 0:
        raise ContractError("item ids must be non-negative")
    h = nx.embedding(table.weight, items, padding_idx=0)
    h = nx.dropout(h, p_drop, training, rng)
    return nx.layer_norm(h, norm.gamma, norm.beta, LN_EPS)


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B_in: Tensor, C: Tensor, D_skip: Tensor) -> Tensor:
    """Sequential selective SSM scan with a hand-written reverse pass.

    Per channel c with zero initial state:
        h_t = exp(delta_t[c] * A[c]) * h_{t-1} + delta_t[c] * B_in[t] * u_t[c]
        y_t[c] = <C[t], h_t> + D_skip[c] * u_t[c]
    """
    Bsz, L, E = u.shape
    S = A.shape[1]
    if delta.shape != u.shape or A.shape != (E, S) or B_in.shape != (Bsz, L, S) \
            or C.shape != (Bsz, L, S) or D_skip.shape != (E,):
        raise DimensionError(
            f"selective_scan shapes u{u.shape} delta{delta.shape} A{A.shape} "
            f"B{B_in.shape} C{C.shape} D{D_skip.shape}"
        )
    ud, dd, Ad, Bd, Cd, Dd = u.data, delta.data, A.data, B_in.data, C.data, D_skip.data
    if not np.all(dd > 0):
        raise ContractError("selective_scan requires strictly positive step sizes")

    needs_grad = nx.active_tape() is not None and any(
        t.requires_grad for t in (u, delta, A, B_in, C, D_skip))
    du_ = dd * ud  # [B, L, E]
    hs = np.empty((Bsz, L, E, S), dtype=ud.dtype) if needs_grad else None
    h = np.zeros((Bsz, E, S), dtype=ud.dtype)
    y = np.empty_like(ud)
    for t in range(L):
        h = np.exp(dd[:, t, :, None] * Ad) * h + du_[:, t, :, None] * Bd[:, t, None, :]
        if needs_grad:
            hs[:, t] = h
        y[:, t] = np.einsum("bes,bs->be", h, Cd[:, t])
    y += Dd * ud
    if not needs_grad:
        return Tensor(y, dtype=ud.dtype)

    def _bw(gy):
        g_u = gy * Dd
        g_D = (gy * ud).sum(axis=(0, 1))
        g_C = np.einsum("ble,bles->bls", gy, hs)
        g_delta = np.zeros_like(dd)
        g_A = np.zeros_like(Ad)
        g_B = np.empty_like(Bd)
        dh = np.zeros((Bsz, E, S), dtype=gy.dtype)
        for t in range(L - 1, -1, -1):
            dh += gy[:, t, :, None] * Cd[:, t, None, :]
            # through the input term du_ * B
            g_x = np.einsum("bes,bs->be", dh, Bd[:, t])
            g_B[:, t] = np.einsum("bes,be->bs", dh, du_[:, t])
            g_u[:, t] += g_x * dd[:, t]
            g_delta[:, t] += g_x * ud[:, t]
            # through the decay exp(delta * A)
            if t > 0:
                decay = np.exp(dd[:, t, :, None] * Ad)
                g_dA = dh * hs[:, t - 1] * decay
                g_delta[:, t] += np.einsum("bes,es->be", g_dA, Ad)
                g_A += np.einsum("bes,be->es", g_dA, dd[:, t])
                dh *= decay
        return g_u, g_delta, g_A, g_B, g_C, g_D

    return nx.record("selective_scan", y, (u, delta, A, B_in, C, D_skip), _bw)


def mamba_block(X: Tensor, p: MambaBlockParams) -> Tensor:
    """in_proj -> (conv, silu, selective scan) gated by silu(z) -> out_proj."""
    E, S, R = p.d_inner, p.d_state, p.dt_rank
    xz = nx.matmul(X, p.in_proj)
    x, z = nx.split_last(xz, [E, E])
    x = nx.silu(nx.causal_conv1d(x, p.conv_kernel, p.conv_bias))
    dbc = nx.matmul(x, p.x_proj)
    dt, b_in, c = nx.split_last(dbc, [R, S, S])
    delta = nx.softplus(nx.add(nx.matmul(dt, p.dt_proj), p.dt_bias))
    A = nx.neg(nx.exp(p.A_log))
    y = selective_scan(x, delta, A, b_in, c, p.D_skip)
    y = nx.mul(y, nx.silu(z))
    return nx.matmul(y, p.out_proj)


def causal_mask(L: int) -> np.ndarray:
    return np.tril(np.ones((L, L), dtype=bool))


def multi_head_attention(X: Tensor, p: AttentionParams, mask: np.ndarray | None = None,
                         pad_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over h heads, then the output projection.

    ``mask`` is [L, L] (True = may attend); ``pad_mask`` is [B, L] with True
    at real (non-padding) positions.  Rows with nothing to attend to output 0.
    """
    Bsz, L, D = X.shape
    h, dk = p.n_heads, p.d_k
    if mask is None:
        mask = causal_mask(L)
    keep = np.asarray(mask, dtype=bool)[None, None]
    if pad_mask is not None:
        keep = keep & np.asarray(pad_mask, dtype=bool)[:, None, None, :]

    def heads(w):
        t = nx.reshape(nx.matmul(X, w), (Bsz, L, h, dk))
        return nx.transpose(t, (0, 2, 1, 3))

    q, k, v = heads(p.w_q), heads(p.w_k), heads(p.w_v)
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    weights = nx.softmax(scores, axis=-1, mask=keep)
    o = nx.matmul(weights, v)
    o = nx.reshape(nx.transpose(o, (0, 2, 1, 3)), (Bsz, L, h * dk))
    return nx.matmul(o, p.w_o)


def attention_weights(X: Tensor, p: AttentionParams, mask: np.ndarray | None = None) -> np.ndarray:
    """The [B, h, L, L] attention probabilities (no tape); handy for inspection."""
    Bsz, L, _ = X.shape
    h, dk = p.n_heads, p.d_k
    mask = causal_mask(L) if mask is None else mask
    q = (X.data @ p.w_q.data).reshape(Bsz, L, h, dk).transpose(0, 2, 1, 3)
    k = (X.data @ p.w_k.data).reshape(Bsz, L, h, dk).transpose(0, 2, 1, 3)
    s = Tensor(q @ k.transpose(0, 1, 3, 2) / math.sqrt(dk))
    return nx.softmax(s, axis=-1, mask=mask[None, None]).data


def feed_forward(H: Tensor, p: FfnParams) -> Tensor:
    inner = nx.gelu(nx.add(nx.matmul(H, p.w1), p.b1))
    return nx.add(nx.matmul(inner, p.w2), p.b2)


def residual_norm(x: Tensor, sublayer_out: Tensor | None, norm: NormParams, p_drop: float = 0.0,
                  training: bool = False, rng=None, residual: bool = True) -> Tensor:
    """Post-norm residual: layer_norm(x + dropout(sublayer_out)).

    ``sublayer_out=None`` stands for a removed sublayer (zero output);
    ``residual=False`` drops the skip path.
    """
    if sublayer_out is None:
        s = None
    else:
        if sublayer_out.shape != x.shape:
            raise DimensionError(f"residual shapes differ: {x.shape} vs {sublayer_out.shape}")
        s = nx.dropout(sublayer_out, p_drop, training, rng)
    if residual:
        pre = x if s is None else nx.add(x, s)
    else:
        pre = s if s is not None else Tensor(np.zeros(x.shape), dtype=x.dtype)
    return nx.layer_norm(pre, norm.gamma, norm.beta, LN_EPS)


def predict_scores(h: Tensor, W_h: Tensor, b_h: Tensor) -> Tensor:
    """Logits over items 1..|V| (column j scores item j + 1)."""
    return nx.add(nx.matmul(h, W_h), b_h)
