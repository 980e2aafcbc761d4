"""MaTrRec assembly: config, parameter construction, forward pass, checkpoints."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers as ly
from . import numerics as nx
from .errors import ConfigError, FormatError
from .numerics import Tensor


@dataclass(frozen=True)
class AblationFlags:
    add_positional_encoding: bool = False
    remove_ffn: bool = False
    remove_residual: bool = False
    remove_dropout: bool = False
    mamba_only: bool = False
    attention_only: bool = False

    def validate(self) -> None:
        if self.mamba_only and self.attention_only:
            raise ConfigError("mamba_only and attention_only are mutually exclusive")

    def active(self) -> list[str]:
        return [f.name for f in dataclasses.fields(self) if getattr(self, f.name)]


@dataclass(frozen=True)
class MaTrRecConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 1
    n_heads: int = 1
    n_mamba_blocks: int = 2
    d_state: int = 32
    conv_kernel: int = 4
    expand: int = 2
    dropout: float = 0.4
    max_len: int = 50
    ablation: AblationFlags = field(default_factory=AblationFlags)
    tie_weights: bool = False
    seed: int = 0
    dtype: str = "float32"

    def validate(self) -> None:
        problems = []
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_state", "conv_kernel", "expand", "max_len"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive (got {getattr(self, name)})")
        if self.n_mamba_blocks < 0:
            problems.append("n_mamba_blocks must be non-negative")
        if self.n_heads >= 1 and self.d_model % self.n_heads:
            problems.append(f"n_heads {self.n_heads} must divide d_model {self.d_model}")
        if not 0.0 <= self.dropout < 1.0:
            problems.append(f"dropout must lie in [0, 1) (got {self.dropout})")
        if self.dtype not in ("float32", "float64"):
            problems.append(f"dtype must be float32 or float64 (got {self.dtype!r})")
        try:
            self.ablation.validate()
        except ConfigError as exc:
            problems.append(str(exc))
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MaTrRecConfig":
        d = dict(d)
        d["ablation"] = AblationFlags(**d.get("ablation", {}))
        return cls(**d)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


def apply_ablation(config: MaTrRecConfig, flags: AblationFlags) -> MaTrRecConfig:
    """Return ``config`` with ``flags`` switched on (merged with existing flags)."""
    merged = AblationFlags(**{
        f.name: getattr(config.ablation, f.name) or getattr(flags, f.name)
        for f in dataclasses.fields(AblationFlags)
    })
    merged.validate()
    out = dataclasses.replace(config, ablation=merged)
    if merged.remove_dropout:
        out = dataclasses.replace(out, dropout=0.0)
    return out


@dataclass
class LayerGroup:
    mambas: list[ly.MambaBlockParams]
    mamba_norms: list[ly.NormParams]
    attention: ly.AttentionParams | None
    attention_norm: ly.NormParams | None
    ffn: ly.FfnParams | None
    ffn_norm: ly.NormParams

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = []
        for i, (m, n) in enumerate(zip(self.mambas, self.mamba_norms)):
            out += m.named_parameters(f"{prefix}mamba{i}.")
            out += n.named_parameters(f"{prefix}mamba{i}_norm.")
        if self.attention is not None:
            out += self.attention.named_parameters(f"{prefix}attn.")
            out += self.attention_norm.named_parameters(f"{prefix}attn_norm.")
        if self.ffn is not None:
            out += self.ffn.named_parameters(f"{prefix}ffn.")
        out += self.ffn_norm.named_parameters(f"{prefix}ffn_norm.")
        return out


@dataclass
class MaTrRecModel:
    config: MaTrRecConfig
    embedding: ly.EmbeddingTable
    embedding_norm: ly.NormParams
    position: Tensor | None
    groups: list[LayerGroup]
    head_w: Tensor | None
    head_b: Tensor

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("embedding.weight", self.embedding.weight)]
        out += self.embedding_norm.named_parameters("embedding_norm.")
        if self.position is not None:
            out.append(("position", self.position))
        for i, g in enumerate(self.groups):
            out += g.named_parameters(f"layer{i}.")
        if self.head_w is not None:
            out.append(("head.w", self.head_w))
        out.append(("head.b", self.head_b))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def state(self) -> list[np.ndarray]:
        return [t.data.copy() for t in self.parameters()]

    def load_state(self, arrays: list[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise FormatError(f"expected {len(params)} tensors, got {len(arrays)}")
        for t, a in zip(params, arrays):
            if a.shape != t.shape:
                raise FormatError(f"tensor shape {a.shape} does not match parameter {t.shape}")
            t.data = np.array(a, dtype=t.dtype)


def build_model(config: MaTrRecConfig) -> MaTrRecModel:
    """Deterministically initialise every parameter from ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    dt = np.dtype(config.dtype)
    D, flags = config.d_model, config.ablation
    emb = ly.EmbeddingTable.init(config.vocab_size, D, rng, dt)
    emb_norm = ly.NormParams.init(D, dt)
    pos = None
    if flags.add_positional_encoding:
        pos = Tensor(rng.normal(0.0, ly.INIT_STD, size=(config.max_len, D)), requires_grad=True, dtype=dt)
    groups = []
    for _ in range(config.n_layers):
        n_m = 0 if flags.attention_only else config.n_mamba_blocks
        mambas = [ly.MambaBlockParams.init(D, config.d_state, config.conv_kernel, config.expand, rng, dt)
                  for _ in range(n_m)]
        mnorms = [ly.NormParams.init(D, dt) for _ in range(n_m)]
        attn = attn_norm = None
        if not flags.mamba_only:
            attn = ly.AttentionParams.init(D, config.n_heads, rng, dt)
            attn_norm = ly.NormParams.init(D, dt)
        ffn = None if flags.remove_ffn else ly.FfnParams.init(D, rng, dt)
        groups.append(LayerGroup(mambas, mnorms, attn, attn_norm, ffn, ly.NormParams.init(D, dt)))
    head_w = None
    if not config.tie_weights:
        head_w = Tensor(rng.normal(0.0, ly.INIT_STD, size=(D, config.vocab_size)), requires_grad=True, dtype=dt)
    head_b = Tensor(np.zeros(config.vocab_size), requires_grad=True, dtype=dt)
    return MaTrRecModel(config, emb, emb_norm, pos, groups, head_w, head_b)


def param_count(model: MaTrRecModel) -> int:
    """Learnable scalars, not counting the frozen padding row."""
    return sum(t.size for t in model.parameters()) - model.config.d_model


def expected_param_count(config: MaTrRecConfig) -> int:
    """Closed-form parameter count for ``config``."""
    D, V, L = config.d_model, config.vocab_size, config.n_layers
    f = config.ablation
    n = V * D + 2 * D + V
    if not config.tie_weights:
        n += D * V
    if f.add_positional_encoding:
        n += config.max_len * D
    n_m = 0 if f.attention_only else config.n_mamba_blocks
    per_layer = n_m * (ly.mamba_param_count(D, config.d_state, config.conv_kernel, config.expand) + 2 * D)
    if not f.mamba_only:
        per_layer += 4 * D * D + 2 * D
    if not f.remove_ffn:
        per_layer += 4 * D * D + 4 * D + 4 * D * D + D
    per_layer += 2 * D
    return n + L * per_layer


# ---------------------------------------------------------------------------


def encode(model: MaTrRecModel, items: np.ndarray, lengths: np.ndarray | None = None,
           training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Hidden states [B, L, D] for a right-padded item matrix."""
    cfg = model.config
    items = np.asarray(items)
    B, L = items.shape
    if L > cfg.max_len:
        raise ConfigError(f"sequence length {L} exceeds max_len {cfg.max_len}")
    pad_mask = items != 0 if lengths is None else np.arange(L)[None, :] < np.asarray(lengths)[:, None]
    p = cfg.dropout
    residual = not cfg.ablation.remove_residual
    x = ly.embed_sequence(items, model.embedding, model.embedding_norm, p, training, rng)
    if model.position is not None:
        x = nx.add(x, nx.index(model.position, slice(0, L)))
    mask = ly.causal_mask(L)
    for g in model.groups:
        for m, n in zip(g.mambas, g.mamba_norms):
            x = ly.residual_norm(x, ly.mamba_block(x, m), n, p, training, rng, residual)
        if g.attention is not None:
            a = ly.multi_head_attention(x, g.attention, mask, pad_mask)
            x = ly.residual_norm(x, a, g.attention_norm, p, training, rng, residual)
        f = None if g.ffn is None else ly.feed_forward(x, g.ffn)
        x = ly.residual_norm(x, f, g.ffn_norm, p, training, rng, residual)
    return x


def head_logits(model: MaTrRecModel, h: Tensor) -> Tensor:
    if model.head_w is not None:
        return ly.predict_scores(h, model.head_w, model.head_b)
    w = nx.transpose(nx.index(model.embedding.weight, slice(1, None)), (1, 0))
    return ly.predict_scores(h, w, model.head_b)


def forward(model: MaTrRecModel, items: np.ndarray, lengths: np.ndarray | None = None,
            training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Logits [B, L, |V|] at every position."""
    h = encode(model, items, lengths, training, rng)
    B, L, D = h.shape
    logits = head_logits(model, nx.reshape(h, (B * L, D)))
    return nx.reshape(logits, (B, L, model.config.vocab_size))


def last_hidden(model: MaTrRecModel, items: np.ndarray, lengths: np.ndarray) -> Tensor:
    """Hidden state at each row's final real position (evaluation mode)."""
    lengths = np.asarray(lengths)
    h = encode(model, items, lengths, training=False)
    B, L, D = h.shape
    rows = np.arange(B) * L + (lengths - 1)
    return nx.gather_rows(nx.reshape(h, (B * L, D)), rows)


def estimate_memory_bytes(config: MaTrRecConfig, batch_size: int, seq_len: int) -> int:
    """Rough parameter + optimizer + activation footprint of one training step."""
    itemsize = np.dtype(config.dtype).itemsize
    params = expected_param_count(config) + config.d_model
    D, E, S = config.d_model, config.expand * config.d_model, config.d_state
    tokens = batch_size * seq_len
    per_layer = 0
    if not config.ablation.attention_only:
        per_layer += config.n_mamba_blocks * tokens * (2 * S * E + 8 * E + 4 * D)
    if not config.ablation.mamba_only:
        per_layer += tokens * (5 * D + 2 * config.n_heads * seq_len)
    if not config.ablation.remove_ffn:
        per_layer += tokens * (9 * D)
    acts = tokens * 3 * D + config.n_layers * per_layer + tokens * config.vocab_size
    return int(itemsize * (4 * params + acts))


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"MTRCKPT\x00"
VERSION = 1


def save_checkpoint(model: MaTrRecModel, path: str | Path, meta: dict | None = None) -> None:
    """Header (magic, version, canonical JSON) then float32 LE tensors in declaration order."""
    header = json.dumps({"config": model.config.to_dict(), "meta": meta or {},
                         "shapes": [list(t.shape) for t in model.parameters()]},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for t in model.parameters():
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[MaTrRecModel, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path} is not a checkpoint (bad magic)")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<II", raw, off)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off += 8
    header = json.loads(raw[off: off + hlen].decode())
    off += hlen
    model = build_model(MaTrRecConfig.from_dict(header["config"]))
    arrays = []
    for shape in header["shapes"]:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape))
        off += 4 * n
    if off != len(raw):
        raise FormatError(f"{path} has {len(raw) - off} trailing bytes")
    model.load_state(arrays)
    return model, header["meta"]
