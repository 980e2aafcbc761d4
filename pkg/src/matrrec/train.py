"""Full-softmax next-item training with Adam and early stopping."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import numerics as nx
from .data import Batch, Split, make_batches
from .errors import ConfigError, ContractError, TrainingDivergence
from .numerics import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps_adam: float = 1e-8
    batch_size: int = 2048
    eval_batch_size: int = 4096
    micro_batch_size: int = 256
    max_epochs: int = 300
    patience: int = 10
    seed: int = 0
    clip_grad_norm: float | None = None
    exclude_seen: bool = True

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if min(self.batch_size, self.eval_batch_size, self.micro_batch_size) < 1:
            raise ConfigError("batch sizes must be positive")
        if self.max_epochs < 0 or self.patience < 0:
            raise ConfigError("max_epochs and patience must be non-negative")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    valid_metrics: list[dict] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_ndcg10: float = float("-inf")
    stop_reason: str = "max_epochs"
    seconds: float = 0.0

    def to_json(self, timing: bool = True) -> str:
        d = dataclasses.asdict(self)
        if not timing:
            d.pop("epoch_seconds")
            d.pop("seconds")
        if not math.isfinite(d["best_ndcg10"]):
            d["best_ndcg10"] = None
        return json.dumps(d, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------


def _nll(logits: Tensor, classes: np.ndarray, normalizer: float) -> Tensor:
    """sum_i -log softmax(logits_i)[classes_i] / normalizer, fused."""
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    rows = np.arange(len(classes))
    out = np.asarray((lse - z[rows, classes]).sum() / normalizer, dtype=z.dtype)

    def _bw(g):
        grad = e / s
        grad[rows, classes] -= 1.0
        return (grad * (g / normalizer),)

    return nx.record("cross_entropy", out, (logits,), _bw)


def cross_entropy_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over positions whose target is non-zero.

    ``logits`` is [B, L, |V|] with column j scoring item j + 1.
    """
    targets = np.asarray(targets)
    B, L, V = logits.shape
    sel = np.flatnonzero(targets.reshape(-1))
    if sel.size == 0:
        raise ContractError("cross_entropy_loss: no position carries a target")
    rows = nx.gather_rows(nx.reshape(logits, (B * L, V)), sel)
    return _nll(rows, targets.reshape(-1)[sel] - 1, float(sel.size))


def batch_loss(model: M.MaTrRecModel, batch: Batch, training: bool, rng, normalizer: float | None = None) -> Tensor:
    """Loss on one batch, projecting only positions that carry a target."""
    b = batch.trimmed()
    h = M.encode(model, b.items, b.lengths, training, rng)
    Bsz, L, D = h.shape
    sel = np.flatnonzero(b.targets.reshape(-1))
    if sel.size == 0:
        raise ContractError("batch has no training targets")
    hs = nx.gather_rows(nx.reshape(h, (Bsz * L, D)), sel)
    logits = M.head_logits(model, hs)
    return _nll(logits, b.targets.reshape(-1)[sel] - 1, float(sel.size if normalizer is None else normalizer))


def accumulate_gradients(model: M.MaTrRecModel, batch: Batch, micro: int, training: bool, rng) -> float:
    """Backward over ``batch`` in length-sorted micro-batches; returns the mean loss.

    The gradient equals that of the whole batch: every micro-batch loss is
    normalised by the batch's total target count.
    """
    total = int(np.count_nonzero(batch.targets))
    if total == 0:
        return float("nan")
    order = np.argsort(batch.lengths, kind="stable")
    loss = 0.0
    for lo in range(0, len(order), micro):
        mb = batch.take(order[lo: lo + micro])
        if not np.any(mb.targets):
            continue
        tape = nx.Tape()
        with tape:
            l = batch_loss(model, mb, training, rng, normalizer=total)
        nx.backward(tape, l)
        loss += float(l.data)
    return loss


def adam_step(params: list[Tensor], state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place; parameters without grad are skipped."""
    b1, b2 = config.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        if p.grad is None:
            continue
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps_adam)
        p.data = (p.data - update).astype(p.dtype, copy=False)


def clip_gradients(params: list[Tensor], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if norm > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / (norm + 1e-12))
    return norm


def train_epoch(model: M.MaTrRecModel, train_part, config: TrainConfig, state: AdamState,
                rng: np.random.Generator) -> float:
    params = model.parameters()
    losses, weights = [], []
    for batch in make_batches(train_part, model.config.max_len, config.batch_size, rng):
        n = int(np.count_nonzero(batch.targets))
        if n == 0:
            continue
        model.zero_grad()
        loss = accumulate_gradients(model, batch, config.micro_batch_size, True, rng)
        if not math.isfinite(loss):
            raise TrainingDivergence(f"non-finite training loss {loss} at Adam step {state.t + 1}")
        if config.clip_grad_norm is not None:
            clip_gradients(params, config.clip_grad_norm)
        adam_step(params, state, config)
        if not all(np.isfinite(p.data).all() for p in params):
            raise TrainingDivergence(f"parameters became non-finite at Adam step {state.t}")
        losses.append(loss)
        weights.append(n)
    model.zero_grad()
    if not weights:
        return float("nan")
    return float(np.average(losses, weights=weights))


def fit(model: M.MaTrRecModel, split: Split, config: TrainConfig, ks=(5, 10, 20)) -> TrainReport:
    """Train until ``patience`` epochs pass without a better validation NDCG@10.

    The parameters of the best epoch are restored before returning.
    """
    from .evaluation import evaluate_part

    config.validate()
    if not split.train:
        raise ContractError("cannot fit on an empty split")
    rng = np.random.default_rng(config.seed)
    state = AdamState.for_params(model.parameters())
    report = TrainReport()
    best_state = model.state()
    start = time.perf_counter()
    since_best = 0
    ks = tuple(sorted(set(ks) | {10}))
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        try:
            loss = train_epoch(model, split.train, config, state, rng)
            metrics = evaluate_part(model, split.valid, ks=ks, exclude_seen=config.exclude_seen,
                                    batch_size=config.eval_batch_size)
        except ContractError as exc:
            if state.t == 0:
                raise
            # contracts held at initialisation, so updates pushed the model out of range
            raise TrainingDivergence(f"numerical breakdown after Adam step {state.t}: {exc}") from exc
        report.epoch_loss.append(loss)
        report.valid_metrics.append(metrics)
        report.epoch_seconds.append(time.perf_counter() - t0)
        log.info("epoch %d loss %.4f valid ndcg@10 %.4f", epoch, loss, metrics["ndcg@10"])
        if metrics["ndcg@10"] > report.best_ndcg10:
            report.best_ndcg10 = metrics["ndcg@10"]
            report.best_epoch = epoch
            best_state = model.state()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                report.stop_reason = "patience"
                break
    model.load_state(best_state)
    report.seconds = time.perf_counter() - start
    return report
