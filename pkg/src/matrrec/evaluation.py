"""Full-catalog ranking, Recall@K and NDCG@K under leave-one-out."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from .data import make_batches
from .errors import ContractError

CSV_COLUMNS = ("dataset", "config_hash", "seed", "recall@5", "recall@10", "recall@20", "ndcg@10", "seconds")


def rank_of_targets(scores: np.ndarray, targets: np.ndarray, eligible: np.ndarray | None = None) -> np.ndarray:
    """1-based rank of each target item among eligible items.

    ``scores`` is [U, |V|] with column j scoring item j + 1; ``targets`` holds
    item ids.  Higher scores rank first and ties go to the smaller item id.
    """
    scores = np.asarray(scores)
    targets = np.asarray(targets)
    U, V = scores.shape
    cols = targets - 1
    if np.any(cols < 0) or np.any(cols >= V):
        raise ContractError("target item outside the catalog")
    if eligible is None:
        eligible = np.ones_like(scores, dtype=bool)
    rows = np.arange(U)
    if not np.all(eligible[rows, cols]):
        raise ContractError("a target item is excluded from ranking")
    ts = scores[rows, cols][:, None]
    before = np.arange(V)[None, :] < cols[:, None]
    ahead = eligible & ((scores > ts) | ((scores == ts) & before))
    return 1 + ahead.sum(axis=1)


def full_rank(model: M.MaTrRecModel, part, exclusion: bool = True, batch_size: int = 4096,
              chunk: int = 256) -> np.ndarray:
    """Rank each evaluation target against the whole catalog.

    With ``exclusion`` the items of a user's prefix are ineligible, except the
    target itself (it stays rankable when it also occurs in the prefix).
    """
    ranks = []
    for batch in make_batches(part, model.config.max_len, batch_size):
        b = batch.trimmed()
        logits = _last_logits(model, b, chunk)
        targets = b.targets[np.arange(len(b)), b.lengths - 1]
        eligible = np.ones(logits.shape, dtype=bool)
        if exclusion:
            for r, src in enumerate(b.rows):
                prefix = np.asarray(part[src][0], dtype=np.int64)
                eligible[r, prefix - 1] = False
            eligible[np.arange(len(b)), targets - 1] = True
        ranks.append(rank_of_targets(logits, targets, eligible))
    return np.concatenate(ranks) if ranks else np.zeros(0, dtype=np.int64)


def _last_logits(model: M.MaTrRecModel, b, chunk: int) -> np.ndarray:
    """Last-position logits, computed in length-sorted chunks to bound memory."""
    order = np.argsort(b.lengths, kind="stable")
    out = np.empty((len(b), model.config.vocab_size), dtype=np.dtype(model.config.dtype))
    for lo in range(0, len(order), chunk):
        sub = b.take(order[lo: lo + chunk]).trimmed()
        out[order[lo: lo + chunk]] = M.head_logits(model, M.last_hidden(model, sub.items, sub.lengths)).data
    return out


def recall_at_k(ranks: np.ndarray, k: int) -> float:
    """Fraction of users whose single relevant item ranks within the top k."""
    ranks = np.asarray(ranks)
    if k < 1:
        raise ContractError("k must be at least 1")
    if ranks.size == 0:
        raise ContractError("recall_at_k of an empty result set")
    return float(np.mean(ranks <= k))


def ndcg_at_k(ranks: np.ndarray, k: int) -> float:
    """Mean of 1/log2(rank + 1) for hits within k; the ideal DCG is 1."""
    ranks = np.asarray(ranks)
    if k < 1:
        raise ContractError("k must be at least 1")
    if ranks.size == 0:
        raise ContractError("ndcg_at_k of an empty result set")
    gains = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(np.mean(gains))


def hit_rate_at_k(ranks: np.ndarray, k: int) -> float:
    ranks = np.asarray(ranks)
    hits = int(np.count_nonzero(ranks <= k))
    return hits / len(ranks)


def evaluate_part(model: M.MaTrRecModel, part, ks=(5, 10, 20), exclude_seen: bool = True,
                  batch_size: int = 4096) -> dict[str, float]:
    ranks = full_rank(model, part, exclude_seen, batch_size)
    out = {}
    for k in ks:
        out[f"recall@{k}"] = recall_at_k(ranks, k)
    for k in ks:
        out[f"ndcg@{k}"] = ndcg_at_k(ranks, k)
    return out


@dataclass
class MetricsReport:
    metrics: dict[str, float]
    n_users: int
    config_hash: str
    seed: int
    seconds: float
    dataset: str = ""
    part: str = "test"
    extra: dict = field(default_factory=dict)

    def __getitem__(self, key: str) -> float:
        return self.metrics[key]

    def to_json(self, timing: bool = True) -> str:
        d = asdict(self)
        if not timing:
            d.pop("seconds")
        return json.dumps(d, indent=2, sort_keys=True)

    def csv_row(self) -> dict:
        def fmt(key):
            v = self.metrics.get(key)
            return "" if v is None else f"{v:.6f}"

        return {"dataset": self.dataset, "config_hash": self.config_hash, "seed": self.seed,
                "recall@5": fmt("recall@5"), "recall@10": fmt("recall@10"),
                "recall@20": fmt("recall@20"), "ndcg@10": fmt("ndcg@10"),
                "seconds": f"{self.seconds:.3f}"}

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        if header:
            w.writeheader()
        w.writerow(self.csv_row())
        return buf.getvalue()


def evaluate(model: M.MaTrRecModel, split, part: str = "test", ks=(5, 10, 20),
             exclude_seen: bool = True, dataset: str = "", run_hash: str | None = None,
             batch_size: int = 4096) -> MetricsReport:
    if part not in ("valid", "test"):
        raise ContractError(f"evaluate part must be 'valid' or 'test', got {part!r}")
    rows = getattr(split, part)
    t0 = time.perf_counter()
    ks = tuple(sorted(set(ks) | {5, 10, 20}))
    metrics = evaluate_part(model, rows, ks, exclude_seen, batch_size)
    return MetricsReport(metrics, len(rows), run_hash or model.config.hash(), model.config.seed,
                         time.perf_counter() - t0, dataset, part)


def assert_monotone(report: MetricsReport) -> None:
    ks = sorted(int(k.split("@")[1]) for k in report.metrics if k.startswith("recall@"))
    vals = [report.metrics[f"recall@{k}"] for k in ks]
    if any(a > b for a, b in zip(vals, vals[1:])):
        raise ContractError(f"recall not monotone in k: {vals}")
