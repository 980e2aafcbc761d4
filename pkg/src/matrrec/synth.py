"""Dependency-horizon copy tasks comparing hybrid, Mamba-only and attention-only stacks."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import time
from dataclasses import dataclass

import numpy as np

from . import model as M
from .data import Split
from .errors import ConfigError
from .evaluation import evaluate_part
from .train import TrainConfig, fit

log = logging.getLogger(__name__)

VARIANTS = ("hybrid", "mamba_only", "attention_only")
TABLE_COLUMNS = ("copy_distance", "seq_len", "n_items", "noise", "variant", "seed",
                 "recall@1", "recall@10", "ndcg@10", "best_epoch", "seconds")


@dataclass(frozen=True)
class HorizonSpec:
    """Each item after the first ``copy_distance`` repeats the one ``copy_distance`` steps back."""

    copy_distance: int = 1
    seq_len: int = 24
    n_items: int = 50
    n_train: int = 192
    n_eval: int = 64
    noise: float = 0.0

    def validate(self) -> None:
        if not 1 <= self.copy_distance < self.seq_len:
            raise ConfigError("copy_distance must lie in [1, seq_len)")
        if self.n_items < 2:
            raise ConfigError("n_items must be at least 2")


def copy_sequence(spec: HorizonSpec, rng: np.random.Generator) -> list[int]:
    seq = [int(x) for x in rng.integers(1, spec.n_items + 1, size=spec.copy_distance)]
    for t in range(spec.copy_distance, spec.seq_len):
        item = seq[t - spec.copy_distance]
        if spec.noise and rng.random() < spec.noise:
            item = int(rng.integers(1, spec.n_items + 1))
        seq.append(item)
    return seq


def horizon_split(spec: HorizonSpec, seed: int) -> Split:
    """Training users contribute whole sequences; evaluation users are split leave-one-out."""
    spec.validate()
    rng = np.random.default_rng(seed)
    train_seqs = [copy_sequence(spec, rng) for _ in range(spec.n_train)]
    eval_seqs = [copy_sequence(spec, rng) for _ in range(spec.n_eval)]
    train = train_seqs + [s[:-2] for s in eval_seqs]
    users = list(range(spec.n_eval))
    return Split(users, train,
                 [(s[:-2], s[-2]) for s in eval_seqs],
                 [(s[:-1], s[-1]) for s in eval_seqs])


def variant_config(base: M.MaTrRecConfig, variant: str) -> M.MaTrRecConfig:
    if variant == "hybrid":
        flags = M.AblationFlags()
    elif variant == "mamba_only":
        flags = M.AblationFlags(mamba_only=True)
    elif variant == "attention_only":
        # attention alone needs position information, as in SASRec
        flags = M.AblationFlags(attention_only=True, add_positional_encoding=True)
    else:
        raise ConfigError(f"unknown variant {variant!r}")
    return M.apply_ablation(base, flags)


def run_horizon_suite(specs, base: M.MaTrRecConfig, train_config: TrainConfig,
                      variants=VARIANTS, seeds=(0, 1, 2)) -> list[dict]:
    """Train every (spec, variant, seed) cell and return one row per cell."""
    rows = []
    for spec in specs:
        for variant in variants:
            for seed in seeds:
                split = horizon_split(spec, seed)
                cfg = dataclasses.replace(variant_config(base, variant), vocab_size=spec.n_items,
                                          max_len=max(base.max_len, spec.seq_len), seed=seed)
                model = M.build_model(cfg)
                t0 = time.perf_counter()
                report = fit(model, split, dataclasses.replace(train_config, seed=seed, exclude_seen=False),
                             ks=(1, 10))
                metrics = evaluate_part(model, split.test, ks=(1, 10), exclude_seen=False)
                rows.append({
                    "copy_distance": spec.copy_distance, "seq_len": spec.seq_len,
                    "n_items": spec.n_items, "noise": spec.noise, "variant": variant, "seed": seed,
                    "recall@1": metrics["recall@1"], "recall@10": metrics["recall@10"],
                    "ndcg@10": metrics["ndcg@10"], "best_epoch": report.best_epoch,
                    "seconds": time.perf_counter() - t0,
                })
                log.info("horizon d=%d %s seed=%d recall@10=%.3f", spec.copy_distance, variant, seed,
                         metrics["recall@10"])
    return rows


def summarize(rows: list[dict]) -> dict[tuple[int, str], dict[str, float]]:
    """Mean metrics and wall time per (copy_distance, variant)."""
    cells: dict[tuple[int, str], list[dict]] = {}
    for r in rows:
        cells.setdefault((r["copy_distance"], r["variant"]), []).append(r)
    out = {}
    for key, rs in cells.items():
        out[key] = {m: float(np.mean([r[m] for r in rs])) for m in ("recall@1", "recall@10", "ndcg@10", "seconds")}
        out[key]["recall@10_min"] = float(min(r["recall@10"] for r in rs))
        out[key]["recall@10_max"] = float(max(r["recall@10"] for r in rs))
    return out


def hybrid_gate(rows: list[dict], tolerance: float = 0.02) -> list[str]:
    """Warnings for tasks where the hybrid trails the better single component by more than ``tolerance``."""
    summary = summarize(rows)
    warnings = []
    for d in sorted({k[0] for k in summary}):
        got = {v: summary[(d, v)]["recall@10"] for v in VARIANTS if (d, v) in summary}
        if "hybrid" not in got or len(got) < 2:
            continue
        best_single = max(v for k, v in got.items() if k != "hybrid")
        if got["hybrid"] < best_single - tolerance:
            warnings.append(f"copy_distance={d}: hybrid recall@10 {got['hybrid']:.3f} trails "
                            f"best single component {best_single:.3f} by more than {tolerance}")
    for w in warnings:
        log.warning(w)
    return warnings


def table_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
