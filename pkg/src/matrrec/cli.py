"""``matrrec {preprocess|train|evaluate|ablate|sweep|synth} --config FILE [--key value ...]``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from . import data as Dt
from . import model as M
from . import synth
from .config import RunConfig, load_config
from .errors import ArtifactMismatch, ConfigError, FormatError, MatrrecError, TrainingDivergence
from .evaluation import evaluate
from .train import fit

log = logging.getLogger("matrrec")

EXIT_OK, EXIT_OTHER, EXIT_FORMAT, EXIT_DIVERGED, EXIT_MISMATCH = 0, 1, 2, 3, 4
COMMANDS = ("preprocess", "train", "evaluate", "ablate", "sweep", "synth")
ABLATION_ROWS = (
    ("L=1,H=1", {}),
    ("Add PE", {"model.ablation.add_positional_encoding": True}),
    ("Remove FFN", {"model.ablation.remove_ffn": True}),
    ("Remove RC", {"model.ablation.remove_residual": True}),
    ("Remove Dropout", {"model.ablation.remove_dropout": True}),
    ("2heads(H=2)", {"model.n_heads": 2}),
    ("2layers(L=2)", {"model.n_layers": 2}),
)


def _write_csv(path: Path, columns, rows) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return path.read_text()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# data loading


def load_dataset(cfg: RunConfig) -> Dt.ProcessedDataset:
    d = cfg.data
    if d.cache and Path(d.cache).exists():
        return Dt.load_cache(d.cache)
    if d.input:
        return Dt.preprocess_file(d.input, d.min_count)
    if d.synthetic is not None:
        spec = Dt.SyntheticSpec(**d.synthetic)
        records = Dt.generate_synthetic(spec, cfg.seed)
        seqs, items, users = Dt.build_sequences(Dt.five_core_filter(records, d.min_count))
        key = json.dumps({"synthetic": dataclasses.asdict(spec), "seed": cfg.seed}, sort_keys=True)
        return Dt.ProcessedDataset(seqs, items, users, hashlib.sha256(key.encode()).hexdigest(),
                                   d.min_count, name="synthetic", stats=Dt.dataset_stats(seqs, len(items)))
    if d.cache:
        raise FormatError(f"dataset cache {d.cache} does not exist")
    raise ConfigError("no dataset: set data.cache, data.input or data.synthetic")


def train_and_evaluate(cfg: RunConfig, ds: Dt.ProcessedDataset, split: Dt.Split | None = None):
    split = split or Dt.leave_one_out_split(ds.sequences)
    model = M.build_model(cfg.model_config(ds.n_items))
    report = fit(model, split, cfg.train_config())
    metrics = evaluate(model, split, "test", cfg.eval.ks, cfg.eval.exclude_seen,
                       dataset=cfg.dataset or ds.name, run_hash=cfg.hash())
    return model, report, metrics


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(cfg: RunConfig) -> int:
    if not cfg.data.input:
        raise ConfigError("preprocess needs data.input")
    ds = Dt.preprocess_file(cfg.data.input, cfg.data.min_count)
    out = Path(cfg.data.cache or Path(cfg.output_dir) / "dataset.cache")
    out.parent.mkdir(parents=True, exist_ok=True)
    cache_hash = Dt.save_cache(ds, out)
    s = ds.stats
    print(f"users={s['users']} items={s['items']} interactions={s['interactions']} "
          f"avg_len_user={s['avg_len_user']:.1f} avg_len_item={s['avg_len_item']:.1f} "
          f"sparsity={100 * s['sparsity']:.2f}%")
    print(f"cache={out} cache_hash={cache_hash}")
    _write_json(Path(cfg.output_dir) / "preprocess_summary.json",
                {"run_hash": cfg.hash(), "cache_hash": cache_hash, "stats": s, "cache": str(out)})
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    ds = load_dataset(cfg)
    out = Path(cfg.output_dir)
    model, report, metrics = train_and_evaluate(cfg, ds)
    meta = {"run_hash": cfg.hash(), "data_hash": ds.cache_hash}
    out.mkdir(parents=True, exist_ok=True)
    M.save_checkpoint(model, out / "model.ckpt", meta)
    body = json.loads(report.to_json())
    body.update(meta)
    body["test"] = metrics.metrics
    body["param_count"] = M.param_count(model)
    _write_json(out / "train_report.json", body)
    cfg.dump(out / "run_config.json")
    print(metrics.to_csv(), end="")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    ckpt = Path(cfg.eval.checkpoint or Path(cfg.output_dir) / "model.ckpt")
    model, meta = M.load_checkpoint(ckpt)
    ds = load_dataset(cfg)
    if meta.get("data_hash") != ds.cache_hash:
        raise ArtifactMismatch(f"checkpoint was trained on data {meta.get('data_hash')}, "
                               f"cache has {ds.cache_hash}")
    split = Dt.leave_one_out_split(ds.sequences)
    report = evaluate(model, split, "test", cfg.eval.ks, cfg.eval.exclude_seen,
                      dataset=cfg.dataset or ds.name, run_hash=meta.get("run_hash", cfg.hash()))
    out = Path(cfg.output_dir)
    body = json.loads(report.to_json())
    body["data_hash"] = ds.cache_hash
    _write_json(out / "metrics.json", body)
    (out / "metrics.csv").write_text(report.to_csv())
    print(report.to_csv(), end="")
    return EXIT_OK


ABLATION_COLUMNS = ("variant", "param_count", "expected_param_count", "recall@5", "recall@10",
                    "recall@20", "ndcg@10", "best_epoch", "seconds", "config_hash")


def cmd_ablate(cfg: RunConfig) -> int:
    ds = load_dataset(cfg)
    split = Dt.leave_one_out_split(ds.sequences)
    rows = []
    for label, overrides in ABLATION_ROWS:
        run = cfg
        for k, v in overrides.items():
            run = run.with_value(k, v)
        run = dataclasses.replace(run, model=M.apply_ablation(run.model, M.AblationFlags()))
        t0 = time.perf_counter()
        model, report, metrics = train_and_evaluate(run, ds, split)
        rows.append({"variant": label, "param_count": M.param_count(model),
                     "expected_param_count": M.expected_param_count(model.config),
                     "recall@5": metrics["recall@5"], "recall@10": metrics["recall@10"],
                     "recall@20": metrics["recall@20"], "ndcg@10": metrics["ndcg@10"],
                     "best_epoch": report.best_epoch, "seconds": time.perf_counter() - t0,
                     "config_hash": run.hash()})
        log.info("ablation %s recall@10=%.4f", label, metrics["recall@10"])
    print(_write_csv(Path(cfg.output_dir) / "ablation.csv", ABLATION_COLUMNS, rows), end="")
    return EXIT_OK


SWEEP_COLUMNS = ("axis", "value", "recall@5", "recall@10", "recall@20", "ndcg@10", "best_epoch",
                 "train_seconds", "seconds_per_epoch", "memory_bytes_estimate", "config_hash")


def cmd_sweep(cfg: RunConfig) -> int:
    axis = cfg.sweep.axis
    if axis not in ("dropout", "max_len"):
        raise ConfigError(f"usage: sweep axis must be dropout or max_len, got {axis!r}")
    if not cfg.sweep.values:
        raise ConfigError("usage: sweep needs a non-empty --values list")
    ds = load_dataset(cfg)
    split = Dt.leave_one_out_split(ds.sequences)
    rows = []
    for value in cfg.sweep.values:
        run = cfg.with_value(f"model.{axis}", value)
        model, report, metrics = train_and_evaluate(run, ds, split)
        epochs = max(len(report.epoch_loss), 1)
        mem = M.estimate_memory_bytes(model.config, min(run.train.micro_batch_size, len(split.train)),
                                      run.model.max_len)
        rows.append({"axis": axis, "value": value, "recall@5": metrics["recall@5"],
                     "recall@10": metrics["recall@10"], "recall@20": metrics["recall@20"],
                     "ndcg@10": metrics["ndcg@10"], "best_epoch": report.best_epoch,
                     "train_seconds": report.seconds, "seconds_per_epoch": report.seconds / epochs,
                     "memory_bytes_estimate": mem, "config_hash": run.hash()})
    print(_write_csv(Path(cfg.output_dir) / f"sweep_{axis}.csv", SWEEP_COLUMNS, rows), end="")
    return EXIT_OK


def cmd_synth(cfg: RunConfig) -> int:
    s = cfg.synth
    specs = [synth.HorizonSpec(d, s.seq_len, s.n_items, s.n_train, s.n_eval, s.noise) for d in s.copy_distances]
    base = dataclasses.replace(cfg.model, vocab_size=s.n_items, max_len=max(cfg.model.max_len, s.seq_len))
    rows = synth.run_horizon_suite(specs, base, cfg.train, seeds=tuple(s.seeds))
    for r in rows:
        r["config_hash"] = cfg.hash()
    out = Path(cfg.output_dir)
    print(_write_csv(out / "horizon.csv", synth.TABLE_COLUMNS + ("config_hash",), rows), end="")
    warnings = synth.hybrid_gate(rows)
    _write_json(out / "horizon_summary.json",
                {"run_hash": cfg.hash(), "warnings": warnings,
                 "summary": {f"{d}/{v}": m for (d, v), m in synth.summarize(rows).items()}})
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


HANDLERS = {"preprocess": cmd_preprocess, "train": cmd_train, "evaluate": cmd_evaluate,
            "ablate": cmd_ablate, "sweep": cmd_sweep, "synth": cmd_synth}


def parse_args(argv: list[str]) -> tuple[str, RunConfig]:
    parser = argparse.ArgumentParser(prog="matrrec", description=__doc__)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", default=None, help="JSON file of flat dotted keys")
    parser.add_argument("-v", "--verbose", action="store_true")
    args, rest = parser.parse_known_args(argv)
    cfg = load_config(args.config)
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--"):
            raise ConfigError(f"usage: unexpected argument {tok!r}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(rest):
                raise ConfigError(f"usage: flag {tok} needs a value")
            key, value = tok[2:], rest[i + 1]
            i += 2
        cfg = cfg.with_value(key, value)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.command, cfg


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        command, cfg = parse_args(argv)
        return HANDLERS[command](cfg)
    except (FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except TrainingDivergence as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ArtifactMismatch as exc:
        print(f"error: artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (MatrrecError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
