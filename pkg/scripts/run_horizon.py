"""Run the dependency-horizon comparison and write its table and summary.

    python3 scripts/run_horizon.py --distances 1 20 --seq-len 30 --epochs 80 --out runs/horizon
"""
import argparse
import json
import logging
import time
from pathlib import Path

from matrrec import model as M
from matrrec import synth
from matrrec.train import TrainConfig


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--distances", type=int, nargs="+", default=[1, 20])
    ap.add_argument("--seq-len", type=int, default=30)
    ap.add_argument("--n-items", type=int, default=30)
    ap.add_argument("--n-train", type=int, default=160)
    ap.add_argument("--n-eval", type=int, default=48)
    ap.add_argument("--noise", type=float, default=0.0)
    ap.add_argument("--d-model", type=int, default=32)
    ap.add_argument("--d-state", type=int, default=16)
    ap.add_argument("--lr", type=float, default=5e-3)
    ap.add_argument("--epochs", type=int, default=80)
    ap.add_argument("--patience", type=int, default=15)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--variants", nargs="+", default=list(synth.VARIANTS))
    ap.add_argument("--out", default="runs/horizon")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    specs = [synth.HorizonSpec(d, args.seq_len, args.n_items, args.n_train, args.n_eval, args.noise)
             for d in args.distances]
    base = M.MaTrRecConfig(vocab_size=args.n_items, d_model=args.d_model, d_state=args.d_state,
                           dropout=0.0, max_len=args.seq_len)
    tc = TrainConfig(lr=args.lr, max_epochs=args.epochs, patience=args.patience, batch_size=args.batch_size)
    t0 = time.perf_counter()
    rows = synth.run_horizon_suite(specs, base, tc, variants=tuple(args.variants), seeds=tuple(args.seeds))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "horizon.csv").write_text(synth.table_csv(rows))
    summary = {f"{d}/{v}": m for (d, v), m in synth.summarize(rows).items()}
    warnings = synth.hybrid_gate(rows)
    (out / "horizon_summary.json").write_text(json.dumps(
        {"summary": summary, "warnings": warnings, "seconds": time.perf_counter() - t0}, indent=2))
    print(synth.table_csv(rows), end="")
    for w in warnings:
        print("warning:", w)


if __name__ == "__main__":
    main()
