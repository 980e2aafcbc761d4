"""Preprocess, train and evaluate on the Amazon Musical Instruments 5-core data.

Uses D=64, one layer, one head, dropout 0.4, N=50 and batch 2048, then prints
the dataset statistics and the test metrics next to the target band
(Recall@10 >= 0.08, NDCG@10 >= 0.040).

    python3 scripts/reproduce_musical.py data/musical.tsv --out runs/musical
"""
import argparse
import logging
import sys

from matrrec import cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("tsv")
    ap.add_argument("--out", default="runs/musical")
    ap.add_argument("--seed", default="0")
    ap.add_argument("--lr", default="1e-3")
    ap.add_argument("--patience", default="20")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)
    cache = f"{args.out}/musical.cache"
    common = ["--dataset", "musical", "--cache", cache, "--output_dir", args.out, "--seed", args.seed]
    rc = cli.main(["preprocess", "--input", args.tsv] + common)
    if rc:
        return rc
    settings = ["--d_model", "64", "--n_layers", "1", "--n_heads", "1", "--dropout", "0.4", "--max_len", "50",
                "--batch_size", "2048", "--max_epochs", "300", "--lr", args.lr, "--patience", args.patience, "-v"]
    rc = cli.main(["train"] + common + settings)
    if rc:
        return rc
    rc = cli.main(["evaluate"] + common + settings)
    print("target band: recall@10 >= 0.08, ndcg@10 >= 0.040", file=sys.stderr)
    return rc


if __name__ == "__main__":
    sys.exit(main())
