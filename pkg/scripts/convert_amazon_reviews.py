"""Convert an Amazon review dump into the interactions TSV read by ``matrrec``.

Accepted inputs (optionally gzipped):
  * review JSON lines with ``reviewerID``, ``asin`` and ``unixReviewTime``
    (for example ``reviews_Musical_Instruments_5.json.gz``); both strict JSON
    and the older Python-literal dumps are read;
  * ratings-only CSV rows ``user,item,rating,timestamp`` without a header.

    python3 scripts/convert_amazon_reviews.py reviews_Musical_Instruments_5.json.gz data/musical.tsv
"""
import argparse
import ast
import csv
import gzip
import json
import sys
from pathlib import Path

from matrrec.data import InteractionRecord, write_interactions


def _open(path: Path):
    return gzip.open(path, "rt", encoding="utf-8") if path.suffix == ".gz" else open(path, encoding="utf-8")


def _json_records(fh):
    for n, line in enumerate(fh, 1):
        line = line.strip()
        if not line:
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError:
            row = ast.literal_eval(line)
        try:
            yield InteractionRecord(str(row["reviewerID"]), str(row["asin"]), int(row["unixReviewTime"]))
        except KeyError as exc:
            sys.exit(f"line {n}: missing field {exc}")


def _csv_records(fh):
    for n, row in enumerate(csv.reader(fh), 1):
        if len(row) < 4:
            sys.exit(f"line {n}: expected user,item,rating,timestamp")
        yield InteractionRecord(row[0], row[1], int(float(row[3])))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("source", type=Path)
    ap.add_argument("target", type=Path)
    args = ap.parse_args()
    with _open(args.source) as fh:
        head = fh.read(1)
        fh.seek(0)
        records = list(_json_records(fh) if head == "{" else _csv_records(fh))
    args.target.parent.mkdir(parents=True, exist_ok=True)
    write_interactions(args.target, records)
    print(f"wrote {len(records)} interactions to {args.target}")


if __name__ == "__main__":
    main()
