"""Interaction ingestion, k-core filtering, leave-one-out splits and batching."""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, FormatError

log = logging.getLogger(__name__)

HEADER = ("user_id", "item_id", "timestamp")


@dataclass(frozen=True, slots=True)
class InteractionRecord:
    user: str
    item: str
    timestamp: int


@dataclass
class UserSequence:
    user_index: int
    items: list[int]


@dataclass
class Split:
    """Leave-one-out split; row i of every part belongs to ``users[i]``."""

    users: list[int]
    train: list[list[int]]
    valid: list[tuple[list[int], int]]
    test: list[tuple[list[int], int]]
    n_excluded: int = 0


@dataclass
class Batch:
    items: np.ndarray  # [B, N] int, right padded with 0
    lengths: np.ndarray  # [B]
    targets: np.ndarray  # [B, N], 0 = no loss
    rows: np.ndarray  # index of each row in the source part

    def __len__(self) -> int:
        return self.items.shape[0]

    def trimmed(self) -> "Batch":
        """Drop trailing all-padding columns (exact for a causal model)."""
        w = max(int(self.lengths.max()), 1) if len(self) else 1
        return Batch(self.items[:, :w], self.lengths, self.targets[:, :w], self.rows)

    def take(self, idx: np.ndarray) -> "Batch":
        return Batch(self.items[idx], self.lengths[idx], self.targets[idx], self.rows[idx])


# ---------------------------------------------------------------------------


def parse_interactions(path: str | Path) -> list[InteractionRecord]:
    """Read a UTF-8 TSV with header ``user_id<TAB>item_id<TAB>timestamp``."""
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        first = fh.readline()
        if tuple(first.rstrip("\r\n").split("\t")) != HEADER:
            raise FormatError(f"missing header {'/'.join(HEADER)!s} in {path}", line=1)
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"expected 3 tab-separated fields, found {len(parts)}", line=lineno)
            user, item, ts = parts
            try:
                t = int(ts)
            except ValueError:
                raise FormatError(f"timestamp {ts!r} is not an integer", line=lineno) from None
            if t < 0:
                raise FormatError(f"negative timestamp {t}", line=lineno)
            records.append(InteractionRecord(user, item, t))
    return records


def write_interactions(path: str | Path, records: Iterable[InteractionRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(HEADER) + "\n")
        for r in records:
            fh.write(f"{r.user}\t{r.item}\t{r.timestamp}\n")


def five_core_filter(records: Sequence[InteractionRecord], k: int = 5) -> list[InteractionRecord]:
    """Drop users and items with fewer than ``k`` interactions until nothing changes."""
    current = list(records)
    while True:
        users = Counter(r.user for r in current)
        items = Counter(r.item for r in current)
        kept = [r for r in current if users[r.user] >= k and items[r.item] >= k]
        if len(kept) == len(current):
            return kept
        current = kept


def build_sequences(records: Sequence[InteractionRecord]) -> tuple[list[UserSequence], list[str], list[str]]:
    """Chronological per-user sequences with 1-based item ids by first appearance.

    Returns (sequences, item_vocab, user_vocab) where ``item_vocab[i - 1]``
    is the raw id of item index i.
    """
    item_index: dict[str, int] = {}
    user_index: dict[str, int] = {}
    per_user: dict[int, list[tuple[int, int]]] = {}
    for r in records:
        if r.item not in item_index:
            item_index[r.item] = len(item_index) + 1
        if r.user not in user_index:
            user_index[r.user] = len(user_index)
            per_user[user_index[r.user]] = []
        per_user[user_index[r.user]].append((r.timestamp, item_index[r.item]))
    seqs = []
    for u in range(len(user_index)):
        events = sorted(per_user[u], key=lambda e: e[0])  # stable
        seqs.append(UserSequence(u, [i for _, i in events]))
    return seqs, list(item_index), list(user_index)


def leave_one_out_split(sequences: Sequence[UserSequence]) -> Split:
    users, train, valid, test = [], [], [], []
    excluded = 0
    for s in sequences:
        items = list(s.items)
        if len(items) < 3:
            excluded += 1
            continue
        users.append(s.user_index)
        train.append(items[:-2])
        valid.append((items[:-2], items[-2]))
        test.append((items[:-1], items[-1]))
    if excluded:
        log.warning("leave-one-out: %d sequence(s) shorter than 3 excluded", excluded)
    return Split(users, train, valid, test, excluded)


def _as_sequences(part) -> list[list[int]]:
    """Training parts are plain sequences; evaluation parts are (prefix, target)."""
    out = []
    for row in part:
        if isinstance(row, tuple):
            prefix, target = row
            out.append(list(prefix) + [target])
        else:
            out.append(list(row) + [0])
    return out


def make_batches(part, N: int, B: int, rng: np.random.Generator | None = None) -> list[Batch]:
    """Right-padded batches of width ``N``.

    Sequences keep their most recent ``N`` items.  When ``rng`` is given the
    row order is shuffled (training); otherwise it is the part's order.
    For an evaluation row the final position's target is the held-out item.
    """
    if N < 1 or B < 1:
        raise ConfigError("max length and batch size must be positive")
    seqs = _as_sequences(part)
    order = np.arange(len(seqs)) if rng is None else rng.permutation(len(seqs))
    batches = []
    for lo in range(0, len(seqs), B):
        idx = order[lo: lo + B]
        items = np.zeros((len(idx), N), dtype=np.int64)
        targets = np.zeros((len(idx), N), dtype=np.int64)
        lengths = np.zeros(len(idx), dtype=np.int64)
        for r, i in enumerate(idx):
            full = seqs[i]
            inp, nxt = full[:-1][-N:], full[1:][-N:]
            n = len(inp)
            items[r, :n] = inp
            targets[r, :n] = nxt
            lengths[r] = n
        batches.append(Batch(items, lengths, targets, idx.astype(np.int64)))
    return batches


# ---------------------------------------------------------------------------
# synthetic corpora


@dataclass
class SyntheticSpec:
    n_items: int = 20
    n_users: int = 64
    pattern: str = "cyclic"  # "cyclic" | "markov"
    order: int = 1
    seq_len: int = 15
    noise: float = 0.0


def markov_table(n_items: int, order: int, rng: np.random.Generator) -> np.ndarray:
    """Random transition probabilities indexed by the last ``order`` items (0-based)."""
    shape = (n_items,) * order + (n_items,)
    return rng.dirichlet(np.full(n_items, 0.3), size=shape[:-1])


def generate_synthetic(spec: SyntheticSpec, seed: int) -> list[InteractionRecord]:
    if spec.n_items < 2:
        raise ConfigError("synthetic corpora need at least two items")
    if not 0.0 <= spec.noise <= 1.0:
        raise ConfigError("noise must be a probability")
    rng = np.random.default_rng(seed)
    table = markov_table(spec.n_items, spec.order, rng) if spec.pattern == "markov" else None
    if spec.pattern not in ("cyclic", "markov"):
        raise ConfigError(f"unknown synthetic pattern {spec.pattern!r}")
    records = []
    for u in range(spec.n_users):
        seq = markov_sequence(table, spec, rng) if table is not None else cyclic_sequence(spec, rng)
        for t, item in enumerate(seq):
            if spec.noise and rng.random() < spec.noise:
                item = int(rng.integers(1, spec.n_items + 1))
            records.append(InteractionRecord(f"u{u}", f"i{item}", t))
    return records


def cyclic_sequence(spec: SyntheticSpec, rng) -> list[int]:
    phase = int(rng.integers(spec.n_items))
    return [((phase + t) % spec.n_items) + 1 for t in range(spec.seq_len)]


def markov_sequence(table: np.ndarray, spec: SyntheticSpec, rng) -> list[int]:
    hist = [int(x) for x in rng.integers(spec.n_items, size=spec.order)]
    out = []
    for _ in range(spec.seq_len):
        p = table[tuple(hist[-spec.order:])]
        nxt = int(rng.choice(spec.n_items, p=p))
        out.append(nxt + 1)
        hist.append(nxt)
    return out


def sequences_by_raw_id(records: Sequence[InteractionRecord]) -> list[UserSequence]:
    """Sequences whose item indices are the integer suffix of raw ids like ``i17``."""
    per_user: dict[str, list[tuple[int, int]]] = {}
    for r in records:
        per_user.setdefault(r.user, []).append((r.timestamp, int(r.item.lstrip("i"))))
    return [UserSequence(i, [it for _, it in sorted(ev, key=lambda e: e[0])])
            for i, ev in enumerate(per_user.values())]


# ---------------------------------------------------------------------------
# processed-dataset cache

CACHE_MAGIC = b"MTRDATA\x00"
CACHE_VERSION = 1


@dataclass
class ProcessedDataset:
    sequences: list[UserSequence]
    item_vocab: list[str]
    user_vocab: list[str]
    source_hash: str
    min_count: int = 5
    name: str = ""
    stats: dict = field(default_factory=dict)

    @property
    def n_items(self) -> int:
        return len(self.item_vocab)

    @property
    def cache_hash(self) -> str:
        """Hash of the source bytes plus preprocessing settings."""
        key = json.dumps({"source": self.source_hash, "min_count": self.min_count,
                          "version": CACHE_VERSION}, sort_keys=True)
        return hashlib.sha256(key.encode()).hexdigest()[:16]


def dataset_stats(sequences: Sequence[UserSequence], n_items: int) -> dict:
    n_users = len(sequences)
    n_inter = sum(len(s.items) for s in sequences)
    return {
        "users": n_users,
        "items": n_items,
        "interactions": n_inter,
        "avg_len_user": n_inter / n_users if n_users else 0.0,
        "avg_len_item": n_inter / n_items if n_items else 0.0,
        "sparsity": 1.0 - n_inter / (n_users * n_items) if n_users and n_items else 1.0,
    }


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def preprocess_file(path: str | Path, min_count: int = 5) -> ProcessedDataset:
    records = parse_interactions(path)
    kept = five_core_filter(records, min_count)
    seqs, item_vocab, user_vocab = build_sequences(kept)
    return ProcessedDataset(seqs, item_vocab, user_vocab, file_hash(path), min_count,
                            name=Path(path).stem, stats=dataset_stats(seqs, len(item_vocab)))


def save_cache(ds: ProcessedDataset, path: str | Path) -> str:
    """Write the versioned binary cache; returns the cache hash."""
    header = json.dumps({
        "cache_hash": ds.cache_hash, "source_hash": ds.source_hash, "min_count": ds.min_count,
        "name": ds.name, "item_vocab": ds.item_vocab, "user_vocab": ds.user_vocab,
        "user_index": [s.user_index for s in ds.sequences], "stats": ds.stats,
    }, sort_keys=True, separators=(",", ":")).encode()
    lengths = np.array([len(s.items) for s in ds.sequences], dtype="<i4")
    flat = np.array([i for s in ds.sequences for i in s.items], dtype="<i4")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<III", CACHE_VERSION, len(header), len(lengths)))
        fh.write(header)
        fh.write(lengths.tobytes())
        fh.write(flat.tobytes())
    return ds.cache_hash


def load_cache(path: str | Path) -> ProcessedDataset:
    raw = Path(path).read_bytes()
    if raw[: len(CACHE_MAGIC)] != CACHE_MAGIC:
        raise FormatError(f"{path} is not a dataset cache")
    off = len(CACHE_MAGIC)
    version, hlen, n = struct.unpack_from("<III", raw, off)
    if version != CACHE_VERSION:
        raise FormatError(f"unsupported cache version {version}")
    off += 12
    header = json.loads(raw[off: off + hlen].decode())
    off += hlen
    lengths = np.frombuffer(raw, dtype="<i4", count=n, offset=off)
    off += 4 * n
    flat = np.frombuffer(raw, dtype="<i4", offset=off)
    bounds = np.concatenate([[0], np.cumsum(lengths)])
    seqs = [UserSequence(int(u), flat[bounds[i]: bounds[i + 1]].astype(int).tolist())
            for i, u in enumerate(header["user_index"])]
    ds = ProcessedDataset(seqs, header["item_vocab"], header["user_vocab"], header["source_hash"],
                          header["min_count"], header["name"], header["stats"])
    if ds.cache_hash != header["cache_hash"]:
        raise FormatError(f"{path}: stored cache hash does not match its contents")
    return ds
