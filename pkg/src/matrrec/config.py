"""Run configuration with flat dotted keys shared by JSON files and CLI flags."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import AblationFlags, MaTrRecConfig
from .train import TrainConfig

# derived at run time, never set directly
_HIDDEN = {"model.vocab_size", "model.seed", "train.seed"}


@dataclass
class DataSection:
    input: str = ""
    cache: str = ""
    synthetic: dict | None = None
    min_count: int = 5


@dataclass
class EvalSection:
    ks: list[int] = field(default_factory=lambda: [5, 10, 20])
    exclude_seen: bool = True
    checkpoint: str = ""


@dataclass
class SweepSection:
    axis: str = "dropout"
    values: list[float] = field(default_factory=list)


@dataclass
class SynthSection:
    copy_distances: list[int] = field(default_factory=lambda: [1, 20])
    seq_len: int = 40
    n_items: int = 50
    n_train: int = 256
    n_eval: int = 64
    noise: float = 0.0
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])


@dataclass
class RunConfig:
    dataset: str = ""
    output_dir: str = "runs/default"
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    model: MaTrRecConfig = field(default_factory=lambda: MaTrRecConfig(vocab_size=1))
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    synth: SynthSection = field(default_factory=SynthSection)

    # -- flat key view -------------------------------------------------
    def to_flat(self) -> dict:
        return {k: v for k, v in _flatten(self).items() if k not in _HIDDEN}

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        cfg = cls()
        for key, value in flat.items():
            cfg = cfg.with_value(key, value)
        return cfg

    def with_value(self, key: str, value) -> "RunConfig":
        key = resolve_key(key, self)
        return _set(self, key.split("."), value)

    def model_config(self, vocab_size: int) -> MaTrRecConfig:
        return dataclasses.replace(self.model, vocab_size=vocab_size, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)

    def hash(self) -> str:
        """Content hash over everything that influences results."""
        flat = self.to_flat()
        for k in ("output_dir", "eval.checkpoint", "sweep.axis", "sweep.values"):
            flat.pop(k, None)
        text = json.dumps(flat, sort_keys=True, separators=(",", ":"), default=list)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_flat(), indent=2, sort_keys=True) + "\n")


def load_config(path: str | Path | None) -> RunConfig:
    if not path:
        return RunConfig()
    try:
        flat = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(flat, dict):
        raise ConfigError(f"{path}: expected a JSON object of dotted keys")
    return RunConfig.from_flat(flat)


def resolve_key(key: str, cfg: RunConfig) -> str:
    """Accept full dotted keys or an unambiguous final component (``max-len`` -> ``model.max_len``)."""
    key = key.lstrip("-").replace("-", "_")
    flat = cfg.to_flat()
    if key in flat:
        return key
    hits = [k for k in flat if k.split(".")[-1] == key]
    if len(hits) == 1:
        return hits[0]
    if not hits:
        raise ConfigError(f"unknown config key {key!r}")
    raise ConfigError(f"ambiguous config key {key!r}: one of {sorted(hits)}")


def _flatten(obj, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, tuple):
            out[key] = list(v)
        else:
            out[key] = v
    return out


def _coerce(value, tp):
    """Convert CLI strings / JSON values to the annotated field type."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if isinstance(value, str) and tp is not str and str not in args:
        text = value.strip()
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            if "," in text or origin in (list, tuple):
                value = [json.loads(p) for p in text.split(",") if p.strip()]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not float(value).is_integer():
            raise ConfigError(f"expected an integer, got {value!r}")
        return int(value)
    if tp is float:
        return float(value)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            value = [value]
        inner = args[0] if args else None
        items = [_coerce(v, inner) if inner not in (None, Ellipsis) else v for v in value]
        return tuple(items) if origin is tuple else items
    if origin is typing.Union or origin is types.UnionType:
        if value is None:
            return None
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a)
            except (ConfigError, TypeError, ValueError):
                continue
        raise ConfigError(f"cannot interpret {value!r} as {tp}")
    return value


def _set(obj, parts: list[str], value):
    hints = typing.get_type_hints(type(obj))
    name = parts[0]
    if name not in hints:
        raise ConfigError(f"unknown config field {name!r} in {type(obj).__name__}")
    if len(parts) == 1:
        return dataclasses.replace(obj, **{name: _coerce(value, hints[name])})
    child = getattr(obj, name)
    return dataclasses.replace(obj, **{name: _set(child, parts[1:], value)})


__all__ = ["RunConfig", "load_config", "resolve_key", "AblationFlags"]
