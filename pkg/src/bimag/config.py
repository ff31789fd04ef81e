"""Flat ``section.key = value`` experiment configuration.

Blank lines and ``#`` comments are ignored. Lists are comma-separated.
Relative paths resolve against the directory holding the config file.
See README.md for the full key list.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

from .data import BenchmarkSpec
from .exceptions import ConfigError, SpecError
from .training import TrainingConfig, Variant

_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}

_BENCH_KEYS = {f.name: f.type for f in fields(BenchmarkSpec)}


@dataclass
class ExperimentConfig:
    source: str = "generate"
    features: Optional[Path] = None
    attributes: Optional[Path] = None
    class_splits: Optional[List[int]] = None
    shuffle_classes: bool = False
    bench: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    variants: List[str] = field(default_factory=lambda: ["attr_bimag"])
    seeds: List[int] = field(default_factory=lambda: [0])
    output: Path = Path("out")
    workers: int = 1
    save_checkpoints: bool = False
    train: TrainingConfig = field(default_factory=TrainingConfig)
    raw: Dict[str, str] = field(default_factory=dict)

    @property
    def needs_attributes(self) -> bool:
        return any(Variant(v).needs_attributes for v in self.variants)

    def echo(self) -> dict:
        """Settings that determine results (output location and worker count excluded)."""
        return {k: v for k, v in sorted(self.raw.items())
                if k not in ("run.output", "run.workers", "run.seeds", "run.variants")}


def _to_int(key, text):
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"expected an integer, got {text!r}", key) from None


def _to_float(key, text):
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"expected a number, got {text!r}", key) from None


def _to_bool(key, text):
    try:
        return _BOOL[text.lower()]
    except KeyError:
        raise ConfigError(f"expected true/false, got {text!r}", key) from None


def _to_list(key, text, conv):
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise ConfigError("expected a non-empty comma-separated list", key)
    return [conv(key, s) for s in items]


def parse_lines(text: str, origin: str = "<config>") -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{origin}:{lineno}: duplicate key", key)
        values[key] = value
    return values


def _train_value(key, name, text):
    default = getattr(TrainingConfig(), name)
    if isinstance(default, bool):
        return _to_bool(key, text)
    if isinstance(default, int):
        return _to_int(key, text)
    if isinstance(default, float):
        return _to_float(key, text)
    if isinstance(default, tuple):
        return tuple(_to_list(key, text, _to_int))
    raise ConfigError("unsupported setting", key)


def build_config(values: Dict[str, str], base_dir: Path = Path(".")) -> ExperimentConfig:
    cfg = ExperimentConfig(raw=dict(values))
    bench: Dict[str, object] = {}
    train: Dict[str, object] = {}

    def path(key, text):
        p = Path(text)
        return p if p.is_absolute() else base_dir / p

    for key, text in values.items():
        section, _, name = key.partition(".")
        if section == "data":
            if name == "source":
                if text not in ("generate", "files"):
                    raise ConfigError(f"must be 'generate' or 'files', got {text!r}", key)
                cfg.source = text
            elif name == "features":
                cfg.features = path(key, text)
            elif name == "attributes":
                cfg.attributes = path(key, text) if text else None
            elif name == "class_splits":
                cfg.class_splits = _to_list(key, text, _to_int)
            elif name == "shuffle_classes":
                cfg.shuffle_classes = _to_bool(key, text)
            else:
                raise ConfigError("unknown key", key)
        elif section == "bench":
            if name not in _BENCH_KEYS:
                raise ConfigError("unknown key", key)
            bench[name] = _to_float(key, text) if name in ("alpha", "sigma") else _to_int(key, text)
        elif section == "run":
            if name == "variants":
                cfg.variants = _to_list(key, text, lambda k, s: s)
                for v in cfg.variants:
                    try:
                        Variant(v)
                    except ValueError:
                        raise ConfigError(f"unknown variant {v!r}; choose from "
                                          f"{', '.join(x.value for x in Variant)}", key) from None
            elif name == "seeds":
                cfg.seeds = _to_list(key, text, _to_int)
            elif name == "output":
                cfg.output = path(key, text)
            elif name == "workers":
                cfg.workers = _to_int(key, text)
                if cfg.workers < 1:
                    raise ConfigError("must be >= 1", key)
            elif name == "save_checkpoints":
                cfg.save_checkpoints = _to_bool(key, text)
            else:
                raise ConfigError("unknown key", key)
        elif section == "train":
            if name not in TrainingConfig.field_names() or name == "seed":
                raise ConfigError("unknown key (seeds are set with run.seeds)" if name == "seed" else "unknown key",
                                  key)
            train[name] = _train_value(key, name, text)
        else:
            raise ConfigError("unknown section", key)

    try:
        cfg.bench = BenchmarkSpec(**bench).validate()
    except SpecError as exc:
        raise ConfigError(str(exc), "bench") from None
    cfg.train = TrainingConfig(**train).validate()
    if cfg.source == "files" and cfg.features is None:
        raise ConfigError("required when data.source = files", "data.features")
    if cfg.class_splits is not None and any(c < 1 for c in cfg.class_splits):
        raise ConfigError("class counts must be positive", "data.class_splits")
    if not cfg.variants:
        raise ConfigError("at least one variant is required", "run.variants")
    if not cfg.seeds:
        raise ConfigError("at least one seed is required", "run.seeds")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return build_config(parse_lines(text, str(path)), path.parent)
