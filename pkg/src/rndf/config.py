"""Flat ``key = value`` run configuration.

Keys are ``section.field`` (``data.*``, ``backbone.*``, ``forest.*``,
``train.*``, ``preprocess.*``) plus the top-level ``out`` and ``seed``.
Values are parsed according to the field's type; ``none`` clears optional
fields and tuples are comma separated.
"""
import dataclasses
import typing
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

from .data import PreprocessConfig
from .forest import ForestConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class DataConfig:
    # synthetic | manifest | csv
    source: str = "manifest"
    manifest: Optional[str] = None
    root: Optional[str] = None
    val_manifest: Optional[str] = None
    val_root: Optional[str] = None
    csv: Optional[str] = None
    val_csv: Optional[str] = None
    n_train: int = 4000
    n_test: int = 1000
    input_dim: int = 32
    noise_std: float = 2.0
    seed: int = 0


@dataclass
class BackboneSection:
    embed_dim: int = 64
    num_blocks: int = 2
    hidden_dim: int = 64
    head_dim: int = 128
    pool: Optional[int] = None
    # derived from the forest; if given it must agree
    num_split_outputs: Optional[int] = None
    seed: int = 0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    forest: ForestConfig = field(default_factory=ForestConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    out: str = "runs/default"
    seed: Optional[int] = None


SECTIONS = {"data": DataConfig, "backbone": BackboneSection, "forest": ForestConfig,
            "train": TrainConfig, "preprocess": PreprocessConfig}


def parse_text(text: str, origin: str = "<config>") -> Dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}", "expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def parse_overrides(items) -> Dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _convert(key: str, raw: str, tp):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        if raw.lower() in ("none", "null", ""):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _convert(key, raw, inner)
    if origin in (tuple, Tuple):
        elem = args[0]
        items = [s.strip() for s in raw.split(",") if s.strip()]
        return tuple(_convert(key, s, elem) for s in items)
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(key, f"unsupported field type {tp}")


def build(raw: Dict[str, str], require_data: bool = True) -> RunConfig:
    """Apply flat key/values onto defaults and validate cross-field rules."""
    values: Dict[str, dict] = {name: {} for name in SECTIONS}
    top = {}
    for key, value in raw.items():
        if "." not in key:
            if key == "out":
                top["out"] = value
            elif key == "seed":
                top["seed"] = _convert(key, value, Optional[int])
            else:
                raise ConfigError(key, "unknown key")
            continue
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(key, "unknown section")
        hints = typing.get_type_hints(SECTIONS[section])
        if name not in hints:
            raise ConfigError(key, "unknown key")
        values[section][name] = _convert(key, value, hints[name])
    if top.get("seed") is not None:
        values["train"].setdefault("seed", top["seed"])
        values["backbone"].setdefault("seed", top["seed"])
    built = {}
    for section, cls in SECTIONS.items():
        try:
            built[section] = cls(**values[section])
        except (ValueError, TypeError) as exc:
            raise ConfigError(section, str(exc)) from None
    cfg = RunConfig(**built, **top)
    validate(cfg, require_data)
    return cfg


def validate(cfg: RunConfig, require_data: bool = True) -> None:
    if cfg.data.source not in ("synthetic", "manifest", "csv"):
        raise ConfigError("data.source", f"unknown source {cfg.data.source!r}")
    if require_data:
        if cfg.data.source == "manifest" and not cfg.data.manifest:
            raise ConfigError("data.manifest", "dataset path is required when data.source = manifest")
        if cfg.data.source == "csv" and not cfg.data.csv:
            raise ConfigError("data.csv", "dataset path is required when data.source = csv")
    expected = cfg.forest.num_trees * (2 ** cfg.forest.depth - 1)
    given = cfg.backbone.num_split_outputs
    if given is not None and given != expected:
        raise ConfigError("backbone.num_split_outputs",
                          f"{given} != forest.num_trees x (2^forest.depth - 1) = {expected}")


def load(path: Optional[str], overrides=None, require_data: bool = True) -> RunConfig:
    raw = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = parse_text(fh.read(), path)
        except OSError as exc:
            raise ConfigError("--config", str(exc)) from None
    raw.update(parse_overrides(overrides))
    return build(raw, require_data)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def dump(cfg: RunConfig) -> str:
    """Effective configuration as text that :func:`load` reproduces exactly."""
    lines = [f"out = {cfg.out}"]
    if cfg.seed is not None:
        lines.append(f"seed = {cfg.seed}")
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
