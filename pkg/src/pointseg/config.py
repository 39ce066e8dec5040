"""Run configuration: TOML file loading, key=value overrides, validation.

Every tunable default lives here so experiment sweeps need no code changes.
Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from .errors import ConfigError
from .refiner import AGGREGATIONS, DEFAULT_SCALES

SCHEMA_VERSION = 1


@dataclass
class PhantomsConfig:
    count: int = 200
    width: int = 128
    height: int = 128
    blob_count: list[int] = field(default_factory=lambda: [1, 3])
    radius: list[int] = field(default_factory=lambda: [34, 56])
    contrast: float = 0.55
    noise_sigma: float = 0.03
    spacing_mm: float = 1.0


@dataclass
class ModelConfig:
    stem: int = 32
    hidden: int = 1024
    feature: int = 256
    num_classes: int = 2


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 50
    prototype_batches: int = 8
    neg_margin: int = 16


@dataclass
class PromptConfig:
    seed_w: int = 21
    seed_h: int = 21
    scales: list[float] = field(default_factory=lambda: list(DEFAULT_SCALES))
    aggregation: str = "mean"


@dataclass
class InferConfig:
    t_values: list[int] = field(default_factory=lambda: [1, 5, 10])
    selector: str = "learned"
    class_id: int = 1


@dataclass
class BackendConfig:
    kind: str = "oracle"
    endpoint: str = "http://127.0.0.1:8008"
    perturb_rate: float = 0.0
    perturb_radius: int = 0
    retries: int = 2
    timeout_s: float = 10.0


@dataclass
class PathsConfig:
    data_dir: str = "data"
    out_dir: str = "out"
    checkpoint: str = "out/refiner.ckpt"


@dataclass
class EvalConfig:
    jobs: int = 1
    hd_variant: str = "hd"


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    rng_seed: int = 42
    phantoms: PhantomsConfig = field(default_factory=PhantomsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.prompt.aggregation not in AGGREGATIONS:
            raise ConfigError(f"prompt.aggregation must be one of {AGGREGATIONS}")
        if self.infer.selector not in ("learned", "ideal"):
            raise ConfigError("infer.selector must be 'learned' or 'ideal'")
        if self.backend.kind not in ("oracle", "remote"):
            raise ConfigError("backend.kind must be 'oracle' or 'remote'")
        if self.eval.hd_variant not in ("hd", "hd95"):
            raise ConfigError("eval.hd_variant must be 'hd' or 'hd95'")
        if not 0.0 <= self.backend.perturb_rate <= 1.0:
            raise ConfigError("backend.perturb_rate must lie in [0, 1]")
        if min(self.infer.t_values, default=0) < 1:
            raise ConfigError("infer.t_values must be positive")
        if any(s <= 0 for s in self.prompt.scales) or not self.prompt.scales:
            raise ConfigError("prompt.scales must be a non-empty list of positive numbers")
        if self.train.epochs < 0 or self.train.batch_size < 1:
            raise ConfigError("train.epochs must be >= 0 and train.batch_size >= 1")


def _coerce(value, target, key: str):
    """Coerce a parsed TOML value (or --set string) to the default's type."""
    if isinstance(target, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(target, int):
        if isinstance(value, bool) or (not isinstance(value, int) and not _intlike(value)):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(target, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(target, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(target, list):
        elem = target[0] if target else 0.0
        if isinstance(value, str):
            value = [v for v in value.split(",") if v != ""]
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return [_coerce(v, elem, key) for v in value]
    raise ConfigError(f"{key}: unsupported value type")


def _intlike(value) -> bool:
    if isinstance(value, str):
        try:
            int(value)
            return True
        except ValueError:
            return False
    return False


def _apply_section(obj, doc: dict, prefix: str) -> None:
    known = {f.name: f for f in fields(obj)}
    for key, value in doc.items():
        if key not in known:
            raise ConfigError(f"unknown config key {prefix}{key!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{prefix}{key}: expected a table")
            _apply_section(current, value, f"{prefix}{key}.")
        else:
            setattr(obj, key, _coerce(value, current, f"{prefix}{key}"))


def load_config(path: str | Path | None = None) -> RunConfig:
    """Defaults, optionally overlaid with a TOML file."""
    cfg = RunConfig()
    if path is not None:
        try:
            doc = tomli.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"invalid TOML in {path}: {e}") from e
        _apply_section(cfg, doc, "")
    cfg.validate()
    return cfg


def apply_override(cfg: RunConfig, assignment: str) -> None:
    """Apply one dotted `section.key=value` override in place."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    dotted, value = assignment.split("=", 1)
    parts = dotted.strip().split(".")
    obj = cfg
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(getattr(obj, part, None)):
            raise ConfigError(f"unknown config section {dotted!r}")
        obj = getattr(obj, part)
    leaf = parts[-1]
    if leaf not in {f.name for f in fields(obj)} or dataclasses.is_dataclass(getattr(obj, leaf)):
        raise ConfigError(f"unknown config key {dotted!r}")
    setattr(obj, leaf, _coerce(value, getattr(obj, leaf), dotted))


def config_keys_with_defaults() -> list[str]:
    """Flat `key = default` lines for --help output."""
    lines: list[str] = []

    def walk(obj, prefix: str):
        for f in fields(obj):
            value = getattr(obj, f.name)
            if dataclasses.is_dataclass(value):
                walk(value, f"{prefix}{f.name}.")
            else:
                lines.append(f"{prefix}{f.name} = {value!r}")

    walk(RunConfig(), "")
    return lines
