"""Experiment configuration: defaults, validation, and the flat key space.

Configuration keys are flat with dotted sections (``training.learning_rate``)
so that a JSON file, command-line flags and the echoed summary all speak the
same vocabulary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Any, Mapping

from .privacy import DISTRIBUTIONS, NoiseSpec
from .tasks import TrainingConfig

STRATEGIES = ("fedavg", "ffa", "fra")
PARTITIONS = ("iid", "label-skew")

# Row = label, column = client.
LABEL_WEIGHT_PRESETS = {
    "binary-90-10": ((0.9, 0.1), (0.1, 0.9)),
    "ternary-70-20-20": ((0.7, 0.3), (0.2, 0.8), (0.2, 0.8)),
}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class DatasetConfig:
    """Synthetic data parameters, or paths to datasets on disk."""

    classes: int = 3
    per_class: int = 1000
    eval_per_class: int = 300
    dim: int = 64
    separation: float = 20.0
    path: str | None = None
    eval_path: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    strategy: str = "fedavg"
    clients: int = 2
    rank: int = 4
    rounds: int = 30
    partition: str = "iid"
    label_weights: tuple[tuple[float, ...], ...] | None = None
    noise: NoiseSpec | None = None
    training: TrainingConfig = field(default_factory=TrainingConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    scaling: float = 1.0
    seed: int = 42
    out: str = "fedlora_run"
    threads: int = 1
    trace: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError("strategy", f"must be one of {', '.join(STRATEGIES)}, got {self.strategy!r}")
        if self.partition not in PARTITIONS:
            raise ConfigError("partition", f"must be one of {', '.join(PARTITIONS)}, got {self.partition!r}")
        _positive_int("clients", self.clients)
        _positive_int("rank", self.rank)
        if self.rank > self.dataset.dim:
            raise ConfigError("rank", f"must not exceed the model width {self.dataset.dim}, got {self.rank}")
        _non_negative_int("rounds", self.rounds)
        _positive_int("threads", self.threads)
        if not (math.isfinite(self.scaling) and self.scaling > 0):
            raise ConfigError("scaling", f"must be positive, got {self.scaling}")
        ds = self.dataset
        for key in ("classes", "per_class", "eval_per_class", "dim"):
            _positive_int(f"dataset.{key}", getattr(ds, key))
        if ds.classes < 2:
            raise ConfigError("dataset.classes", f"need at least 2 classes, got {ds.classes}")
        if ds.separation < 0:
            raise ConfigError("dataset.separation", f"must be non-negative, got {ds.separation}")
        if self.label_weights is not None:
            _check_label_weights(self.label_weights, self.clients)
        if self.partition == "label-skew" and self.label_weights is None:
            raise ConfigError("label_weights", "required when partition is label-skew")


def _positive_int(key: str, value) -> None:
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ConfigError(key, f"must be a positive integer, got {value!r}")


def _non_negative_int(key: str, value) -> None:
    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
        raise ConfigError(key, f"must be a non-negative integer, got {value!r}")


def _check_label_weights(weights, clients: int) -> None:
    for i, row in enumerate(weights):
        if len(row) != clients:
            raise ConfigError("label_weights", f"row {i} has {len(row)} entries, expected one per client ({clients})")
        if any(not 0.0 <= w <= 1.0 for w in row):
            raise ConfigError("label_weights", f"row {i} has entries outside [0, 1]")
        if abs(sum(row) - 1.0) > 1e-9:
            raise ConfigError("label_weights", f"row {i} sums to {sum(row)}, expected 1")


_TRAINING_KEYS = {f.name for f in fields(TrainingConfig)}
_DATASET_KEYS = {f.name for f in fields(DatasetConfig)}
_NOISE_KEYS = {"distribution", "scale", "seed"}
_TOP_KEYS = {f.name for f in fields(ExperimentConfig)} - {"training", "dataset", "noise"}

CONFIG_KEYS = tuple(sorted(
    _TOP_KEYS
    | {f"training.{k}" for k in _TRAINING_KEYS}
    | {f"dataset.{k}" for k in _DATASET_KEYS}
    | {f"noise.{k}" for k in _NOISE_KEYS}
))


def flatten(mapping: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    """Turn nested sections into dotted keys; already-flat keys pass through."""
    flat: dict[str, Any] = {}
    for key, value in mapping.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(flatten(value, f"{name}."))
        else:
            flat[name] = value
    return flat


def _coerce(key: str, value, kind):
    if value is None:
        return None
    try:
        if kind is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if kind is float:
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if kind is bool:
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes"):
                    return True
                if value.lower() in ("0", "false", "no"):
                    return False
                raise ValueError
            return bool(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"invalid value {value!r}") from None


_KINDS = {
    "strategy": str, "clients": int, "rank": int, "rounds": int, "partition": str,
    "scaling": float, "seed": int, "out": str, "threads": int, "trace": bool,
    "training.learning_rate": float, "training.weight_decay": float, "training.local_epochs": int,
    "training.batch_size": int, "training.max_steps_per_epoch": int,
    "dataset.classes": int, "dataset.per_class": int, "dataset.eval_per_class": int,
    "dataset.dim": int, "dataset.separation": float, "dataset.path": str, "dataset.eval_path": str,
    "noise.distribution": str, "noise.scale": float, "noise.seed": int,
}


def _label_weights(value):
    if value is None:
        return None
    if isinstance(value, str):
        if value not in LABEL_WEIGHT_PRESETS:
            raise ConfigError("label_weights", f"unknown preset {value!r}; known: {', '.join(LABEL_WEIGHT_PRESETS)}")
        return LABEL_WEIGHT_PRESETS[value]
    try:
        return tuple(tuple(float(w) for w in row) for row in value)
    except (TypeError, ValueError):
        raise ConfigError("label_weights", f"expected a matrix or preset name, got {value!r}") from None


def from_flat(values: Mapping[str, Any]) -> ExperimentConfig:
    """Build a config from dotted keys layered over the defaults."""
    unknown = sorted(set(values) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(unknown[0], "unknown configuration key")
    top, training, dataset, noise = {}, {}, {}, {}
    for key, value in values.items():
        if key == "label_weights":
            top[key] = _label_weights(value)
            continue
        value = _coerce(key, value, _KINDS[key])
        section, _, name = key.rpartition(".")
        {"": top, "training": training, "dataset": dataset, "noise": noise}[section][name] = value

    try:
        training_cfg = TrainingConfig(**{k: v for k, v in training.items() if v is not None or k == "max_steps_per_epoch"})
    except ValueError as exc:
        raise ConfigError("training", str(exc)) from None
    dataset_cfg = DatasetConfig(**{k: v for k, v in dataset.items() if v is not None or k.endswith("path")})

    noise_spec = None
    if noise.get("scale") is not None:
        if noise["scale"] <= 0:
            raise ConfigError("noise.scale", f"must be positive, got {noise['scale']}")
        dist = noise.get("distribution") or "gaussian"
        if dist not in DISTRIBUTIONS:
            raise ConfigError("noise.distribution", f"must be one of {', '.join(DISTRIBUTIONS)}, got {dist!r}")
        seed = noise.get("seed")
        if seed is None:
            seed = top.get("seed", ExperimentConfig.seed)
        noise_spec = NoiseSpec(dist, noise["scale"], seed)

    top = {k: v for k, v in top.items() if v is not None or k == "label_weights"}
    return ExperimentConfig(training=training_cfg, dataset=dataset_cfg, noise=noise_spec, **top)


def to_flat(config: ExperimentConfig) -> dict[str, Any]:
    """Fully resolved config as dotted keys (the echo written to summaries)."""
    flat = {k: getattr(config, k) for k in _TOP_KEYS}
    if flat["label_weights"] is not None:
        flat["label_weights"] = [list(row) for row in flat["label_weights"]]
    flat.update({f"training.{k}": getattr(config.training, k) for k in _TRAINING_KEYS})
    flat.update({f"dataset.{k}": getattr(config.dataset, k) for k in _DATASET_KEYS})
    spec = config.noise
    flat.update({f"noise.{k}": (getattr(spec, k) if spec else None) for k in _NOISE_KEYS})
    return dict(sorted(flat.items()))


def with_strategy(config: ExperimentConfig, strategy: str) -> ExperimentConfig:
    return replace(config, strategy=strategy)
