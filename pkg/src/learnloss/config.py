"""Experiment configuration: JSON schema, defaults and validation.

Every level rejects unknown keys, and validation reports every violated
constraint rather than stopping at the first one.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from learnloss.acquisition import ENTROPY, LEARNED_LOSS, LEARNED_LOSS_MSE, STRATEGIES
from learnloss.data import SynthConfig
from learnloss.lossnet import MSE, RANKING, TrainSchedule
from learnloss.models import CLASSIFICATION, REGRESSION
from learnloss.nncore import OptimConfig

DATASET_KINDS = ("gaussian_mixture", "sine_regression", "cifar10")
PRECISIONS = ("float64", "float32")


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


@dataclass
class DatasetSpec:
    kind: str = "gaussian_mixture"
    num_classes: int = 4
    output_dim: int = 1
    pool_size: int = 2000
    test_size: int = 1000
    noise: float = 1.0
    radius: float = 2.0
    dim: int = 2
    x_max: float = 3.0
    frequency: float = 1.0
    hetero_scale: float = 0.0
    seed: int = 0
    path: str | None = None
    normalize: bool = True

    @property
    def task(self) -> str:
        return REGRESSION if self.kind == "sine_regression" else CLASSIFICATION

    @property
    def input_dim(self) -> int:
        return {"gaussian_mixture": self.dim, "sine_regression": 1, "cifar10": 3072}[self.kind]

    @property
    def target_dim(self) -> int:
        if self.kind == "cifar10":
            return 10
        return self.output_dim if self.task == REGRESSION else self.num_classes

    def synth(self) -> SynthConfig:
        return SynthConfig(
            kind=self.kind, num_classes=self.num_classes, output_dim=self.output_dim,
            pool_size=self.pool_size, test_size=self.test_size, noise=self.noise,
            radius=self.radius, dim=self.dim, x_max=self.x_max, frequency=self.frequency,
            hetero_scale=self.hetero_scale, seed=self.seed,
        )


@dataclass
class ModelSpec:
    hidden_dims: list[int] = field(default_factory=lambda: [64, 64, 64, 64])
    loss_dim: int = 128
    precision: str = "float64"


@dataclass
class ScheduleSpec:
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_drop_epoch: int | None = 160
    lr_drop_factor: float = 0.1
    grad_stop_fraction: float = 0.6
    lam: float = 1.0
    margin: float = 1.0
    mse_lambda: float = 0.1

    def for_strategy(self, kind: str) -> TrainSchedule:
        """Training schedule used for a strategy.

        Strategies that do not acquire by predicted loss still train the
        predictor (for the metrics), but behind a barrier from epoch 0 so the
        target model sees only its own loss.
        """
        optim = OptimConfig(self.learning_rate, self.momentum, self.weight_decay)
        common = dict(
            epochs=self.epochs, batch_size=self.batch_size, lr_drop_epoch=self.lr_drop_epoch,
            lr_drop_factor=self.lr_drop_factor, margin=self.margin, optim=optim,
        )
        if kind == LEARNED_LOSS:
            return TrainSchedule(**common, grad_stop_fraction=self.grad_stop_fraction,
                                 lam=self.lam, predictor_loss=RANKING)
        if kind == LEARNED_LOSS_MSE:
            return TrainSchedule(**common, grad_stop_fraction=self.grad_stop_fraction,
                                 lam=self.mse_lambda, predictor_loss=MSE)
        return TrainSchedule(**common, grad_stop_fraction=0.0, lam=self.lam,
                             predictor_loss=RANKING)


@dataclass
class ActiveSpec:
    k: int = 100
    subset_size: int = 10000
    cycles: int = 8
    trials: int = 5


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    active: ActiveSpec = field(default_factory=ActiveSpec)
    strategies: list[str] = field(default_factory=lambda: ["random", "entropy", "coreset", "learned_loss"])
    seed: int = 0
    output_dir: str = "runs"
    run_id: str | None = None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["schedule"]["lambda"] = d["schedule"].pop("lam")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_SECTIONS = {"dataset": DatasetSpec, "model": ModelSpec, "schedule": ScheduleSpec, "active": ActiveSpec}
_KEY_ALIASES = {"schedule": {"lambda": "lam"}}
_TOP_SCALARS = {"strategies": list, "seed": int, "output_dir": str, "run_id": (str, type(None))}


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _type_ok(value, default) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return _is_int(value)
    if isinstance(default, float):
        return _is_int(value) or isinstance(value, float)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list) and all(_is_int(v) for v in value)
    return True


def _build_section(name: str, cls, raw, errors: list[str]):
    obj = cls()
    if not isinstance(raw, dict):
        errors.append(f"{name}: must be an object")
        return obj
    aliases = _KEY_ALIASES.get(name, {})
    known = {f.name for f in fields(cls)}
    for key, value in raw.items():
        attr = aliases.get(key, key)
        if attr not in known or (attr in aliases.values() and key == attr):
            errors.append(f"{name}.{key}: unknown key")
            continue
        default = getattr(obj, attr)
        optional = attr in ("lr_drop_epoch", "path")
        if value is None and optional:
            setattr(obj, attr, None)
        elif default is None and optional:
            expected = int if attr == "lr_drop_epoch" else str
            if not (_is_int(value) if expected is int else isinstance(value, str)):
                errors.append(f"{name}.{key}: expected {expected.__name__} or null")
            else:
                setattr(obj, attr, value)
        elif not _type_ok(value, default):
            errors.append(f"{name}.{key}: expected {type(default).__name__}, got {type(value).__name__}")
        else:
            setattr(obj, attr, float(value) if isinstance(default, float) else value)
    return obj


def _target_params(cfg: ExperimentConfig) -> int:
    dims = [cfg.dataset.input_dim, *cfg.model.hidden_dims, cfg.dataset.target_dim]
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


def _predictor_params(cfg: ExperimentConfig) -> int:
    d = cfg.model.loss_dim
    hidden = cfg.model.hidden_dims
    return sum(h * d + d for h in hidden) + len(hidden) * d + 1


def check(cfg: ExperimentConfig) -> list[str]:
    """Every violated constraint of an already-parsed config."""
    v = []
    ds, md, sc, ac = cfg.dataset, cfg.model, cfg.schedule, cfg.active
    if ds.kind not in DATASET_KINDS:
        v.append(f"dataset.kind: must be one of {DATASET_KINDS}")
    if ds.pool_size < 1:
        v.append("dataset.pool_size: must be positive")
    if ds.test_size < 1:
        v.append("dataset.test_size: must be positive")
    if ds.noise < 0:
        v.append("dataset.noise: must be nonnegative")
    if ds.hetero_scale < 0:
        v.append("dataset.hetero_scale: must be nonnegative")
    if ds.kind == "gaussian_mixture":
        if ds.num_classes < 2:
            v.append("dataset.num_classes: must be at least 2")
        if ds.dim < 2:
            v.append("dataset.dim: must be at least 2")
    if ds.kind == "sine_regression":
        if ds.output_dim < 1:
            v.append("dataset.output_dim: must be at least 1")
        if ds.x_max <= 0:
            v.append("dataset.x_max: must be positive")
    if ds.kind == "cifar10" and not ds.path:
        v.append("dataset.path: required for cifar10")

    if len(md.hidden_dims) < 2:
        v.append("model.hidden_dims: need at least 2 hidden blocks")
    if any(h < 1 for h in md.hidden_dims):
        v.append("model.hidden_dims: widths must be positive")
    if md.loss_dim < 1:
        v.append("model.loss_dim: must be positive")
    if md.precision not in PRECISIONS:
        v.append(f"model.precision: must be one of {PRECISIONS}")
    sizes_ok = (
        ds.kind in DATASET_KINDS and len(md.hidden_dims) >= 2
        and min(md.hidden_dims) >= 1 and md.loss_dim >= 1
    )
    if sizes_ok and _predictor_params(cfg) >= _target_params(cfg):
        v.append(
            f"model.loss_dim: loss predictor ({_predictor_params(cfg)} params) must be "
            f"smaller than the target model ({_target_params(cfg)} params)"
        )

    if sc.epochs < 0:
        v.append("schedule.epochs: must be nonnegative")
    if sc.batch_size < 2 or sc.batch_size % 2:
        v.append("schedule.batch_size: must be a positive even number")
    if not sc.learning_rate > 0:
        v.append("schedule.learning_rate: must be positive")
    if not 0 <= sc.momentum < 1:
        v.append("schedule.momentum: must lie in [0, 1)")
    if sc.weight_decay < 0:
        v.append("schedule.weight_decay: must be nonnegative")
    if sc.lr_drop_epoch is not None and sc.lr_drop_epoch < 0:
        v.append("schedule.lr_drop_epoch: must be nonnegative or null")
    if not sc.lr_drop_factor > 0:
        v.append("schedule.lr_drop_factor: must be positive")
    if not 0 <= sc.grad_stop_fraction <= 1:
        v.append("schedule.grad_stop_fraction: must lie in [0, 1]")
    if sc.lam < 0:
        v.append("schedule.lambda: must be nonnegative")
    if sc.mse_lambda < 0:
        v.append("schedule.mse_lambda: must be nonnegative")
    if not sc.margin > 0:
        v.append("schedule.margin: margin must be positive")

    if ac.k < 1:
        v.append("active.k: must be positive")
    elif ac.k > ds.pool_size:
        v.append(f"active.k: {ac.k} exceeds pool size {ds.pool_size}")
    if ac.subset_size < 1:
        v.append("active.subset_size: must be positive")
    elif ac.subset_size < ac.k:
        v.append("active.subset_size: must be at least k")
    if ac.cycles < 0:
        v.append("active.cycles: must be nonnegative")
    if ac.trials < 1:
        v.append("active.trials: must be positive")

    if not cfg.strategies:
        v.append("strategies: at least one strategy required")
    for s in cfg.strategies:
        if s not in STRATEGIES:
            v.append(f"strategies: unknown strategy {s!r}")
    if len(set(cfg.strategies)) != len(cfg.strategies):
        v.append("strategies: duplicates not allowed")
    if ENTROPY in cfg.strategies and ds.task == REGRESSION:
        v.append("strategies: entropy is unsupported for regression tasks")
    return v


def parse(raw: Any) -> tuple[ExperimentConfig, list[str]]:
    """Parse a decoded JSON document, returning the config and all violations."""
    errors: list[str] = []
    cfg = ExperimentConfig()
    if not isinstance(raw, dict):
        return cfg, ["config: top level must be an object"]
    for key, value in raw.items():
        if key in _SECTIONS:
            setattr(cfg, key, _build_section(key, _SECTIONS[key], value, errors))
        elif key in _TOP_SCALARS:
            expected = _TOP_SCALARS[key]
            ok = _is_int(value) if expected is int else isinstance(value, expected)
            if key == "strategies" and ok:
                ok = all(isinstance(s, str) for s in value)
            if not ok:
                errors.append(f"{key}: wrong type {type(value).__name__}")
            else:
                setattr(cfg, key, value)
        else:
            errors.append(f"{key}: unknown key")
    # rejected values keep their defaults, so the semantic checks stay safe
    errors.extend(check(cfg))
    return cfg, errors


def load(path: str | Path) -> ExperimentConfig:
    raw = json.loads(Path(path).read_text())
    cfg, errors = parse(raw)
    if errors:
        raise ConfigError(errors)
    return cfg


def from_dict(raw: dict) -> ExperimentConfig:
    cfg, errors = parse(raw)
    if errors:
        raise ConfigError(errors)
    return cfg
