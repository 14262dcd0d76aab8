"""Run configuration: one JSON document mirroring ``RunConfig``."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .dynamics import ModelKind
from .errors import ConfigError
from .training import TrainingConfig

DEFAULT_Q_GRID = (0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0)


@dataclass
class DatasetSpec:
    classes: int = 4
    train_per_class: int = 500
    val_per_class: int = 125
    eval_per_class: int = 250
    boundary_fraction: float = 0.25
    separation: float = 4.0

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError("need at least 2 classes")
        if min(self.train_per_class, self.eval_per_class) < 1 or self.val_per_class < 0:
            raise ConfigError("per-class counts must be >= 1 (validation may be 0)")
        if not 0.0 <= self.boundary_fraction <= 1.0:
            raise ConfigError("boundary_fraction must lie in [0, 1]")


@dataclass
class RunConfig:
    model_kind: str = "frost"
    d_in: int = 16
    d_hid: int = 32
    d_out: int = 4
    T_max: int = 16
    hidden: int | None = None  # A's hidden width; None -> d_hid
    activation: str = "tanh"
    lam_init: float = 0.5
    hurst: float = 0.8
    gating: bool = False
    q: float = 0.5  # quantile used by `eval` for a single threshold
    t_min: int = 1
    q_grid: list = field(default_factory=lambda: list(DEFAULT_Q_GRID))
    sketch_k: int = 200
    training: TrainingConfig = field(default_factory=TrainingConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    ablation: bool = False
    hurst_sweep: list = field(default_factory=list)
    trace_samples: int = 64
    output_dir: str = "runs/default"
    seed: int = 42

    def __post_init__(self):
        if isinstance(self.training, dict):
            self.training = _build(TrainingConfig, self.training, "training")
        if isinstance(self.dataset, dict):
            self.dataset = _build(DatasetSpec, self.dataset, "dataset")
        try:
            ModelKind(self.model_kind)
        except ValueError:
            raise ConfigError(f"unknown model kind {self.model_kind!r}") from None
        if min(self.d_in, self.d_hid, self.d_out, self.T_max) < 1:
            raise ConfigError("dimensions and T_max must be positive")
        if self.dataset.classes != self.d_out:
            raise ConfigError("dataset classes must equal d_out")
        if not 0.0 < self.q < 1.0:
            raise ConfigError(f"q must lie in (0, 1), got {self.q}")
        if not self.q_grid or any(not 0.0 < q <= 1.0 for q in self.q_grid):
            raise ConfigError("q_grid entries must lie in (0, 1]")
        if list(self.q_grid) != sorted(self.q_grid):
            raise ConfigError("q_grid must be ascending")
        if not 1 <= self.t_min <= self.T_max:
            raise ConfigError("need 1 <= t_min <= T_max")
        # training always unrolls the full depth and follows the run seed
        self.training.T = self.T_max
        self.training.seed = self.seed
        if self.lam_init <= 0:
            raise ConfigError("lam_init must be positive")

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc):
        return _build(cls, doc, "config")

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)


def _build(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown {where} field(s): {', '.join(unknown)}")
    for f in fields(cls):
        if f.name in doc and not (doc[f.name] is None and "None" in str(f.type)):
            _check_type(f"{where}.{f.name}", f.default, doc[f.name])
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ConfigError(f"bad {where}: {exc}") from exc


def _check_type(name, default, value):
    """Scalar fields must keep the type of their default (ints pass for floats)."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        return
    if not ok:
        raise ConfigError(f"{name} expects {type(default).__name__}, got {value!r}")


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Return a new config with dotted-key overrides (``training.lr=0.01``)."""
    doc = cfg.to_dict()
    for key, value in overrides.items():
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config section {p!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config field {key!r}")
        node[parts[-1]] = value
    return RunConfig.from_dict(doc)
