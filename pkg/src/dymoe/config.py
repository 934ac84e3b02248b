"""Run configuration: one JSON document, validated per field, hashed canonically."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .layer import MoeConfig
from .taskgen import StreamLayout, TaskSpec, default_specs
from .trainer import TrainConfig

STRATEGIES = ("baseline", "only-new", "mask-old", "only-ambiguous")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 300
    lr: float = 3e-3
    batch_size: int = 32
    n_train: int = 4000

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.n_train < 1:
            raise ValueError("batch_size and n_train must be positive")


@dataclass(frozen=True)
class AnalysisConfig:
    eval_every: int = 25
    eval_samples: int = 200

    def __post_init__(self):
        if self.eval_every < 1 or self.eval_samples < 1:
            raise ValueError("eval_every and eval_samples must be positive")


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    moe: MoeConfig = field(default_factory=MoeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    layout: StreamLayout = field(default_factory=StreamLayout)
    tasks: tuple[TaskSpec, ...] = field(default_factory=lambda: tuple(default_specs(4)))
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if not self.tasks:
            raise ConfigError("tasks", "at least one task is required")
        for k, spec in enumerate(self.tasks, start=1):
            if spec.task_id != k:
                raise ConfigError(f"tasks[{k - 1}].task_id", f"expected {k}, got {spec.task_id}")
            if spec.n_classes != self.layout.n_classes:
                raise ConfigError(f"tasks[{k - 1}].n_classes", "must match layout.n_classes")
        if self.backbone.vocab_size != self.layout.vocab_size:
            raise ConfigError("layout.vocab_size", "must match backbone.vocab_size")
        if self.backbone.seq_len != self.layout.seq_len:
            raise ConfigError("layout.seq_len", "must match backbone.seq_len")
        if self.backbone.n_classes != self.layout.n_classes:
            raise ConfigError("layout.n_classes", "must match backbone.n_classes")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tasks"] = [dataclasses.asdict(s) for s in self.tasks]
        return d

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def with_train(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **changes))

    def with_moe(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, moe=dataclasses.replace(self.moe, **changes))


_SECTIONS = {
    "backbone": BackboneConfig,
    "moe": MoeConfig,
    "train": TrainConfig,
    "layout": StreamLayout,
    "pretrain": PretrainConfig,
    "analysis": AnalysisConfig,
}


def _check_value(prefix: str, f: dataclasses.Field, value):
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if t == "bool":
        if not isinstance(value, bool):
            raise ConfigError(prefix, "expected true or false")
    elif t == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(prefix, "expected an integer")
    elif t == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(prefix, "expected a number")
        value = float(value)
    elif t == "str":
        if not isinstance(value, str):
            raise ConfigError(prefix, "expected a string")
    elif t.startswith("tuple"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(prefix, "expected a list")
        value = tuple(value)
    return value


def _build(cls, data, prefix: str):
    """Instantiate ``cls`` from a dict, naming the first field that fails validation."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(prefix, "expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{prefix}.{unknown[0]}", "unknown field")
    kwargs = {k: _check_value(f"{prefix}.{k}", fields[k], v) for k, v in data.items()}
    missing = [k for k, f in fields.items() if f.default is f.default_factory is dataclasses.MISSING and k not in kwargs]
    if missing:
        raise ConfigError(f"{prefix}.{missing[0]}", "required field missing")
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        whole = exc
    # blame the first field that fails on its own; cross-field conflicts name the section
    required = {k: kwargs[k] for k, f in fields.items() if f.default is f.default_factory is dataclasses.MISSING}
    for k in fields:
        if k in kwargs:
            try:
                cls(**{**required, k: kwargs[k]})
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{prefix}.{k}", str(exc)) from None
    raise ConfigError(prefix, str(whole))


def _build_spec(k: int, d: dict) -> TaskSpec:
    d = dict(d)
    d.setdefault("task_id", k)
    return _build(TaskSpec, d, f"tasks[{k - 1}]")


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    allowed = set(_SECTIONS) | {"tasks", "n_tasks", "overlap"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(unknown[0], "unknown section")
    parts = {name: _build(cls, data.get(name), name) for name, cls in _SECTIONS.items()}
    if "tasks" in data:
        if not isinstance(data["tasks"], list) or not data["tasks"]:
            raise ConfigError("tasks", "expected a non-empty list")
        tasks = [_build_spec(k, d) for k, d in enumerate(data["tasks"], start=1)]
    else:
        n_tasks = data.get("n_tasks", 4)
        overlap = data.get("overlap", 0.3)
        if isinstance(n_tasks, bool) or not isinstance(n_tasks, int) or n_tasks < 1:
            raise ConfigError("n_tasks", "expected a positive integer")
        if isinstance(overlap, bool) or not isinstance(overlap, (int, float)) or not 0.0 <= overlap <= 1.0:
            raise ConfigError("overlap", "must lie in [0, 1]")
        tasks = [
            dataclasses.replace(s, n_classes=parts["layout"].n_classes)
            for s in default_specs(n_tasks, overlap=float(overlap))
        ]
    return RunConfig(tasks=tuple(tasks), **parts)


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    return config_from_dict(data)


def config_from_json(text: str) -> RunConfig:
    return config_from_dict(json.loads(text))


__all__ = [
    "RunConfig",
    "PretrainConfig",
    "AnalysisConfig",
    "ConfigError",
    "STRATEGIES",
    "config_from_dict",
    "config_from_json",
    "load_config",
]
