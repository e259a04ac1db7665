"""Run configuration: nested dataclasses loaded from JSON, strict about keys."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

from .errors import ValidationError


@dataclass
class SynthSection:
    kind: str = "linear_var"
    m: int = 10
    T: int = 1500
    sigma: float = 0.01
    density: float = 0.3
    radius: float = 0.5
    hidden: int = 3
    gain: float = 3.0


@dataclass
class DataSection:
    path: str | None = None
    layout: str = "wide"
    benchmark_column: str = "benchmark"
    synth: SynthSection = field(default_factory=SynthSection)
    target: str | None = None
    window: int | None = None
    lag_order: int = 1


@dataclass
class TopologySection:
    m: int | None = None
    hidden: int = 5
    activation: str = "tanh"
    include_bias: bool = True


@dataclass
class HyperSection:
    lam1: float = 3e-3
    lam2: float = 1e-3
    alpha: float = 0.5
    eps: float = 1e-6
    transforms: bool = True


@dataclass
class ScheduleSection:
    T: int = 1000
    eta: Any = 0.3
    gamma: Any = 0.9
    refit_T: int | None = None


@dataclass
class TrainerSection:
    mode: str = "exact"
    frac_bits: int = 40
    decay_bits: int = 16
    checkpoint_every: int = 10
    batch_size: int | None = None
    dump_trajectory: bool = False


@dataclass
class MetaSection:
    iters: int = 10
    rate: float = 100.0
    targets: list = field(default_factory=lambda: ["lam1", "lam2", "alpha"])
    valid_fraction: float = 0.2
    max_step: float = 1.0
    learn_schedule: bool = False


@dataclass
class BacktestSection:
    train_size: int = 500
    horizon: int = 60
    refit_every: int = 5
    lag_order: int = 1
    targets: list | None = None
    predictors: list | None = None
    models: list = field(default_factory=lambda: ["aashnet", "ridge", "lasso", "rw", "bh"])
    portfolio_size: int | None = None
    rule: str = "equal_weight_long_short"
    risk_free: float = 0.0


@dataclass
class GradcheckSection:
    trials: int = 50
    grad_tol: float = 1e-5
    hvp_tol: float = 1e-5
    hypergrad_tol: float = 1e-3
    hypergrad: bool = True
    example_tol: float = 0.005


@dataclass
class OutputSection:
    directory: str = "out"


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    topology: TopologySection = field(default_factory=TopologySection)
    hyper: HyperSection = field(default_factory=HyperSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    meta: MetaSection = field(default_factory=MetaSection)
    backtest: BacktestSection = field(default_factory=BacktestSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)
    output: OutputSection = field(default_factory=OutputSection)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        return _build(cls, doc, "")

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_json(fh.read())
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ValidationError(f"config section {where or '<root>'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        prefix = f"{where}." if where else ""
        raise ValidationError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kw = {}
    for name, value in doc.items():
        sub = _section_type(fields[name])
        kw[name] = _build(sub, value, f"{where}.{name}" if where else name) if sub else value
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ValidationError(str(exc)) from None


def _section_type(f):
    if f.default_factory is not dataclasses.MISSING:
        proto = f.default_factory()
        if dataclasses.is_dataclass(proto):
            return type(proto)
    return None
