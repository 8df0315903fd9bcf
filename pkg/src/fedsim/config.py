"""Experiment configuration: typed sections, strict TOML loading, shipped presets.

Unknown keys are errors, every field has a documented default, and each
section validates its own ranges.
"""

from __future__ import annotations

import dataclasses
import sys
import types
import typing
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

from .errors import ParseError, UnknownKey, ValidationError
from .learner import AGGREGATORS
from .predictor import PredictorSpec
from .scheduler import SchedulerConfig
from .selection import POLICY_KINDS, SelectionPolicy
from .trace import TRACE_FORMATS

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

PRESETS = ("headline", "motivating", "ablation", "window-sweep")


@dataclass(frozen=True)
class PopulationConfig:
    n_clients: int = 200
    dim: int = 64
    n_classes: int = 10
    dirichlet_alpha: float = 0.1
    samples_per_client: tuple[int, int] = (40, 150)
    center_scale: float = 0.4
    test_size: int = 2000
    compute_latency: tuple[float, float] = (1e-4, 1e-3)
    pull_bytes: float = 5e6
    push_bytes: float = 5e6

    def __post_init__(self):
        for name in ("n_clients", "dim", "n_classes", "test_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.dirichlet_alpha > 0:
            raise ValueError("dirichlet_alpha must be > 0")
        lo, hi = self.samples_per_client
        if not 1 <= lo <= hi:
            raise ValueError("samples_per_client must be [lo, hi] with 1 <= lo <= hi")
        lo, hi = self.compute_latency
        if not 0 < lo <= hi:
            raise ValueError("compute_latency must be [lo, hi] with 0 < lo <= hi")
        if not (self.pull_bytes > 0 and self.push_bytes > 0):
            raise ValueError("update sizes must be positive")


@dataclass(frozen=True)
class TraceConfig:
    """Where client bandwidth comes from.

    ``source = "synthetic"`` generates one mobile-link surrogate per trace
    (mean throughput log-uniform over ``bandwidth_range``); any other value
    is a directory of trace files in ``format``. ``mode = "static"`` flattens
    every trace to its time-averaged throughput.
    """

    source: str = "synthetic"
    format: str = "canonical"
    mode: str = "dynamic"
    n_traces: int | None = None
    bandwidth_range: tuple[float, float] = (0.5e6, 10e6)
    duration_s: int = 1800
    corr_time: float = 30.0
    log_sd: float = 0.6
    outage_rate: float = 0.01
    outage_mean_s: float = 40.0
    outage_depth: float = 0.05
    stall_timeout: float = 3600.0

    def __post_init__(self):
        if self.format not in TRACE_FORMATS:
            raise ValueError(f"format must be one of {TRACE_FORMATS}")
        if self.mode not in ("dynamic", "static"):
            raise ValueError("mode must be 'dynamic' or 'static'")
        lo, hi = self.bandwidth_range
        if not 0 < lo <= hi:
            raise ValueError("bandwidth_range must be [lo, hi] with 0 < lo <= hi")
        if self.n_traces is not None and self.n_traces < 1:
            raise ValueError("n_traces must be >= 1")
        if self.duration_s < 1 or self.log_sd < 0 or self.outage_rate < 0:
            raise ValueError("duration_s, log_sd and outage_rate must be non-negative")
        if not 0 <= self.outage_depth <= 1:
            raise ValueError("outage_depth must lie in [0, 1]")
        if not self.stall_timeout > 0:
            raise ValueError("stall_timeout must be positive")


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 20
    batch_size: int = 20
    lr: float = 0.01
    aggregator: str = "yogi"
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    server_lr: float = 0.01

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}")


@dataclass(frozen=True)
class PolicyConfig:
    """One selection policy cell.

    ``traces`` overrides the trace mode for this policy only, which is how
    the static-vs-dynamic comparison is expressed.
    """

    kind: str = "dynamicfl"
    name: str | None = None
    K: int = 20
    epsilon: float = 0.1
    penalty_exponent: float = 2.0
    preferred_duration: float | None = None
    preferred_duration_factor: float = 1.3
    traces: str | None = None
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"kind must be one of {POLICY_KINDS}")
        if self.name is None:
            object.__setattr__(self, "name", self.kind)
        if self.traces not in (None, "dynamic", "static"):
            raise ValueError("traces must be 'dynamic' or 'static'")
        if self.preferred_duration is not None and not self.preferred_duration > 0:
            raise ValueError("preferred_duration must be positive")
        if not self.preferred_duration_factor > 0:
            raise ValueError("preferred_duration_factor must be positive")
        self.selection_policy()  # range checks

    def selection_policy(self) -> SelectionPolicy:
        return SelectionPolicy(
            kind=self.kind,
            K=self.K,
            epsilon=self.epsilon,
            preferred_duration=self.preferred_duration,
            penalty_exponent=self.penalty_exponent,
        )


@dataclass(frozen=True)
class RunConfig:
    seeds: tuple[int, ...] = (0,)
    max_rounds: int = 1000
    max_hours: float | None = None
    target_accuracy: float = 0.6
    milestones: tuple[float, ...] | None = None
    eval_every: int = 10
    warmup_rounds: int = 5
    stop_at_target: bool = True
    baseline: str | None = None
    outdir: str = "fedsim-out"

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be >= 0")
        if self.max_hours is not None and not self.max_hours > 0:
            raise ValueError("max_hours must be positive")
        if not 0 < self.target_accuracy < 1:
            raise ValueError("target_accuracy must lie in (0, 1)")
        if self.milestones is not None and any(not 0 < m < 1 for m in self.milestones):
            raise ValueError("milestones must lie in (0, 1)")
        if self.eval_every < 1 or self.warmup_rounds < 0:
            raise ValueError("eval_every must be >= 1 and warmup_rounds >= 0")

    @property
    def milestone_list(self) -> tuple[float, ...]:
        ms = self.milestones if self.milestones is not None else (self.target_accuracy,)
        return tuple(sorted(set(ms) | {self.target_accuracy}))


@dataclass(frozen=True)
class ExperimentConfig:
    population: PopulationConfig = field(default_factory=PopulationConfig)
    traces: TraceConfig = field(default_factory=TraceConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    policies: tuple[PolicyConfig, ...] = ()
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        if not self.policies:
            raise ValueError("at least one policy is required")
        names: set[str] = set()
        fixed = []
        for p in self.policies:
            name = p.name
            k = 2
            while name in names:
                name = f"{p.name}-{k}"
                k += 1
            names.add(name)
            fixed.append(p if name == p.name else replace(p, name=name))
            if p.K > self.population.n_clients:
                raise ValueError(f"policy {name!r}: K={p.K} exceeds n_clients")
            if p.kind != "random" and p.preferred_duration is None and self.run.warmup_rounds < 1:
                raise ValueError(f"policy {name!r} needs warmup_rounds >= 1 or a preferred_duration")
        object.__setattr__(self, "policies", tuple(fixed))
        if self.run.baseline is not None and self.run.baseline not in names:
            raise ValueError(f"baseline {self.run.baseline!r} is not a policy name")

    def policy(self, name: str) -> PolicyConfig:
        for p in self.policies:
            if p.name == name:
                return p
        raise KeyError(name)

    @property
    def baseline(self) -> str:
        return self.run.baseline or self.policies[0].name


# -- loading -----------------------------------------------------------------


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a TOML experiment file (or a shipped preset name) and validate it."""
    text, where = _read_source(path)
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(where, str(exc)) from None
    return config_from_dict(data)


def config_from_dict(data: dict[str, Any]) -> ExperimentConfig:
    data = dict(data)
    policies = data.get("policies", [])
    if not isinstance(policies, list):
        raise ValidationError("policies", "must be an array of tables")
    return _build(ExperimentConfig, data, "")


def _read_source(path: str | Path) -> tuple[str, str]:
    p = Path(path)
    if p.is_file():
        return p.read_text(encoding="utf-8"), str(p)
    name = str(path)
    if name in PRESETS:
        res = resources.files("fedsim.presets").joinpath(f"{name}.toml")
        return res.read_text(encoding="utf-8"), f"preset:{name}"
    raise ParseError(str(path), "no such config file or preset")


def _build(cls, data: Any, prefix: str):
    if not isinstance(data, dict):
        raise ValidationError(prefix or "<root>", f"expected a table, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    for key in data:
        if key not in known:
            raise UnknownKey(f"{prefix}{key}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _coerce(hints[key], value, f"{prefix}{key}")
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, (UnknownKey, ValidationError)):
            raise
        raise ValidationError(prefix.rstrip(".") or "<root>", str(exc)) from None


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where + ".")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ValidationError(where, "expected an array")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ValidationError(where, f"expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ValidationError(where, "expected true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(where, "expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(where, "expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ValidationError(where, "expected a string")
        return value
    raise ValidationError(where, f"unsupported field type {tp}")


def with_overrides(
    config: ExperimentConfig,
    seeds: list[int] | None = None,
    outdir: str | None = None,
    policies: list[str] | None = None,
) -> ExperimentConfig:
    """Apply command-line overrides (flag beats config beats default)."""
    run = config.run
    if seeds:
        run = replace(run, seeds=tuple(seeds))
    if outdir:
        run = replace(run, outdir=outdir)
    chosen = config.policies
    if policies:
        missing = [p for p in policies if p not in {q.name for q in config.policies}]
        if missing:
            raise ValidationError("policy", f"unknown policy names {missing}")
        chosen = tuple(p for p in config.policies if p.name in policies)
        if run.baseline is not None and run.baseline not in policies:
            run = replace(run, baseline=None)
    return replace(config, run=run, policies=chosen)


__all__ = [
    "ExperimentConfig",
    "PolicyConfig",
    "PopulationConfig",
    "PredictorSpec",
    "RunConfig",
    "SchedulerConfig",
    "TraceConfig",
    "TrainingConfig",
    "load_config",
    "config_from_dict",
    "with_overrides",
]
