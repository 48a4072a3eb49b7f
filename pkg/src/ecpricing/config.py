"""Experiment configuration (YAML) with defaults for every free constant."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

__all__ = [
    "ConfigError",
    "EconomicsConfig",
    "PriorSettings",
    "ShiftSettings",
    "EventSettings",
    "DataSettings",
    "SolverSettings",
    "OwnershipSettings",
    "ExperimentConfig",
    "load_config",
    "config_from_dict",
    "config_to_dict",
    "config_hash",
]


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class EconomicsConfig:
    import_tariff: float = 0.5  # DKK/kWh on community imports
    export_tariff: float = 0.05  # DKK/kWh deducted from the spot price on exports
    outside_import_tariff: float = 1.0  # tariff paid by a prosumer outside the community
    violation_penalty: float = 6.0  # DKK/kWh above the capacity limit
    capacity_per_prosumer: float = 3.0  # kWh per hour, scaled by community size
    capacity_limit: float | None = None  # absolute limit; overrides the per-prosumer value
    price_cap: float = 10.0
    exchange_limit: float | None = None  # import/export bound; default 10x the capacity limit
    # price per DKK of revenue shortfall; null makes revenue adequacy a hard constraint
    revenue_deficit_penalty: float | None = 100.0


@dataclass
class PriorSettings:
    mean: float = 0.5
    std: float = 0.15
    pv_scale: float = 3.0
    # weights are nonnegative by construction; negative draws are set to zero before pricing
    clip_negative: bool = True


@dataclass
class ShiftSettings:
    enabled: bool = False
    tolerance: float = 0.3  # kWh RMS between predicted and observed profile
    window: int = 3


@dataclass
class EventSettings:
    day: int | None = None  # 1-based day on which weights flip
    fraction: float = 0.0
    seed: int = 0


@dataclass
class DataSettings:
    source: str = "synthetic"  # synthetic | files
    start: str = "2023-01-01"
    prices: str | None = None
    temperature: str | None = None
    pv: str | None = None
    baseload: str | None = None


@dataclass
class SolverSettings:
    backend: str = "highs"
    time_limit: float = 120.0
    mip_rel_gap: float = 1e-6
    mip_abs_gap: float = 1e-6
    seed: int = 0
    threads: int = 1
    solver_path: str | None = None
    bigm_dual: float = 1e4
    bigm_primal_default: float = 1e4
    max_doublings: int = 4
    max_resamples: int = 5
    # sampled-side problems not certified by the relaxation bound: branch (exact, time-limited)
    # or keep the best KKT-feasible incumbent (deterministic)
    branch_and_bound: bool = False


@dataclass
class OwnershipSettings:
    battery: float = 0.5
    heatpump: float = 0.7
    ev: float = 0.7
    pv_none: float = 0.25
    pv_min: float = 0.5
    pv_max: float = 3.0


@dataclass
class ExperimentConfig:
    name: str = "desk"
    prosumers: int = 5
    signatures: list[str] | None = None  # subset of the default catalogue, by name
    horizon: int = 24
    period_duration: float = 1.0
    days: int = 120
    runs: int = 5
    community_seed: int = 0
    data_seed: int = 0
    learner_seed: int = 0
    noise_fraction: float = 0.02  # noise std as a fraction of peak baseload
    snapshot_days: list[int] = field(default_factory=lambda: [1, 5, 25, 100])
    economics: EconomicsConfig = field(default_factory=EconomicsConfig)
    prior: PriorSettings = field(default_factory=PriorSettings)
    shift: ShiftSettings = field(default_factory=ShiftSettings)
    event: EventSettings = field(default_factory=EventSettings)
    data: DataSettings = field(default_factory=DataSettings)
    solver: SolverSettings = field(default_factory=SolverSettings)
    ownership: OwnershipSettings = field(default_factory=OwnershipSettings)
    output_dir: str = "results"
    plots: bool = True

    def validate(self, base_dir: Path | None = None) -> "ExperimentConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.runs >= 1, "runs must be >= 1")
        need(self.days >= 1, "days must be >= 1")
        need(self.prosumers >= 1, "prosumers must be >= 1")
        need(self.horizon >= 1 and self.period_duration > 0, "invalid time grid")
        need(self.noise_fraction >= 0, "noise_fraction must be >= 0")
        need(self.prior.std > 0 and self.prior.pv_scale > 0, "prior std and pv_scale must be > 0")
        e = self.economics
        need(e.price_cap > 0, "economics.price_cap must be > 0")
        need(e.import_tariff >= 0 and e.export_tariff >= 0, "tariffs must be >= 0")
        need(e.capacity_limit is None or e.capacity_limit > 0, "economics.capacity_limit must be > 0")
        need(e.capacity_per_prosumer > 0, "economics.capacity_per_prosumer must be > 0")
        need(e.revenue_deficit_penalty is None or e.revenue_deficit_penalty > 1,
             "economics.revenue_deficit_penalty must exceed 1 or be null")
        need(self.shift.window >= 1 and self.shift.tolerance > 0, "shift window/tolerance must be positive")
        need(0 <= self.event.fraction <= 1, "event.fraction must lie in [0, 1]")
        need(self.event.day is None or 1 <= self.event.day <= self.days, "event.day outside the horizon")
        need(self.data.source in ("synthetic", "files"), "data.source must be 'synthetic' or 'files'")
        need(self.solver.backend in ("highs", "highs-cli", "scipy"), f"unknown solver backend {self.solver.backend!r}")
        need(self.solver.time_limit > 0 and self.solver.bigm_dual > 0, "solver limits must be positive")
        if self.data.source == "files":
            for key in ("prices", "temperature", "pv", "baseload"):
                path = getattr(self.data, key)
                need(path is not None, f"data.{key} is required when data.source = files")
                p = Path(path)
                if not p.is_absolute() and base_dir is not None:
                    p = base_dir / p
                need(p.exists(), f"data.{key}: file {p} does not exist")
                setattr(self.data, key, str(p))
        return self

    def capacity(self) -> float:
        e = self.economics
        return float(e.capacity_limit) if e.capacity_limit is not None else e.capacity_per_prosumer * self.prosumers


def _build(cls, raw: Any, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in raw.items():
        sub = _NESTED.get((cls, key))
        kwargs[key] = _build(sub, value, f"{where}.{key}") if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


_NESTED = {
    (ExperimentConfig, "economics"): EconomicsConfig,
    (ExperimentConfig, "prior"): PriorSettings,
    (ExperimentConfig, "shift"): ShiftSettings,
    (ExperimentConfig, "event"): EventSettings,
    (ExperimentConfig, "data"): DataSettings,
    (ExperimentConfig, "solver"): SolverSettings,
    (ExperimentConfig, "ownership"): OwnershipSettings,
}

_NUMERIC = (int, float)


def _check_types(obj, where: str):
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            _check_types(v, f"{where}.{f.name}")
            continue
        default = f.default if f.default is not dataclasses.MISSING else None
        if isinstance(default, bool) and not isinstance(v, bool):
            raise ConfigError(f"{where}.{f.name}: expected true/false, got {v!r}")
        if isinstance(default, _NUMERIC) and not isinstance(default, bool):
            if isinstance(v, bool) or not isinstance(v, _NUMERIC):
                raise ConfigError(f"{where}.{f.name}: expected a number, got {v!r}")
            if isinstance(default, int) and not isinstance(v, int):
                raise ConfigError(f"{where}.{f.name}: expected an integer, got {v!r}")


def config_from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, raw or {}, "config")
    _check_types(cfg, "config")
    return cfg.validate(base_dir)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw or {}, path.parent)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON form of the configuration."""
    text = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()
