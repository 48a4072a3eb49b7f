"""Simulated community: signature catalogue, hidden true weights and responses.

The default catalogue has ten signatures: three flexible-baseload windows,
PV, a battery, two heat-pump comfort bands and three EV driving patterns.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ExogenousDay, synth_baseload
from .learner import NoiseModel
from .signatures import (
    BatterySpec,
    ConstraintBlock,
    EvSpec,
    FlexBaseloadSpec,
    HeatPumpSpec,
    PvSpec,
    TimeGrid,
    build_battery,
    build_ev,
    build_flex_baseload,
    build_heatpump,
    build_pv,
    solve_signature_lp,
)

__all__ = [
    "SignatureDef",
    "Catalogue",
    "OwnershipModel",
    "TrueCommunity",
    "default_catalogue",
    "make_community",
    "day_blocks",
    "profile_matrix",
    "noise_free_response",
    "true_response",
    "flip_weights",
    "save_community",
    "load_community",
]

KINDS = ("baseload", "pv", "battery", "heatpump", "ev")


@dataclass(frozen=True)
class SignatureDef:
    name: str
    kind: str
    window: tuple[float, float] | None = None  # baseload flexible hours [start, stop)
    band: tuple[float, float] | None = None  # heat-pump comfort band (degC)
    absent: tuple[tuple[float, float], ...] = ()  # EV away hours, list of [start, stop)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"{self.name}: unknown signature kind {self.kind!r}")
        if self.kind == "baseload" and self.window is None:
            raise ValueError(f"{self.name}: baseload signature needs a flexible window")
        if self.kind == "heatpump" and self.band is None:
            raise ValueError(f"{self.name}: heat-pump signature needs a comfort band")


@dataclass(frozen=True)
class Catalogue:
    signatures: tuple[SignatureDef, ...]
    battery: BatterySpec = BatterySpec(charge_max=3.0, discharge_max=-3.0, energy_min=1.0, energy_max=10.0,
                                       energy_init=5.0)
    heatpump: HeatPumpSpec = HeatPumpSpec(cop=3.0, thermal_resistance=10.0, thermal_capacity=3.0, temp_init=20.0,
                                          temp_min=19.0, temp_max=21.0, power_max=3.0)
    ev: EvSpec = EvSpec(charge_max=6.0, discharge_max=-6.0, soc_min=5.0, soc_max=40.0, soc_init=20.0,
                        plugged_in=np.ones(24), drive_power=1.5)
    grid: TimeGrid = TimeGrid()

    def __post_init__(self):
        names = [s.name for s in self.signatures]
        if len(set(names)) != len(names):
            raise ValueError("signature names must be unique")

    @property
    def size(self) -> int:
        return len(self.signatures)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.signatures]

    @property
    def kinds(self) -> list[str]:
        return [s.kind for s in self.signatures]

    def indices(self, kind: str) -> list[int]:
        return [k for k, s in enumerate(self.signatures) if s.kind == kind]

    def hours(self) -> np.ndarray:
        return np.arange(self.grid.horizon) * self.grid.period_duration

    def _mask(self, intervals) -> np.ndarray:
        h = self.hours()
        m = np.zeros(len(h), dtype=bool)
        for a, b in intervals:
            m |= (h >= a) & (h < b)
        return m

    def subset(self, names: Sequence[str]) -> "Catalogue":
        lookup = {s.name: s for s in self.signatures}
        missing = [n for n in names if n not in lookup]
        if missing:
            raise KeyError(f"unknown signatures {missing}")
        return replace(self, signatures=tuple(lookup[n] for n in names))

    def build(self, sig: SignatureDef, day: ExogenousDay, baseload_row=None, tag: str = "") -> ConstraintBlock:
        grid = self.grid
        name = f"{tag}{sig.name}"
        if sig.kind == "baseload":
            L = np.asarray(baseload_row, dtype=float)
            window = tuple(int(t) for t in np.nonzero(self._mask([sig.window]))[0])
            spec = FlexBaseloadSpec(L, window, float(L.min()), float(L.max()))
            return build_flex_baseload(spec, grid, name)
        if sig.kind == "pv":
            return build_pv(PvSpec(day.pv_reference), grid, name)
        if sig.kind == "battery":
            return build_battery(self.battery, grid, name)
        if sig.kind == "heatpump":
            spec = replace(self.heatpump, temp_min=float(sig.band[0]), temp_max=float(sig.band[1]))
            return build_heatpump(spec, grid, day.outdoor_temp, day.outdoor_temp_peak, name)
        plugged = (~self._mask(sig.absent)).astype(float)
        return build_ev(replace(self.ev, plugged_in=plugged), grid, name)

    def to_dict(self) -> dict:
        def spec(s):
            d = dict(s.__dict__)
            return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in d.items()}

        return {
            "signatures": [
                {"name": s.name, "kind": s.kind, "window": s.window, "band": s.band,
                 "absent": [list(a) for a in s.absent]}
                for s in self.signatures
            ],
            "battery": spec(self.battery),
            "heatpump": spec(self.heatpump),
            "ev": {k: v for k, v in spec(self.ev).items() if k != "plugged_in"},
            "grid": {"horizon": self.grid.horizon, "period_duration": self.grid.period_duration},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Catalogue":
        grid = TimeGrid(**d.get("grid", {}))
        sigs = tuple(
            SignatureDef(
                s["name"], s["kind"],
                tuple(s["window"]) if s.get("window") is not None else None,
                tuple(s["band"]) if s.get("band") is not None else None,
                tuple(tuple(a) for a in s.get("absent", ())),
            )
            for s in d["signatures"]
        )
        base = cls(sigs, grid=grid)
        ev = replace(base.ev, plugged_in=np.ones(grid.horizon), **d.get("ev", {}))
        return cls(sigs, BatterySpec(**d["battery"]) if "battery" in d else base.battery,
                   HeatPumpSpec(**d["heatpump"]) if "heatpump" in d else base.heatpump, ev, grid)


def default_catalogue(grid: TimeGrid = TimeGrid()) -> Catalogue:
    sigs = (
        SignatureDef("baseload_06_10", "baseload", window=(6, 10)),
        SignatureDef("baseload_10_17", "baseload", window=(10, 17)),
        SignatureDef("baseload_17_22", "baseload", window=(17, 22)),
        SignatureDef("pv", "pv"),
        SignatureDef("battery", "battery"),
        SignatureDef("heatpump_19_21", "heatpump", band=(19, 21)),
        SignatureDef("heatpump_16_24", "heatpump", band=(16, 24)),
        SignatureDef("ev_commuter", "ev", absent=((8, 18),)),
        SignatureDef("ev_split_shift", "ev", absent=((6, 14), (19, 21))),
        SignatureDef("ev_short_trips", "ev", absent=((7, 9), (16, 19))),
    )
    return Catalogue(sigs, ev=EvSpec(6.0, -6.0, 5.0, 40.0, 20.0, np.ones(grid.horizon), 1.5), grid=grid)


@dataclass(frozen=True)
class OwnershipModel:
    """Distribution of true weights when drawing a community."""

    battery: float = 0.5
    heatpump: float = 0.7
    ev: float = 0.7
    pv_none: float = 0.25  # probability of no PV; otherwise uniform on [pv_min, pv_max] kW
    pv_min: float = 0.5
    pv_max: float = 3.0


@dataclass(eq=False)
class TrueCommunity:
    catalogue: Catalogue
    true_weights: np.ndarray  # (N, K)
    baseload: np.ndarray  # (N, T)
    noise: NoiseModel | Sequence[NoiseModel]
    _baseload_blocks: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.true_weights = np.asarray(self.true_weights, dtype=float)
        self.baseload = np.asarray(self.baseload, dtype=float)
        if self.true_weights.shape != (len(self.baseload), self.catalogue.size):
            raise ValueError("weights must be (prosumers, signatures)")
        if isinstance(self.noise, NoiseModel):
            self.noise = [self.noise] * self.n_prosumers
        self.noise = list(self.noise)

    @property
    def n_prosumers(self) -> int:
        return self.true_weights.shape[0]

    def check_invariants(self, tol: float = 1e-12) -> None:
        cat, W = self.catalogue, self.true_weights
        b = cat.indices("baseload")
        if b and not np.allclose(W[:, b].sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("baseload weights must sum to 1")
        if b and np.any(W[:, b] < -tol):
            raise ValueError("baseload weights must be nonnegative")
        for k in cat.indices("battery"):
            if not np.all(np.isin(W[:, k], (0.0, 1.0))):
                raise ValueError("battery weights must be 0 or 1")
        for kind in ("heatpump", "ev"):
            idx = cat.indices(kind)
            if idx:
                sub = W[:, idx]
                if not (np.all(np.isin(sub, (0.0, 1.0))) and np.all(sub.sum(axis=1) <= 1)):
                    raise ValueError(f"{kind} weights must be one-hot or all zero")
        for k in cat.indices("pv"):
            if np.any((W[:, k] < 0) | (W[:, k] > 3)):
                raise ValueError("PV weights must lie in [0, 3]")


def make_community(
    n_prosumers: int,
    seed: int,
    catalogue: Catalogue | None = None,
    baseload=None,
    ownership: OwnershipModel = OwnershipModel(),
    noise_fraction: float = 0.02,
) -> TrueCommunity:
    """Draw hidden weights satisfying the catalogue's structural rules.

    Noise std per prosumer defaults to ``noise_fraction`` of its peak baseload.
    """
    if n_prosumers < 1:
        raise ValueError("n_prosumers must be >= 1")
    catalogue = catalogue or default_catalogue()
    rng = np.random.default_rng([seed, 2])
    if baseload is None:
        baseload = synth_baseload(n_prosumers, seed, catalogue.grid.horizon)
    baseload = np.asarray(baseload, dtype=float)
    if baseload.shape != (n_prosumers, catalogue.grid.horizon):
        raise ValueError("baseload must be (prosumers, horizon)")
    W = np.zeros((n_prosumers, catalogue.size))
    b = catalogue.indices("baseload")
    for n in range(n_prosumers):
        if b:
            W[n, b] = rng.dirichlet(np.ones(len(b)))
        for k in catalogue.indices("pv"):
            W[n, k] = 0.0 if rng.random() < ownership.pv_none else rng.uniform(ownership.pv_min, ownership.pv_max)
        for k in catalogue.indices("battery"):
            W[n, k] = float(rng.random() < ownership.battery)
        for kind, p in (("heatpump", ownership.heatpump), ("ev", ownership.ev)):
            idx = catalogue.indices(kind)
            if idx and rng.random() < p:
                W[n, idx[rng.integers(len(idx))]] = 1.0
    noise = [NoiseModel(noise_fraction * float(baseload[n].max())) for n in range(n_prosumers)]
    community = TrueCommunity(catalogue, W, baseload, noise)
    community.check_invariants()
    return community


def day_blocks(catalogue: Catalogue, baseload, day: ExogenousDay, cache: dict | None = None) -> list[list[ConstraintBlock]]:
    """Constraint blocks of every (prosumer, signature) for one day.

    Non-baseload blocks are shared across prosumers; baseload blocks do not
    depend on the day and are memoised in ``cache`` when given.
    """
    baseload = np.asarray(baseload, dtype=float)
    shared = {}
    for sig in catalogue.signatures:
        if sig.kind != "baseload":
            shared[sig.name] = catalogue.build(sig, day)
    out = []
    for n, row in enumerate(baseload):
        blocks = []
        for sig in catalogue.signatures:
            if sig.kind == "baseload":
                key = (n, sig.name, row.tobytes())
                if cache is None or key not in cache:
                    blk = catalogue.build(sig, day, row, tag=f"p{n}_")
                    if cache is None:
                        blocks.append(blk)
                        continue
                    cache[key] = blk
                blocks.append(cache[key])
            else:
                blocks.append(shared[sig.name])
        out.append(blocks)
    return out


def _adoptable(block: ConstraintBlock, prices, state, objective: float, rtol: float, feas_tol: float) -> bool:
    state = np.asarray(state, dtype=float)
    if state.shape != (block.n_vars,) or not np.all(np.isfinite(state)):
        return False
    if len(block.b_eq) and np.any(np.abs(block.A_eq @ state - block.b_eq) > feas_tol * (1 + np.abs(block.b_eq))):
        return False
    if len(block.h) and np.any(block.G @ state - block.h > feas_tol * (1 + np.abs(block.h))):
        return False
    return float(np.dot(prices, state[block.link])) <= objective + rtol * max(1.0, abs(objective))


def profile_matrix(blocks: Sequence[ConstraintBlock], prices, recommended=None, lp=solve_signature_lp,
                   rtol: float = 1e-5, feas_tol: float = 1e-6) -> np.ndarray:
    """``T x K`` matrix whose columns are the signature optima at ``prices``.

    Each signature LP is solved at the posted prices.  When the price setter
    also announced a schedule for a signature (``recommended[k]``, a full
    variable vector of the block) and that schedule is feasible and optimal
    at these prices, it is adopted; otherwise the solver's optimum is used.
    This makes ties resolve the way an optimistic price setter anticipates.
    """
    prices = np.asarray(prices, dtype=float)
    cols = []
    for k, block in enumerate(blocks):
        sol = lp(block, prices)
        rec = None if recommended is None else recommended[k]
        if rec is not None and _adoptable(block, prices, rec, sol.objective, rtol, feas_tol):
            cols.append(np.asarray(rec, dtype=float)[block.link])
        else:
            cols.append(sol.profile)
    return np.column_stack(cols)


def noise_free_response(weights, blocks: Sequence[ConstraintBlock], prices, recommended=None,
                        lp=solve_signature_lp) -> np.ndarray:
    return profile_matrix(blocks, prices, recommended, lp) @ np.asarray(weights, dtype=float)


def true_response(prices, community: TrueCommunity, prosumer: int, blocks: Sequence[ConstraintBlock], rng,
                  recommended=None, lp=solve_signature_lp) -> np.ndarray:
    """Noisy net load of one prosumer under its posted prices."""
    prices = np.asarray(prices, dtype=float)
    if not np.all(np.isfinite(prices)):
        raise ValueError("prices must be finite")
    y = noise_free_response(community.true_weights[prosumer], blocks, prices, recommended, lp)
    rng = np.random.default_rng(rng)
    return y + rng.normal(0.0, community.noise[prosumer].response_noise_std, len(y))


def flip_weights(community: TrueCommunity, fraction: float, seed: int) -> tuple[TrueCommunity, list[int]]:
    """Change the heat-pump and EV usage patterns of a fraction of prosumers.

    Only prosumers owning a heat pump or an EV are eligible; each selected
    prosumer moves its one-hot weight to the next signature of the same kind.
    """
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    cat, W = community.catalogue, community.true_weights.copy()
    hp, ev = cat.indices("heatpump"), cat.indices("ev")
    eligible = [n for n in range(community.n_prosumers)
                if (len(hp) > 1 and W[n, hp].any()) or (len(ev) > 1 and W[n, ev].any())]
    count = min(len(eligible), int(round(fraction * community.n_prosumers)))
    rng = np.random.default_rng([seed, 3])
    chosen = sorted(int(n) for n in rng.choice(eligible, size=count, replace=False)) if count else []
    for n in chosen:
        for idx in (hp, ev):
            if len(idx) > 1 and W[n, idx].any():
                cur = int(np.argmax(W[n, idx]))
                W[n, idx] = 0.0
                W[n, idx[(cur + 1) % len(idx)]] = 1.0
    flipped = TrueCommunity(cat, W, community.baseload, community.noise)
    flipped.check_invariants()
    return flipped, chosen


def save_community(community: TrueCommunity, path) -> None:
    doc = {
        "catalogue": community.catalogue.to_dict(),
        "true_weights": community.true_weights.tolist(),
        "baseload": community.baseload.tolist(),
        "noise_std": [m.response_noise_std for m in community.noise],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_community(path) -> TrueCommunity:
    doc = json.loads(Path(path).read_text())
    return TrueCommunity(
        Catalogue.from_dict(doc["catalogue"]),
        np.array(doc["true_weights"]),
        np.array(doc["baseload"]),
        [NoiseModel(s) for s in doc["noise_std"]],
    )
