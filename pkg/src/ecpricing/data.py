"""Exogenous daily inputs: CSV ingestion, validation and synthetic series.

CSV schemas (one row per hour, ISO-8601 ``timestamp`` column first):

* prices      -- ``timestamp, price_dkk_per_kwh``
* temperature -- ``timestamp, temp_c``
* PV          -- ``timestamp, pv_kwh_per_kw`` (production of a 1 kW system)
* baseload    -- ``timestamp, <prosumer 0>, <prosumer 1>, ...`` covering a
  single day; the same profile is used on every day.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ExogenousDay",
    "DataError",
    "load_exogenous",
    "write_exogenous",
    "synth_exogenous",
    "synth_baseload",
]


class DataError(ValueError):
    """Malformed or inconsistent exogenous input."""


@dataclass(frozen=True, eq=False)
class ExogenousDay:
    date: dt.date
    spot_price: np.ndarray
    outdoor_temp: np.ndarray
    pv_reference: np.ndarray
    baseload: np.ndarray  # (prosumers, horizon)
    outdoor_temp_peak: float = field(default=math.nan)

    def __post_init__(self):
        for name in ("spot_price", "outdoor_temp", "pv_reference"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        base = np.array(self.baseload, dtype=float, ndmin=2)
        base.setflags(write=False)
        object.__setattr__(self, "baseload", base)
        T = len(self.spot_price)
        if T == 0:
            raise DataError(f"{self.date}: empty day")
        if len(self.outdoor_temp) != T or len(self.pv_reference) != T or base.shape[1] != T:
            raise DataError(f"{self.date}: all vectors must have length {T}")
        for name in ("spot_price", "outdoor_temp", "pv_reference"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"{self.date}: non-finite {name}")
        if np.any(self.spot_price < 0):
            raise DataError(f"{self.date}: negative spot price (clip before constructing)")
        if np.any(self.pv_reference < 0):
            raise DataError(f"{self.date}: negative PV production")
        if math.isnan(self.outdoor_temp_peak):
            object.__setattr__(self, "outdoor_temp_peak", float(np.max(self.outdoor_temp)))

    @property
    def horizon(self) -> int:
        return len(self.spot_price)

    @property
    def n_prosumers(self) -> int:
        return self.baseload.shape[0]


# -- CSV ingestion ---------------------------------------------------------

def _parse_time(text: str, where: str) -> dt.datetime:
    try:
        return dt.datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    except ValueError:
        raise DataError(f"{where}: invalid ISO-8601 timestamp {text!r}") from None


def _read_table(path, columns: list[str] | None) -> tuple[list[str], list[dt.datetime], np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if not header or header[0] != "timestamp":
            raise DataError(f"{path}: first column must be 'timestamp', got {header[:1]}")
        if columns is not None and header[1:] != columns:
            raise DataError(f"{path}: expected columns {['timestamp'] + columns}, got {header}")
        if len(header) < 2:
            raise DataError(f"{path}: no data columns")
        stamps, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            stamps.append(_parse_time(row[0], f"{path}:{lineno}"))
            vals = []
            for col, cell in zip(header[1:], row[1:]):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: column {col!r} is not numeric: {cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}:{lineno}: column {col!r} is not finite")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return header[1:], stamps, np.array(rows)


def _split_days(path, stamps, values, horizon: int) -> "OrderedDict[dt.date, np.ndarray]":
    """Group hourly rows into complete days; every day must have hours 0..horizon-1."""
    for i in range(1, len(stamps)):
        if stamps[i] - stamps[i - 1] != dt.timedelta(hours=1) and stamps[i].date() == stamps[i - 1].date():
            raise DataError(f"{path}: row {i + 2}: timestamp {stamps[i].isoformat()} does not follow "
                            f"{stamps[i - 1].isoformat()} by one hour")
    days: "OrderedDict[dt.date, list]" = OrderedDict()
    for i, (s, v) in enumerate(zip(stamps, values)):
        days.setdefault(s.date(), []).append((s, v, i + 2))
    out: "OrderedDict[dt.date, np.ndarray]" = OrderedDict()
    previous = None
    for day, entries in days.items():
        if previous is not None and day <= previous:
            raise DataError(f"{path}: day {day} appears out of order")
        previous = day
        hours = [s.hour for s, _, _ in entries]
        if hours != list(range(horizon)):
            missing = sorted(set(range(horizon)) - set(hours))
            raise DataError(f"{path}: day {day} has {len(hours)} hourly rows (expected {horizon}); "
                            f"missing hours {missing}, starting at row {entries[0][2]}")
        out[day] = np.array([v for _, v, _ in entries])
    return out


def load_exogenous(price_path, temp_path, pv_path, baseload_path, horizon: int = 24) -> list[ExogenousDay]:
    """Load, validate and align the four exogenous CSV files.

    Negative prices are clipped to zero.  Missing hours, short (DST) days and
    dates that do not line up across files are rejected; nothing is imputed.
    """
    series = {}
    for key, path, col in (("price", price_path, "price_dkk_per_kwh"),
                           ("temp", temp_path, "temp_c"),
                           ("pv", pv_path, "pv_kwh_per_kw")):
        _, stamps, vals = _read_table(path, [col])
        series[key] = _split_days(path, stamps, vals[:, 0], horizon)
    dates = list(series["price"])
    for key in ("temp", "pv"):
        if list(series[key]) != dates:
            extra = sorted(set(series[key]) ^ set(dates))
            raise DataError(f"{key} file is not aligned with the price file; differing dates {extra[:5]}")
    _, bstamps, bvals = _read_table(baseload_path, None)
    bdays = _split_days(baseload_path, bstamps, bvals, horizon)
    if len(bdays) != 1:
        raise DataError(f"{baseload_path}: baseload must cover exactly one day, found {len(bdays)}")
    baseload = next(iter(bdays.values())).T
    if np.any(baseload < 0):
        raise DataError(f"{baseload_path}: negative baseload")
    return [
        ExogenousDay(
            date=d,
            spot_price=np.maximum(series["price"][d], 0.0),
            outdoor_temp=series["temp"][d],
            pv_reference=series["pv"][d],
            baseload=baseload,
        )
        for d in dates
    ]


def write_exogenous(days: list[ExogenousDay], directory, prosumer_names: list[str] | None = None) -> dict[str, Path]:
    """Write days to the four CSV schemas (full float precision); returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {k: directory / f"{k}.csv" for k in ("prices", "temperature", "pv", "baseload")}
    cols = {"prices": ("price_dkk_per_kwh", "spot_price"),
            "temperature": ("temp_c", "outdoor_temp"),
            "pv": ("pv_kwh_per_kw", "pv_reference")}
    for key, (col, attr) in cols.items():
        with paths[key].open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["timestamp", col])
            for day in days:
                for t, v in enumerate(getattr(day, attr)):
                    w.writerow([dt.datetime.combine(day.date, dt.time(t)).isoformat(), repr(float(v))])
    first = days[0]
    names = prosumer_names or [f"prosumer_{n}" for n in range(first.n_prosumers)]
    with paths["baseload"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp"] + names)
        for t in range(first.horizon):
            w.writerow([dt.datetime.combine(first.date, dt.time(t)).isoformat()]
                       + [repr(float(v)) for v in first.baseload[:, t]])
    return paths


# -- synthetic series ------------------------------------------------------

def synth_baseload(n_prosumers: int, seed: int, horizon: int = 24) -> np.ndarray:
    """Household load shapes (kWh per hour) with morning and evening peaks."""
    rng = np.random.default_rng([seed, 1])
    h = np.arange(horizon) * 24.0 / horizon
    out = np.empty((n_prosumers, horizon))
    for n in range(n_prosumers):
        morning = rng.uniform(6.5, 8.5)
        evening = rng.uniform(17.5, 20.0)
        shape = (0.25
                 + 0.45 * np.exp(-0.5 * ((h - morning) / 1.2) ** 2)
                 + 0.15 * np.exp(-0.5 * ((h - 13.0) / 3.0) ** 2)
                 + 0.75 * np.exp(-0.5 * ((h - evening) / 1.8) ** 2))
        noise = rng.uniform(0.9, 1.1, horizon)
        out[n] = np.round(rng.uniform(0.8, 1.3) * shape * noise, 4)
    return out


def synth_exogenous(
    days: int,
    seed: int,
    n_prosumers: int = 5,
    horizon: int = 24,
    start: dt.date = dt.date(2023, 1, 1),
) -> list[ExogenousDay]:
    """Seasonal price, temperature and PV series plus a constant baseload.

    Ranges follow a Danish year: spot prices roughly 0-4 DKK/kWh with morning
    and evening peaks and a winter premium, outdoor temperature -5..25 degC,
    and PV yield up to ~0.8 kWh per kW in summer middays.  Daily mean
    temperatures are capped at 17 degC so that a heat pump without cooling can
    always return to its initial indoor temperature.
    """
    if days < 1:
        raise ValueError("days must be >= 1")
    rng = np.random.default_rng([seed, 0])
    baseload = synth_baseload(n_prosumers, seed, horizon)
    h = np.arange(horizon) * 24.0 / horizon
    out = []
    for d in range(days):
        date = start + dt.timedelta(days=d)
        doy = date.timetuple().tm_yday
        season = math.cos(2 * math.pi * (doy - 15) / 365.0)  # +1 mid-January, -1 mid-July
        # prices
        level = 1.1 + 0.4 * season + rng.normal(0.0, 0.25)
        shape = (1.0 + 0.35 * np.exp(-0.5 * ((h - 8.0) / 1.5) ** 2)
                 + 0.55 * np.exp(-0.5 * ((h - 18.5) / 2.0) ** 2)
                 - 0.25 * np.exp(-0.5 * ((h - 3.0) / 2.5) ** 2))
        price = np.clip(level * shape + rng.normal(0.0, 0.08, horizon), 0.0, 4.0)
        # temperature
        mean = min(9.0 - 8.0 * season + rng.normal(0.0, 2.0), 17.0)
        swing = 2.0 + 1.5 * (1 - season) / 2 + rng.uniform(-0.5, 0.5)
        temp = mean + swing * np.cos(2 * math.pi * (h - 15.0) / 24.0) + rng.normal(0.0, 0.3, horizon)
        # PV
        daylight = 12.0 - 4.5 * season
        sunrise, sunset = 12.5 - daylight / 2, 12.5 + daylight / 2
        x = np.clip((h + 0.5 - sunrise) / (sunset - sunrise), 0.0, 1.0)
        clear = np.sin(math.pi * x) ** 1.5 * (0.8 - 0.5 * (1 + season) / 2)
        cloud = rng.uniform(0.25, 1.0)
        pv = np.round(clear * cloud * rng.uniform(0.9, 1.0, horizon), 6)
        out.append(ExogenousDay(date, np.round(price, 6), np.round(temp, 3), pv, baseload))
    return out
