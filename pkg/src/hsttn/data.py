"""Wind-farm record ingestion, validity masking, normalization, windowing,
and a deterministic synthetic farm generator for desk-scale runs.

Records live on a dense (turbine, timestamp, channel) grid. Timestamps
are 10-minute slots by default (configurable per schema); any hole in the
grid or missing field marks the whole (turbine, timestamp) cell invalid.
Invalid cells never influence statistics, losses, or metrics.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import RngStream
from .errors import ConfigError, DatasetError, IngestError
from .kv import read_kv, write_kv

MINUTES_PER_DAY = 24 * 60

# SCADA-style channel names used by the bundled default schema (13 channels,
# target last) and by the synthetic generator.
DEFAULT_CHANNELS = (
    "Wspd", "Wdir", "Etmp", "Itmp", "Ndir", "Pab1", "Pab2", "Pab3",
    "Prtv", "Rspd", "Gspd", "Tnac", "Patv",
)


@dataclass(frozen=True)
class Schema:
    """Column roles for one farm's record files."""

    channels: tuple[str, ...]
    target: str = "Patv"
    id_column: str = "TurbID"
    day_column: str = "Day"
    time_column: str = "Tmstamp"
    step_minutes: int = 10
    wind_speed: Optional[str] = "Wspd"
    wind_direction: Optional[str] = "Wdir"
    nacelle_direction: Optional[str] = "Ndir"

    def __post_init__(self):
        if self.target not in self.channels:
            raise ConfigError(f"target {self.target!r} is not one of the channels")
        for role in ("wind_speed", "wind_direction", "nacelle_direction"):
            name = getattr(self, role)
            if name is not None and name not in self.channels:
                raise ConfigError(f"{role} column {name!r} is not one of the channels")
        if self.step_minutes < 1 or MINUTES_PER_DAY % self.step_minutes != 0:
            raise ConfigError(f"step_minutes must divide a day, got {self.step_minutes}")

    @property
    def target_index(self) -> int:
        return self.channels.index(self.target)

    @property
    def slots_per_day(self) -> int:
        return MINUTES_PER_DAY // self.step_minutes

    def channel_index(self, name: str) -> int:
        if name not in self.channels:
            raise ConfigError(f"unknown channel {name!r}")
        return self.channels.index(name)

    @classmethod
    def default(cls) -> "Schema":
        return cls(channels=DEFAULT_CHANNELS)

    @classmethod
    def load(cls, path) -> "Schema":
        kv = read_kv(path)
        try:
            channels = tuple(c.strip() for c in kv["channels"].split(",") if c.strip())
        except KeyError:
            raise ConfigError(f"{path}: schema file must declare 'channels'") from None

        def opt(key):
            value = kv.get(key, "")
            return value if value and value.lower() != "none" else None

        return cls(
            channels=channels,
            target=kv.get("target", "Patv"),
            id_column=kv.get("id_column", "TurbID"),
            day_column=kv.get("day_column", "Day"),
            time_column=kv.get("time_column", "Tmstamp"),
            step_minutes=int(kv.get("step_minutes", "10")),
            wind_speed=opt("wind_speed"),
            wind_direction=opt("wind_direction"),
            nacelle_direction=opt("nacelle_direction"),
        )

    def save(self, path) -> None:
        write_kv(path, self.to_dict(), header="farm record schema")

    def to_dict(self) -> dict[str, str]:
        return {
            "id_column": self.id_column,
            "day_column": self.day_column,
            "time_column": self.time_column,
            "step_minutes": str(self.step_minutes),
            "channels": ",".join(self.channels),
            "target": self.target,
            "wind_speed": self.wind_speed or "none",
            "wind_direction": self.wind_direction or "none",
            "nacelle_direction": self.nacelle_direction or "none",
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        def opt(key):
            value = d.get(key)
            return value if value and str(value).lower() != "none" else None

        return cls(
            channels=tuple(d["channels"].split(",")) if isinstance(d["channels"], str)
            else tuple(d["channels"]),
            target=d.get("target", "Patv"),
            id_column=d.get("id_column", "TurbID"),
            day_column=d.get("day_column", "Day"),
            time_column=d.get("time_column", "Tmstamp"),
            step_minutes=int(d.get("step_minutes", 10)),
            wind_speed=opt("wind_speed"),
            wind_direction=opt("wind_direction"),
            nacelle_direction=opt("nacelle_direction"),
        )


@dataclass
class RecordSet:
    """Dense (N, T, C) value grid plus a per-(turbine, timestamp) validity
    mask. Treat instances as immutable once constructed."""

    schema: Schema
    values: np.ndarray
    validity: np.ndarray
    turbine_ids: tuple[int, ...]

    def __post_init__(self):
        n, t, c = self.values.shape
        if self.validity.shape != (n, t):
            raise IngestError(
                f"validity mask shape {self.validity.shape} does not match values "
                f"{self.values.shape}"
            )
        if c != len(self.schema.channels):
            raise IngestError(
                f"value grid has {c} channels but schema declares {len(self.schema.channels)}"
            )

    @property
    def n_turbines(self) -> int:
        return self.values.shape[0]

    @property
    def n_timestamps(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]

    @property
    def target_index(self) -> int:
        return self.schema.target_index


def _parse_time(text: str, step_minutes: int, path, lineno: int) -> int:
    parts = text.strip().split(":")
    if len(parts) < 2:
        raise IngestError(f"{path}:{lineno}: cannot parse time of day {text!r}")
    try:
        minutes = int(parts[0]) * 60 + int(parts[1])
    except ValueError:
        raise IngestError(f"{path}:{lineno}: cannot parse time of day {text!r}") from None
    if minutes % step_minutes != 0:
        raise IngestError(
            f"{path}:{lineno}: time {text!r} is not aligned to {step_minutes}-minute slots"
        )
    return minutes // step_minutes


def load_records(path, schema: Schema) -> RecordSet:
    """Read a comma-separated record file onto the dense grid.

    The header must contain exactly the schema's id/day/time columns plus
    its channels. Missing (turbine, timestamp) rows and missing fields
    become invalid cells; duplicates and unparseable numbers are errors.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        expected = [schema.id_column, schema.day_column, schema.time_column,
                    *schema.channels]
        unknown = [h for h in header if h not in expected]
        if unknown:
            raise IngestError(f"{path}: unknown column(s) {unknown} not in schema")
        missing = [h for h in expected if h not in header]
        if missing:
            raise IngestError(f"{path}: schema column(s) {missing} absent from header")
        col = {name: header.index(name) for name in expected}

        rows = []
        for lineno, cells in enumerate(reader, start=2):
            if not cells or all(not c.strip() for c in cells):
                continue
            try:
                turb = int(cells[col[schema.id_column]])
                day = int(cells[col[schema.day_column]])
                stamp = cells[col[schema.time_column]]
            except (ValueError, IndexError):
                raise IngestError(
                    f"{path}:{lineno}: cannot parse turbine id, day, or time"
                ) from None
            slot = _parse_time(stamp, schema.step_minutes, path, lineno)
            channel_values = np.full(len(schema.channels), np.nan)
            valid = True
            for ci, name in enumerate(schema.channels):
                raw = cells[col[name]].strip() if col[name] < len(cells) else ""
                if raw == "":
                    valid = False
                    continue
                try:
                    parsed = float(raw)
                except ValueError:
                    raise IngestError(
                        f"{path}:{lineno}: cannot parse numeric value {raw!r} "
                        f"for channel {name!r}"
                    ) from None
                if not np.isfinite(parsed):
                    valid = False
                channel_values[ci] = parsed
            rows.append((turb, day, slot, channel_values, valid, lineno))

    if not rows:
        raise IngestError(f"{path}: no data rows")

    turbine_ids = tuple(sorted({r[0] for r in rows}))
    turb_index = {tid: i for i, tid in enumerate(turbine_ids)}
    spd = schema.slots_per_day
    abs_slots = [r[1] * spd + r[2] for r in rows]
    t0, t1 = min(abs_slots), max(abs_slots)
    n_t = t1 - t0 + 1
    n = len(turbine_ids)
    c = len(schema.channels)

    values = np.full((n, n_t, c), np.nan)
    validity = np.zeros((n, n_t), dtype=bool)
    seen = np.zeros((n, n_t), dtype=bool)
    for (turb, _day, _slot, channel_values, valid, lineno), t_abs in zip(rows, abs_slots):
        ni, ti = turb_index[turb], t_abs - t0
        if seen[ni, ti]:
            raise IngestError(
                f"{path}:{lineno}: duplicate record for turbine {turb} at timestamp {ti}"
            )
        seen[ni, ti] = True
        values[ni, ti] = channel_values
        validity[ni, ti] = valid
    return RecordSet(schema=schema, values=values, validity=validity,
                     turbine_ids=turbine_ids)


@dataclass(frozen=True)
class InvalidRule:
    """Named predicate over the channel grid; True marks a cell invalid."""

    name: str
    channels: tuple[str, ...]
    predicate: Callable[..., np.ndarray]

    def apply(self, rs: RecordSet) -> np.ndarray:
        columns = [rs.values[:, :, rs.schema.channel_index(c)] for c in self.channels]
        with np.errstate(invalid="ignore"):
            flagged = self.predicate(*columns)
        # NaN comparisons are False; missing fields are already invalid
        return np.nan_to_num(flagged, nan=0).astype(bool)


def default_invalid_rules(schema: Schema) -> list[InvalidRule]:
    """Recording-system sanity rules: negative output, zero output in
    usable wind, and off-range direction readings."""
    rules = [InvalidRule("negative_target", (schema.target,), lambda p: p < 0)]
    if schema.wind_speed is not None:
        rules.append(InvalidRule(
            "zero_target_in_wind", (schema.target, schema.wind_speed),
            lambda p, w: (p <= 0) & (w > 2.5)))
    if schema.wind_direction is not None:
        rules.append(InvalidRule(
            "wind_direction_range", (schema.wind_direction,),
            lambda d: np.abs(d) > 180.0))
    if schema.nacelle_direction is not None:
        rules.append(InvalidRule(
            "nacelle_direction_range", (schema.nacelle_direction,),
            lambda d: np.abs(d) > 720.0))
    return rules


def mark_invalid(rs: RecordSet, rules: Sequence[InvalidRule]) -> RecordSet:
    mask = rs.validity.copy()
    for rule in rules:
        mask &= ~rule.apply(rs)
    return replace(rs, validity=mask)


@dataclass(frozen=True)
class NormStats:
    """Per-channel standardization statistics fit on the training range."""

    mean: np.ndarray
    std: np.ndarray

    STD_FLOOR = 1e-8

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def invert(self, values: np.ndarray, channel: int | None = None) -> np.ndarray:
        if channel is None:
            return values * self.std + self.mean
        return values * self.std[channel] + self.mean[channel]


def fit_zscore(rs: RecordSet, fit_range: tuple[int, int]) -> NormStats:
    """Mean/std over valid cells of `[start, end)`; constant channels get
    unit std so they normalize to zero instead of exploding."""
    start, end = fit_range
    if not 0 <= start < end <= rs.n_timestamps:
        raise DatasetError(f"fit range [{start}, {end}) is outside the dataset")
    window = rs.values[:, start:end, :]
    valid = rs.validity[:, start:end]
    mean = np.empty(rs.n_channels)
    std = np.empty(rs.n_channels)
    for c in range(rs.n_channels):
        cells = window[:, :, c][valid]
        cells = cells[np.isfinite(cells)]
        if cells.size == 0:
            raise DatasetError(
                f"channel {rs.schema.channels[c]!r} has no valid cells in the fit range"
            )
        mean[c] = cells.mean()
        s = cells.std()
        std[c] = s if s >= NormStats.STD_FLOOR else 1.0
    return NormStats(mean=mean, std=std)


def apply_zscore(rs: RecordSet, stats: NormStats) -> RecordSet:
    """Standardize every channel; invalid cells are stored as zero so no
    downstream consumer can accidentally read recording noise."""
    normalized = stats.apply(rs.values)
    normalized[~rs.validity] = 0.0
    normalized[~np.isfinite(normalized)] = 0.0
    return replace(rs, values=normalized)


def invert_zscore(values: np.ndarray, stats: NormStats, channel: int | None = None
                  ) -> np.ndarray:
    return stats.invert(values, channel)


@dataclass(frozen=True)
class SampleWindow:
    """One training/evaluation sample: H history steps and the F future
    target steps that start exactly where the history ends. `origin` is
    the timestamp index of the first forecast step."""

    history: np.ndarray
    future_target: np.ndarray
    future_validity: np.ndarray
    origin: int


def make_windows(rs: RecordSet, history_len: int, horizon_len: int, stride: int,
                 start: int = 0, end: int | None = None) -> list[SampleWindow]:
    """Slide a (H + F)-long window over `[start, end)` with the given
    stride. Yields floor((T - H - F) / stride) + 1 windows; the i-th
    window starts at `start + i * stride`."""
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}")
    end = rs.n_timestamps if end is None else end
    if not 0 <= start <= end <= rs.n_timestamps:
        raise DatasetError(f"window range [{start}, {end}) is outside the dataset")
    span = history_len + horizon_len
    total = end - start
    if total < span:
        raise DatasetError(
            f"range of {total} timestamps cannot fit one window of {span} "
            f"(history {history_len} + horizon {horizon_len})"
        )
    count = (total - span) // stride + 1
    target = rs.target_index
    windows = []
    for i in range(count):
        a = start + i * stride
        windows.append(SampleWindow(
            history=rs.values[:, a:a + history_len, :],
            future_target=rs.values[:, a + history_len:a + span, target:target + 1],
            future_validity=rs.validity[:, a + history_len:a + span],
            origin=a + history_len,
        ))
    return windows


def drop_fully_invalid(windows: Sequence[SampleWindow]) -> list[SampleWindow]:
    """Training-side filter: a window with no valid future cell cannot
    contribute to the loss."""
    return [w for w in windows if w.future_validity.any()]


@dataclass(frozen=True)
class SplitBounds:
    """Chronological split boundaries: train is [0, train_end), validation
    [train_end, val_end), test [val_end, T)."""

    train_end: int
    val_end: int

    def ranges(self, n_timestamps: int) -> dict[str, tuple[int, int]]:
        if not 0 < self.train_end < self.val_end < n_timestamps:
            raise ConfigError(
                f"split bounds train_end={self.train_end}, val_end={self.val_end} do not "
                f"chop [0, {n_timestamps}) into three non-empty chronological pieces"
            )
        return {
            "train": (0, self.train_end),
            "val": (self.train_end, self.val_end),
            "test": (self.val_end, n_timestamps),
        }


def _power_curve(wind: np.ndarray, rated_speed: float = 12.0,
                 rated_power: float = 1500.0) -> np.ndarray:
    """Saturating cubic power curve in kW."""
    w = np.clip(wind, 0.0, None) / rated_speed
    return rated_power * np.minimum(w ** 3, 1.0)


def synth_generate(n_turbines: int, n_timestamps: int, n_channels: int, seed: int,
                   noise_scale: float = 0.1) -> RecordSet:
    """Deterministic synthetic farm: each turbine sees a phase-shifted
    diurnal wind-speed sinusoid plus spatially correlated noise; the
    target is a saturating cubic power curve of that wind speed. The
    validity mask is all-true. `noise_scale=0` gives an exactly
    reproducible noise-free farm."""
    if n_turbines < 1 or n_timestamps < 1 or n_channels < 2:
        raise ConfigError(
            "synthetic farm needs at least 1 turbine, 1 timestamp, and 2 channels "
            f"(got {n_turbines}, {n_timestamps}, {n_channels})"
        )
    rng = RngStream(seed)
    schema = _synth_schema(n_channels)
    spd = schema.slots_per_day

    t = np.arange(n_timestamps, dtype=np.float64)
    phase = 2.0 * np.pi * np.arange(n_turbines, dtype=np.float64) / max(n_turbines, 1)
    diurnal = 2.0 * np.pi * t / spd
    base_wind = 7.0 + 3.0 * np.sin(diurnal[None, :] + phase[:, None])

    shared = rng.normal((n_timestamps,))
    own = rng.normal((n_turbines, n_timestamps))
    wind = base_wind + noise_scale * (0.7 * shared[None, :] + 0.3 * own)

    values = np.zeros((n_turbines, n_timestamps, n_channels))
    values[:, :, 0] = wind
    aux_noise = rng.normal((n_turbines, n_timestamps, max(n_channels - 2, 1)))
    for ci in range(1, n_channels - 1):
        # deterministic seasonal shapes with channel-specific periods
        wave = np.sin(2.0 * np.pi * t[None, :] / (spd * (ci + 1)) + phase[:, None] * ci)
        values[:, :, ci] = 10.0 * ci * wave + noise_scale * aux_noise[:, :, ci - 1]
    target_noise = rng.normal((n_turbines, n_timestamps))
    values[:, :, -1] = _power_curve(wind) + noise_scale * 50.0 * target_noise

    validity = np.ones((n_turbines, n_timestamps), dtype=bool)
    return RecordSet(schema=schema, values=values, validity=validity,
                     turbine_ids=tuple(range(1, n_turbines + 1)))


def _synth_schema(n_channels: int) -> Schema:
    if n_channels <= len(DEFAULT_CHANNELS):
        channels = DEFAULT_CHANNELS[:n_channels - 1] + ("Patv",)
    else:
        extras = tuple(f"Aux{i}" for i in range(n_channels - len(DEFAULT_CHANNELS)))
        channels = DEFAULT_CHANNELS[:-1] + extras + ("Patv",)
    present = set(channels)
    return Schema(
        channels=channels,
        wind_speed="Wspd" if "Wspd" in present else None,
        wind_direction="Wdir" if "Wdir" in present else None,
        nacelle_direction="Ndir" if "Ndir" in present else None,
    )


def write_csv(rs: RecordSet, path) -> None:
    """Write the grid back out in the loader's format. Floats use repr, so
    a load/write round trip is lossless and byte-deterministic."""
    schema = rs.schema
    spd = schema.slots_per_day
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([schema.id_column, schema.day_column, schema.time_column,
                         *schema.channels])
        for ni, tid in enumerate(rs.turbine_ids):
            for ti in range(rs.n_timestamps):
                day = 1 + ti // spd
                slot = ti % spd
                minutes = slot * schema.step_minutes
                stamp = f"{minutes // 60:02d}:{minutes % 60:02d}"
                row = [str(tid), str(day), stamp]
                cells = rs.values[ni, ti]
                if rs.validity[ni, ti]:
                    row.extend(repr(float(v)) for v in cells)
                else:
                    row.extend("" if not np.isfinite(v) else repr(float(v)) for v in cells)
                writer.writerow(row)
