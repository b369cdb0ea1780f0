"""Trip logs: cleaning, features, normalization, windows and a synthetic fleet.

The pipeline order is fixed::

    merge_trips -> filter_short -> build_features -> split -> normalize -> make_windows

:func:`prepare_dataset` runs the whole chain and is what training code uses.
"""

from __future__ import annotations

import bisect
import csv
import math
import warnings
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timezone
from itertools import groupby
from pathlib import Path
from typing import Iterable, Sequence
from zoneinfo import ZoneInfo

import numpy as np

from .nn import N_FEATURES

MERGE_GAP_S = 600.0
MIN_DISTANCE_KM = 3.0
DAY_S = 86400.0
DEFAULT_TZ = "Europe/Stockholm"
CSV_HEADER = ["vehicle_id", "start_time", "end_time", "distance_km"]


class DataError(ValueError):
    """Base class for data validation problems."""


class OrderingError(DataError):
    pass


class InsufficientHistoryError(DataError):
    pass


class DegenerateFeatureError(DataError):
    pass


class EmptyVehicleWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TripRecord:
    vehicle_id: str
    start_time: float
    end_time: float
    distance_km: float

    def __post_init__(self):
        if not (math.isfinite(self.start_time) and math.isfinite(self.end_time)):
            raise DataError("trip times must be finite")
        if self.end_time < self.start_time:
            raise DataError(f"trip of {self.vehicle_id} ends before it starts")
        if not self.distance_km >= 0:
            raise DataError(f"negative or missing distance for {self.vehicle_id}")


@dataclass
class FeatureSeries:
    """Per-trip features for one vehicle.

    Entry ``j`` describes trip ``j + 1`` of the cleaned log: the first trip
    only anchors the first time gap and does not appear.
    """

    vehicle_id: str
    start_time: np.ndarray
    delta_t: np.ndarray
    distance: np.ndarray
    weekday: np.ndarray

    def __post_init__(self):
        n = len(self.start_time)
        if not (len(self.delta_t) == len(self.distance) == len(self.weekday) == n):
            raise DataError("feature arrays have different lengths")

    def __len__(self) -> int:
        return len(self.start_time)


@dataclass
class SequenceSample:
    features: np.ndarray  # (L, 9)
    valid_len: int
    target: np.ndarray  # (2,) normalized (dt, distance)
    vehicle_id: str
    target_time: float
    target_index: int = -1


@dataclass(frozen=True)
class NormStats:
    dt_min: float
    dt_max: float
    d_min: float
    d_max: float

    def __post_init__(self):
        if not self.dt_max > self.dt_min:
            raise DegenerateFeatureError("time gap has max == min; cannot normalize")
        if not self.d_max > self.d_min:
            raise DegenerateFeatureError("distance has max == min; cannot normalize")

    @classmethod
    def fit(cls, delta_t: np.ndarray, distance: np.ndarray) -> "NormStats":
        delta_t, distance = np.asarray(delta_t, float), np.asarray(distance, float)
        if delta_t.size == 0 or distance.size == 0:
            raise DegenerateFeatureError("no training values to fit normalization")
        return cls(float(delta_t.min()), float(delta_t.max()), float(distance.min()), float(distance.max()))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{f.name: float(d[f.name]) for f in fields(cls)})

    @property
    def target_lo(self) -> np.ndarray:
        return np.array([self.dt_min, self.d_min])

    @property
    def target_span(self) -> np.ndarray:
        return np.array([self.dt_max - self.dt_min, self.d_max - self.d_min])


# ---------------------------------------------------------------------------
# Cleaning
# ---------------------------------------------------------------------------


def _by_vehicle(trips: Iterable[TripRecord]) -> dict[str, list[TripRecord]]:
    out: dict[str, list[TripRecord]] = {}
    for t in trips:
        out.setdefault(t.vehicle_id, []).append(t)
    return out


def merge_trips(trips: Sequence[TripRecord]) -> list[TripRecord]:
    """Fuse trips separated by at most 10 minutes.

    The gap is measured from the previous (merged) trip's end to the next
    start. A fused trip keeps the first start, the latest end and the summed
    distance. Input must be sorted by start time within each vehicle.
    """
    out = []
    for vid, group in _by_vehicle(trips).items():
        cur = None
        for t in group:
            if cur is not None and t.start_time < cur.start_time:
                raise OrderingError(f"trips of vehicle {vid} are not sorted by start_time")
            if cur is not None and t.start_time - cur.end_time <= MERGE_GAP_S:
                cur = TripRecord(
                    vid,
                    cur.start_time,
                    max(cur.end_time, t.end_time),
                    cur.distance_km + t.distance_km,
                )
                continue
            if cur is not None:
                out.append(cur)
            cur = t
        if cur is not None:
            out.append(cur)
    return out


def filter_short(trips: Sequence[TripRecord]) -> list[TripRecord]:
    """Drop trips shorter than 3 km (exactly 3 km is kept)."""
    return [t for t in trips if t.distance_km >= MIN_DISTANCE_KM]


def clean_trips(trips: Sequence[TripRecord]) -> list[TripRecord]:
    cleaned = filter_short(merge_trips(trips))
    kept = {t.vehicle_id for t in cleaned}
    for vid in _by_vehicle(trips):
        if vid not in kept:
            warnings.warn(f"vehicle {vid} has no trips left after cleaning", EmptyVehicleWarning, stacklevel=2)
    return cleaned


# ---------------------------------------------------------------------------
# Features and normalization
# ---------------------------------------------------------------------------


def weekday_of(epoch_s: float, tz: str = DEFAULT_TZ) -> int:
    """Local weekday, Monday = 0 ... Sunday = 6."""
    return datetime.fromtimestamp(epoch_s, ZoneInfo(tz)).weekday()


def build_features(trips: Sequence[TripRecord], tz: str = DEFAULT_TZ) -> FeatureSeries:
    """Time gaps between consecutive trip starts, distances and weekdays."""
    if len(trips) < 2:
        raise InsufficientHistoryError(f"need at least 2 trips, got {len(trips)}")
    vids = {t.vehicle_id for t in trips}
    if len(vids) != 1:
        raise DataError(f"build_features expects one vehicle, got {sorted(vids)}")
    starts = np.array([t.start_time for t in trips], dtype=np.float64)
    dt = np.diff(starts)
    if np.any(dt <= 0):
        j = int(np.argmax(dt <= 0)) + 1
        raise DataError(f"trip {j} of vehicle {trips[0].vehicle_id} does not start after trip {j - 1}")
    zone = ZoneInfo(tz)
    wd = np.array([datetime.fromtimestamp(s, zone).weekday() for s in starts[1:]], dtype=np.int64)
    dist = np.array([t.distance_km for t in trips[1:]], dtype=np.float64)
    return FeatureSeries(trips[0].vehicle_id, starts[1:], dt, dist, wd)


def normalize_values(x, lo: float, hi: float) -> np.ndarray:
    if not hi > lo:
        raise DegenerateFeatureError("max == min; cannot normalize")
    return (np.asarray(x, dtype=np.float64) - lo) / (hi - lo)


def denormalize_values(x, lo: float, hi: float) -> np.ndarray:
    if not hi > lo:
        raise DegenerateFeatureError("max == min; cannot denormalize")
    return np.asarray(x, dtype=np.float64) * (hi - lo) + lo


def normalize(series: FeatureSeries, stats: NormStats) -> FeatureSeries:
    """Max-min scale time gaps and distances. Values are not clipped."""
    return replace(
        series,
        delta_t=normalize_values(series.delta_t, stats.dt_min, stats.dt_max),
        distance=normalize_values(series.distance, stats.d_min, stats.d_max),
    )


def denormalize(series: FeatureSeries, stats: NormStats) -> FeatureSeries:
    return replace(
        series,
        delta_t=denormalize_values(series.delta_t, stats.dt_min, stats.dt_max),
        distance=denormalize_values(series.distance, stats.d_min, stats.d_max),
    )


def denormalize_targets(y: np.ndarray, stats: NormStats) -> np.ndarray:
    """``(N, 2)`` normalized (dt, distance) back to (seconds, km)."""
    y = np.asarray(y, dtype=np.float64)
    return y * stats.target_span + stats.target_lo


def normalize_targets(y: np.ndarray, stats: NormStats) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return (y - stats.target_lo) / stats.target_span


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------


def window_bounds(start_time: np.ndarray, window_days: int) -> list[tuple[int, int]]:
    """For each index j, the half-open index range of trips starting in
    ``[start_j - window, start_j)``."""
    starts = np.asarray(start_time, dtype=np.float64)
    span = window_days * DAY_S
    lo = np.searchsorted(starts, starts - span, side="left")
    return [(int(lo[j]), j) for j in range(len(starts))]


def _feature_rows(series: FeatureSeries, lo: int, hi: int) -> np.ndarray:
    n = hi - lo
    rows = np.zeros((n, N_FEATURES))
    rows[:, 0] = series.delta_t[lo:hi]
    rows[:, 1] = series.distance[lo:hi]
    rows[np.arange(n), 2 + series.weekday[lo:hi]] = 1.0
    return rows


def make_windows(series: FeatureSeries, window_days: int, L: int) -> list[SequenceSample]:
    """One sample per trip with at least one earlier trip inside the window.

    Features are the earlier trips (oldest first, at most the ``L`` most
    recent), padded with zero rows to ``L``; the target is the trip's own
    (time gap, distance).
    """
    if not 1 <= window_days <= 14:
        raise DataError("window_days must be in 1..14")
    if L < 1:
        raise DataError("L must be >= 1")
    samples = []
    for lo, j in window_bounds(series.start_time, window_days):
        if j - lo < 1:
            continue
        lo = max(lo, j - L)
        feats = np.zeros((L, N_FEATURES))
        feats[: j - lo] = _feature_rows(series, lo, j)
        samples.append(
            SequenceSample(
                features=feats,
                valid_len=j - lo,
                target=np.array([series.delta_t[j], series.distance[j]], dtype=np.float64),
                vehicle_id=series.vehicle_id,
                target_time=float(series.start_time[j]),
                target_index=j,
            )
        )
    return samples


def next_trip_sample(series: FeatureSeries, window_days: int, L: int) -> SequenceSample:
    """History sample for forecasting the trip after the last one in ``series``.

    The window is ``[start_last - window, start_last]``, so the last trip is
    included. The target is unknown and set to NaN.
    """
    n = len(series.start_time)
    if n < 1:
        raise InsufficientHistoryError("need at least two trips to build a history")
    lo = int(np.searchsorted(series.start_time, series.start_time[-1] - window_days * DAY_S, side="left"))
    lo = max(lo, n - L)
    feats = np.zeros((L, N_FEATURES))
    feats[: n - lo] = _feature_rows(series, lo, n)
    return SequenceSample(feats, n - lo, np.full(2, np.nan), series.vehicle_id, float(series.start_time[-1]), n)


def split_counts(n: int, fractions: Sequence[float] = (0.70, 0.15, 0.15)) -> tuple[int, ...]:
    """Chronological split sizes; the last part absorbs rounding."""
    sizes = [int(math.floor(n * f + 1e-9)) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    return tuple(sizes)


@dataclass
class Dataset:
    train: list[SequenceSample]
    val: list[SequenceSample]
    test: list[SequenceSample]
    stats: NormStats
    window_days: int
    max_seq_len: int
    tz: str = DEFAULT_TZ
    series: dict[str, FeatureSeries] = field(default_factory=dict, repr=False)

    def splits(self) -> dict[str, list[SequenceSample]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def default_capacity(counts: Sequence[int], cap: int = 64) -> int:
    """99th percentile of trips-per-window, capped."""
    if len(counts) == 0:
        return 1
    return int(min(cap, max(1, math.ceil(np.percentile(np.asarray(counts), 99)))))


def prepare_dataset(
    trips: Sequence[TripRecord],
    window_days: int = 8,
    max_seq_len: int | None = None,
    tz: str = DEFAULT_TZ,
    fractions: Sequence[float] = (0.70, 0.15, 0.15),
    stats: NormStats | None = None,
) -> Dataset:
    """Run the full pipeline and split chronologically within each vehicle.

    Normalization statistics come from the trips visible to the training
    split only: every trip up to and including the last training target.
    Passing ``stats`` (e.g. from a checkpoint) skips that fit.
    """
    cleaned = clean_trips(sorted(trips, key=lambda t: (t.vehicle_id, t.start_time)))
    raw: dict[str, FeatureSeries] = {}
    for vid, group in _by_vehicle(cleaned).items():
        if len(group) < 2:
            warnings.warn(f"vehicle {vid} has fewer than 2 trips after cleaning", EmptyVehicleWarning, stacklevel=2)
            continue
        raw[vid] = build_features(group, tz)

    plan = {}
    train_dt, train_d, train_counts = [], [], []
    for vid in sorted(raw):
        s = raw[vid]
        targets = [(j, j - lo) for lo, j in window_bounds(s.start_time, window_days) if j - lo >= 1]
        n_tr, n_va, _ = split_counts(len(targets), fractions)
        plan[vid] = (targets, n_tr, n_va)
        if n_tr:
            last = targets[n_tr - 1][0]
            train_dt.append(s.delta_t[: last + 1])
            train_d.append(s.distance[: last + 1])
            train_counts += [c for _, c in targets[:n_tr]]
    if not train_dt and stats is None:
        raise DataError("no training samples; the fleet is too small for this window")
    if stats is None:
        stats = NormStats.fit(np.concatenate(train_dt), np.concatenate(train_d))
    L = max_seq_len if max_seq_len is not None else default_capacity(train_counts)

    ds = Dataset([], [], [], stats, window_days, L, tz, raw)
    for vid in sorted(raw):
        samples = make_windows(normalize(raw[vid], stats), window_days, L)
        _, n_tr, n_va = plan[vid]
        ds.train += samples[:n_tr]
        ds.val += samples[n_tr : n_tr + n_va]
        ds.test += samples[n_tr + n_va :]
    return ds


def to_arrays(samples: Sequence[SequenceSample]):
    """Stack samples into ``(features (B,L,F), valid_len (B,), targets (B,2))``."""
    if not samples:
        return np.zeros((0, 1, N_FEATURES)), np.zeros(0, dtype=np.int64), np.zeros((0, 2))
    feats = np.stack([s.features for s in samples])
    vlen = np.array([s.valid_len for s in samples], dtype=np.int64)
    tgt = np.stack([s.target for s in samples])
    return feats, vlen, tgt


def feature_means(samples: Sequence[SequenceSample]) -> np.ndarray:
    """Per-feature mean over the valid rows of ``samples`` (normalized space)."""
    rows = [s.features[: s.valid_len] for s in samples]
    if not rows:
        raise DataError("cannot compute feature means of an empty sample set")
    return np.concatenate(rows).mean(axis=0)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _parse_time(text: str) -> float:
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def ingest_csv(path) -> list[TripRecord]:
    """Read ``vehicle_id,start_time,end_time,distance_km``; times may be
    epoch seconds or ISO-8601 (naive times are UTC)."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise DataError(f"line 1: expected header {','.join(CSV_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"line {lineno}: expected 4 fields, got {len(row)}")
            try:
                rec = TripRecord(row[0], _parse_time(row[1]), _parse_time(row[2]), float(row[3]))
            except (ValueError, DataError) as exc:
                raise DataError(f"line {lineno}: {exc}") from None
            records.append(rec)
    records.sort(key=lambda t: (t.vehicle_id, t.start_time))
    return records


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def write_csv(trips: Sequence[TripRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for t in trips:
            w.writerow([t.vehicle_id, _fmt(t.start_time), _fmt(t.end_time), _fmt(t.distance_km)])


# ---------------------------------------------------------------------------
# Synthetic fleet
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FleetSpec:
    """Parameters of the synthetic fleet.

    Every vehicle commutes on its workdays (leave in the morning, return in
    the afternoon) with probability ``commute_prob`` per workday, and makes
    Poisson(``errand_rate``) extra trips per day with log-normal distances.
    ``split_prob`` is the chance a trip is logged as two pieces a few minutes
    apart, mimicking GPS dropouts.
    """

    vehicles: int = 50
    days: int = 180
    commute_prob: float = 0.9
    noise_minutes: float = 15.0
    distance_lognorm_mu: float = 2.0
    distance_lognorm_sigma: float = 0.7
    errand_rate: float = 0.6
    split_prob: float = 0.05
    start_date: str = "2021-01-04"
    tz: str = DEFAULT_TZ
    seed: int = 0

    def __post_init__(self):
        if self.vehicles < 1:
            raise DataError("fleet spec needs at least one vehicle")
        if self.days < 1:
            raise DataError("fleet spec needs at least one day")
        if not 0 <= self.commute_prob <= 1 or not 0 <= self.split_prob <= 1:
            raise DataError("probabilities must lie in [0, 1]")
        if self.noise_minutes < 0 or self.errand_rate < 0 or self.distance_lognorm_sigma < 0:
            raise DataError("noise, errand rate and sigma must be non-negative")

    @classmethod
    def from_mapping(cls, d: dict) -> "FleetSpec":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise DataError(f"unknown fleet spec keys: {sorted(unknown)}")
        return cls(**d)


def load_fleet_spec(path) -> FleetSpec:
    from ._toml import load_toml

    return FleetSpec.from_mapping(load_toml(path))


def _local_epoch(day0: datetime, day: int, hour: float, zone: ZoneInfo) -> float:
    base = datetime(day0.year, day0.month, day0.day, tzinfo=zone).timestamp()
    # walk days in local time so DST shifts keep commutes at the same clock time
    d = datetime.fromtimestamp(base + day * DAY_S + 12 * 3600, zone)
    midnight = datetime(d.year, d.month, d.day, tzinfo=zone).timestamp()
    return midnight + hour * 3600.0


def generate_synthetic(spec: FleetSpec | None = None, seed: int | None = None) -> list[TripRecord]:
    """Deterministic synthetic fleet, sorted by (vehicle_id, start_time)."""
    spec = spec or FleetSpec()
    if seed is not None:
        spec = replace(spec, seed=seed)
    zone = ZoneInfo(spec.tz)
    day0 = datetime.fromisoformat(spec.start_date)
    children = np.random.SeedSequence(spec.seed).spawn(spec.vehicles)
    noise_h = spec.noise_minutes / 60.0
    speed_kmh = 45.0
    trips: list[TripRecord] = []
    for v, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        vid = f"v{v:03d}"
        leave = rng.uniform(6.5, 9.0)
        back = leave + rng.uniform(8.0, 9.5)
        commute_km = float(np.clip(rng.lognormal(spec.distance_lognorm_mu + 0.5, spec.distance_lognorm_sigma), 3.5, 120))
        n_workdays = int(rng.choice([4, 5, 5, 5, 6]))
        workdays = set(range(n_workdays))
        errand_scale = rng.uniform(0.5, 1.5)
        weekend_boost = rng.uniform(1.0, 2.5)

        events: list[tuple[float, float]] = []  # (start epoch, km)
        for day in range(spec.days):
            wd = (day0.weekday() + day) % 7
            if wd in workdays and rng.random() < spec.commute_prob:
                for hour in (leave, back):
                    h = hour + (rng.normal(0.0, noise_h) if noise_h > 0 else 0.0)
                    km = commute_km * (1.0 + (rng.normal(0.0, 0.03) if noise_h > 0 else 0.0))
                    events.append((_local_epoch(day0, day, h, zone), km))
            rate = spec.errand_rate * errand_scale * (weekend_boost if wd >= 5 else 1.0)
            for _ in range(rng.poisson(rate) if rate > 0 else 0):
                h = rng.uniform(9.0, 21.0)
                km = float(rng.lognormal(spec.distance_lognorm_mu, spec.distance_lognorm_sigma))
                events.append((_local_epoch(day0, day, h, zone), km))
        events.sort()

        last_end = -np.inf
        for start, km in events:
            start = float(round(max(start, last_end + 60.0)))
            dur = max(60.0, round(km / speed_kmh * 3600.0))
            if rng.random() < spec.split_prob and km > 1.0:
                part = float(rng.uniform(0.3, 0.7))
                d1 = max(30.0, round(dur * part))
                gap = float(round(rng.uniform(60.0, 480.0)))
                trips.append(TripRecord(vid, start, start + d1, round(km * part, 3)))
                s2 = start + d1 + gap
                trips.append(TripRecord(vid, s2, s2 + dur - d1, round(km * (1 - part), 3)))
                last_end = s2 + dur - d1
            else:
                trips.append(TripRecord(vid, start, start + dur, round(km, 3)))
                last_end = start + dur
    return trips
