"""Device timelines, trip legs and per-interval mobility aggregates.

Everything downstream of the anonymized log lives on an :class:`IntervalGrid`
(fixed-width intervals counted from an epoch at local midnight).  Aggregates
are dense arrays indexed ``[interval, building]`` and flows ``[interval,
origin, destination]``; buildings are in sorted id order, which is also the
order the OD graph uses.
"""

import csv
import logging
from dataclasses import dataclass, field
from datetime import timedelta
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

VALID_WIDTHS = (15, 30, 60)
DEFAULT_MAX_GAP_MIN = 60
DAY_S = 86_400

SNAPSHOT_FIELDS = ("occupancy", "entries", "exits", "orig_count", "dest_count")
BASE_FEATURES = (
    "occ_origin",
    "occ_dest",
    "entries_origin",
    "exits_origin",
    "entries_dest",
    "exits_dest",
    "orig_origin",
    "dest_dest",
    "time_of_day",
    "day_of_week",
)
ENROLMENT_FEATURES = ("enrol_origin", "enrol_dest")
DISCRETE_FEATURES = ("time_of_day", "day_of_week")


def to_seconds(values):
    """datetime-like values -> int64 seconds since 1970-01-01 (naive local time)."""
    arr = pd.to_datetime(pd.Series(values)).to_numpy().astype("datetime64[s]")
    return arr.astype(np.int64)


def from_seconds(seconds):
    return pd.to_datetime(np.asarray(seconds, dtype=np.int64), unit="s")


@dataclass(frozen=True)
class IntervalGrid:
    width_minutes: int
    epoch: int  # seconds, local midnight
    n_intervals: int

    def __post_init__(self):
        if self.width_minutes not in VALID_WIDTHS:
            raise ValueError(f"interval width must be one of {VALID_WIDTHS}, got {self.width_minutes}")
        if self.epoch % DAY_S:
            raise ValueError("grid epoch must fall on a midnight")

    @property
    def width_s(self):
        return self.width_minutes * 60

    @property
    def per_day(self):
        return DAY_S // self.width_s

    def index_of(self, seconds):
        return (np.asarray(seconds, dtype=np.int64) - self.epoch) // self.width_s

    def start_of(self, index):
        return self.epoch + np.asarray(index, dtype=np.int64) * self.width_s

    def time_of_day(self, index):
        return np.asarray(index, dtype=np.int64) % self.per_day

    def day_of_week(self, index):
        # 1970-01-01 was a Thursday; Monday = 0
        days = (self.start_of(index)) // DAY_S
        return (days + 3) % 7

    def starts(self):
        return from_seconds(self.start_of(np.arange(self.n_intervals)))

    @classmethod
    def covering(cls, width_minutes, first_s, last_s):
        """Whole days from the midnight before ``first_s`` through the day of ``last_s``."""
        epoch = (int(first_s) // DAY_S) * DAY_S
        end = (int(last_s) // DAY_S + 1) * DAY_S
        return cls(width_minutes, epoch, (end - epoch) // (width_minutes * 60))


class TripLeg(NamedTuple):
    hash_id: str
    origin: str
    destination: str
    depart: pd.Timestamp
    arrive: pd.Timestamp


@dataclass
class DeviceTimeline:
    hash_id: str
    events: list  # (building_id, Timestamp), sorted by (timestamp, building_id)


# ---------------------------------------------------------------------------
# record-level operations


def build_timelines(logs):
    """One time-ordered timeline per device.  Ties sort by building id."""
    frame = _as_frame(logs)
    if frame.empty:
        return {}
    frame = frame.sort_values(["hash_id", "log_date", "building_id"], kind="mergesort")
    out = {}
    for hid, grp in frame.groupby("hash_id", sort=True):
        out[hid] = DeviceTimeline(hid, list(zip(grp["building_id"], grp["log_date"])))
    return out


def _gap(max_gap):
    if isinstance(max_gap, timedelta):
        return max_gap
    return timedelta(minutes=float(max_gap))


def extract_trip_legs(timeline, max_gap=DEFAULT_MAX_GAP_MIN):
    """Legs between consecutive events in different buildings no more than
    ``max_gap`` apart (a timedelta, or minutes)."""
    limit = _gap(max_gap)
    legs = []
    ev = timeline.events
    for (b0, t0), (b1, t1) in zip(ev, ev[1:]):
        if b0 != b1 and t1 - t0 <= limit:
            legs.append(TripLeg(timeline.hash_id, b0, b1, t0, t1))
    return legs


def _as_frame(logs):
    if isinstance(logs, pd.DataFrame):
        return logs
    rows = list(logs)
    if not rows:
        return pd.DataFrame({"hash_id": [], "building_id": [], "log_date": pd.Series([], dtype="datetime64[ns]")})
    return pd.DataFrame([tuple(r) for r in rows], columns=["hash_id", "building_id", "log_date"])


# ---------------------------------------------------------------------------
# vectorized pipeline


@dataclass
class SortedLogs:
    """Log arrays sorted by (device, timestamp, building)."""

    devices: np.ndarray  # device codes
    buildings: np.ndarray  # building codes into ``building_ids``
    seconds: np.ndarray
    building_ids: list
    device_ids: np.ndarray

    def __len__(self):
        return len(self.seconds)


def sort_logs(logs, building_ids=None):
    frame = _as_frame(logs)
    if building_ids is None:
        building_ids = sorted(pd.unique(frame["building_id"]))
    building_ids = list(building_ids)
    codes = {b: i for i, b in enumerate(building_ids)}
    bcode = frame["building_id"].map(codes)
    if bcode.isna().any():
        unknown = sorted(set(frame.loc[bcode.isna(), "building_id"]))
        raise ValueError(f"logs reference buildings not in the building list: {unknown[:5]}")
    dcode, dids = pd.factorize(frame["hash_id"], sort=True)
    sec = to_seconds(frame["log_date"]) if len(frame) else np.zeros(0, dtype=np.int64)
    b = bcode.to_numpy(dtype=np.int64)
    order = np.lexsort((b, sec, dcode))
    return SortedLogs(dcode[order].astype(np.int64), b[order], sec[order], building_ids, np.asarray(dids))


@dataclass
class LegArrays:
    devices: np.ndarray
    origins: np.ndarray
    destinations: np.ndarray
    depart: np.ndarray
    arrive: np.ndarray

    def __len__(self):
        return len(self.depart)


def legs_from_sorted(slogs, max_gap=DEFAULT_MAX_GAP_MIN):
    limit = int(_gap(max_gap).total_seconds())
    d, b, s = slogs.devices, slogs.buildings, slogs.seconds
    keep = (d[1:] == d[:-1]) & (b[1:] != b[:-1]) & (s[1:] - s[:-1] <= limit)
    i = np.flatnonzero(keep)
    return LegArrays(d[i], b[i], b[i + 1], s[i], s[i + 1])


def _cell_counts(grid, n_buildings, interval_idx, building_idx):
    counts = np.bincount(interval_idx * n_buildings + building_idx, minlength=grid.n_intervals * n_buildings)
    return counts.reshape(grid.n_intervals, n_buildings).astype(np.int64)


def _check_in_grid(grid, idx, what):
    if idx.size and (idx.min() < 0 or idx.max() >= grid.n_intervals):
        raise ValueError(f"{what} fall outside the interval grid")


def compute_occupancy(slogs, grid):
    """Unique devices seen per (interval, building)."""
    nb = len(slogs.building_ids)
    idx = grid.index_of(slogs.seconds)
    _check_in_grid(grid, idx, "log timestamps")
    cell = idx * nb + slogs.buildings
    n_dev = int(slogs.devices.max()) + 1 if len(slogs) else 1
    uniq = np.unique(cell * n_dev + slogs.devices) // n_dev
    counts = np.bincount(uniq, minlength=grid.n_intervals * nb)
    return counts.reshape(grid.n_intervals, nb).astype(np.int64)


def compute_entry_exit(slogs, grid, day_start_hour=0):
    """First and last event of every device on every day, counted per cell.

    Days run from ``day_start_hour`` to the same hour on the next calendar day.
    """
    nb = len(slogs.building_ids)
    if not len(slogs):
        z = np.zeros((grid.n_intervals, nb), dtype=np.int64)
        return z, z.copy()
    day = (slogs.seconds - day_start_hour * 3600) // DAY_S
    d = slogs.devices
    first = np.ones(len(d), dtype=bool)
    first[1:] = (d[1:] != d[:-1]) | (day[1:] != day[:-1])
    last = np.ones(len(d), dtype=bool)
    last[:-1] = first[1:]
    idx = grid.index_of(slogs.seconds)
    _check_in_grid(grid, idx, "log timestamps")
    entries = _cell_counts(grid, nb, idx[first], slogs.buildings[first])
    exits = _cell_counts(grid, nb, idx[last], slogs.buildings[last])
    return entries, exits


def aggregate_flows(legs, grid, n_buildings):
    """Dense ``[interval, origin, destination]`` counts; legs go to their departure interval."""
    idx = grid.index_of(legs.depart)
    _check_in_grid(grid, idx, "leg departures")
    flat = (idx * n_buildings + legs.origins) * n_buildings + legs.destinations
    counts = np.bincount(flat, minlength=grid.n_intervals * n_buildings * n_buildings)
    return counts.reshape(grid.n_intervals, n_buildings, n_buildings).astype(np.int64)


def origin_destination_counts(legs, grid, n_buildings):
    """Legs leaving each building (by departure interval) and reaching it (by arrival interval)."""
    di = grid.index_of(legs.depart)
    ai = grid.index_of(legs.arrive)
    _check_in_grid(grid, di, "leg departures")
    _check_in_grid(grid, ai, "leg arrivals")
    return _cell_counts(grid, n_buildings, di, legs.origins), _cell_counts(grid, n_buildings, ai, legs.destinations)


def schedule_enrolment(schedule, grid, building_ids, block_minutes=60):
    """Average enrolled headcount per (interval, building).

    Each schedule row covers ``block_minutes`` from its ``interval_start``; an
    interval takes the time-weighted mean over the blocks it overlaps.
    """
    out = np.zeros((grid.n_intervals, len(building_ids)))
    codes = {b: i for i, b in enumerate(building_ids)}
    starts = to_seconds(schedule["interval_start"]) if len(schedule) else np.zeros(0, dtype=np.int64)
    block = block_minutes * 60
    w = grid.width_s
    for b, s, n in zip(schedule["building_id"], starts, schedule["enrolment_no"]):
        j = codes.get(b)
        if j is None or n == 0:
            continue
        first = max((s - grid.epoch) // w, 0)
        last = min((s + block - 1 - grid.epoch) // w, grid.n_intervals - 1)
        for t in range(first, last + 1):
            lo = max(s, grid.epoch + t * w)
            hi = min(s + block, grid.epoch + (t + 1) * w)
            if hi > lo:
                out[t, j] += n * (hi - lo) / w
    return out


@dataclass
class Aggregates:
    grid: IntervalGrid
    building_ids: list
    occupancy: np.ndarray
    entries: np.ndarray
    exits: np.ndarray
    orig_count: np.ndarray
    dest_count: np.ndarray
    flows: np.ndarray
    enrolment: np.ndarray = None
    n_legs: int = 0
    extra: dict = field(default_factory=dict)


def aggregate(logs, width_minutes, building_ids=None, grid=None, max_gap=DEFAULT_MAX_GAP_MIN,
              schedule=None, day_start_hour=0):
    """Full aggregation of an anonymized log frame onto one interval grid."""
    slogs = sort_logs(logs, building_ids)
    if grid is None:
        if not len(slogs):
            raise ValueError("cannot infer an interval grid from an empty log")
        grid = IntervalGrid.covering(width_minutes, slogs.seconds.min(), slogs.seconds.max())
    elif grid.width_minutes != width_minutes:
        raise ValueError("grid width disagrees with width_minutes")
    nb = len(slogs.building_ids)
    legs = legs_from_sorted(slogs, max_gap)
    entries, exits = compute_entry_exit(slogs, grid, day_start_hour)
    orig, dest = origin_destination_counts(legs, grid, nb)
    enrol = None
    if schedule is not None:
        enrol = schedule_enrolment(schedule, grid, slogs.building_ids)
    return Aggregates(
        grid=grid,
        building_ids=slogs.building_ids,
        occupancy=compute_occupancy(slogs, grid),
        entries=entries,
        exits=exits,
        orig_count=orig,
        dest_count=dest,
        flows=aggregate_flows(legs, grid, nb),
        enrolment=enrol,
        n_legs=len(legs),
    )


# ---------------------------------------------------------------------------
# feature table


@dataclass
class FeatureSet:
    """Per (interval, OD node) inputs from interval ``t-1`` and the flow at ``t``.

    ``x`` is ``(T, V, F)`` with columns named by ``columns``; ``y`` is ``(T, V)``.
    ``intervals`` holds the target interval index of each slice.
    """

    x: np.ndarray
    y: np.ndarray
    intervals: np.ndarray
    columns: tuple
    nodes: list  # (origin, destination) pairs
    grid: IntervalGrid

    @property
    def with_enrolment(self):
        return ENROLMENT_FEATURES[0] in self.columns

    @property
    def numeric_columns(self):
        return [i for i, c in enumerate(self.columns) if c not in DISCRETE_FEATURES]

    @property
    def time_of_day(self):
        return self.x[:, 0, self.columns.index("time_of_day")].astype(np.int64)

    @property
    def day_of_week(self):
        return self.x[:, 0, self.columns.index("day_of_week")].astype(np.int64)

    def subset(self, mask):
        return FeatureSet(self.x[mask], self.y[mask], self.intervals[mask], self.columns, self.nodes, self.grid)


def build_feature_table(agg, nodes, with_enrolment=False):
    """Inputs from interval ``t-1`` and target flow at ``t`` for every OD node and ``t >= 1``."""
    if with_enrolment and agg.enrolment is None:
        raise ValueError("enrolment features requested but no schedule was joined")
    codes = {b: i for i, b in enumerate(agg.building_ids)}
    pairs = [(n.origin, n.destination) if hasattr(n, "origin") else tuple(n) for n in nodes]
    o = np.array([codes[p[0]] for p in pairs], dtype=np.int64)
    d = np.array([codes[p[1]] for p in pairs], dtype=np.int64)
    T = agg.grid.n_intervals
    prev = np.arange(T - 1)
    cols = list(BASE_FEATURES) + (list(ENROLMENT_FEATURES) if with_enrolment else [])
    x = np.empty((T - 1, len(pairs), len(cols)))
    x[:, :, 0] = agg.occupancy[prev][:, o]
    x[:, :, 1] = agg.occupancy[prev][:, d]
    x[:, :, 2] = agg.entries[prev][:, o]
    x[:, :, 3] = agg.exits[prev][:, o]
    x[:, :, 4] = agg.entries[prev][:, d]
    x[:, :, 5] = agg.exits[prev][:, d]
    x[:, :, 6] = agg.orig_count[prev][:, o]
    x[:, :, 7] = agg.dest_count[prev][:, d]
    x[:, :, 8] = agg.grid.time_of_day(prev)[:, None]
    x[:, :, 9] = agg.grid.day_of_week(prev)[:, None]
    if with_enrolment:
        x[:, :, 10] = agg.enrolment[prev][:, o]
        x[:, :, 11] = agg.enrolment[prev][:, d]
    y = agg.flows[1:][:, o, d].astype(np.float64)
    return FeatureSet(x, y, np.arange(1, T), tuple(cols), pairs, agg.grid)


# ---------------------------------------------------------------------------
# serialization


def _stamp(grid, idx):
    return from_seconds(grid.start_of(idx)).strftime("%Y-%m-%d %H:%M:%S")


def write_snapshots(agg, path):
    T, B = agg.occupancy.shape
    t_idx, b_idx = np.divmod(np.arange(T * B), B)
    frame = pd.DataFrame(
        {
            "building_id": np.asarray(agg.building_ids, dtype=object)[b_idx],
            "interval_start": _stamp(agg.grid, t_idx),
            "occupancy": agg.occupancy.ravel(),
            "entries": agg.entries.ravel(),
            "exits": agg.exits.ravel(),
            "orig_count": agg.orig_count.ravel(),
            "dest_count": agg.dest_count.ravel(),
        }
    )
    if agg.enrolment is not None:
        frame["enrolment"] = agg.enrolment.ravel()
    frame.to_csv(path, index=False)


def write_flows(agg, path, nonzero_only=True):
    t, o, d = np.nonzero(agg.flows) if nonzero_only else np.indices(agg.flows.shape).reshape(3, -1)
    ids = np.asarray(agg.building_ids, dtype=object)
    frame = pd.DataFrame(
        {"origin": ids[o], "destination": ids[d], "interval_start": _stamp(agg.grid, t), "flow": agg.flows[t, o, d]}
    )
    frame.to_csv(path, index=False)


def read_aggregates(snapshot_path, flow_path, width_minutes):
    snap = pd.read_csv(snapshot_path)
    flows = pd.read_csv(flow_path)
    buildings = sorted(snap["building_id"].astype(str).unique())
    starts = to_seconds(snap["interval_start"])
    grid = IntervalGrid(width_minutes, int(starts.min()), int((starts.max() - starts.min()) // (width_minutes * 60)) + 1)
    codes = {b: i for i, b in enumerate(buildings)}
    T, B = grid.n_intervals, len(buildings)
    ti = grid.index_of(starts)
    bi = snap["building_id"].astype(str).map(codes).to_numpy()

    def field_(name, dtype=np.int64):
        arr = np.zeros((T, B), dtype=dtype)
        arr[ti, bi] = snap[name].to_numpy()
        return arr

    fl = np.zeros((T, B, B), dtype=np.int64)
    if len(flows):
        fl[grid.index_of(to_seconds(flows["interval_start"])),
           flows["origin"].astype(str).map(codes).to_numpy(),
           flows["destination"].astype(str).map(codes).to_numpy()] = flows["flow"].to_numpy()
    return Aggregates(
        grid=grid,
        building_ids=buildings,
        occupancy=field_("occupancy"),
        entries=field_("entries"),
        exits=field_("exits"),
        orig_count=field_("orig_count"),
        dest_count=field_("dest_count"),
        flows=fl,
        enrolment=field_("enrolment", np.float64) if "enrolment" in snap.columns else None,
        n_legs=int(fl.sum()),
    )


def write_feature_table(features, path):
    """Long-format CSV: ``interval,interval_start,node,origin,destination,<columns...>,target``.

    Column order after ``destination`` is ``features.columns`` followed by ``target``.
    """
    T, V, F = features.x.shape
    t_idx, v_idx = np.divmod(np.arange(T * V), V)
    origins = np.array([p[0] for p in features.nodes], dtype=object)
    dests = np.array([p[1] for p in features.nodes], dtype=object)
    frame = pd.DataFrame(
        {
            "interval": features.intervals[t_idx],
            "interval_start": _stamp(features.grid, features.intervals[t_idx]),
            "node": v_idx,
            "origin": origins[v_idx],
            "destination": dests[v_idx],
        }
    )
    flat = features.x.reshape(T * V, F)
    for j, c in enumerate(features.columns):
        frame[c] = flat[:, j].astype(np.int64) if c in DISCRETE_FEATURES else flat[:, j]
    frame["target"] = features.y.ravel()
    frame.to_csv(Path(path), index=False, quoting=csv.QUOTE_MINIMAL)
