"""Agent-based synthetic campus that writes WiFi logs with known ground truth.

Each agent follows a simple daily itinerary: arrive, visit a few buildings, go
home.  The next building is drawn with weight ``(popularity + coupling *
enrolment / 100) * exp(-distance / decay)``, so class sizes drive flows when
``enrolment_coupling > 0``.  While inside a building a device logs as a Poisson
process; the association at arrival and the last log before leaving are each
seen with probability ``1 - exp(-ping_rate)``.  Missed detections therefore
come only from ping sparsity.

Randomness is split into per-agent streams derived from ``(seed, agent)``, with
itinerary and ping draws on separate streams so changing ``ping_rate`` keeps
every itinerary fixed.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from .chains import DAY_S, IntervalGrid, to_seconds
from .graph import EARTH_RADIUS_M, Building
from .ingest import TIMESTAMP_FORMAT, ApMapping

CAMPUS_CENTER = (43.6577, -79.3788)
CODE_POOL = (
    "KHE", "CUI", "LIB", "JOR", "ENG", "ARC", "POD", "SHE", "TRS", "VIC", "MON",
    "RAC", "SCC", "DCC", "IMA", "OAK", "PIT", "SBB", "AMC", "HEI", "EPH", "CED",
    "YNG", "SID", "KHN", "KHS", "KHW", "BKS",
)
CLASS_HOURS = range(9, 18)  # block start hours, 09:00-18:00
ENROL_SCALE = 100.0
WALK_SPEED_MPS = 1.3
LAST_DEPARTURE_S = 22 * 3600


@dataclass
class SynthConfig:
    n_buildings: int = 22
    n_agents: int = 2000
    weeks: int = 4
    seed: int = 0
    ping_rate: float = 1.5  # mean logs per agent per 15 min while present
    enrolment_coupling: float = 1.0
    start_date: str = "2023-09-11"  # a Monday
    distance_decay_m: float = 400.0
    weekday_attendance: float = 0.85
    weekend_attendance: float = 0.08

    def __post_init__(self):
        if self.n_buildings < 2:
            raise ValueError("need at least 2 buildings")
        if self.n_agents < 0 or self.weeks < 1:
            raise ValueError("n_agents must be >= 0 and weeks >= 1")
        if self.ping_rate <= 0:
            raise ValueError("ping_rate must be positive")
        if self.enrolment_coupling < 0:
            raise ValueError("enrolment_coupling must be nonnegative")

    def to_dict(self):
        return asdict(self)


@dataclass
class Campus:
    buildings: list  # Building, sorted by id
    aps: list  # ApMapping
    schedule: pd.DataFrame  # building_id, interval_start, enrolment_no
    popularity: np.ndarray
    start_s: int
    n_days: int
    enrol_blocks: np.ndarray = field(repr=False, default=None)  # [day, hour, building]

    @property
    def building_ids(self):
        return [b.building_id for b in self.buildings]


def _codes(n):
    if n <= len(CODE_POOL):
        return sorted(CODE_POOL[:n])
    return [f"B{i:03d}" for i in range(n)]


def _offset_to_latlon(x_m, y_m):
    lat0, lon0 = CAMPUS_CENTER
    lat = lat0 + math.degrees(y_m / EARTH_RADIUS_M)
    lon = lon0 + math.degrees(x_m / (EARTH_RADIUS_M * math.cos(math.radians(lat0))))
    return lat, lon


def generate_campus(config):
    """Buildings in a 1 km box around a fixed centre, their APs, and a weekday class timetable."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    codes = _codes(config.n_buildings)
    xy = rng.uniform(-500.0, 500.0, size=(config.n_buildings, 2))
    buildings, aps = [], []
    for code, (x, y) in zip(codes, xy):
        lat, lon = _offset_to_latlon(x, y)
        buildings.append(Building(code, lat, lon, (float(x), float(y))))
        for k in range(int(rng.integers(1, 4))):
            aps.append(ApMapping(f"AP-{code}-{k + 1}", code, lat, lon))
    popularity = rng.uniform(0.2, 1.0, size=config.n_buildings)
    class_prob = rng.uniform(0.2, 0.9, size=config.n_buildings)
    class_mean = rng.uniform(30.0, 150.0, size=config.n_buildings)

    start_s = int(to_seconds([pd.Timestamp(config.start_date)])[0])
    if start_s % DAY_S:
        raise ValueError("start_date must be a plain date")
    n_days = 7 * config.weeks
    hours = list(CLASS_HOURS)
    enrol = np.zeros((n_days, 24, config.n_buildings))
    rows = []
    for day in range(n_days):
        weekday = (start_s // DAY_S + day + 3) % 7 < 5
        # classes run for 1-3 consecutive hourly blocks at a fixed size
        remaining = np.zeros(config.n_buildings, dtype=np.int64)
        current = np.zeros(config.n_buildings)
        for h in hours:
            start = (remaining == 0) & (rng.random(config.n_buildings) < class_prob)
            length = rng.integers(1, 4, size=config.n_buildings)
            size = rng.poisson(class_mean)
            remaining = np.where(start, np.minimum(length, hours[-1] + 1 - h), remaining)
            current = np.where(start, size, current)
            n = np.where((remaining > 0) & weekday, current, 0)
            remaining = np.maximum(remaining - 1, 0)
            enrol[day, h] = n
            stamp = start_s + day * DAY_S + h * 3600
            rows.extend((code, stamp, int(v)) for code, v in zip(codes, n))
    schedule = pd.DataFrame(rows, columns=["building_id", "interval_start", "enrolment_no"])
    schedule["interval_start"] = pd.to_datetime(schedule["interval_start"], unit="s")
    return Campus(buildings, aps, schedule, popularity, start_s, n_days, enrol)


@dataclass
class GroundTruth:
    """Exact stays and transitions of every agent (times in seconds)."""

    building_ids: list
    stays: pd.DataFrame  # agent, building, arrive, depart
    transitions: pd.DataFrame  # agent, origin, destination, depart, arrive

    def grid(self, width_minutes, start_s, n_days):
        return IntervalGrid(width_minutes, start_s, n_days * DAY_S // (width_minutes * 60))

    def occupancy(self, grid):
        """Agents present per (interval, building); presence covers [arrive, depart]."""
        nb = len(self.building_ids)
        out = np.zeros((grid.n_intervals, nb), dtype=np.int64)
        if self.stays.empty:
            return out
        a = grid.index_of(self.stays["arrive"].to_numpy())
        d = grid.index_of(self.stays["depart"].to_numpy())
        lens = d - a + 1
        rep = np.repeat(np.arange(len(a)), lens)
        offs = np.arange(lens.sum()) - np.repeat(np.cumsum(lens) - lens, lens)
        cell = (a[rep] + offs) * nb + self.stays["building"].to_numpy()[rep]
        agent = self.stays["agent"].to_numpy()[rep]
        n_ag = int(agent.max()) + 1
        uniq = np.unique(cell * n_ag + agent) // n_ag
        return np.bincount(uniq, minlength=grid.n_intervals * nb).reshape(grid.n_intervals, nb).astype(np.int64)

    def flows(self, grid):
        nb = len(self.building_ids)
        tr = self.transitions
        idx = grid.index_of(tr["depart"].to_numpy())
        flat = (idx * nb + tr["origin"].to_numpy()) * nb + tr["destination"].to_numpy()
        counts = np.bincount(flat, minlength=grid.n_intervals * nb * nb)
        return counts.reshape(grid.n_intervals, nb, nb).astype(np.int64)

    def write(self, out_dir, grid):
        from pathlib import Path

        out = Path(out_dir)
        ids = np.asarray(self.building_ids, dtype=object)
        occ = self.occupancy(grid)
        t, b = np.divmod(np.arange(occ.size), occ.shape[1])
        stamps = pd.to_datetime(grid.start_of(t), unit="s").strftime(TIMESTAMP_FORMAT)
        pd.DataFrame({"building_id": ids[b], "interval_start": stamps, "occupancy_true": occ.ravel()}).to_csv(
            out / f"truth_occupancy_{grid.width_minutes}min.csv", index=False
        )
        fl = self.flows(grid)
        t, o, d = np.nonzero(fl)
        stamps = pd.to_datetime(grid.start_of(t), unit="s").strftime(TIMESTAMP_FORMAT)
        pd.DataFrame({"origin": ids[o], "destination": ids[d], "interval_start": stamps,
                      "flow_true": fl[t, o, d]}).to_csv(out / f"truth_flows_{grid.width_minutes}min.csv", index=False)


@dataclass
class SimResult:
    log: pd.DataFrame  # mac_id, wifi_id, log_date
    truth: GroundTruth
    campus: Campus
    config: SynthConfig


def agent_mac(seed, agent):
    """Locally administered, unique per (seed, agent) for agent < 2**24."""
    return "02:%02x:%02x:%02x:%02x:%02x" % ((seed >> 8) & 255, seed & 255, (agent >> 16) & 255,
                                             (agent >> 8) & 255, agent & 255)


def _next_hour_departure(rng, arrive):
    """Leave near the end of the class hour that is at least 30 min away."""
    boundary = (arrive + 30 * 60) // 3600 * 3600 + 3600
    return boundary - int(rng.integers(0, 600))


def _agent_days(config, campus, dist, agent, out_stays, out_trans):
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2, agent]))
    nb = len(campus.buildings)
    home = int(rng.choice(nb, p=campus.popularity / campus.popularity.sum()))
    decay = np.exp(-dist / config.distance_decay_m)
    for day in range(campus.n_days):
        weekday = (campus.start_s // DAY_S + day + 3) % 7 < 5
        if rng.random() >= (config.weekday_attendance if weekday else config.weekend_attendance):
            continue
        day0 = campus.start_s + day * DAY_S
        t = int(np.clip(rng.normal(9.5, 1.25), 7.0, 15.0) * 3600) + int(rng.integers(0, 60))
        k = int(rng.integers(2, 7))
        cur = home if rng.random() < 0.6 else int(rng.integers(nb))
        for visit in range(k):
            arrive = t
            if rng.random() < 0.6:
                depart = _next_hour_departure(rng, arrive)
            else:
                depart = arrive + int(rng.integers(20 * 60, 100 * 60))
            depart = max(depart, arrive + 5 * 60)
            out_stays.append((agent, cur, day0 + arrive, day0 + depart))
            if visit == k - 1 or depart >= LAST_DEPARTURE_S - 3600:
                break
            hour = min(depart // 3600, 23)
            w = (campus.popularity + config.enrolment_coupling * campus.enrol_blocks[day, hour] / ENROL_SCALE)
            w = w * decay[cur]
            w[cur] = 0.0
            nxt = int(rng.choice(nb, p=w / w.sum()))
            walk = int(dist[cur, nxt] / WALK_SPEED_MPS) + int(rng.integers(60, 180))
            t = depart + walk
            out_trans.append((agent, cur, nxt, day0 + depart, day0 + t))
            cur = nxt


def _pings(config, stays, agent):
    """Ping times for one agent's stays: (stay index, seconds)."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3, agent]))
    p_edge = 1.0 - math.exp(-config.ping_rate)
    idx, sec = [], []
    for i, (_, _, a, d) in enumerate(stays):
        n = int(rng.poisson(config.ping_rate * (d - a) / 900.0))
        times = rng.integers(a, d + 1, size=n)
        edges = rng.random(2) < p_edge
        if edges[0]:
            times = np.append(times, a)
        if edges[1]:
            times = np.append(times, d)
        times.sort()
        idx.append(np.full(times.size, i, dtype=np.int64))
        sec.append(times)
    return idx, sec


def simulate(config, campus=None):
    """Run the agents and return the raw log (``mac_id, wifi_id, log_date``) plus ground truth."""
    if campus is None:
        campus = generate_campus(config)
    xy = np.array([b.xy for b in campus.buildings])
    dist = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1))
    aps_by_building = {}
    for ap in campus.aps:
        aps_by_building.setdefault(ap.building_id, []).append(ap.wifi_id)
    ids = campus.building_ids
    ap_ids = [aps_by_building[b] for b in ids]

    all_stays, all_trans = [], []
    agent_col, wifi_col, sec_col = [], [], []
    for agent in range(config.n_agents):
        stays, trans = [], []
        _agent_days(config, campus, dist, agent, stays, trans)
        if stays:
            idx, sec = _pings(config, stays, agent)
            idx = np.concatenate(idx)
            sec = np.concatenate(sec)
            # one AP per ping, drawn from the building's APs
            ap_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 4, agent]))
            bld = np.array([s[1] for s in stays])[idx]
            choice = ap_rng.random(idx.size)
            n_aps = np.array([len(ap_ids[b]) for b in bld], dtype=np.int64)
            k = (choice * n_aps).astype(np.int64)
            wifi_col.extend(ap_ids[b][j] for b, j in zip(bld.tolist(), k.tolist()))
            agent_col.append(np.full(sec.size, agent, dtype=np.int64))
            sec_col.append(sec)
        all_stays.extend(stays)
        all_trans.extend(trans)

    agents = np.concatenate(agent_col) if agent_col else np.zeros(0, dtype=np.int64)
    secs = np.concatenate(sec_col) if sec_col else np.zeros(0, dtype=np.int64)
    macs = np.array([agent_mac(config.seed, a) for a in range(config.n_agents)], dtype=object)
    log = pd.DataFrame(
        {
            "mac_id": macs[agents] if len(agents) else np.array([], dtype=object),
            "wifi_id": np.array(wifi_col, dtype=object),
            "log_date": pd.to_datetime(secs, unit="s"),
        }
    )
    truth = GroundTruth(
        building_ids=ids,
        stays=pd.DataFrame(all_stays, columns=["agent", "building", "arrive", "depart"]).astype(np.int64),
        transitions=pd.DataFrame(all_trans, columns=["agent", "origin", "destination", "depart", "arrive"]).astype(
            np.int64
        ),
    )
    return SimResult(log, truth, campus, config)


def write_campus(campus, out_dir):
    from pathlib import Path

    out = Path(out_dir)
    pd.DataFrame(
        [(ap.wifi_id, ap.building_id, repr(ap.lat), repr(ap.lon)) for ap in campus.aps],
        columns=["wifi_id", "building_id", "lat", "lon"],
    ).to_csv(out / "ap_mapping.csv", index=False)
    sched = campus.schedule.copy()
    sched["interval_start"] = sched["interval_start"].dt.strftime(TIMESTAMP_FORMAT)
    sched.to_csv(out / "schedule.csv", index=False)


def write_log(log, path):
    out = log.copy()
    out["log_date"] = out["log_date"].dt.strftime(TIMESTAMP_FORMAT)
    out.to_csv(path, index=False)
