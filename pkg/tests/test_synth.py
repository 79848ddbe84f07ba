from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from campusflow.chains import aggregate
from campusflow.ingest import ParsedLog, anonymize, load_ap_mapping, load_schedule, parse_log_file
from campusflow.synth import GroundTruth, SynthConfig, generate_campus, simulate, write_campus, write_log

SMALL = SynthConfig(seed=5, n_agents=150, weeks=1)


def _recovered(sim, width):
    """Aggregates recovered by the ingest + chains pipeline on the truth grid."""
    mapping = {ap.wifi_id: ap for ap in sim.campus.aps}
    anon, counts = anonymize(ParsedLog(sim.log, 0), mapping, b"salt")
    assert counts.unmapped_ssid == 0
    grid = sim.truth.grid(width, sim.campus.start_s, sim.campus.n_days)
    return aggregate(anon, width, sim.campus.building_ids, grid=grid), grid


def test_campus_shape_and_determinism():
    a, b = generate_campus(SynthConfig(seed=3)), generate_campus(SynthConfig(seed=3))
    assert len(a.buildings) == 22 and len({x.building_id for x in a.buildings}) == 22
    assert a.building_ids == sorted(a.building_ids)
    assert all(abs(x) <= 500 and abs(y) <= 500 for x, y in (bl.xy for bl in a.buildings))
    assert a.buildings == b.buildings and a.aps == b.aps
    pd.testing.assert_frame_equal(a.schedule, b.schedule)
    assert generate_campus(SynthConfig(seed=4)).buildings != a.buildings


def test_schedule_nonnegative_and_empty_on_weekends():
    sched = generate_campus(SynthConfig(seed=2, weeks=2)).schedule
    assert (sched["enrolment_no"] >= 0).all()
    weekend = sched["interval_start"].dt.dayofweek >= 5
    assert weekend.any() and (sched.loc[weekend, "enrolment_no"] == 0).all()
    assert (sched.loc[~weekend, "enrolment_no"] > 0).any()
    hours = sched["interval_start"].dt.hour
    assert hours.min() == 9 and hours.max() == 17


def test_config_validation():
    for bad in (dict(n_buildings=1), dict(n_agents=-1), dict(weeks=0), dict(ping_rate=0), dict(enrolment_coupling=-1)):
        with pytest.raises(ValueError):
            SynthConfig(**bad)


def test_no_agents_gives_empty_log_and_zero_truth():
    sim = simulate(replace(SMALL, n_agents=0))
    assert sim.log.empty and list(sim.log.columns) == ["mac_id", "wifi_id", "log_date"]
    grid = sim.truth.grid(15, sim.campus.start_s, sim.campus.n_days)
    assert not sim.truth.occupancy(grid).any() and not sim.truth.flows(grid).any()


def test_single_transition_counts_once():
    start = 1_694_390_400
    truth = GroundTruth(
        ["A", "B"],
        pd.DataFrame([(0, 0, start + 3600, start + 7500), (0, 1, start + 7800, start + 9000)],
                     columns=["agent", "building", "arrive", "depart"]),
        pd.DataFrame([(0, 0, 1, start + 7500, start + 7800)],
                     columns=["agent", "origin", "destination", "depart", "arrive"]),
    )
    grid = truth.grid(60, start, 1)
    flows = truth.flows(grid)
    assert flows[2, 0, 1] == 1 and flows.sum() == 1
    occ = truth.occupancy(grid)
    # the A stay spans hours 1 and 2
    assert occ[:3, 0].tolist() == [0, 1, 1] and occ[2, 1] == 1 and occ.sum() == 3


def test_transitions_follow_stays():
    sim = simulate(SMALL)
    stays = sim.truth.stays.sort_values(["agent", "arrive"]).to_numpy()
    trans = sim.truth.transitions
    assert len(trans) > 0
    ends = {(a, b, d) for a, b, _, d in stays}
    starts = {(a, b, s) for a, b, s, _ in stays}
    for agent, o, d, dep, arr in trans.itertuples(index=False):
        assert o != d and arr > dep
        assert (agent, o, dep) in ends and (agent, d, arr) in starts
    # outflow of each building per day equals the itinerary departures from it
    day = (trans["depart"] - sim.campus.start_s) // 86_400
    grid = sim.truth.grid(60, sim.campus.start_s, sim.campus.n_days)
    per_day = sim.truth.flows(grid).reshape(sim.campus.n_days, 24, len(sim.campus.buildings), -1).sum(axis=(1, 3))
    expected = np.zeros_like(per_day)
    np.add.at(expected, (day.to_numpy(), trans["origin"].to_numpy()), 1)
    assert np.array_equal(per_day, expected)


@pytest.mark.parametrize("width", [15, 60])
def test_dense_pings_recover_ground_truth_exactly(width):
    sim = simulate(replace(SMALL, n_agents=60, ping_rate=50))
    agg, grid = _recovered(sim, width)
    assert np.array_equal(agg.flows, sim.truth.flows(grid))
    assert np.array_equal(agg.occupancy, sim.truth.occupancy(grid))


def test_recovery_improves_with_ping_rate():
    ratios = []
    for rate in (0.5, 1.5, 5, 50):
        sim = simulate(replace(SMALL, n_agents=80, ping_rate=rate))
        agg, grid = _recovered(sim, 60)
        truth = sim.truth.flows(grid)
        ratios.append(np.minimum(agg.flows, truth).sum() / truth.sum())
    assert all(b >= a for a, b in zip(ratios, ratios[1:])), ratios
    assert ratios[-1] == 1.0 and ratios[0] < 1.0


def test_log_is_byte_identical(tmp_path):
    for name in ("a.csv", "b.csv"):
        write_log(simulate(replace(SMALL, n_agents=40)).log, tmp_path / name)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    write_log(simulate(replace(SMALL, n_agents=40, seed=6)).log, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_bytes() != (tmp_path / "a.csv").read_bytes()


def test_written_files_load_through_ingest(tmp_path):
    sim = simulate(replace(SMALL, n_agents=30))
    write_log(sim.log, tmp_path / "wifi_log.csv")
    write_campus(sim.campus, tmp_path)
    parsed = parse_log_file(tmp_path / "wifi_log.csv")
    assert len(parsed) == len(sim.log) and parsed.skipped == 0
    assert set(load_ap_mapping(tmp_path / "ap_mapping.csv")) == {ap.wifi_id for ap in sim.campus.aps}
    assert len(load_schedule(tmp_path / "schedule.csv")) == len(sim.campus.schedule)
    grid = sim.truth.grid(30, sim.campus.start_s, sim.campus.n_days)
    sim.truth.write(tmp_path, grid)
    occ = pd.read_csv(tmp_path / "truth_occupancy_30min.csv")
    assert list(occ.columns) == ["building_id", "interval_start", "occupancy_true"]
    assert occ["occupancy_true"].sum() == sim.truth.occupancy(grid).sum()
    fl = pd.read_csv(tmp_path / "truth_flows_30min.csv")
    assert list(fl.columns) == ["origin", "destination", "interval_start", "flow_true"]
    assert fl["flow_true"].sum() == len(sim.truth.transitions)
