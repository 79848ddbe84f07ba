import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from campusflow import evalharness as eh
from campusflow import models
from campusflow.numcore import MinMaxScaler


def test_split_example():
    train, test = eh.chrono_split(np.arange(10), 0.8)
    assert np.flatnonzero(train).tolist() == list(range(8))
    assert np.flatnonzero(test).tolist() == [8, 9]
    assert eh.split_boundary(np.arange(10)).boundary == 8


def test_split_errors():
    with pytest.raises(ValueError):
        eh.chrono_split(np.full(5, 3), 0.8)
    with pytest.raises(ValueError):
        eh.split_boundary(np.arange(4), 1.0)
    with pytest.raises(ValueError):
        eh.chrono_split(np.arange(4), eh.SplitConfig(boundary=0))


def test_split_with_explicit_boundary():
    train, test = eh.chrono_split(np.array([0, 0, 1, 2, 2, 3]), eh.SplitConfig(boundary=2))
    assert train.tolist() == [True, True, True, False, False, False]


@given(st.lists(st.integers(0, 40), min_size=2, max_size=200), st.floats(0.05, 0.95))
def test_split_never_straddles(intervals, fraction):
    intervals = np.array(intervals)
    if np.unique(intervals).size < 2:
        with pytest.raises(ValueError):
            eh.chrono_split(intervals, fraction)
        return
    train, test = eh.chrono_split(intervals, fraction)
    assert train.any() and test.any()
    assert intervals[train].max() < intervals[test].min()


def test_metrics_identity():
    t = np.array([-1.0, 0.0, 0.5, 1.0])
    scaler = MinMaxScaler().fit(np.array([0.0, 10.0]))
    rep = eh.compute_metrics(t, t, scaler)
    assert rep.rmse_scaled == 0.0 and rep.srmse == 0.0 and rep.r2 == 1.0
    assert rep.pearson_corr == pytest.approx(1.0, abs=1e-15)
    assert rep.n_samples == 4


def test_srmse_hand_value():
    value = eh.srmse([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])
    assert eh.rmse([2.0, 2.0, 2.0], [1.0, 2.0, 3.0]) == pytest.approx(math.sqrt(2 / 3), abs=1e-15)
    assert value == pytest.approx(0.40825, abs=1e-5)
    # the same numbers through the scaled path
    scaler = MinMaxScaler().fit(np.array([1.0, 3.0]))
    rep = eh.compute_metrics(scaler.transform(np.array([2.0, 2.0, 2.0])),
                             scaler.transform(np.array([1.0, 2.0, 3.0])), scaler)
    assert rep.srmse == pytest.approx(value, abs=1e-12)
    assert rep.pearson_corr is None  # constant prediction


@given(st.lists(st.floats(0.1, 100.0), min_size=2, max_size=30), st.sampled_from([0.5, 2.0, 10.0]),
       st.integers(0, 1000))
def test_srmse_homogeneous(obs, k, seed):
    obs = np.array(obs)
    pred = obs + np.random.default_rng(seed).normal(0, 1, obs.size)
    assert eh.srmse(obs, obs) == 0.0
    assert abs(eh.srmse(k * pred, k * obs) - eh.srmse(pred, obs)) <= 1e-12


def test_undefined_metrics_are_none():
    scaler = MinMaxScaler().fit(np.array([0.0, 4.0]))
    rep = eh.compute_metrics(np.array([0.1, -0.2, 0.3]), np.zeros(3), scaler)
    assert rep.r2 is None and rep.pearson_corr is None and rep.srmse is not None
    # observed counts all zero -> SRMSE undefined
    rep = eh.compute_metrics(np.array([0.0, -1.0]), np.array([-1.0, -1.0]), scaler)
    assert rep.srmse is None
    assert rep.row()[5:8] == ["NA", "NA", "NA"]


@given(st.integers(0, 10_000))
def test_metric_invariants(seed):
    rng = np.random.default_rng(seed)
    t = rng.uniform(-1, 1, 50)
    p = t + rng.normal(0, 0.5, 50)
    rep = eh.compute_metrics(p, t, MinMaxScaler().fit(np.array([0.0, 20.0])))
    assert rep.srmse >= 0 and rep.r2 <= 1 and abs(rep.pearson_corr) <= 1
    sst = np.sum((t - t.mean()) ** 2)
    assert abs(rep.r2 - (1 - np.sum((p - t) ** 2) / sst)) <= 1e-10


def _split(small_data, width=60, enrolment=False):
    fs = small_data.features[width]
    fs = fs if enrolment else eh.drop_enrolment(fs)
    train_mask, _ = eh.chrono_split(fs.intervals, 0.8)
    return fs, train_mask, eh.prepare(fs, train_mask)


def test_scalers_see_training_rows_only(small_data):
    fs, train_mask, (tr, te, scalers) = _split(small_data)
    num = fs.numeric_columns
    ref = MinMaxScaler().fit(fs.x[train_mask][:, :, num].reshape(-1, len(num)))
    assert np.array_equal(scalers["features"].min_, ref.min_) and np.array_equal(scalers["features"].max_, ref.max_)
    # wiping the test slices cannot move the fitted bounds
    poisoned = eh.drop_enrolment(small_data.features[60])
    poisoned.y = poisoned.y.copy()  # the fixture is shared across tests
    poisoned.x[~train_mask] = 1e9
    poisoned.y[~train_mask] = -1e9
    _, _, other = eh.prepare(poisoned, train_mask)
    for name in ("features", "target"):
        assert np.array_equal(other[name].min_, scalers[name].min_)
        assert np.array_equal(other[name].max_, scalers[name].max_)
    assert tr.x_num.min() >= -1 - 1e-12 and tr.x_num.max() <= 1 + 1e-12
    assert tr.intervals.max() < te.intervals.min()


def test_batch_is_node_major(small_data):
    _, _, (tr, _, _) = _split(small_data)
    x, tod, dow, y = tr.batch(np.array([3, 5]))
    v = tr.n_nodes
    assert x.shape == (2 * v, tr.x_num.shape[2])
    assert np.array_equal(x[2 * 7 + 1], tr.x_num[5, 7]) and y[2 * 7, 0] == tr.y[3, 7]
    assert tod[1] == tr.tod[5] and dow[0] == tr.dow[3]


def test_zero_epochs_returns_initial_params(small_data):
    _, _, (tr, te, _) = _split(small_data)
    cfg = eh.TrainConfig(epochs=0, hidden_dim=8)
    for kind in ("gcn", "mlp"):
        res = eh.train(kind, small_data.graph, tr, te, cfg, seed=4)
        init = models.init_params(kind, eh.model_config_for(kind, tr, cfg, 4))
        assert len(res.history) == 0
        for k, p in init.items():
            assert np.array_equal(res.params[k], p.value)


@pytest.mark.parametrize("batch_size", [None, 16])
def test_training_is_deterministic_and_reduces_loss(small_data, batch_size):
    _, _, (tr, te, _) = _split(small_data)
    cfg = eh.TrainConfig(epochs=25, batch_size=batch_size)
    a = eh.train("gcn", small_data.graph, tr, te, cfg, seed=2)
    b = eh.train("gcn", small_data.graph, tr, te, cfg, seed=2)
    assert a.history.train_loss == b.history.train_loss and a.history.test_loss == b.history.test_loss
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])
    assert len(a.history) == 25 and len(a.history.wall_s) == 25
    assert a.history.train_loss[-1] < a.history.train_loss[0]


def test_full_batch_chunking_does_not_change_the_step(small_data):
    _, _, (tr, _, _) = _split(small_data)
    one = eh.train("mlp", None, tr, None, eh.TrainConfig(epochs=3, chunk_graphs=1000), seed=1)
    many = eh.train("mlp", None, tr, None, eh.TrainConfig(epochs=3, chunk_graphs=7), seed=1)
    for k in one.params:
        assert np.allclose(one.params[k], many.params[k], rtol=0, atol=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_input_aborts_with_epoch(small_data):
    _, _, (tr, te, _) = _split(small_data)
    tr.x_num[0, 0, 0] = np.inf
    with pytest.raises(eh.TrainingError, match="epoch 1"):
        eh.train("mlp", None, tr, te, eh.TrainConfig(epochs=2), seed=0)


def test_lr_closed_form_matches_direct_fit(small_data):
    _, _, (tr, te, _) = _split(small_data)
    res = eh.train("lr", None, tr, te, seed=0)
    x, tod, dow, y = tr.batch(np.arange(tr.n_graphs))
    w, b = models.lr_fit(models.lr_design(x, tod, dow, tr.time_slots), y[:, 0])
    assert np.allclose(res.params["weights"][:, 0], w, atol=1e-8) and abs(res.params["bias"][0, 0] - b) < 1e-8
    pred = eh.predict(res, None, te)
    xt, tt, dt, _ = te.batch(np.arange(te.n_graphs))
    direct = models.lr_predict(models.lr_design(xt, tt, dt, te.time_slots), w, b)
    assert np.allclose(pred.T.ravel(), direct, atol=1e-8)


def test_unknown_kind_rejected(small_data):
    _, _, (tr, _, _) = _split(small_data)
    with pytest.raises(ValueError):
        eh.train("svm", None, tr)


def test_benchmark_rows_ordering_and_determinism(small_data, tmp_path):
    cfg = eh.TrainConfig(epochs=1, hidden_dim=8)
    runs = [eh.run_benchmark(seeds=(11,), cfg=cfg, seed_data={11: small_data}) for _ in range(2)]
    reports = runs[0].reports
    assert len(reports) == 9
    assert [(r.interval_minutes, r.model_name) for r in reports] == [
        (w, m) for w in (15, 30, 60) for m in ("gcn", "mlp", "lr")
    ]
    assert [r.to_dict() for r in reports] == [r.to_dict() for r in runs[1].reports]
    path = tmp_path / "metrics.csv"
    eh.write_metrics(reports, path)
    rows = list(csv.reader(path.open()))
    assert tuple(rows[0]) == eh.METRIC_COLUMNS and len(rows) == 10
    payload = eh.summary(runs[0])
    assert set(payload["median_rmse_scaled"]) == {"15", "30", "60"}


def test_benchmark_missing_width_is_named(small_data):
    partial = eh.SeedData(11, small_data.graph, {60: small_data.features[60]})
    with pytest.raises(ValueError, match="30-minute"):
        eh.run_benchmark(intervals=(30,), seeds=(11,), cfg=eh.TrainConfig(epochs=1), seed_data={11: partial})


def test_ablation_arms_differ_by_enrolment_columns(small_data):
    res = eh.run_ablation(seeds=(11,), interval=60, cfg=eh.TrainConfig(epochs=2, hidden_dim=8),
                          seed_data={11: small_data})
    with_cell, without_cell = res.with_enrolment[11], res.without_enrolment[11]
    dim_with = with_cell.result.model_config["input_dim"]
    dim_without = without_cell.result.model_config["input_dim"]
    assert dim_with - dim_without == 2
    assert with_cell.report.with_enrolment and not without_cell.report.with_enrolment
    assert set(res.final_test_losses(True)) == {11}


def test_ablation_without_schedule_errors(small_sim):
    from campusflow.ingest import ParsedLog, anonymize

    mapping = {ap.wifi_id: ap for ap in small_sim.campus.aps}
    anon, _ = anonymize(ParsedLog(small_sim.log, 0), mapping, b"test-salt")
    bare = eh.build_dataset(anon, mapping, None, widths=(60,))
    assert not bare.features[60].with_enrolment
    with pytest.raises(ValueError, match="schedule"):
        eh.run_ablation(seeds=(11,), interval=60, cfg=eh.TrainConfig(epochs=1), seed_data={11: bare})


def test_history_csv(tmp_path):
    hist = eh.TrainHistory([0.5, 0.25], [0.6, 0.3], [0.1, 0.1])
    hist.write_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines() == ["epoch,train_loss,test_loss", "1,0.5,0.6", "2,0.25,0.3"]
