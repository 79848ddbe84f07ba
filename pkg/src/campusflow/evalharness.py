"""Chronological split, training loop, metrics, benchmark grid and enrolment ablation."""

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import models
from . import numcore as nc
from .chains import DEFAULT_MAX_GAP_MIN, FeatureSet, aggregate, build_feature_table
from .graph import Building, build_od_graph
from .ingest import ParsedLog, anonymize, building_locations
from .kernels import Propagator
from .synth import SynthConfig, simulate

log = logging.getLogger(__name__)

MODEL_KINDS = ("gcn", "mlp", "lr")
METRIC_COLUMNS = ("interval", "model", "seed", "with_enrolment", "rmse_scaled", "srmse", "corr", "r2", "n_samples")
DEFAULT_SALT = b"campusflow-synthetic"


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# splitting and scaling


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.8
    boundary: int = None  # first test interval index


def split_boundary(intervals, train_fraction=0.8):
    """:class:`SplitConfig` whose boundary is the first test interval.

    The last training interval is the first one at which the cumulative share
    of samples reaches ``train_fraction``.
    """
    intervals = np.asarray(intervals)
    uniq, counts = np.unique(intervals, return_counts=True)
    if uniq.size < 2:
        raise ValueError("chronological split needs at least 2 distinct intervals")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    share = np.cumsum(counts) / counts.sum()
    k = int(np.searchsorted(share, train_fraction - 1e-12))
    k = min(k, uniq.size - 2)
    return SplitConfig(train_fraction, int(uniq[k + 1]))


def chrono_split(intervals, config=0.8):
    """Boolean ``(train, test)`` masks over per-sample interval indices.

    ``config`` is a train fraction or a :class:`SplitConfig`; an explicit
    boundary is used as given.
    """
    intervals = np.asarray(intervals)
    if not isinstance(config, SplitConfig):
        config = SplitConfig(float(config))
    if config.boundary is None:
        config = split_boundary(intervals, config.train_fraction)
    train = intervals < config.boundary
    if train.all() or not train.any():
        raise ValueError("split boundary leaves one side empty")
    return train, ~train


@dataclass
class PreparedData:
    """Scaled arrays for one split.  ``x_num`` is ``(T, V, F)``, ``y`` is ``(T, V)``."""

    x_num: np.ndarray
    tod: np.ndarray
    dow: np.ndarray
    y: np.ndarray
    intervals: np.ndarray
    time_slots: int

    @property
    def n_graphs(self):
        return self.x_num.shape[0]

    @property
    def n_nodes(self):
        return self.x_num.shape[1]

    def batch(self, idx):
        """Node-major stacked inputs for the graphs ``idx``."""
        idx = np.asarray(idx)
        v, b = self.n_nodes, idx.size
        x = np.ascontiguousarray(self.x_num[idx].transpose(1, 0, 2)).reshape(v * b, -1)
        tod = np.tile(self.tod[idx], v)
        dow = np.tile(self.dow[idx], v)
        y = np.ascontiguousarray(self.y[idx].T).reshape(v * b, 1)
        return x, tod, dow, y


def prepare(features, train_mask):
    """Fit min-max scalers on the training slices only and scale both splits."""
    num = features.numeric_columns
    x = features.x[:, :, num]
    feat_scaler = nc.MinMaxScaler().fit(x[train_mask].reshape(-1, len(num)))
    target_scaler = nc.MinMaxScaler().fit(features.y[train_mask].reshape(-1, 1))

    def build(mask):
        xs = feat_scaler.transform(x[mask].reshape(-1, len(num))).reshape(x[mask].shape)
        ys = target_scaler.transform(features.y[mask].reshape(-1, 1)).reshape(features.y[mask].shape)
        return PreparedData(xs, features.time_of_day[mask], features.day_of_week[mask], ys,
                            features.intervals[mask], features.grid.per_day)

    return build(train_mask), build(~train_mask), {"features": feat_scaler, "target": target_scaler}


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 300
    lr: float = 1e-3
    hidden_dim: int = 32
    embed_dim_time: int = 4
    embed_dim_dow: int = 2
    batch_size: int = None  # graphs per Adam step; None = full batch
    chunk_graphs: int = 64  # memory chunking when accumulating a full batch
    train_fraction: float = 0.8
    backend: str = "auto"

    def to_dict(self):
        return asdict(self)


def benchmark_config(width_minutes, epochs=12, lr=3e-3, batch_hours=4, **overrides):
    """Mini-batch settings used by the synthetic benchmark.

    Each Adam step sees ``batch_hours`` of interval-graphs, so every width gets
    the same number of steps per epoch.
    """
    batch = max(1, batch_hours * 60 // width_minutes)
    return TrainConfig(epochs=epochs, lr=lr, batch_size=batch, **overrides)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)
    wall_s: list = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "test_loss"])
            for i, (a, b) in enumerate(zip(self.train_loss, self.test_loss), start=1):
                w.writerow([i, repr(a), repr(b)])


@dataclass
class TrainResult:
    kind: str
    params: dict  # name -> ndarray
    history: TrainHistory
    model_config: dict


def _chunks(idx, size):
    for i in range(0, len(idx), size):
        yield idx[i : i + size]


def _loss_on(kind, params, data, op, chunk_graphs):
    """Mean squared error over all samples of ``data`` (no gradients)."""
    total, count = 0.0, 0
    for idx in _chunks(np.arange(data.n_graphs), chunk_graphs):
        pred = _predict_batch(kind, params, data, op, idx)
        _, _, _, y = data.batch(idx)
        diff = pred - y
        total += float(np.dot(diff.ravel(), diff.ravel()))
        count += diff.size
    return total / count if count else float("nan")


def _predict_batch(kind, params, data, op, idx):
    consts = {k: nc.Tensor(v.value if isinstance(v, nc.Tensor) else v) for k, v in params.items()}
    x, tod, dow, _ = data.batch(idx)
    xin = models.joined_input(consts, x, tod, dow)
    return models.forward(kind, consts, xin, op, len(idx)).value


def model_config_for(kind, data, cfg, seed):
    return models.GcnConfig(
        input_dim=data.x_num.shape[2],
        hidden_dim=cfg.hidden_dim,
        embed_dim_time=cfg.embed_dim_time,
        embed_dim_dow=cfg.embed_dim_dow,
        time_slots=data.time_slots,
        seed=seed,
    )


def train(kind, graph, train_data, test_data=None, cfg=None, seed=0):
    """Fit one model.  ``graph`` is an OdGraph, a dense operator or a Propagator
    (ignored for ``mlp`` and ``lr``).

    GCN and MLP use Adam on the scaled MSE.  With ``cfg.batch_size`` unset each
    epoch is one full-batch step; otherwise the training graphs are shuffled
    (seeded) and stepped through in batches.  Linear regression is solved in
    closed form and has an empty history.
    """
    cfg = cfg or TrainConfig()
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    if kind == "lr":
        return _train_lr(train_data, seed)
    op = None
    if kind == "gcn":
        op = _as_propagator(graph, cfg.backend)
    mcfg = model_config_for(kind, train_data, cfg, seed)
    params = models.init_params(kind, mcfg)
    opt = nc.Adam(params.values(), lr=cfg.lr)
    history = TrainHistory()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    n_rows_total = train_data.n_graphs * train_data.n_nodes
    all_idx = np.arange(train_data.n_graphs)

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        try:
            if cfg.batch_size is None:
                opt.zero_grad()
                epoch_loss = 0.0
                for idx in _chunks(all_idx, cfg.chunk_graphs):
                    weight = len(idx) * train_data.n_nodes / n_rows_total
                    epoch_loss += weight * _step_loss(kind, params, train_data, op, idx, weight)
                opt.step()
            else:
                order = rng.permutation(all_idx)
                epoch_loss, seen = 0.0, 0
                for idx in _chunks(order, cfg.batch_size):
                    opt.zero_grad()
                    loss = _step_loss(kind, params, train_data, op, np.sort(idx), 1.0)
                    opt.step()
                    epoch_loss += loss * len(idx)
                    seen += len(idx)
                epoch_loss /= seen
        except FloatingPointError as exc:
            raise TrainingError(f"{kind}: {exc} at epoch {epoch}") from exc
        history.train_loss.append(epoch_loss)
        test_loss = _loss_on(kind, params, test_data, op, cfg.chunk_graphs) if test_data is not None else float("nan")
        if test_data is not None and not math.isfinite(test_loss):
            raise TrainingError(f"{kind}: non-finite test loss at epoch {epoch}")
        history.test_loss.append(test_loss)
        history.wall_s.append(time.perf_counter() - t0)
        log.debug("%s epoch %d train %.5f test %.5f", kind, epoch, epoch_loss, test_loss)

    return TrainResult(kind, {k: p.value.copy() for k, p in params.items()}, history, mcfg.to_dict())


def _step_loss(kind, params, data, op, idx, scale):
    x, tod, dow, y = data.batch(idx)
    xin = models.joined_input(params, x, tod, dow)
    pred = models.forward(kind, params, xin, op, len(idx))
    loss = nc.mse(pred, y)
    nc.backward(loss, scale)
    return float(loss.value[0, 0])


def _as_propagator(graph, backend="auto"):
    if isinstance(graph, Propagator):
        return graph
    mat = graph.norm_adjacency if hasattr(graph, "norm_adjacency") else graph
    return Propagator(mat, backend=backend)


def _lr_rows(data, idx):
    x, tod, dow, y = data.batch(idx)
    return models.lr_design(x, tod, dow, data.time_slots), y[:, 0]


def _train_lr(train_data, seed, chunk_graphs=64):
    gram = xty = None
    for idx in _chunks(np.arange(train_data.n_graphs), chunk_graphs):
        xd, y = _lr_rows(train_data, idx)
        xa = np.hstack([xd, np.ones((xd.shape[0], 1))])
        g, r = xa.T @ xa, xa.T @ y
        gram = g if gram is None else gram + g
        xty = r if xty is None else xty + r
    w, b = models.ridge_solve(gram, xty)
    params = {"weights": w.reshape(-1, 1), "bias": np.array([[b]])}
    return TrainResult("lr", params, TrainHistory(), {"time_slots": train_data.time_slots, "seed": seed})


def predict(result, graph, data, chunk_graphs=64, backend="auto"):
    """Scaled predictions ``(T, V)`` for every graph in ``data``."""
    out = np.empty((data.n_graphs, data.n_nodes))
    op = _as_propagator(graph, backend) if result.kind == "gcn" else None
    for idx in _chunks(np.arange(data.n_graphs), chunk_graphs):
        if result.kind == "lr":
            xd, _ = _lr_rows(data, idx)
            pred = models.lr_predict(xd, result.params["weights"][:, 0], result.params["bias"][0, 0])
        else:
            pred = _predict_batch(result.kind, result.params, data, op, idx)[:, 0]
        out[idx] = pred.reshape(data.n_nodes, len(idx)).T
    return out


# ---------------------------------------------------------------------------
# metrics


def rmse(pred, obs):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    obs = np.asarray(obs, dtype=np.float64).ravel()
    if pred.shape != obs.shape:
        raise ValueError("rmse: shape mismatch")
    return math.sqrt(float(np.mean((pred - obs) ** 2)))


def srmse(pred, obs):
    """RMSE divided by the mean observed value; ``None`` when that mean is zero."""
    mean = float(np.mean(np.asarray(obs, dtype=np.float64)))
    if mean == 0.0:
        return None
    return rmse(pred, obs) / mean


@dataclass
class MetricsReport:
    rmse_scaled: float
    srmse: float  # None when undefined
    pearson_corr: float  # None when undefined
    r2: float  # None when undefined
    n_samples: int
    interval_minutes: int = 0
    model_name: str = ""
    with_enrolment: bool = False
    seed: int = 0

    def row(self):
        def fmt(v):
            return "NA" if v is None else repr(float(v))

        return [self.interval_minutes, self.model_name, self.seed, int(self.with_enrolment),
                fmt(self.rmse_scaled), fmt(self.srmse), fmt(self.pearson_corr), fmt(self.r2), self.n_samples]

    def to_dict(self):
        return asdict(self)


def compute_metrics(pred_scaled, target_scaled, scaler, **labels):
    """RMSE, Pearson and R^2 on scaled values; SRMSE on unscaled counts.

    Undefined statistics (zero variance, zero mean) are ``None``.
    """
    p = np.asarray(pred_scaled, dtype=np.float64).ravel()
    t = np.asarray(target_scaled, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError("compute_metrics: shape mismatch")
    err = rmse(p, t)
    raw_p = scaler.inverse_transform(p.reshape(-1, 1)).ravel()
    raw_t = scaler.inverse_transform(t.reshape(-1, 1)).ravel()
    sse = float(np.sum((p - t) ** 2))
    sst = float(np.sum((t - t.mean()) ** 2))
    if sst > 0:
        r2 = 1.0 - sse / sst
        direct = 1.0 - float(np.mean((p - t) ** 2)) / float(np.var(t))
        if abs(direct - r2) > 1e-10 * max(1.0, abs(r2)):
            raise AssertionError(f"R^2 cross-check failed: {r2} vs {direct}")
    else:
        r2 = None
    sp, st = float(np.std(p)), float(np.std(t))
    corr = None
    if sp > 0 and st > 0:
        corr = float(np.mean((p - p.mean()) * (t - t.mean())) / (sp * st))
        corr = max(-1.0, min(1.0, corr))
    return MetricsReport(err, srmse(raw_p, raw_t), corr, r2, int(p.size), **labels)


def write_metrics(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in reports:
            w.writerow(r.row())


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class SeedData:
    """Everything derived from one synthetic run, per interval width."""

    seed: int
    graph: object
    features: dict  # width -> FeatureSet (with enrolment columns)
    sim: object = None


def build_dataset(anon, mapping, schedule=None, widths=(15, 30, 60), max_gap=DEFAULT_MAX_GAP_MIN,
                  edge_weight="raw", self_loops=True, symmetrize=True, seed=0):
    """Anonymized log + AP mapping (+ schedule) -> graph and per-width feature tables.

    Feature tables carry the enrolment columns whenever a schedule is given.
    """
    locs = building_locations(mapping)
    buildings = [Building(b, lat, lon) for b, (lat, lon) in locs.items()]
    graph = build_od_graph(buildings, edge_weight=edge_weight, self_loops=self_loops, symmetrize=symmetrize)
    feats = {}
    for w in widths:
        agg = aggregate(anon, w, building_ids=list(locs), max_gap=max_gap, schedule=schedule)
        feats[w] = build_feature_table(agg, graph.nodes, with_enrolment=schedule is not None)
    return SeedData(seed, graph, feats)


def synthetic_pipeline(synth_config, widths=(15, 30, 60), salt=DEFAULT_SALT, max_gap=DEFAULT_MAX_GAP_MIN,
                       edge_weight="raw", self_loops=True, symmetrize=True):
    """simulate -> anonymize -> aggregate -> graph -> feature tables."""
    sim = simulate(synth_config)
    mapping = {ap.wifi_id: ap for ap in sim.campus.aps}
    anon, _ = anonymize(ParsedLog(sim.log, 0), mapping, salt)
    data = build_dataset(anon, mapping, sim.campus.schedule, widths, max_gap, edge_weight, self_loops, symmetrize,
                         seed=synth_config.seed)
    data.sim = sim
    return data


def drop_enrolment(features):
    keep = [i for i, c in enumerate(features.columns) if not c.startswith("enrol_")]
    return FeatureSet(features.x[:, :, keep], features.y, features.intervals,
                      tuple(features.columns[i] for i in keep), features.nodes, features.grid)


@dataclass
class CellResult:
    report: MetricsReport
    result: TrainResult
    scalers: dict
    test_pred: np.ndarray
    test_target: np.ndarray


def run_cell(features, graph, kind, seed, cfg=None, with_enrolment=False):
    """Train and score one (interval, model, seed) cell."""
    cfg = cfg or TrainConfig()
    fs = features if with_enrolment else drop_enrolment(features)
    if with_enrolment and not fs.with_enrolment:
        raise ValueError("enrolment features requested but the feature table has none")
    train_mask, _ = chrono_split(fs.intervals, cfg.train_fraction)
    tr, te, scalers = prepare(fs, train_mask)
    op = _as_propagator(graph, cfg.backend) if kind == "gcn" else None
    result = train(kind, op, tr, te, cfg, seed)
    pred = predict(result, op, te, backend=cfg.backend)
    report = compute_metrics(pred, te.y, scalers["target"], interval_minutes=fs.grid.width_minutes,
                             model_name=kind, with_enrolment=with_enrolment, seed=seed)
    return CellResult(report, result, scalers, pred, te.y)


@dataclass
class BenchmarkResult:
    reports: list
    cells: dict  # (interval, model, seed) -> CellResult

    def median_rmse(self, interval, model):
        vals = [r.rmse_scaled for r in self.reports if r.interval_minutes == interval and r.model_name == model]
        return float(np.median(vals))


def run_benchmark(intervals=(15, 30, 60), model_kinds=MODEL_KINDS, seeds=(1, 2, 3, 4, 5), synth=None, cfg=None,
                  with_enrolment=False, seed_data=None, graph_options=None):
    """One report per (interval, model, seed), ordered by interval, model, seed.

    ``synth`` is a base :class:`SynthConfig` whose seed is replaced per run.
    ``seed_data`` may map seeds to precomputed :class:`SeedData`.  ``cfg`` is a
    :class:`TrainConfig` or a callable mapping the interval width to one.
    """
    synth = synth or SynthConfig()
    cfg = cfg or TrainConfig()
    seed_data = dict(seed_data or {})
    cells = {}
    for seed in seeds:
        data = seed_data.get(seed)
        if data is None:
            data = synthetic_pipeline(replace(synth, seed=seed), widths=intervals, **(graph_options or {}))
        for width in intervals:
            if width not in data.features:
                raise ValueError(f"no aggregated data for the {width}-minute interval")
            for kind in model_kinds:
                cell_cfg = cfg(width) if callable(cfg) else cfg
                cell = run_cell(data.features[width], data.graph, kind, seed, cell_cfg, with_enrolment)
                cells[(width, kind, seed)] = cell
                log.info("interval=%d model=%s seed=%d rmse=%.4f", width, kind, seed, cell.report.rmse_scaled)
    order = sorted(cells, key=lambda k: (k[0], model_kinds.index(k[1]), k[2]))
    return BenchmarkResult([cells[k].report for k in order], {k: cells[k] for k in order})


@dataclass
class AblationResult:
    interval: int
    with_enrolment: dict  # seed -> CellResult
    without_enrolment: dict

    def final_test_losses(self, arm):
        cells = self.with_enrolment if arm else self.without_enrolment
        return {s: c.result.history.test_loss[-1] for s, c in cells.items()}


def run_ablation(seeds=(1, 2, 3), interval=15, synth=None, cfg=None, seed_data=None, kind="gcn"):
    """Paired runs differing only in the two enrolment feature columns."""
    synth = synth or SynthConfig()
    cfg = cfg or TrainConfig()
    seed_data = dict(seed_data or {})
    with_arm, without_arm = {}, {}
    for seed in seeds:
        data = seed_data.get(seed)
        if data is None:
            data = synthetic_pipeline(replace(synth, seed=seed), widths=(interval,))
        feats = data.features[interval]
        if not feats.with_enrolment:
            raise ValueError("enrolment requested but no schedule was joined")
        with_arm[seed] = run_cell(feats, data.graph, kind, seed, cfg, with_enrolment=True)
        without_arm[seed] = run_cell(feats, data.graph, kind, seed, cfg, with_enrolment=False)
    return AblationResult(interval, with_arm, without_arm)


def summary(bench=None, ablation=None):
    out = {}
    if bench is not None:
        out["metrics"] = [r.to_dict() for r in bench.reports]
        grid = {}
        for r in bench.reports:
            grid.setdefault(str(r.interval_minutes), {}).setdefault(r.model_name, []).append(r.rmse_scaled)
        out["median_rmse_scaled"] = {w: {m: float(np.median(v)) for m, v in d.items()} for w, d in grid.items()}
    if ablation is not None:
        out["ablation"] = {
            "interval": ablation.interval,
            "final_test_loss_with": ablation.final_test_losses(True),
            "final_test_loss_without": ablation.final_test_losses(False),
        }
    return out


def write_summary(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")
