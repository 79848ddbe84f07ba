"""Command-line entry point: simulate, ingest, aggregate, graph, train, evaluate, ablate, report.

Every command writes ``config_<command>.txt`` into its output directory.  That
file uses the same flat ``key = value`` format accepted by ``--config``, so a
run can be repeated with ``campusflow <command> --config <file>``.  Flags given
on the command line override values from the file.

Exit codes: 0 success, 1 invalid input or configuration, 2 failure while running.
"""

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import evalharness as eh
from . import numcore as nc
from . import plots
from .chains import DEFAULT_MAX_GAP_MIN, VALID_WIDTHS, aggregate, build_feature_table, write_feature_table
from .chains import write_flows, write_snapshots
from .graph import WEIGHT_MODES, Building, build_od_graph, write_graph
from .ingest import SchemaError, anonymize, building_locations, load_ap_mapping, load_schedule, parse_log_file
from .ingest import read_anon_log, write_anon_log
from .synth import SynthConfig, simulate, write_campus, write_log

log = logging.getLogger("campusflow")

RAW_LOG = "wifi_log.csv"
MAPPING = "ap_mapping.csv"
SCHEDULE = "schedule.csv"
ANON_LOG = "anon_log.csv"
DEFAULT_SALT = eh.DEFAULT_SALT.decode()
# never written to saved configs: a stored salt would let anyone re-derive device hashes
SECRET_KEYS = ("salt",)


class UsageError(Exception):
    """Bad flags, config keys or missing inputs (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config files


def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment.  Keys use underscores or dashes."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(str(path))
    out = {}
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def config_to_argv(parser, values):
    """Turn config entries into flags for ``parser``; unknown keys are rejected."""
    actions = {a.dest: a for a in parser._actions if a.option_strings}
    argv = []
    for key, value in values.items():
        action = actions.get(key)
        if action is None or key == "config":
            raise UsageError(f"unknown config key {key!r}")
        flag = next(f for f in action.option_strings if f.startswith("--") and not f.startswith("--no-"))
        if isinstance(action, argparse.BooleanOptionalAction):
            if value.lower() in ("1", "true", "yes", "on"):
                argv.append(flag)
            elif value.lower() in ("0", "false", "no", "off"):
                argv.append("--no-" + flag[2:])
            else:
                raise UsageError(f"config key {key!r} needs a boolean, got {value!r}")
        else:
            argv.extend([flag, value])
    return argv


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def write_config(args, path):
    skip = {"command", "config", "handler"} | set(SECRET_KEYS)
    lines = [f"# campusflow {args.command}"]
    for key in sorted(vars(args)):
        value = getattr(args, key)
        if key in skip or value is None:
            continue
        lines.append(f"{key} = {_format_value(value)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# argument types


def _int_list(text):
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text):
    return [x.strip() for x in str(text).split(",") if x.strip()]


def _interval(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"interval must be an integer, got {text!r}")
    if value not in VALID_WIDTHS:
        raise argparse.ArgumentTypeError(f"interval must be one of {VALID_WIDTHS}")
    return value


def _on_off(text):
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text


def _nonnegative_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be nonnegative")
    return value


def _fraction(text):
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError("train fraction must lie strictly between 0 and 1")
    return value


# ---------------------------------------------------------------------------
# shared helpers


def _require(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(str(path))
    return path


def _input(args, name, default_name):
    value = getattr(args, name, None)
    return _require(value if value else Path(args.out_dir) / default_name)


def _out_dir(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _graph_options(args):
    return dict(edge_weight=args.edge_weight, self_loops=args.self_loops == "on")


def _train_config(args):
    return eh.TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        hidden_dim=args.hidden_dim,
        batch_size=args.batch_size or None,
        train_fraction=args.train_fraction,
    )


def _schedule_path(args, needed):
    path = Path(args.schedule) if args.schedule else Path(args.out_dir) / SCHEDULE
    if path.is_file():
        return path
    if needed or args.schedule:
        raise FileNotFoundError(str(path))
    return None


def _load_run_data(args, widths, need_schedule):
    anon = read_anon_log(_input(args, "anon_log", ANON_LOG))
    mapping = load_ap_mapping(_input(args, "mapping", MAPPING))
    sched_path = _schedule_path(args, need_schedule)
    schedule = load_schedule(sched_path) if sched_path else None
    return eh.build_dataset(anon, mapping, schedule, widths, args.max_gap_min, seed=args.seed,
                            **_graph_options(args))


def _write_cell_outputs(out, cell, features, tag):
    """Checkpoint, history, predictions (unscaled) and a one-row metrics table."""
    result = cell.result
    manifest = {
        "model": result.kind,
        "model_config": result.model_config,
        "feature_columns": [c for c in features.columns],
        "interval_minutes": features.grid.width_minutes,
        "with_enrolment": cell.report.with_enrolment,
    }
    nc.save_checkpoint(out / f"checkpoint_{tag}.json", result.params, cell.scalers, manifest)
    result.history.write_csv(out / f"history_{tag}.csv")
    eh.write_metrics([cell.report], out / f"metrics_{tag}.csv")
    write_predictions(out / f"predictions_{tag}.csv", cell, features)


def write_predictions(path, cell, features):
    scaler = cell.scalers["target"]
    t_count = cell.test_pred.shape[0]
    test_intervals = features.intervals[-t_count:]
    obs = scaler.inverse_transform(cell.test_target.reshape(-1, 1)).reshape(cell.test_target.shape)
    pred = scaler.inverse_transform(cell.test_pred.reshape(-1, 1)).reshape(cell.test_pred.shape)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["interval", "origin", "destination", "observed", "predicted"])
        for i, t in enumerate(test_intervals):
            for v, (o, d) in enumerate(features.nodes):
                w.writerow([int(t), o, d, repr(float(obs[i, v])), repr(float(pred[i, v]))])


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args):
    out = _out_dir(args)
    cfg = SynthConfig(n_buildings=args.n_buildings, n_agents=args.n_agents, weeks=args.weeks, seed=args.seed,
                      ping_rate=args.ping_rate, enrolment_coupling=args.enrolment_coupling)
    sim = simulate(cfg)
    write_log(sim.log, out / RAW_LOG)
    write_campus(sim.campus, out)
    for w in VALID_WIDTHS:
        sim.truth.write(out, sim.truth.grid(w, sim.campus.start_s, sim.campus.n_days))
    log.info("simulated %d log rows, %d transitions", len(sim.log), len(sim.truth.transitions))
    return 0


def cmd_ingest(args):
    out = _out_dir(args)
    parsed = parse_log_file(_input(args, "log", RAW_LOG))
    mapping = load_ap_mapping(_input(args, "mapping", MAPPING))
    frame, counts = anonymize(parsed, mapping, args.salt.encode())
    write_anon_log(frame, out / ANON_LOG, counts)
    log.info("anonymized %d of %d rows", counts.rows_out, counts.rows_in)
    return 0


def cmd_aggregate(args):
    out = _out_dir(args)
    anon = read_anon_log(_input(args, "anon_log", ANON_LOG))
    mapping = load_ap_mapping(_input(args, "mapping", MAPPING))
    sched_path = _schedule_path(args, False)
    schedule = load_schedule(sched_path) if sched_path else None
    ids = list(building_locations(mapping))
    agg = aggregate(anon, args.interval, building_ids=ids, max_gap=args.max_gap_min, schedule=schedule)
    write_snapshots(agg, out / f"snapshots_{args.interval}min.csv")
    write_flows(agg, out / f"flows_{args.interval}min.csv")
    if args.features:
        locs = building_locations(mapping)
        nodes = [(o, d) for o in locs for d in locs if o != d]
        feats = build_feature_table(agg, nodes, with_enrolment=schedule is not None)
        write_feature_table(feats, out / f"features_{args.interval}min.csv")
    log.info("aggregated %d legs onto %d intervals", agg.n_legs, agg.grid.n_intervals)
    return 0


def cmd_graph(args):
    out = _out_dir(args)
    mapping = load_ap_mapping(_input(args, "mapping", MAPPING))
    buildings = [Building(b, lat, lon) for b, (lat, lon) in building_locations(mapping).items()]
    graph = build_od_graph(buildings, **_graph_options(args))
    gdir = out / "graph"
    gdir.mkdir(exist_ok=True)
    write_graph(graph, gdir)
    log.info("graph with %d nodes and %d edges", graph.n_nodes, len(graph.edges))
    return 0


def cmd_train(args):
    out = _out_dir(args)
    data = _load_run_data(args, (args.interval,), args.with_enrolment)
    feats = data.features[args.interval]
    cell = eh.run_cell(feats, data.graph, args.model, args.seed, _train_config(args), args.with_enrolment)
    if not args.with_enrolment:
        feats = eh.drop_enrolment(feats)
    _write_cell_outputs(out, cell, feats, f"{args.interval}min_{args.model}")
    log.info("%s at %d min: scaled rmse %.5f", args.model, args.interval, cell.report.rmse_scaled)
    return 0


def cmd_evaluate(args):
    out = _out_dir(args)
    cfg = _train_config(args)
    for m in args.models:
        if m not in eh.MODEL_KINDS:
            raise UsageError(f"unknown model {m!r}; expected a subset of {eh.MODEL_KINDS}")
    if args.synthetic_seeds:
        synth = SynthConfig(n_agents=args.n_agents, weeks=args.weeks)
        bench = eh.run_benchmark(tuple(args.intervals), tuple(args.models), tuple(args.synthetic_seeds), synth, cfg,
                                 args.with_enrolment, graph_options=_graph_options(args))
        cells = bench.cells
        feats_of = None
    else:
        data = _load_run_data(args, tuple(args.intervals), args.with_enrolment)
        bench = eh.run_benchmark(tuple(args.intervals), tuple(args.models), (args.seed,), cfg=cfg,
                                 with_enrolment=args.with_enrolment, seed_data={args.seed: data})
        cells = bench.cells
        feats_of = data.features
    eh.write_metrics(bench.reports, out / "metrics.csv")
    for (w, kind, seed), cell in cells.items():
        # seed-tagged so a `train` run in the same directory is never overwritten
        tag = f"{w}min_{kind}_seed{seed}"
        cell.result.history.write_csv(out / f"history_{tag}.csv")
        if feats_of is not None:
            fs = feats_of[w] if args.with_enrolment else eh.drop_enrolment(feats_of[w])
            write_predictions(out / f"predictions_{tag}.csv", cell, fs)
    eh.write_summary(out / "summary.json", eh.summary(bench))
    return 0


def cmd_ablate(args):
    out = _out_dir(args)
    cfg = _train_config(args)
    if args.synthetic_seeds:
        synth = SynthConfig(n_agents=args.n_agents, weeks=args.weeks)
        ab = eh.run_ablation(tuple(args.synthetic_seeds), args.interval, synth, cfg)
    else:
        data = _load_run_data(args, (args.interval,), True)
        ab = eh.run_ablation((args.seed,), args.interval, cfg=cfg, seed_data={args.seed: data})
    reports = []
    for arm, cells in (("with", ab.with_enrolment), ("without", ab.without_enrolment)):
        for seed, cell in cells.items():
            cell.result.history.write_csv(out / f"history_ablation_{arm}_seed{seed}.csv")
            reports.append(cell.report)
    eh.write_metrics(reports, out / "metrics_ablation.csv")
    eh.write_summary(out / "summary_ablation.json", eh.summary(ablation=ab))
    return 0


def _read_history(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [float(r["test_loss"]) for r in rows], [float(r["train_loss"]) for r in rows]


def cmd_report(args):
    run_dirs = [Path(p) for p in args.run_dirs]
    for d in run_dirs:
        if not d.is_dir():
            raise FileNotFoundError(str(d))
    out = Path(args.out_dir) if args.out_dir else run_dirs[0]
    out.mkdir(parents=True, exist_ok=True)
    produced = 0
    for w in VALID_WIDTHS:
        preds = sorted(p for d in run_dirs for p in d.glob(f"predictions_{w}min_*.csv"))
        if preds:
            rows = []
            for p in preds:
                model = p.stem.split("_", 2)[2]
                with open(p, newline="") as fh:
                    rows.extend((model, r["observed"], r["predicted"]) for r in csv.DictReader(fh))
            with open(out / f"scatter_{w}min.csv", "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["model", "observed", "predicted"])
                wr.writerows(rows)
            shown = "gcn" if any(r[0] == "gcn" for r in rows) else rows[0][0] if rows else ""
            sel = [r for r in rows if r[0] == shown]
            svg = plots.scatter_svg([float(r[1]) for r in sel], [float(r[2]) for r in sel],
                                    title=f"{shown} observed vs predicted flows, {w}-min intervals")
            (out / f"scatter_{w}min.svg").write_text(svg, encoding="utf-8")
            produced += 1
        hists = sorted(p for d in run_dirs for p in d.glob(f"history_{w}min_*.csv"))
        series = []
        for p in hists:
            test, _ = _read_history(p)
            if test:
                series.append((p.stem.split("_", 2)[2], test))
        if series:
            svg = plots.lines_svg(series, title=f"test loss, {w}-min intervals")
            (out / f"loss_{w}min.svg").write_text(svg, encoding="utf-8")
            produced += 1
    arms = []
    for arm in ("with", "without"):
        curves = [_read_history(p)[0] for d in run_dirs for p in sorted(d.glob(f"history_ablation_{arm}_*.csv"))]
        curves = [c for c in curves if c]
        if curves:
            n = min(len(c) for c in curves)
            arms.append((f"{arm} enrolment", np.median([c[:n] for c in curves], axis=0).tolist()))
    if arms:
        svg = plots.lines_svg(arms, title="enrolment ablation, median test loss")
        (out / "loss_ablation.svg").write_text(svg, encoding="utf-8")
        produced += 1
    if not produced:
        raise UsageError("no predictions or histories found in " + ", ".join(str(d) for d in run_dirs))
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(p):
    p.add_argument("--config", help="flat key = value file; command-line flags override it")
    p.add_argument("--out-dir", default="run", help="directory for inputs and outputs (default: run)")
    p.add_argument("--seed", type=int, default=0)
    _add_log_level(p)


def _add_log_level(p):
    p.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))


def _add_inputs(p, anon=True):
    p.add_argument("--mapping", help=f"AP mapping CSV (default: <out-dir>/{MAPPING})")
    if anon:
        p.add_argument("--anon-log", help=f"anonymized log CSV (default: <out-dir>/{ANON_LOG})")
    p.add_argument("--schedule", help=f"schedule CSV (default: <out-dir>/{SCHEDULE} when present)")
    p.add_argument("--max-gap-min", type=float, default=DEFAULT_MAX_GAP_MIN)


def _add_graph(p):
    p.add_argument("--edge-weight", choices=WEIGHT_MODES, default="raw")
    p.add_argument("--self-loops", type=_on_off, default="on", help="on or off (default: on)")


def _add_training(p):
    defaults = eh.TrainConfig()
    p.add_argument("--epochs", type=_nonnegative_int, default=defaults.epochs)
    p.add_argument("--lr", type=float, default=defaults.lr)
    p.add_argument("--hidden-dim", type=int, default=defaults.hidden_dim)
    p.add_argument("--batch-size", type=_nonnegative_int, default=0,
                   help="interval-graphs per optimizer step; 0 means full batch")
    p.add_argument("--train-fraction", type=_fraction, default=defaults.train_fraction)
    p.add_argument("--with-enrolment", action=argparse.BooleanOptionalAction, default=False)


def _add_synthetic(p):
    p.add_argument("--synthetic-seeds", type=_int_list, default=None,
                   help="run on freshly simulated campuses for these seeds instead of the run directory")
    p.add_argument("--n-agents", type=int, default=SynthConfig.n_agents)
    p.add_argument("--weeks", type=int, default=SynthConfig.weeks)


def build_parser():
    parser = _Parser(prog="campusflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="write a synthetic campus, WiFi log and ground truth")
    _add_common(p)
    p.add_argument("--n-buildings", type=int, default=SynthConfig.n_buildings)
    p.add_argument("--n-agents", type=int, default=SynthConfig.n_agents)
    p.add_argument("--weeks", type=int, default=SynthConfig.weeks)
    p.add_argument("--ping-rate", type=float, default=SynthConfig.ping_rate)
    p.add_argument("--enrolment-coupling", type=float, default=SynthConfig.enrolment_coupling)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("ingest", help="hash device ids and resolve access points to buildings")
    _add_common(p)
    p.add_argument("--log", help=f"raw WiFi log CSV (default: <out-dir>/{RAW_LOG})")
    p.add_argument("--mapping", help=f"AP mapping CSV (default: <out-dir>/{MAPPING})")
    p.add_argument("--salt", default=DEFAULT_SALT, help="salt for device hashing (not saved to the run config)")
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("aggregate", help="trip legs, snapshots and flows on one interval grid")
    _add_common(p)
    _add_inputs(p)
    p.add_argument("--interval", type=_interval, default=15)
    p.add_argument("--features", action=argparse.BooleanOptionalAction, default=False,
                   help="also write the long-format feature table")
    p.set_defaults(handler=cmd_aggregate)

    p = sub.add_parser("graph", help="build the OD-pair graph")
    _add_common(p)
    p.add_argument("--mapping", help=f"AP mapping CSV (default: <out-dir>/{MAPPING})")
    _add_graph(p)
    p.set_defaults(handler=cmd_graph)

    p = sub.add_parser("train", help="train and score one model at one interval width")
    _add_common(p)
    _add_inputs(p)
    _add_graph(p)
    _add_training(p)
    p.add_argument("--interval", type=_interval, default=15)
    p.add_argument("--model", choices=eh.MODEL_KINDS, default="gcn")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", help="metrics table over intervals x models")
    _add_common(p)
    _add_inputs(p)
    _add_graph(p)
    _add_training(p)
    _add_synthetic(p)
    p.add_argument("--intervals", type=_int_list, default=list(VALID_WIDTHS))
    p.add_argument("--models", type=_str_list, default=list(eh.MODEL_KINDS))
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("ablate", help="GCN with and without the enrolment features")
    _add_common(p)
    _add_inputs(p)
    _add_graph(p)
    _add_training(p)
    _add_synthetic(p)
    p.add_argument("--interval", type=_interval, default=15)
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("report", help="scatter data and SVG charts from finished runs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out-dir", default=None, help="where to write charts (default: the first run directory)")
    p.add_argument("--config", help=argparse.SUPPRESS)
    _add_log_level(p)
    p.set_defaults(handler=cmd_report)
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        file_argv = config_to_argv(sub, read_config(args.config))
        # file values first so command-line flags win
        pre = argv[: argv.index(args.command) + 1]
        args = parser.parse_args(pre + file_argv + argv[len(pre):])
    if getattr(args, "intervals", None):
        for w in args.intervals:
            _interval(w)
    return args


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except (UsageError, argparse.ArgumentTypeError, FileNotFoundError) as exc:
        print(f"campusflow: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command != "report":
            _out_dir(args)
            write_config(args, Path(args.out_dir) / f"config_{args.command}.txt")
        return args.handler(args)
    except FileNotFoundError as exc:
        print(f"campusflow: error: missing input file {exc.filename or exc}", file=sys.stderr)
        return 1
    except (UsageError, SchemaError, ValueError) as exc:
        print(f"campusflow: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.exception("%s failed", args.command)
        print(f"campusflow: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
