"""Command-line pipeline: simulate, preprocess, train, detect, evaluate, plot-data.

Every stage that writes a directory also drops a run.json echoing the
resolved configuration (flag beats config file beats default), so a run can
be reproduced from its outputs alone. Heavy imports happen inside the
handlers so --threads can pin the BLAS thread count before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import date, datetime, time, timedelta
from pathlib import Path

from .errors import ConfigError, StganError

_VERSION = "0.1.0"

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _parse_date(text: str) -> date:
    try:
        return date.fromisoformat(text)
    except ValueError:
        raise ConfigError(f"bad date {text!r}, expected YYYY-MM-DD") from None


def _parse_when(text: str) -> datetime:
    """A date or a minute timestamp; bare dates mean midnight."""
    for fmt in ("%Y-%m-%dT%H:%M", "%Y-%m-%d"):
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            continue
    raise ConfigError(f"bad timestamp {text!r}, expected YYYY-MM-DD[THH:MM]")


def _parse_clock(text: str) -> time:
    try:
        h, m = text.split(":")
        return time(int(h), int(m))
    except (ValueError, AttributeError):
        raise ConfigError(f"bad clock time {text!r}, expected HH:MM") from None


def _load_config_file(path) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return doc


def _resolve(args, file_cfg: dict, defaults: dict) -> dict:
    """flag > config file > default, keyed by the defaults dict."""
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif key in file_cfg:
            out[key] = file_cfg[key]
        else:
            out[key] = default
    return out


def _write_run_json(out_dir: Path, subcommand: str, argv, resolved: dict) -> None:
    def jsonable(v):
        if isinstance(v, (date, datetime)):
            return v.isoformat()
        if isinstance(v, time):
            return v.strftime("%H:%M")
        if isinstance(v, timedelta):
            return v.total_seconds()
        if isinstance(v, tuple):
            return list(v)
        return v

    doc = {
        "version": _VERSION,
        "subcommand": subcommand,
        "argv": list(argv),
        "config": {k: jsonable(v) for k, v in sorted(resolved.items())},
    }
    (out_dir / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------------------
# simulate


_SIM_TUPLE_KEYS = {
    "base_range", "morning_hour_range", "evening_hour_range",
    "peak_width_range_min", "peak_amp_range", "cut_len_slots",
    "weather_len_slots", "artifact_len_slots", "kind_weights",
}
_SIM_CLOCK_KEYS = {"day_start", "day_end", "anomaly_start_clock", "anomaly_end_clock"}


def _cmd_simulate(args, argv) -> int:
    from .graph import write_stations_csv
    from .preprocess import write_flow_csv
    from .scoring import write_truth_csv
    from .simulate import SimSpec, inject_anomalies, simulate_flows

    file_cfg = _load_config_file(args.config)
    defaults = {
        "n_cameras": 42,
        "n_days": 30,
        "seed": 0,
        "anomaly_rate_percent": 0.1,
        "anomaly_days": 10,
    }
    resolved = _resolve(args, file_cfg, defaults)
    if args.no_anomalies:
        resolved["anomaly_rate_percent"] = 0.0

    spec_kwargs = dict(resolved)
    valid_fields = set(SimSpec.__dataclass_fields__)
    for key, value in file_cfg.items():
        if key in defaults or key not in valid_fields:
            continue
        if key in _SIM_TUPLE_KEYS:
            value = tuple(value)
        elif key in _SIM_CLOCK_KEYS:
            value = _parse_clock(value)
        elif key == "start_date":
            value = _parse_date(value)
        elif key == "event_gap":
            value = timedelta(minutes=float(value))
        spec_kwargs[key] = value

    spec = SimSpec(**spec_kwargs)
    spec.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    series, stations = simulate_flows(spec)
    series, records = inject_anomalies(series, spec, stations)
    write_stations_csv(out / "stations.csv", stations)
    write_flow_csv(out / "flows.csv", series)
    write_truth_csv(out / "truth.csv", records)
    echo = dict(resolved)
    echo["anomaly_records"] = len(records)
    _write_run_json(out, "simulate", argv, echo)
    print(f"simulated {spec.n_cameras} cameras x {spec.n_days} days "
          f"into {out} ({len(records)} anomaly records)")
    return 0


# ---------------------------------------------------------------------------
# preprocess


def _cmd_preprocess(args, argv) -> int:
    from .errors import EmptySeriesError
    from .graph import build_graph, load_edges_csv, load_stations_csv
    from .preprocess import assemble_dataset, process_series, read_flow_csv, FlowSeries

    file_cfg = _load_config_file(args.config)
    defaults = {"threshold_m": 2000.0, "date_from": None, "date_to": None}
    resolved = _resolve(args, file_cfg, defaults)
    for key in ("date_from", "date_to"):
        if isinstance(resolved[key], str):
            resolved[key] = _parse_date(resolved[key])

    stations_path = _require_file(args.stations, "stations file")
    flows_path = _require_file(args.flows, "flows file")
    stations = load_stations_csv(stations_path)
    edges = load_edges_csv(_require_file(args.edges, "edges file")) if args.edges else []
    graph = build_graph(stations, threshold_m=float(resolved["threshold_m"]),
                        forced_edges=edges)

    raw_series = read_flow_csv(flows_path)
    date_from = resolved["date_from"]
    date_to = resolved["date_to"]
    processed = []
    for s in raw_series:
        p = process_series(s)
        if date_from or date_to:
            kept = [
                (t, v) for t, v in p.points
                if (date_from is None or t.date() >= date_from)
                and (date_to is None or t.date() <= date_to)
            ]
            p = FlowSeries(p.camera_id, kept)
        if not p.points:
            raise EmptySeriesError(
                f"camera {s.camera_id!r}: no data left after date filtering"
            )
        processed.append(p)

    dataset = assemble_dataset(processed, graph)
    out = Path(args.out)
    echo = {
        "threshold_m": float(resolved["threshold_m"]),
        "date_from": date_from.isoformat() if date_from else None,
        "date_to": date_to.isoformat() if date_to else None,
        "edges_file": str(args.edges) if args.edges else None,
    }
    dataset.save(out, config=echo)
    _write_run_json(out, "preprocess", argv, echo)
    print(f"prepared {dataset.n_slots} slots x {dataset.n_stations} cameras "
          f"({dataset.n_days} days) into {out}")
    return 0


# ---------------------------------------------------------------------------
# train


def _dataset_graph(dataset, threshold_m: float):
    from .errors import AlignmentError
    from .graph import build_graph

    if not dataset.stations:
        raise AlignmentError("dataset carries no station coordinates")
    return build_graph(dataset.stations, threshold_m=threshold_m)


def _cmd_train(args, argv) -> int:
    from .model import save_checkpoint
    from .preprocess import PreparedDataset
    from .train import TrainConfig, train, write_metrics_csv

    file_cfg = _load_config_file(args.config)
    defaults = {
        "lr_g": 1e-3, "lr_d": 1e-3, "batch": 64, "epochs": 6,
        "lambda_g": 1.0, "seed": 0, "l_r": 12, "l_d": 7, "hidden": 64,
        "threshold_m": 2000.0,
    }
    resolved = _resolve(args, file_cfg, defaults)

    data_dir = _require_file(args.data, "dataset directory")
    dataset = PreparedDataset.load(data_dir)
    graph = _dataset_graph(dataset, float(resolved["threshold_m"]))

    config = TrainConfig(
        lr_g=float(resolved["lr_g"]), lr_d=float(resolved["lr_d"]),
        batch=int(resolved["batch"]), epochs=int(resolved["epochs"]),
        lambda_g=float(resolved["lambda_g"]), seed=int(resolved["seed"]),
        l_r=int(resolved["l_r"]), l_d=int(resolved["l_d"]),
        hidden=int(resolved["hidden"]),
    )
    config.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_run_json(out, "train", argv, resolved)

    extra = {"train_config": {k: resolved[k] for k in sorted(defaults)}}

    def on_epoch_end(epoch, gen, disc):
        save_checkpoint(out / f"checkpoint_epoch_{epoch}.json", gen, disc, graph,
                        extra=dict(extra, epoch=epoch))

    result = train(dataset, graph, config, on_epoch_end=on_epoch_end)
    save_checkpoint(out / "checkpoint.json", result.generator, result.discriminator,
                    graph, extra=dict(extra, epoch=config.epochs))
    write_metrics_csv(out / "metrics.csv", result.metrics)
    last = result.metrics[-1]
    print(f"trained {config.epochs} epochs, {last.step} steps: "
          f"d_loss={last.d_loss:.6f} d_acc={last.d_accuracy:.2f}% "
          f"g_mse={last.g_mse:.6f} g_binary={last.g_binary_loss:.6f}")
    return 0


# ---------------------------------------------------------------------------
# detect


def _cmd_detect(args, argv) -> int:
    from .model import load_checkpoint
    from .preprocess import PreparedDataset
    from .scoring import ScoreConfig, detect, load_truth_csv, write_report

    file_cfg = _load_config_file(args.config)
    defaults = {"k_percent": 0.1, "lam": 1.0, "aftermath_min": 60.0,
                "score_from": None}
    resolved = _resolve(args, file_cfg, defaults)

    data_dir = _require_file(args.data, "dataset directory")
    ckpt_path = _require_file(args.checkpoint, "checkpoint file")
    dataset = PreparedDataset.load(data_dir)

    header = json.loads(ckpt_path.read_text())
    threshold_m = float(header.get("graph_config", {}).get("threshold_m", 2000.0))
    graph = _dataset_graph(dataset, threshold_m)
    gen, disc, _ = load_checkpoint(ckpt_path, graph)

    config = ScoreConfig(lam=float(resolved["lam"]),
                         k_percent=float(resolved["k_percent"]))
    config.validate()
    truth = load_truth_csv(_require_file(args.truth, "truth file")) if args.truth else None
    score_from = resolved["score_from"]
    if isinstance(score_from, str):
        score_from = _parse_when(score_from)
    aftermath = timedelta(minutes=float(resolved["aftermath_min"]))

    report = detect(dataset, gen, disc, graph, config, truth=truth,
                    score_from=score_from, aftermath=aftermath)
    out = Path(args.out)
    write_report(out, report)
    echo = dict(resolved)
    echo["score_from"] = score_from.isoformat() if score_from else None
    echo["truth_file"] = str(args.truth) if args.truth else None
    echo["threshold_m"] = threshold_m
    _write_run_json(out, "detect", argv, echo)
    s = report.summary
    line = (f"scored {s['scored']} points ({s['skipped']} skipped), "
            f"labeled {s['labeled']}")
    if s["precision"] is not None:
        line += f", precision {100.0 * s['precision']:.1f}%"
    print(line + f", report in {out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _cmd_evaluate(args, argv) -> int:
    from .scoring import (count_tp_fp, load_truth_csv, match_truth, precision,
                          read_report)

    report_dir = _require_file(args.report, "report directory")
    report = read_report(report_dir)
    aftermath = timedelta(minutes=float(args.aftermath_min))
    if args.truth:
        truth = load_truth_csv(_require_file(args.truth, "truth file"))
        match_truth(report.rows, truth, aftermath=aftermath)
    frac = precision(report.rows)
    tp, fp = count_tp_fp(report.rows)
    doc = {
        "labeled": tp + fp,
        "tp": tp,
        "fp": fp,
        "precision": frac,
        "precision_percent": 100.0 * frac,
        "truth_file": str(args.truth) if args.truth else None,
        "aftermath_min": float(args.aftermath_min),
        "report_dir": str(report_dir),
    }
    out_path = Path(args.out) if args.out else Path(report_dir) / "evaluation.json"
    out_path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    print(f"precision {100.0 * frac:.1f}% ({tp} true / {fp} false of {tp + fp} labeled)")
    return 0


# ---------------------------------------------------------------------------
# plot-data


def _cmd_plot_data(args, argv) -> int:
    import csv as _csv

    from .preprocess import TIME_FMT
    from .scoring import read_report

    report_dir = _require_file(args.report, "report directory")
    report = read_report(report_dir)
    rows = [r for r in report.rows if r.camera_id == args.camera]
    if not rows:
        cams = sorted({r.camera_id for r in report.rows})
        raise ConfigError(
            f"camera {args.camera!r} not in report (has {len(cams)} cameras)"
        )
    out_dir = Path(args.out) if args.out else Path(report_dir) / "plots"
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / f"camera_{args.camera}.csv"
    with out_path.open("w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["timestamp", "s_g", "s_d", "score", "labeled", "truth_tag"])
        for r in rows:
            writer.writerow([r.time.strftime(TIME_FMT), repr(r.s_g), repr(r.s_d),
                             repr(r.score), "1" if r.labeled else "0", r.truth_tag])
    print(f"wrote {len(rows)} points for camera {args.camera} to {out_path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stgan",
        description="Spatiotemporal GAN anomaly detection for traffic camera flows",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="pin BLAS/OpenMP thread count before numpy loads")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("simulate", help="generate synthetic flows with labeled anomalies")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON file of simulator fields")
    p.add_argument("--cameras", dest="n_cameras", type=int, default=None)
    p.add_argument("--days", dest="n_days", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--anomaly-rate", dest="anomaly_rate_percent", type=float,
                   default=None, help="percent of eligible points to corrupt")
    p.add_argument("--anomaly-days", dest="anomaly_days", type=int, default=None,
                   help="how many trailing days carry anomalies")
    p.add_argument("--no-anomalies", action="store_true")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("preprocess", help="raw flow CSV to a model-ready dataset")
    p.add_argument("--stations", required=True)
    p.add_argument("--flows", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--threshold-m", dest="threshold_m", type=float, default=None)
    p.add_argument("--edges", default=None, help="CSV of forced adjacency pairs")
    p.add_argument("--from", dest="date_from", type=_parse_date, default=None)
    p.add_argument("--to", dest="date_to", type=_parse_date, default=None)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("train", help="adversarial training on a prepared dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr-g", dest="lr_g", type=float, default=None)
    p.add_argument("--lr-d", dest="lr_d", type=float, default=None)
    p.add_argument("--lambda-g", dest="lambda_g", type=float, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--l-r", dest="l_r", type=int, default=None)
    p.add_argument("--l-d", dest="l_d", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threshold-m", dest="threshold_m", type=float, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("detect", help="score a prepared dataset with a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--k", dest="k_percent", type=float, default=None,
                   help="label the top K percent of scores")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="weight of the discriminator score term")
    p.add_argument("--truth", default=None)
    p.add_argument("--score-from", dest="score_from", default=None,
                   help="only score slots at or after this date/timestamp")
    p.add_argument("--aftermath-min", dest="aftermath_min", type=float, default=None,
                   help="minutes after a truth interval still counted true")
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("evaluate", help="precision of a labeled report")
    p.add_argument("--report", required=True)
    p.add_argument("--truth", default=None, help="retag rows against this truth file")
    p.add_argument("--aftermath-min", dest="aftermath_min", type=float, default=60.0)
    p.add_argument("--out", default=None, help="where to write evaluation.json")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("plot-data", help="per-camera score series as CSV")
    p.add_argument("--report", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_plot_data)

    return parser


def run(argv) -> int:
    """Parse argv (no program name) and execute. Returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 1
        for var in _THREAD_ENV_VARS:
            os.environ[var] = str(args.threads)
    try:
        return args.func(args, list(argv))
    except StganError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))
