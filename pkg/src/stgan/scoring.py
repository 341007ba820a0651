"""Anomaly scores, top-K labeling, precision, and the detection report.

Each scored point is one (camera, 5-minute slot) pair. The generator side
contributes the squared prediction error per node; the discriminator side
contributes the score gap between the real and generated sequence, shared
by every node of the window. The top K percent of points by combined score
get labeled anomalous.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .errors import (
    AlignmentError,
    ConfigError,
    EmptySeriesError,
    TrainingError,
    UndefinedPrecisionError,
)
from .graph import TrafficGraph
from .model import DiscriminatorParams, GeneratorParams, discriminate_batch, generate_batch
from .preprocess import TIME_FMT, PreparedDataset, build_windows
from .train import stack_windows

# kinds of labeled ground-truth anomalies the simulator can inject
ANOMALY_KINDS = ("signal_cut", "visual_artifact", "weather")

NO_TAG = "none"

DEFAULT_AFTERMATH = timedelta(minutes=60)


@dataclass(frozen=True)
class TruthRecord:
    """One labeled anomaly interval on one camera, ends inclusive."""

    camera_id: str
    start: datetime
    end: datetime
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in ANOMALY_KINDS:
            raise ConfigError(f"unknown anomaly kind {self.kind!r}")
        if self.end < self.start:
            raise ConfigError(
                f"truth interval inverted for camera {self.camera_id!r}: "
                f"{self.start} > {self.end}"
            )


@dataclass
class ScoreConfig:
    lam: float = 1.0
    k_percent: float = 0.1

    def validate(self) -> None:
        if not (0.0 < self.k_percent <= 100.0):
            raise ConfigError(f"k_percent must be in (0, 100], got {self.k_percent}")
        if self.lam < 0.0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")


@dataclass
class ReportRow:
    camera_id: str
    time: datetime
    s_g: float
    s_d: float
    score: float
    labeled: bool
    truth_tag: str = NO_TAG


@dataclass
class AnomalyReport:
    rows: list
    summary: dict = field(default_factory=dict)


def score_windows(windows, gen: GeneratorParams, disc: DiscriminatorParams,
                  graph: TrafficGraph, lam: float, chunk: int = 256):
    """Score many windows. Returns (s_g (W, N), s_d (W,), score (W, N))."""
    w_count = len(windows)
    n = graph.n
    s_g = np.empty((w_count, n), dtype=np.float64)
    s_d = np.empty(w_count, dtype=np.float64)
    for lo in range(0, w_count, chunk):
        part = windows[lo : lo + chunk]
        recent, trend, external, target = stack_windows(part)
        preds, _ = generate_batch(recent, trend, external, gen, graph)
        real = np.concatenate([recent, target[:, None]], axis=1)
        fake = np.concatenate([recent, preds[:, None]], axis=1)
        p_real, _ = discriminate_batch(real, disc, graph)
        p_fake, _ = discriminate_batch(fake, disc, graph)
        err = preds - target
        s_g[lo : lo + len(part)] = (err * err).sum(axis=2)
        s_d[lo : lo + len(part)] = p_real - p_fake
    return s_g, s_d, s_g + lam * s_d[:, None]


def score_point(window, gen: GeneratorParams, disc: DiscriminatorParams,
                graph: TrafficGraph, lam: float = 1.0):
    """Score one window. Returns (s_g (N,), s_d float, score (N,))."""
    s_g, s_d, score = score_windows([window], gen, disc, graph, lam)
    return s_g[0], float(s_d[0]), score[0]


def label_top_k(scores, k_percent: float, tie_keys=None) -> np.ndarray:
    """Boolean mask marking the top floor(K% of count) scores.

    Ties break deterministically: higher score first, then tie_keys in the
    given priority order (earlier values win), then original position.
    """
    arr = np.asarray(list(scores), dtype=np.float64)
    if arr.ndim != 1:
        raise ConfigError(f"scores must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise EmptySeriesError("cannot label an empty score list")
    if not (0.0 < k_percent <= 100.0):
        raise ConfigError(f"k_percent must be in (0, 100], got {k_percent}")
    count = int(math.floor(k_percent * arr.size / 100.0))
    mask = np.zeros(arr.size, dtype=bool)
    if count == 0:
        return mask
    keys = [np.arange(arr.size)]
    if tie_keys is not None:
        for k in reversed(list(tie_keys)):
            keys.append(np.asarray(k))
    keys.append(-arr)
    order = np.lexsort(tuple(keys))
    mask[order[:count]] = True
    return mask


def count_tp_fp(rows) -> tuple:
    """(true positives, false positives) over the labeled rows."""
    tp = 0
    fp = 0
    for r in rows:
        if r.labeled:
            if r.truth_tag != NO_TAG:
                tp += 1
            else:
                fp += 1
    return tp, fp


def precision(rows) -> float:
    """TP / (TP + FP) over labeled rows; undefined when nothing is labeled."""
    tp, fp = count_tp_fp(rows)
    if tp + fp == 0:
        raise UndefinedPrecisionError("no labeled rows, precision is undefined")
    return tp / (tp + fp)


def match_truth(rows, records, aftermath: timedelta = DEFAULT_AFTERMATH) -> None:
    """Tag every row whose time falls in a truth interval plus its aftermath.

    The aftermath keeps post-event slots (recovery transients, windows still
    contaminated by the event) creditable as true positives. When intervals
    overlap, the earliest-starting record wins.
    """
    by_cam: dict[str, list] = {}
    for rec in sorted(records, key=lambda r: (r.start, r.camera_id, r.kind)):
        by_cam.setdefault(rec.camera_id, []).append(rec)
    for row in rows:
        row.truth_tag = NO_TAG
        for rec in by_cam.get(row.camera_id, ()):
            if rec.start <= row.time <= rec.end + aftermath:
                row.truth_tag = rec.kind
                break


def detect(dataset: PreparedDataset, gen: GeneratorParams,
           disc: DiscriminatorParams, graph: TrafficGraph,
           config: ScoreConfig, truth=None, score_from: datetime | None = None,
           aftermath: timedelta = DEFAULT_AFTERMATH) -> AnomalyReport:
    """Score every windowed point in the dataset and label the top K percent.

    Points whose slot cannot form a window (day starts lacking the recent
    segment, days without enough history) are skipped and counted in the
    summary. score_from restricts scoring to slots at or after it.
    """
    config.validate()
    if dataset.station_order != [s.id for s in graph.stations]:
        raise AlignmentError("dataset station order does not match the graph")
    windows = build_windows(dataset, l_r=gen.l_r, l_d=gen.l_d)
    if score_from is not None:
        windows = [w for w in windows if w.time >= score_from]
    grid_times = [t for t in dataset.times if score_from is None or t >= score_from]
    n = graph.n
    total = len(grid_times) * n
    if not windows:
        raise TrainingError("no scorable windows in the requested range")
    scored = len(windows) * n
    skipped = total - scored

    s_g, s_d, score = score_windows(windows, gen, disc, graph, config.lam)

    w_count = len(windows)
    flat_scores = score.reshape(-1)
    time_key = np.repeat(np.arange(w_count), n)
    cam_key = np.tile(np.arange(n), w_count)
    mask = label_top_k(flat_scores, config.k_percent, tie_keys=[time_key, cam_key])

    rows = []
    cams = dataset.station_order
    flat = 0
    for wi, w in enumerate(windows):
        for ci in range(n):
            rows.append(ReportRow(
                camera_id=cams[ci],
                time=w.time,
                s_g=float(s_g[wi, ci]),
                s_d=float(s_d[wi]),
                score=float(score[wi, ci]),
                labeled=bool(mask[flat]),
            ))
            flat += 1

    summary = {
        "total": total,
        "scored": scored,
        "skipped": skipped,
        "labeled": int(mask.sum()),
        "k_percent": config.k_percent,
        "lam": config.lam,
        "tp": None,
        "fp": None,
        "precision": None,
    }
    if truth is not None:
        match_truth(rows, truth, aftermath=aftermath)
        tp, fp = count_tp_fp(rows)
        summary["tp"] = tp
        summary["fp"] = fp
        summary["precision"] = (tp / (tp + fp)) if (tp + fp) > 0 else None
    return AnomalyReport(rows=rows, summary=summary)


# ---------------------------------------------------------------------------
# Report and truth file IO


def write_report(out_dir, report: AnomalyReport) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "report.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["camera_id", "timestamp", "s_g", "s_d", "score",
                         "labeled", "truth_tag"])
        for r in report.rows:
            writer.writerow([
                r.camera_id, r.time.strftime(TIME_FMT), repr(r.s_g), repr(r.s_d),
                repr(r.score), "1" if r.labeled else "0", r.truth_tag,
            ])
    (out / "summary.json").write_text(json.dumps(report.summary, indent=2, sort_keys=True))


def read_report(in_dir) -> AnomalyReport:
    src = Path(in_dir)
    rows = []
    with (src / "report.csv").open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["camera_id", "timestamp", "s_g", "s_d", "score",
                      "labeled", "truth_tag"]:
            raise AlignmentError(f"{src}: unexpected report header {header}")
        for row in reader:
            rows.append(ReportRow(
                camera_id=row[0],
                time=datetime.strptime(row[1], TIME_FMT),
                s_g=float(row[2]),
                s_d=float(row[3]),
                score=float(row[4]),
                labeled=row[5] == "1",
                truth_tag=row[6],
            ))
    summary_path = src / "summary.json"
    summary = json.loads(summary_path.read_text()) if summary_path.exists() else {}
    return AnomalyReport(rows=rows, summary=summary)


def write_truth_csv(path, records) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["camera_id", "start", "end", "kind"])
        for r in records:
            writer.writerow([r.camera_id, r.start.strftime(TIME_FMT),
                             r.end.strftime(TIME_FMT), r.kind])


def load_truth_csv(path) -> list:
    path = Path(path)
    records = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["camera_id", "start", "end", "kind"]:
            raise AlignmentError(f"{path}: expected header camera_id,start,end,kind")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise AlignmentError(f"{path}:{lineno}: expected 4 fields")
            records.append(TruthRecord(
                camera_id=row[0],
                start=datetime.strptime(row[1], TIME_FMT),
                end=datetime.strptime(row[2], TIME_FMT),
                kind=row[3],
            ))
    return records
