"""Raw per-minute camera observations to model-ready tensors.

The pipeline is: forward-fill gaps on the 1-minute grid, average into
5-minute slots anchored to the wall clock, truncate each day to the active
window, then assemble the per-camera series into one (T, N, F) tensor plus
calendar features. Windows for training pair a same-day recent segment with
a same-clock-time trend segment from prior days.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime, time, timedelta
from pathlib import Path

import numpy as np

from .errors import (
    AlignmentError,
    ConfigError,
    EmptySeriesError,
)
from .graph import Station, TrafficGraph

TIME_FMT = "%Y-%m-%dT%H:%M"
ONE_MIN = timedelta(minutes=1)
FIVE_MIN = timedelta(minutes=5)

# daily active window kept after truncation, inclusive on both ends
DAY_START = time(4, 55)
DAY_END = time(21, 0)

# 7 weekday slots (Monday = 0) followed by 24 hour slots
TIME_FEATURE_DIM = 31

DATASET_FORMAT_VERSION = 1


@dataclass
class FlowSeries:
    """One camera's flow observations, strictly increasing in time.

    points holds (timestamp, flow) pairs where flow is a float in [0, 1]
    or None for a missing observation.
    """

    camera_id: str
    points: list

    def timestamps(self) -> list[datetime]:
        return [t for t, _ in self.points]

    def values(self) -> list:
        return [v for _, v in self.points]


def compute_flow(detected: float, capacity: float) -> float:
    """Detected vehicle count over capacity, clamped into [0, 1]."""
    if capacity <= 0.0:
        raise ConfigError(f"capacity must be positive, got {capacity}")
    if detected < 0.0:
        raise ConfigError(f"detected count must be non-negative, got {detected}")
    return min(1.0, detected / capacity)


def forward_fill(series: FlowSeries, cadence: timedelta = ONE_MIN) -> FlowSeries:
    """Fill every cadence slot between the first and last timestamp.

    Missing values (absent slots or explicit None) take the most recent
    observed value; a missing head takes the first observed value. A series
    with no observations at all cannot be filled.
    """
    if cadence <= timedelta(0):
        raise ConfigError(f"cadence must be positive, got {cadence}")
    pts = series.points
    if not pts:
        raise EmptySeriesError(f"camera {series.camera_id!r}: empty series")
    first_value = None
    for _, v in pts:
        if v is not None:
            first_value = float(v)
            break
    if first_value is None:
        raise EmptySeriesError(
            f"camera {series.camera_id!r}: no observed values to fill from"
        )
    start = pts[0][0]
    end = pts[-1][0]
    by_time = {}
    prev = None
    for t, v in pts:
        if prev is not None and t <= prev:
            raise AlignmentError(
                f"camera {series.camera_id!r}: timestamps not strictly increasing at {t}"
            )
        if (t - start) % cadence != timedelta(0):
            raise AlignmentError(
                f"camera {series.camera_id!r}: timestamp {t} off the {cadence} grid"
            )
        prev = t
        by_time[t] = v
    out = []
    last = first_value
    slot = start
    while slot <= end:
        v = by_time.get(slot)
        if v is not None:
            last = float(v)
        out.append((slot, last))
        slot += cadence
    return FlowSeries(series.camera_id, out)


def downsample_5min(series: FlowSeries) -> FlowSeries:
    """Average observations into 5-minute slots anchored to the wall clock.

    A slot starting at minute m (m % 5 == 0) covers [m, m+5); partial slots
    at the edges average over whatever they contain. Slot order follows the
    input order.
    """
    if not series.points:
        raise EmptySeriesError(f"camera {series.camera_id!r}: empty series")
    out = []
    cur_slot = None
    acc = 0.0
    count = 0
    for t, v in series.points:
        slot = t - timedelta(minutes=t.minute % 5, seconds=t.second, microseconds=t.microsecond)
        if slot != cur_slot:
            if cur_slot is not None and count > 0:
                out.append((cur_slot, acc / count))
            cur_slot = slot
            acc = 0.0
            count = 0
        if v is not None:
            acc += float(v)
            count += 1
    if cur_slot is not None and count > 0:
        out.append((cur_slot, acc / count))
    if not out:
        raise EmptySeriesError(
            f"camera {series.camera_id!r}: no observed values to downsample"
        )
    return FlowSeries(series.camera_id, out)


def truncate_hours(
    series: FlowSeries,
    start: time = DAY_START,
    end: time = DAY_END,
) -> FlowSeries:
    """Keep only points whose clock time falls in [start, end], inclusive."""
    if start > end:
        raise ConfigError(f"truncation window is inverted: {start} > {end}")
    kept = [(t, v) for t, v in series.points if start <= t.time() <= end]
    return FlowSeries(series.camera_id, kept)


def process_series(series: FlowSeries) -> FlowSeries:
    """The full single-camera pipeline: fill, downsample, truncate."""
    return truncate_hours(downsample_5min(forward_fill(series)))


def encode_time_feature(ts: datetime) -> np.ndarray:
    """31-dim calendar one-hots: weekday (7, Monday first) then hour (24)."""
    vec = np.zeros(TIME_FEATURE_DIM, dtype=np.float64)
    vec[ts.weekday()] = 1.0
    vec[7 + ts.hour] = 1.0
    return vec


@dataclass
class PreparedDataset:
    """Aligned flow tensor and calendar features for one station set.

    x has shape (T, N, F), e_all (T, TIME_FEATURE_DIM). day_boundaries
    holds the index of the first slot of each service day, in order.
    stations is an echo of the graph's station list so downstream stages
    can rebuild the same graph.
    """

    station_order: list
    times: list
    x: np.ndarray
    e_all: np.ndarray
    day_boundaries: list
    stations: list = field(default_factory=list)

    @property
    def n_slots(self) -> int:
        return self.x.shape[0]

    @property
    def n_stations(self) -> int:
        return self.x.shape[1]

    @property
    def n_days(self) -> int:
        return len(self.day_boundaries)

    def day_of(self, t: int) -> int:
        """Index of the service day containing slot t."""
        return int(np.searchsorted(np.asarray(self.day_boundaries), t, side="right")) - 1

    def save(self, out_dir, config: dict | None = None) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {
            "format_version": DATASET_FORMAT_VERSION,
            "station_order": list(self.station_order),
            "times": [t.strftime(TIME_FMT) for t in self.times],
            "day_boundaries": list(self.day_boundaries),
            "x_shape": list(self.x.shape),
            "e_shape": list(self.e_all.shape),
            "stations": [
                {"camera_id": s.id, "lat": s.latitude, "lon": s.longitude}
                for s in self.stations
            ],
            "config": config or {},
        }
        (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        (out / "x.f64").write_bytes(np.ascontiguousarray(self.x, dtype="<f8").tobytes())
        (out / "e.f64").write_bytes(np.ascontiguousarray(self.e_all, dtype="<f8").tobytes())

    @classmethod
    def load(cls, in_dir) -> "PreparedDataset":
        src = Path(in_dir)
        meta_path = src / "meta.json"
        if not meta_path.exists():
            raise AlignmentError(f"{src}: missing meta.json")
        meta = json.loads(meta_path.read_text())
        if meta.get("format_version") != DATASET_FORMAT_VERSION:
            raise AlignmentError(
                f"{src}: unsupported dataset format {meta.get('format_version')!r}"
            )
        x_shape = tuple(meta["x_shape"])
        e_shape = tuple(meta["e_shape"])
        x_raw = (src / "x.f64").read_bytes()
        e_raw = (src / "e.f64").read_bytes()
        if len(x_raw) != 8 * int(np.prod(x_shape)):
            raise AlignmentError(f"{src}: x.f64 size does not match shape {x_shape}")
        if len(e_raw) != 8 * int(np.prod(e_shape)):
            raise AlignmentError(f"{src}: e.f64 size does not match shape {e_shape}")
        x = np.frombuffer(x_raw, dtype="<f8").reshape(x_shape).astype(np.float64)
        e_all = np.frombuffer(e_raw, dtype="<f8").reshape(e_shape).astype(np.float64)
        times = [datetime.strptime(t, TIME_FMT) for t in meta["times"]]
        stations = [
            Station(s["camera_id"], float(s["lat"]), float(s["lon"]))
            for s in meta.get("stations", [])
        ]
        return cls(
            station_order=list(meta["station_order"]),
            times=times,
            x=x,
            e_all=e_all,
            day_boundaries=[int(b) for b in meta["day_boundaries"]],
            stations=stations,
        )


@dataclass
class SampleWindow:
    """One training/scoring sample anchored at slot index t.

    recent is the (L_r, N, F) same-day segment immediately before t,
    trend the (L_d, N, F) same-clock-time slices from the L_d prior days
    in chronological order, target the (N, F) slice at t itself.
    """

    index: int
    time: datetime
    recent: np.ndarray
    trend: np.ndarray
    external: np.ndarray
    target: np.ndarray


def assemble_dataset(series_list: list, graph: TrafficGraph) -> PreparedDataset:
    """Stack processed per-camera series into one aligned tensor.

    Series are matched to graph stations by camera id; every camera must
    share the exact same time axis, carry no missing values, and stay in
    [0, 1].
    """
    by_id = {}
    for s in series_list:
        if s.camera_id in by_id:
            raise AlignmentError(f"duplicate series for camera {s.camera_id!r}")
        by_id[s.camera_id] = s
    graph_ids = [st.id for st in graph.stations]
    missing = [i for i in graph_ids if i not in by_id]
    extra = [i for i in by_id if i not in set(graph_ids)]
    if missing or extra:
        raise AlignmentError(
            f"series/station mismatch: missing cameras {missing}, unexpected {extra}"
        )
    ref = by_id[graph_ids[0]]
    times = ref.timestamps()
    if not times:
        raise EmptySeriesError(f"camera {graph_ids[0]!r}: empty series")
    t_count = len(times)
    n = len(graph_ids)
    x = np.zeros((t_count, n, 1), dtype=np.float64)
    for col, cam in enumerate(graph_ids):
        s = by_id[cam]
        if len(s.points) != t_count:
            raise AlignmentError(
                f"camera {cam!r}: {len(s.points)} slots, expected {t_count}"
            )
        for row, ((t, v), t_ref) in enumerate(zip(s.points, times)):
            if t != t_ref:
                raise AlignmentError(
                    f"camera {cam!r}: timestamp {t} does not match {t_ref}"
                )
            if v is None:
                raise AlignmentError(f"camera {cam!r}: missing value at {t}")
            fv = float(v)
            if not (0.0 <= fv <= 1.0):
                raise AlignmentError(f"camera {cam!r}: flow {fv} at {t} out of [0, 1]")
            x[row, col, 0] = fv
    e_all = np.stack([encode_time_feature(t) for t in times])
    day_boundaries = [
        i for i in range(t_count) if i == 0 or times[i].date() != times[i - 1].date()
    ]
    return PreparedDataset(
        station_order=list(graph_ids),
        times=times,
        x=x,
        e_all=e_all,
        day_boundaries=day_boundaries,
        stations=list(graph.stations),
    )


def build_windows(dataset: PreparedDataset, l_r: int = 12, l_d: int = 7) -> list:
    """All valid sample windows, in chronological target order.

    A slot t qualifies when its day has at least l_r predecessors of t
    inside the same day (the recent segment never crosses a day boundary)
    and each of the l_d prior days contains a slot at the same clock time.
    """
    if l_r < 1:
        raise ConfigError(f"l_r must be >= 1, got {l_r}")
    if l_d < 1:
        raise ConfigError(f"l_d must be >= 1, got {l_d}")
    bounds = list(dataset.day_boundaries) + [dataset.n_slots]
    n_days = dataset.n_days
    times = dataset.times
    x = dataset.x
    windows: list[SampleWindow] = []
    for day in range(l_d, n_days):
        day_start = bounds[day]
        day_end = bounds[day + 1]
        for t in range(day_start + l_r, day_end):
            clock = times[t].time()
            trend_idx = []
            ok = True
            for back in range(l_d, 0, -1):
                d = day - back
                lo, hi = bounds[d], bounds[d + 1]
                # same slot offset within the prior day, verified by clock time
                cand = lo + (t - day_start)
                if cand >= hi or times[cand].time() != clock:
                    cand = -1
                    for k in range(lo, hi):
                        if times[k].time() == clock:
                            cand = k
                            break
                    if cand < 0:
                        ok = False
                        break
                trend_idx.append(cand)
            if not ok:
                continue
            windows.append(
                SampleWindow(
                    index=t,
                    time=times[t],
                    recent=x[t - l_r : t],
                    trend=x[trend_idx],
                    external=dataset.e_all[t],
                    target=x[t],
                )
            )
    return windows


def read_flow_csv(path) -> list:
    """Read camera_id,timestamp,flow rows into per-camera FlowSeries.

    An empty flow field means a missing observation. Cameras appear in
    first-seen order; points keep file order.
    """
    path = Path(path)
    order: list[str] = []
    by_id: dict[str, list] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptySeriesError(f"{path}: empty flow file")
        if [c.strip() for c in header] != ["camera_id", "timestamp", "flow"]:
            raise AlignmentError(
                f"{path}: expected header camera_id,timestamp,flow, got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise AlignmentError(f"{path}:{lineno}: expected 3 fields")
            cam, ts_str, flow_str = row
            try:
                ts = datetime.strptime(ts_str, TIME_FMT)
            except ValueError:
                raise AlignmentError(
                    f"{path}:{lineno}: bad timestamp {ts_str!r}"
                ) from None
            flow = None
            if flow_str.strip() != "":
                try:
                    flow = float(flow_str)
                except ValueError:
                    raise AlignmentError(
                        f"{path}:{lineno}: bad flow value {flow_str!r}"
                    ) from None
            if cam not in by_id:
                order.append(cam)
                by_id[cam] = []
            by_id[cam].append((ts, flow))
    return [FlowSeries(cam, by_id[cam]) for cam in order]


def write_flow_csv(path, series_list: list) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["camera_id", "timestamp", "flow"])
        for s in series_list:
            for t, v in s.points:
                writer.writerow(
                    [s.camera_id, t.strftime(TIME_FMT), "" if v is None else repr(float(v))]
                )
