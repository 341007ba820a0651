"""Synthetic city traffic flows with labeled injected anomalies.

Cameras get random positions inside a city-scale bounding box and smooth
daily profiles (base load plus morning and evening rush peaks, damped on
weekends). Minute noise is correlated across cameras through the same
Gaussian distance kernel the graph uses, and correlated in time by an AR(1)
chain. Anomalies are injected on the trailing days only, so the leading
days stay clean for training:

  signal_cut       observations go missing for the interval, which the
                   1-minute forward fill turns into a frozen value until
                   the feed resumes
  visual_artifact  independent uniform spikes on each minute
  weather          a smooth flow depression over the camera and its
                   graph neighbors, ramped in and out

Every injected (camera, interval) pair is emitted as one truth record.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import date, datetime, time, timedelta

import numpy as np

from .errors import ConfigError, InjectionConflictError
from .graph import Station, station_distance
from .preprocess import DAY_END, DAY_START, FlowSeries, ONE_MIN
from .scoring import ANOMALY_KINDS, TruthRecord

# planner alias: an injected anomaly is exactly a truth record
InjectionRecord = TruthRecord


@dataclass
class SimSpec:
    """Everything the simulator needs; defaults give a city-scale month."""

    n_cameras: int = 42
    n_days: int = 30
    seed: int = 0
    start_date: date = date(2024, 1, 1)
    day_start: time = time(4, 53)
    day_end: time = time(21, 0)

    # station layout box, degrees
    lat_origin: float = 50.0
    lon_origin: float = 8.0
    lat_span: float = 0.12
    lon_span: float = 0.18

    # daily profile draws, one set per camera
    base_range: tuple = (0.05, 0.16)
    morning_hour_range: tuple = (7.0, 8.5)
    evening_hour_range: tuple = (16.0, 17.5)
    peak_width_range_min: tuple = (45.0, 80.0)
    peak_amp_range: tuple = (0.30, 0.55)
    weekend_factor: float = 0.65

    # minute noise: spatially kernel-correlated, AR(1) in time
    noise_std: float = 0.012
    noise_rho: float = 0.95

    # injection planning
    neighbor_threshold_m: float = 2000.0
    anomaly_rate_percent: float = 0.1
    anomaly_days: int = 10
    anomaly_start_clock: time = time(6, 0)
    anomaly_end_clock: time = time(19, 0)
    cut_len_slots: tuple = (12, 30)
    weather_len_slots: tuple = (8, 16)
    artifact_len_slots: tuple = (2, 6)
    kind_weights: tuple = (0.8, 0.0, 0.2)  # signal_cut, visual_artifact, weather
    weather_depth: float = 0.5
    artifact_scale: float = 0.6
    min_effect: float = 0.08
    event_gap: timedelta = timedelta(minutes=60)

    # explicit injections override the planner entirely
    injections: list | None = None

    def validate(self) -> None:
        if self.n_cameras < 2:
            raise ConfigError(f"n_cameras must be >= 2, got {self.n_cameras}")
        if self.n_days < 1:
            raise ConfigError(f"n_days must be >= 1, got {self.n_days}")
        if self.day_start >= self.day_end:
            raise ConfigError("day_start must precede day_end")
        if self.lat_span <= 0 or self.lon_span <= 0:
            raise ConfigError("bounding box spans must be positive")
        if not (0.0 <= self.noise_rho < 1.0):
            raise ConfigError(f"noise_rho must be in [0, 1), got {self.noise_rho}")
        if self.noise_std < 0.0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.anomaly_rate_percent < 0.0:
            raise ConfigError(
                f"anomaly_rate_percent must be >= 0, got {self.anomaly_rate_percent}"
            )
        if not (0 <= self.anomaly_days):
            raise ConfigError(f"anomaly_days must be >= 0, got {self.anomaly_days}")
        if len(self.kind_weights) != 3 or any(w < 0 for w in self.kind_weights):
            raise ConfigError("kind_weights must be 3 non-negative values")
        if sum(self.kind_weights) <= 0 and self.anomaly_rate_percent > 0 \
                and self.injections is None:
            raise ConfigError("kind_weights sum to zero, nothing can be planned")
        for name in ("base_range", "morning_hour_range", "evening_hour_range",
                     "peak_width_range_min", "peak_amp_range",
                     "cut_len_slots", "weather_len_slots", "artifact_len_slots"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} is inverted: {lo} > {hi}")
        if not (0.0 <= self.weather_depth <= 1.0):
            raise ConfigError(f"weather_depth must be in [0, 1], got {self.weather_depth}")


def _rngs(spec: SimSpec):
    """Independent deterministic streams for layout, noise and injections."""
    children = np.random.SeedSequence(spec.seed).spawn(3)
    return tuple(np.random.default_rng(c) for c in children)


def _minute_grid(spec: SimSpec):
    """All simulated minutes in order, plus each day's point count."""
    times = []
    per_day = 0
    for d in range(spec.n_days):
        day = spec.start_date + timedelta(days=d)
        t = datetime.combine(day, spec.day_start)
        end = datetime.combine(day, spec.day_end)
        count = 0
        while t <= end:
            times.append(t)
            t += ONE_MIN
            count += 1
        per_day = count
    return times, per_day


@dataclass
class _Profiles:
    base: np.ndarray
    m_hour: np.ndarray
    m_width: np.ndarray
    m_amp: np.ndarray
    e_hour: np.ndarray
    e_width: np.ndarray
    e_amp: np.ndarray


def _draw_profiles(spec: SimSpec, rng: np.random.Generator) -> _Profiles:
    n = spec.n_cameras
    cols = {k: np.zeros(n) for k in
            ("base", "m_hour", "m_width", "m_amp", "e_hour", "e_width", "e_amp")}
    for i in range(n):
        cols["base"][i] = rng.uniform(*spec.base_range)
        cols["m_hour"][i] = rng.uniform(*spec.morning_hour_range)
        cols["m_width"][i] = rng.uniform(*spec.peak_width_range_min)
        cols["m_amp"][i] = rng.uniform(*spec.peak_amp_range)
        cols["e_hour"][i] = rng.uniform(*spec.evening_hour_range)
        cols["e_width"][i] = rng.uniform(*spec.peak_width_range_min)
        cols["e_amp"][i] = rng.uniform(*spec.peak_amp_range)
    return _Profiles(**cols)


def _profile_day(spec: SimSpec, prof: _Profiles, weekend: bool,
                 minutes: np.ndarray) -> np.ndarray:
    """Clean profile for one day: (minutes, cameras)."""
    damp = spec.weekend_factor if weekend else 1.0
    m = minutes[:, None]
    morning = prof.m_amp * np.exp(-((m - prof.m_hour * 60.0) ** 2)
                                  / (2.0 * prof.m_width ** 2))
    evening = prof.e_amp * np.exp(-((m - prof.e_hour * 60.0) ** 2)
                                  / (2.0 * prof.e_width ** 2))
    return prof.base + damp * (morning + evening)


def _kernel_cholesky(stations, jitter: float = 1e-9) -> np.ndarray:
    n = len(stations)
    dist = np.zeros((n, n))
    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            d = station_distance(stations[i], stations[j])
            dist[i, j] = dist[j, i] = d
            pairs.append(d)
    sigma = float(np.std(np.asarray(pairs))) if pairs else 1.0
    if sigma == 0.0:
        sigma = 1.0
    corr = np.exp(-(dist * dist) / (sigma * sigma))
    return np.linalg.cholesky(corr + jitter * np.eye(n))


def simulate_flows(spec: SimSpec):
    """Generate clean flows. Returns (series per camera, station list)."""
    spec.validate()
    r_layout, r_noise, _ = _rngs(spec)
    stations = [
        Station(
            f"cam{i}",
            r_layout.uniform(spec.lat_origin, spec.lat_origin + spec.lat_span),
            r_layout.uniform(spec.lon_origin, spec.lon_origin + spec.lon_span),
        )
        for i in range(spec.n_cameras)
    ]
    profiles = _draw_profiles(spec, r_layout)
    times, per_day = _minute_grid(spec)
    t_total = len(times)
    n = spec.n_cameras

    day0_minutes = np.array(
        [t.hour * 60 + t.minute for t in times[:per_day]], dtype=np.float64
    )
    flow = np.zeros((t_total, n))
    for d in range(spec.n_days):
        day = spec.start_date + timedelta(days=d)
        weekend = day.weekday() >= 5
        flow[d * per_day : (d + 1) * per_day] = _profile_day(
            spec, profiles, weekend, day0_minutes
        )

    if spec.noise_std > 0.0:
        chol = _kernel_cholesky(stations)
        z = r_noise.standard_normal((t_total, n))
        corr = z @ chol.T
        scale = math.sqrt(1.0 - spec.noise_rho**2)
        ar = np.zeros_like(corr)
        ar[0] = corr[0]
        for t in range(1, t_total):
            ar[t] = spec.noise_rho * ar[t - 1] + scale * corr[t]
        flow += spec.noise_std * ar

    np.clip(flow, 0.0, 1.0, out=flow)
    series = [
        FlowSeries(stations[c].id, [(times[t], float(flow[t, c])) for t in range(t_total)])
        for c in range(n)
    ]
    return series, stations


def _slot_grid_per_day(spec: SimSpec) -> int:
    """5-minute slots per day that survive the preprocessing truncation."""
    def to_min(t: time) -> int:
        return t.hour * 60 + t.minute

    lo = max(to_min(DAY_START), to_min(spec.day_start))
    lo += (-lo) % 5
    hi = min(to_min(DAY_END), to_min(spec.day_end))
    hi -= hi % 5
    return max(0, (hi - lo) // 5 + 1)


def _neighbors(stations, center: int, threshold_m: float) -> list:
    out = [center]
    for j in range(len(stations)):
        if j == center:
            continue
        if 0.0 < station_distance(stations[center], stations[j]) <= threshold_m:
            out.append(j)
    return sorted(out)


class _Planner:
    """Fills the slot budget with non-overlapping, verifiable events."""

    def __init__(self, spec: SimSpec, stations, value_of, rng) -> None:
        self.spec = spec
        self.stations = stations
        self.value_of = value_of  # (cam_index, datetime) -> clean value
        self.rng = rng
        self.busy: dict[int, list] = {}
        self.events = []

    def blocked(self, cam: int, start: datetime, end: datetime) -> bool:
        gap = self.spec.event_gap
        for s, e in self.busy.get(cam, ()):
            if start <= e + gap and s <= end + gap:
                return True
        return False

    def reserve(self, cam: int, start: datetime, end: datetime) -> None:
        self.busy.setdefault(cam, []).append((start, end))

    def pick_kind(self) -> str:
        w = np.asarray(self.spec.kind_weights, dtype=np.float64)
        return ANOMALY_KINDS[int(self.rng.choice(3, p=w / w.sum()))]

    def pick_interval(self, len_slots: int):
        spec = self.spec
        last_days = min(spec.anomaly_days, spec.n_days)
        day_idx = spec.n_days - 1 - int(self.rng.integers(0, last_days))
        day = spec.start_date + timedelta(days=day_idx)
        lo = spec.anomaly_start_clock.hour * 60 + spec.anomaly_start_clock.minute
        lo += (-lo) % 5
        hi = spec.anomaly_end_clock.hour * 60 + spec.anomaly_end_clock.minute
        hi -= hi % 5
        hi -= 5 * (len_slots - 1)
        if hi < lo:
            return None
        start_min = lo + 5 * int(self.rng.integers(0, (hi - lo) // 5 + 1))
        start = datetime.combine(day, time(start_min // 60, start_min % 60))
        end = start + timedelta(minutes=5 * len_slots - 1)
        return start, end

    def cut_effect(self, cam: int, start: datetime, end: datetime) -> float:
        """Largest deviation a frozen feed would show against the clean flow."""
        frozen = self.value_of(cam, start - ONE_MIN)
        peak = 0.0
        t = start
        while t <= end:
            peak = max(peak, abs(self.value_of(cam, t) - frozen))
            t += timedelta(minutes=5)
        return peak

    def plan(self, target_slots: int) -> list:
        spec = self.spec
        remaining = target_slots
        attempts = 0
        while remaining > 0:
            attempts += 1
            if attempts > 20_000:
                raise ConfigError(
                    "injection planner cannot place the requested anomaly budget; "
                    "lower anomaly_rate_percent or widen the eligible range"
                )
            kind = self.pick_kind()
            if kind == "signal_cut":
                lo, hi = spec.cut_len_slots
            elif kind == "visual_artifact":
                lo, hi = spec.artifact_len_slots
            else:
                lo, hi = spec.weather_len_slots
            len_slots = int(self.rng.integers(lo, hi + 1))

            if kind == "weather":
                center = int(self.rng.integers(0, spec.n_cameras))
                covered = _neighbors(self.stations, center, spec.neighbor_threshold_m)
                if len_slots * len(covered) > remaining:
                    len_slots = remaining // len(covered)
                    if len_slots < 1:
                        continue
                interval = self.pick_interval(len_slots)
                if interval is None:
                    continue
                start, end = interval
                if any(self.blocked(c, start, end) for c in covered):
                    continue
                depth_peak = spec.weather_depth * max(
                    self.value_of(c, start + timedelta(minutes=5 * (len_slots // 2)))
                    for c in covered
                )
                if depth_peak < spec.min_effect:
                    continue
                for c in covered:
                    self.reserve(c, start, end)
                self.events.append(("weather", covered, start, end))
                remaining -= len_slots * len(covered)
            else:
                len_slots = min(len_slots, remaining)
                cam = int(self.rng.integers(0, spec.n_cameras))
                interval = self.pick_interval(len_slots)
                if interval is None:
                    continue
                start, end = interval
                if self.blocked(cam, start, end):
                    continue
                if kind == "signal_cut" and self.cut_effect(cam, start, end) < spec.min_effect:
                    continue
                self.reserve(cam, start, end)
                self.events.append((kind, [cam], start, end))
                remaining -= len_slots
        return self.events


def _apply_event(kind: str, cams, start: datetime, end: datetime,
                 series_points, index_of, spec: SimSpec, rng) -> None:
    for cam in cams:
        pts = series_points[cam]
        i = index_of(start)
        j = index_of(end)
        span = j - i + 1
        if kind == "signal_cut":
            for k in range(i, j + 1):
                pts[k] = (pts[k][0], None)
        elif kind == "visual_artifact":
            bumps = rng.uniform(-spec.artifact_scale, spec.artifact_scale, size=span)
            for off, k in enumerate(range(i, j + 1)):
                t, v = pts[k]
                pts[k] = (t, float(np.clip(v + bumps[off], 0.0, 1.0)))
        else:  # weather
            rise = max(1, int(0.2 * span))
            for off, k in enumerate(range(i, j + 1)):
                if off < rise:
                    ramp = 0.5 * (1.0 - math.cos(math.pi * (off + 1) / rise))
                elif off >= span - rise:
                    ramp = 0.5 * (1.0 - math.cos(math.pi * (span - off) / rise))
                else:
                    ramp = 1.0
                t, v = pts[k]
                pts[k] = (t, float(v * (1.0 - spec.weather_depth * ramp)))


def inject_anomalies(series_list, spec: SimSpec, stations):
    """Apply planned or explicit anomalies. Returns (new series, truth records).

    With spec.injections set, the given records are applied literally (one
    camera each) and overlaps raise a conflict error. Otherwise the planner
    fills floor(rate * eligible points) anomalous slots on the trailing
    anomaly_days days, spacing events apart and re-rolling any draw whose
    effect against the clean flow would be too small to verify.
    """
    spec.validate()
    _, _, r_inject = _rngs(spec)
    id_to_idx = {s.id: i for i, s in enumerate(stations)}
    points = [list(s.points) for s in series_list]
    time_index = {t: i for i, (t, _) in enumerate(series_list[0].points)}

    def index_of(t: datetime) -> int:
        if t not in time_index:
            raise ConfigError(f"injection time {t} is outside the simulated grid")
        return time_index[t]

    def value_of(cam: int, t: datetime) -> float:
        v = series_list[cam].points[index_of(t)][1]
        return 0.0 if v is None else float(v)

    records: list[TruthRecord] = []
    if spec.injections is not None:
        busy: dict[str, list] = {}
        for rec in spec.injections:
            if rec.camera_id not in id_to_idx:
                raise ConfigError(f"injection names unknown camera {rec.camera_id!r}")
            for s, e in busy.get(rec.camera_id, ()):
                if rec.start <= e and s <= rec.end:
                    raise InjectionConflictError(
                        f"camera {rec.camera_id!r}: injection {rec.start}..{rec.end} "
                        f"overlaps {s}..{e}"
                    )
            busy.setdefault(rec.camera_id, []).append((rec.start, rec.end))
        for rec in sorted(spec.injections, key=lambda r: (r.start, r.camera_id, r.kind)):
            _apply_event(rec.kind, [id_to_idx[rec.camera_id]], rec.start, rec.end,
                         points, index_of, spec, r_inject)
            records.append(rec)
    elif spec.anomaly_rate_percent > 0.0 and spec.anomaly_days > 0:
        slots_per_day = _slot_grid_per_day(spec)
        eligible = min(spec.anomaly_days, spec.n_days) * slots_per_day * spec.n_cameras
        target = int(math.floor(spec.anomaly_rate_percent * eligible / 100.0))
        if target > 0:
            planner = _Planner(spec, stations, value_of, r_inject)
            events = planner.plan(target)
            events.sort(key=lambda ev: (ev[2], min(ev[1])))
            for kind, cams, start, end in events:
                _apply_event(kind, cams, start, end, points, index_of, spec, r_inject)
                for cam in cams:
                    records.append(TruthRecord(
                        camera_id=stations[cam].id, start=start, end=end, kind=kind,
                    ))
    records.sort(key=lambda r: (r.start, r.camera_id, r.kind))
    new_series = [FlowSeries(s.camera_id, pts) for s, pts in zip(series_list, points)]
    return new_series, records
