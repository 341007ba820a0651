"""Camera graph construction and the normalized propagation operator.

Stations are traffic cameras with GPS coordinates. Edge weights come from a
Gaussian kernel over great-circle distance, cut off at a distance threshold,
and the propagation matrix is the symmetric degree-normalized adjacency with
self-loops that every graph convolution in the model applies.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateGeometryError, GraphConstructionError, ShapeError
from .numeric import Tensor, tensor

EARTH_RADIUS_M = 6_371_000.0
DEFAULT_THRESHOLD_M = 2_000.0


@dataclass(frozen=True)
class Station:
    """One camera site. Coordinates are WGS84 degrees."""

    id: str
    latitude: float
    longitude: float

    def __post_init__(self) -> None:
        if not self.id:
            raise GraphConstructionError("station id must be non-empty")
        if not (-90.0 <= self.latitude <= 90.0):
            raise GraphConstructionError(
                f"station {self.id!r}: latitude {self.latitude} out of [-90, 90]"
            )
        if not (-180.0 <= self.longitude <= 180.0):
            raise GraphConstructionError(
                f"station {self.id!r}: longitude {self.longitude} out of [-180, 180]"
            )


def station_distance(a: Station, b: Station) -> float:
    """Haversine great-circle distance in meters."""
    lat1 = math.radians(a.latitude)
    lat2 = math.radians(b.latitude)
    dlat = lat2 - lat1
    dlon = math.radians(b.longitude - a.longitude)
    h = math.sin(dlat / 2.0) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def edge_weight(dist_m: float, sigma_m: float) -> float:
    """Gaussian kernel weight exp(-d^2 / sigma^2) for one station pair."""
    return math.exp(-(dist_m * dist_m) / (sigma_m * sigma_m))


@dataclass(frozen=True)
class NodeSubgraph:
    """A center node together with itself and its direct kernel neighbors."""

    center: int
    members: tuple[int, ...]


class TrafficGraph:
    """Immutable station graph: kernel weights W and propagation matrix A_hat."""

    def __init__(
        self,
        stations: list[Station],
        weights: Tensor,
        sigma: float,
        threshold_m: float,
    ) -> None:
        self.stations = list(stations)
        self.weights = tensor(weights)
        self.sigma = float(sigma)
        self.threshold_m = float(threshold_m)
        self.propagation = propagation_matrix(self.weights)
        self.station_index = {s.id: i for i, s in enumerate(self.stations)}
        self.weights.setflags(write=False)
        self.propagation.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.stations)

    def index_of(self, camera_id: str) -> int:
        try:
            return self.station_index[camera_id]
        except KeyError:
            raise GraphConstructionError(f"unknown camera id {camera_id!r}") from None


def build_graph(
    stations: list[Station],
    threshold_m: float = DEFAULT_THRESHOLD_M,
    forced_edges: list[tuple[str, str]] | None = None,
) -> TrafficGraph:
    """Build the kernel-weighted graph over the given stations.

    sigma is the population standard deviation over the N(N-1)/2 unordered
    pair distances. Pairs farther apart than threshold_m (or coincident)
    get weight zero unless listed in forced_edges, which pins the pair as
    adjacent regardless of the threshold.
    """
    n = len(stations)
    if n < 2:
        raise GraphConstructionError(f"need at least 2 stations, got {n}")
    ids = [s.id for s in stations]
    if len(set(ids)) != n:
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise GraphConstructionError(f"duplicate camera ids: {dupes}")
    if threshold_m <= 0.0:
        raise GraphConstructionError(f"threshold_m must be positive, got {threshold_m}")

    dist = np.zeros((n, n), dtype=np.float64)
    pair_dists = []
    for i in range(n):
        for j in range(i + 1, n):
            d = station_distance(stations[i], stations[j])
            dist[i, j] = d
            dist[j, i] = d
            pair_dists.append(d)
    sigma = float(np.std(np.asarray(pair_dists, dtype=np.float64)))
    if sigma == 0.0:
        raise DegenerateGeometryError(
            "pairwise distances have zero spread (coincident or perfectly "
            "regular station layout), kernel scale is undefined"
        )

    adjacent = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(i + 1, n):
            if 0.0 < dist[i, j] <= threshold_m:
                adjacent[i, j] = adjacent[j, i] = True

    index = {s.id: i for i, s in enumerate(stations)}
    for id_a, id_b in forced_edges or []:
        if id_a not in index or id_b not in index:
            raise GraphConstructionError(
                f"edge override names unknown station: ({id_a!r}, {id_b!r})"
            )
        a, b = index[id_a], index[id_b]
        if a == b:
            raise GraphConstructionError(f"edge override is a self-loop: {id_a!r}")
        adjacent[a, b] = adjacent[b, a] = True

    w = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            if adjacent[i, j]:
                wij = edge_weight(dist[i, j], sigma)
                w[i, j] = wij
                w[j, i] = wij
    return TrafficGraph(stations, w, sigma, threshold_m)


def propagation_matrix(weights: Tensor) -> Tensor:
    """Symmetric normalization with self-loops: D^-1/2 (W + I) D^-1/2."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"weight matrix must be square, got {w.shape}")
    if np.any(w != w.T):
        raise GraphConstructionError("weight matrix must be exactly symmetric")
    if np.any(w < 0.0):
        raise GraphConstructionError("weight matrix must be non-negative")
    wt = w + np.eye(w.shape[0])
    # degrees are >= 1 thanks to the self-loop, so the rsqrt is always finite
    dinv = 1.0 / np.sqrt(wt.sum(axis=1))
    return tensor(dinv[:, None] * wt * dinv[None, :])


def graph_convolve(a_hat: Tensor, x: Tensor, theta: Tensor) -> Tensor:
    """One graph convolution A_hat @ X @ Theta."""
    a_hat = np.asarray(a_hat)
    x = np.asarray(x)
    theta = np.asarray(theta)
    if a_hat.ndim != 2 or a_hat.shape[0] != a_hat.shape[1]:
        raise ShapeError(f"propagation matrix must be square, got {a_hat.shape}")
    if x.ndim != 2 or x.shape[0] != a_hat.shape[0]:
        raise ShapeError(
            f"node features {x.shape} do not match propagation matrix {a_hat.shape}"
        )
    if theta.ndim != 2 or theta.shape[0] != x.shape[1]:
        raise ShapeError(
            f"filter {theta.shape} does not match feature width {x.shape[1]}"
        )
    return a_hat @ x @ theta


def node_subgraph(graph: TrafficGraph, v: int) -> NodeSubgraph:
    """The center v plus every node with a nonzero kernel weight to it."""
    if not (0 <= v < graph.n):
        raise GraphConstructionError(f"node index {v} out of range [0, {graph.n})")
    neighbors = np.flatnonzero(graph.weights[v] > 0.0)
    members = sorted(set(neighbors.tolist()) | {v})
    return NodeSubgraph(center=v, members=tuple(members))


def subgraph_pool_weights(graph: TrafficGraph) -> Tensor:
    """Node weights for subgraph-averaged pooling.

    Each node's subgraph contributes the mean of its members; averaging
    those means over all subgraphs gives a fixed per-node weight vector:
    w_u = (1/N) * sum over centers v of [u in members(v)] / |members(v)|.
    """
    n = graph.n
    w = np.zeros(n, dtype=np.float64)
    for v in range(n):
        sub = node_subgraph(graph, v)
        share = 1.0 / (n * len(sub.members))
        for u in sub.members:
            w[u] += share
    return w


def load_stations_csv(path) -> list[Station]:
    """Read stations from a camera_id,lat,lon CSV with a header row."""
    path = Path(path)
    stations: list[Station] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise GraphConstructionError(f"{path}: empty stations file")
        if [c.strip() for c in header] != ["camera_id", "lat", "lon"]:
            raise GraphConstructionError(
                f"{path}: expected header camera_id,lat,lon, got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise GraphConstructionError(f"{path}:{lineno}: expected 3 fields")
            try:
                lat = float(row[1])
                lon = float(row[2])
            except ValueError:
                raise GraphConstructionError(
                    f"{path}:{lineno}: non-numeric coordinate"
                ) from None
            stations.append(Station(row[0], lat, lon))
    return stations


def write_stations_csv(path, stations: list[Station]) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["camera_id", "lat", "lon"])
        for s in stations:
            writer.writerow([s.id, repr(s.latitude), repr(s.longitude)])


def load_edges_csv(path) -> list[tuple[str, str]]:
    """Read edge overrides from an id_a,id_b CSV with a header row."""
    path = Path(path)
    edges: list[tuple[str, str]] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise GraphConstructionError(f"{path}: empty edges file")
        if [c.strip() for c in header] != ["id_a", "id_b"]:
            raise GraphConstructionError(
                f"{path}: expected header id_a,id_b, got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise GraphConstructionError(f"{path}:{lineno}: expected 2 fields")
            edges.append((row[0], row[1]))
    return edges
