"""Station graphs: nodes, attributed directed edges, and edge features."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

EARTH_RADIUS_KM = 6371.0088

ElevationSampler = Callable[[float, float], float]


@dataclass(frozen=True)
class Node:
    id: int
    position: Tuple[float, float]
    altitude: float = 0.0


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    distance: float
    direction: float


@dataclass
class Graph:
    """Directed graph; an undirected link is stored as two edges."""

    nodes: List[Node]
    edges: List[Edge]
    geographic: bool = False

    def __post_init__(self):
        n = len(self.nodes)
        for i, node in enumerate(self.nodes):
            if node.id != i:
                raise ValueError(f"node ids must be dense 0..{n - 1}; position {i} has id {node.id}")
            if not all(math.isfinite(c) for c in node.position):
                raise ValueError(f"node {i} has a non-finite position")
        seen = set()
        for e in self.edges:
            if not (0 <= e.src < n and 0 <= e.dst < n) or e.src == e.dst:
                raise ValueError(f"invalid edge {e.src}->{e.dst}")
            if (e.src, e.dst) in seen:
                raise ValueError(f"duplicate edge {e.src}->{e.dst}")
            seen.add((e.src, e.dst))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def src_dst(self) -> Tuple[np.ndarray, np.ndarray]:
        src = np.array([e.src for e in self.edges], dtype=np.int64)
        dst = np.array([e.dst for e in self.edges], dtype=np.int64)
        return src, dst

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        for e in self.edges:
            deg[e.dst] += 1
        return deg

    def permuted(self, perm: Sequence[int]) -> "Graph":
        """Relabel so that old node ``i`` becomes new node ``perm[i]``."""
        perm = list(perm)
        nodes = [None] * len(perm)
        for old, new in enumerate(perm):
            n = self.nodes[old]
            nodes[new] = Node(new, n.position, n.altitude)
        edges = [Edge(perm[e.src], perm[e.dst], e.distance, e.direction) for e in self.edges]
        return Graph(nodes, edges, self.geographic)


def displacement(a: Tuple[float, float], b: Tuple[float, float], geographic: bool) -> Tuple[float, float, float]:
    """(distance_km, dx_km, dy_km) from ``a`` to ``b``.

    Geographic positions are (lon, lat) degrees: haversine distance, with the
    direction taken in a local equirectangular plane.
    """
    if not geographic:
        dx, dy = b[0] - a[0], b[1] - a[1]
        return math.hypot(dx, dy), dx, dy
    lon1, lat1, lon2, lat2 = map(math.radians, (a[0], a[1], b[0], b[1]))
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    dist = 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))
    dx = (lon2 - lon1) * math.cos((lat1 + lat2) / 2) * EARTH_RADIUS_KM
    dy = (lat2 - lat1) * EARTH_RADIUS_KM
    return dist, dx, dy


def terrain_blocks(
    a: Node,
    b: Node,
    terrain: ElevationSampler,
    limit_m: float,
    n_samples: int = 32,
) -> bool:
    """True if the straight segment a->b crosses ground higher than the lower endpoint + limit."""
    ceiling = min(a.altitude, b.altitude) + limit_m
    (x0, y0), (x1, y1) = a.position, b.position
    for s in np.linspace(0.0, 1.0, n_samples):
        if terrain(x0 + s * (x1 - x0), y0 + s * (y1 - y0)) > ceiling:
            return True
    return False


def build_edges(
    nodes: Sequence[Node],
    dist_threshold_km: float = 200.0,
    terrain: Optional[ElevationSampler] = None,
    terrain_limit_m: float = 1200.0,
    geographic: bool = False,
    n_samples: int = 32,
) -> List[Edge]:
    if dist_threshold_km <= 0 or terrain_limit_m <= 0:
        raise ValueError("thresholds must be positive")
    edges = []
    for a in nodes:
        for b in nodes:
            if a.id == b.id:
                continue
            dist, dx, dy = displacement(a.position, b.position, geographic)
            if dist <= 0 or dist > dist_threshold_km:
                continue
            if terrain is not None and terrain_blocks(a, b, terrain, terrain_limit_m, n_samples):
                continue
            edges.append(Edge(a.id, b.id, dist, math.atan2(dy, dx)))
    return edges


@dataclass(frozen=True)
class EdgeStats:
    """z-score statistics for edge distance, taken from the training graph."""

    mean: float
    std: float

    @classmethod
    def from_graph(cls, graph: Graph) -> "EdgeStats":
        d = np.array([e.distance for e in graph.edges], dtype=np.float64)
        if d.size == 0:
            return cls(0.0, 1.0)
        std = float(d.std())
        return cls(float(d.mean()), std if std > 0 else 1.0)


RAW_EDGE_FEATURES = 3


def edge_features(edge: Edge, stats: EdgeStats, width: int = RAW_EDGE_FEATURES) -> np.ndarray:
    if width < RAW_EDGE_FEATURES:
        raise ValueError(f"edge feature width must be >= {RAW_EDGE_FEATURES}")
    out = np.zeros(width, dtype=np.float64)
    out[0] = (edge.distance - stats.mean) / stats.std
    out[1] = math.sin(edge.direction)
    out[2] = math.cos(edge.direction)
    return out


def edge_feature_matrix(graph: Graph, stats: EdgeStats, width: int = RAW_EDGE_FEATURES) -> np.ndarray:
    if not graph.edges:
        return np.zeros((0, width))
    return np.stack([edge_features(e, stats, width) for e in graph.edges])
