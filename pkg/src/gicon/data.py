"""Multichannel series on a graph, in-context example pairs, and the dataset file."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import container
from .graph import Edge, Graph, Node

DATASET_MAGIC = b"GICON-DS"


@dataclass
class Series:
    frames: np.ndarray  # [T, V, c]
    timestamps: np.ndarray  # [T] hours since epoch
    channel_names: List[str]
    target_channels: List[int]

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be [T, V, c], got shape {self.frames.shape}")
        T, _, c = self.frames.shape
        if T < 1:
            raise ValueError("series needs at least one frame")
        if self.timestamps.shape != (T,):
            raise ValueError(f"expected {T} timestamps, got {self.timestamps.shape}")
        if T > 1:
            steps = np.diff(self.timestamps)
            if steps[0] <= 0 or np.any(steps != steps[0]):
                raise ValueError("timestamps must be strictly increasing with uniform spacing")
        if len(self.channel_names) != c:
            raise ValueError(f"{len(self.channel_names)} channel names for {c} channels")
        if not self.target_channels or any(not 0 <= i < c for i in self.target_channels):
            raise ValueError(f"target channels {self.target_channels} out of range for {c} channels")

    @property
    def horizon(self) -> int:
        return self.frames.shape[0]

    @property
    def n_channels(self) -> int:
        return self.frames.shape[2]


@dataclass
class ExamplePair:
    key: np.ndarray  # [tau, V, c]
    value: np.ndarray  # [V, c]
    dt: int
    origin_t: int


def check_window(T: int, t: int, dt: int, tau: int) -> None:
    if dt < 1:
        raise ValueError(f"dt must be a positive number of hours, got {dt}")
    if t - tau + 1 < 0:
        raise IndexError(f"insufficient history: t - tau + 1 = {t - tau + 1} < 0")
    if t + dt >= T:
        raise IndexError(f"insufficient future: t + dt = {t + dt} >= T = {T}")


def make_example(series: Series, t: int, dt: int, tau: int) -> ExamplePair:
    check_window(series.horizon, t, dt, tau)
    return ExamplePair(series.frames[t - tau + 1:t + 1], series.frames[t + dt], dt, t)


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_frames(cls, frames: np.ndarray) -> "ChannelStats":
        flat = np.asarray(frames, dtype=np.float64).reshape(-1, frames.shape[-1])
        std = flat.std(axis=0)
        return cls(flat.mean(axis=0), np.where(std > 0, std, 1.0))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


@dataclass
class Dataset:
    """Graph + series + normalization, split in time at ``train_end``.

    Frames ``[0, train_end)`` form the training split (retrieval pool and
    training queries); ``[train_end, T)`` is held out for evaluation.
    """

    graph: Graph
    series: Series
    stats: ChannelStats
    train_end: int
    series_id: str = "series-0"

    def __post_init__(self):
        if self.series.frames.shape[1] != self.graph.n_nodes:
            raise ValueError("series node count does not match the graph")
        if not 0 < self.train_end <= self.series.horizon:
            raise ValueError(f"train_end {self.train_end} outside 1..{self.series.horizon}")

    def normalized_frames(self) -> np.ndarray:
        return self.stats.normalize(self.series.frames)

    def channel_schema(self):
        return list(self.series.channel_names), list(self.series.target_channels)


def _header(ds: Dataset) -> dict:
    s = ds.series
    T, V, c = s.frames.shape
    return {
        "magic": DATASET_MAGIC.decode(),
        "version": container.VERSION,
        "n_nodes": V,
        "T": T,
        "c": c,
        "channel_names": list(s.channel_names),
        "target_channels": [int(i) for i in s.target_channels],
        "geographic": ds.graph.geographic,
        "nodes": [[n.id, n.position[0], n.position[1], n.altitude] for n in ds.graph.nodes],
        "edges": [[e.src, e.dst, e.distance, e.direction] for e in ds.graph.edges],
        "normalization": {"mean": ds.stats.mean.tolist(), "std": ds.stats.std.tolist()},
        "t0": int(s.timestamps[0]),
        "step_hours": int(s.timestamps[1] - s.timestamps[0]) if T > 1 else 1,
        "train_end": int(ds.train_end),
        "series_id": ds.series_id,
    }


def dataset_bytes(ds: Dataset) -> bytes:
    frames = np.asarray(ds.series.frames, dtype="<f4")
    return container.dumps(DATASET_MAGIC, _header(ds), {"frames": frames})


def write_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def read_dataset(path) -> Dataset:
    meta, tensors = container.read(path, DATASET_MAGIC)
    frames = tensors["frames"]
    T, V, c = meta["T"], meta["n_nodes"], meta["c"]
    if frames.ndim != 3 or frames.shape[1:] != (V, c):
        raise container.FormatError(f"frame tensor shape {frames.shape} disagrees with header (|V|={V}, c={c})")
    if frames.shape[0] < T:
        raise container.TruncatedError(f"header declares T={T} but payload holds {frames.shape[0]} frames")
    if frames.shape[0] != T:
        raise container.FormatError(f"payload holds {frames.shape[0]} frames, header declares T={T}")
    nodes = [Node(int(i), (x, y), alt) for i, x, y, alt in meta["nodes"]]
    edges = [Edge(int(s), int(d), dist, ang) for s, d, dist, ang in meta["edges"]]
    graph = Graph(nodes, edges, bool(meta["geographic"]))
    timestamps = meta["t0"] + meta["step_hours"] * np.arange(T, dtype=np.int64)
    series = Series(frames, timestamps, list(meta["channel_names"]), list(meta["target_channels"]))
    norm = meta["normalization"]
    stats = ChannelStats(np.array(norm["mean"], dtype=np.float64), np.array(norm["std"], dtype=np.float64))
    return Dataset(graph, series, stats, int(meta["train_end"]), meta["series_id"])


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
