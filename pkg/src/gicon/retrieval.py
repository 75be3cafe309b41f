"""Example retrieval: pooled key features, exact cosine top-K, and context sampling."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from . import container
from .data import Dataset, ExamplePair

POOL_MAGIC = b"GICON-IX"


SCORE_DECIMALS = 12


class DegenerateQueryWarning(UserWarning):
    """Cosine similarity against a zero vector; the score is defined as 0."""


def extract_feature(key: np.ndarray, tau_r: int) -> np.ndarray:
    """Node-mean of each of the last ``tau_r`` key frames, concatenated in time order."""
    key = np.asarray(key)
    if tau_r < 1 or tau_r > key.shape[0]:
        raise ValueError(f"tau_r={tau_r} must lie in 1..tau={key.shape[0]}")
    return key[-tau_r:].astype(np.float64).mean(axis=1).reshape(-1)


def frame_means(frames: np.ndarray) -> np.ndarray:
    """[T, V, c] -> [T, c]; identical arithmetic to ``extract_feature``."""
    return np.asarray(frames, dtype=np.float64).mean(axis=1)


def cosine_similarity(z1, z2) -> float:
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    n1, n2 = np.linalg.norm(z1), np.linalg.norm(z2)
    if n1 == 0 or n2 == 0:
        warnings.warn("cosine similarity with a zero vector", DegenerateQueryWarning, stacklevel=2)
        return 0.0
    return float(np.clip(z1 @ z2 / (n1 * n2), -1.0, 1.0))


def cosine_scores(features: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Cosine similarity of each query row against each pool row; zero vectors score 0.

    Scores are snapped to 12 decimals so that mathematically equal
    similarities (parallel rows of different length, say) compare equal and
    the lower-index tie rule applies instead of rounding noise.
    """
    f = np.asarray(features, dtype=np.float64)
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    fn = np.linalg.norm(f, axis=1)
    qn = np.linalg.norm(q, axis=1)
    denom = qn[:, None] * fn[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        s = (q @ f.T) / denom
    s[denom == 0] = 0.0
    return np.round(np.clip(s, -1.0, 1.0), SCORE_DECIMALS)


def top_k(scores: np.ndarray, K: int, allowed: Optional[np.ndarray] = None) -> np.ndarray:
    """Indices of the K largest scores, descending; ties go to the lower index."""
    scores = np.asarray(scores)
    if scores.size == 0:
        raise ValueError("cannot select from an empty pool")
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    order = np.argsort(-scores, kind="stable")
    if allowed is not None:
        order = order[np.asarray(allowed, dtype=bool)[order]]
    return order[:K]


@dataclass(frozen=True)
class LeakageGuard:
    """The query's own window; pool examples overlapping it are dropped."""

    query_t: int
    tau: int
    dt: int
    series_id: str

    def overlaps(self, origins: np.ndarray, series_id: str) -> np.ndarray:
        origins = np.asarray(origins)
        if series_id != self.series_id:
            return np.zeros(origins.shape, dtype=bool)
        # [o - tau + 1, o + dt] meets [t - tau + 1, t + dt]
        return np.abs(origins - self.query_t) <= self.tau - 1 + self.dt


@dataclass
class ExamplePool:
    """Candidate examples of one series, one row per key origin time.

    A pool entry is only the key window ending at ``origins[i]``; the value
    depends on dt, so ``valid(dt)`` keeps entries whose value frame
    ``origin + dt`` stays below ``value_end``.
    """

    origins: np.ndarray
    features: np.ndarray
    tau: int
    tau_r: int
    value_end: int
    series_id: str

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or len(self.features) != len(self.origins):
            raise ValueError("features must have one row per origin")

    def __len__(self) -> int:
        return len(self.origins)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def valid(self, dt: int) -> np.ndarray:
        return self.origins + dt < self.value_end

    def allowed(self, dt: int, guard: Optional[LeakageGuard] = None) -> np.ndarray:
        mask = self.valid(dt)
        if guard is not None:
            mask &= ~guard.overlaps(self.origins, self.series_id)
        return mask


def build_pool(
    dataset: Dataset,
    tau: int,
    tau_r: int,
    start: Optional[int] = None,
    end: Optional[int] = None,
) -> ExamplePool:
    """Pool over the frames ``[start, end)`` (default: the training split)."""
    if not 1 <= tau_r <= tau:
        raise ValueError(f"tau_r={tau_r} must lie in 1..tau={tau}")
    start = 0 if start is None else start
    end = dataset.train_end if end is None else end
    origins = np.arange(start + tau - 1, end - 1, dtype=np.int64)
    if origins.size == 0:
        raise ValueError(f"frames [{start}, {end}) are too short for tau={tau}")
    means = frame_means(dataset.normalized_frames())
    features = query_features(means, origins, tau_r)
    return ExamplePool(origins, features.astype(np.float32), tau, tau_r, end, dataset.series_id)


def query_features(means: np.ndarray, origins: np.ndarray, tau_r: int) -> np.ndarray:
    idx = np.asarray(origins)[:, None] + np.arange(-tau_r + 1, 1)[None, :]
    return means[idx].reshape(len(idx), -1)


def select_top_k(pool: ExamplePool, query: np.ndarray, K: int, allowed: Optional[np.ndarray] = None) -> np.ndarray:
    if len(pool) == 0:
        raise ValueError("cannot select from an empty pool")
    return top_k(cosine_scores(pool.features, query)[0], K, allowed)


def retrieve(
    pool: ExamplePool,
    query_feats: np.ndarray,
    query_ts: Sequence[int],
    dt: int,
    K: int,
    series_id: Optional[str] = None,
) -> List[np.ndarray]:
    """Guarded top-K for a batch of queries that share ``dt``."""
    scores = cosine_scores(pool.features, query_feats)
    series_id = pool.series_id if series_id is None else series_id
    out = []
    for row, t in zip(scores, query_ts):
        guard = LeakageGuard(int(t), pool.tau, dt, series_id)
        out.append(top_k(row, K, pool.allowed(dt, guard)))
    return out


def sample_context(
    candidates: Sequence[int],
    k: int,
    seed: Union[int, np.random.Generator],
    pool: Optional[ExamplePool] = None,
    guard: Optional[LeakageGuard] = None,
) -> List[int]:
    """Draw ``k`` of the ranked ``candidates`` uniformly without replacement.

    The draw keeps the candidates' (descending-similarity) order. With a pool
    and guard given, overlapping candidates are removed first.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    if pool is not None and guard is not None and candidates.size:
        keep = ~guard.overlaps(pool.origins[candidates], pool.series_id)
        keep &= pool.valid(guard.dt)[candidates]
        candidates = candidates[keep]
    if k < 0:
        raise ValueError("k must be non-negative")
    if k > len(candidates):
        raise ValueError(f"need {k} context examples but only {len(candidates)} candidates survive the guard")
    if k == 0:
        return []
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    picked = np.sort(rng.choice(len(candidates), size=k, replace=False))
    return candidates[picked].tolist()


def context_pairs(frames: np.ndarray, pool: ExamplePool, indices: Sequence[int], dt: int) -> List[ExamplePair]:
    tau = pool.tau
    pairs = []
    for i in indices:
        o = int(pool.origins[i])
        pairs.append(ExamplePair(frames[o - tau + 1:o + 1], frames[o + dt], dt, o))
    return pairs


def pool_bytes(pool: ExamplePool, extra: Optional[dict] = None) -> bytes:
    meta = {
        "kind": "example-pool",
        "tau": pool.tau,
        "tau_r": pool.tau_r,
        "value_end": pool.value_end,
        "series_id": pool.series_id,
        "n_entries": len(pool),
        "dim": pool.dim,
    }
    if extra:
        meta.update(extra)
    return container.dumps(POOL_MAGIC, meta, {"origins": pool.origins, "features": pool.features})


def write_pool(pool: ExamplePool, path, extra: Optional[dict] = None) -> None:
    Path(path).write_bytes(pool_bytes(pool, extra))


def read_pool(path) -> ExamplePool:
    meta, tensors = container.read(path, POOL_MAGIC)
    return ExamplePool(tensors["origins"], tensors["features"], meta["tau"], meta["tau_r"], meta["value_end"], meta["series_id"])
