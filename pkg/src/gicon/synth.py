"""Synthetic multi-operator graph dynamics.

Two wind channels and one or more tracer channels live on a radius graph.
Each hour is integrated with explicit Euler substeps of

    wind:   du/dt = D L(u) + relax (F g(x, t) - u)
    tracer: du/dt = D L(u) + A sum_j max(0, w_j . e_ji) (u_j - u_i) + relax (F g(x, t) - u)

where L is the unnormalized graph Laplacian, e_ji the unit vector of edge
j->i and g a fixed sum of low-frequency space-time sinusoids with |g| <= 1.
The hourly map depends only on (state, hour), so evolving a+b hours equals
evolving a and then b.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Tuple

import numpy as np

from .data import ChannelStats, Dataset, Series
from .graph import Graph, Node, build_edges

N_WIND = 2


class UnstableSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    n_nodes: int = 32
    connection_radius: float = 150.0
    extent_km: float = 500.0
    diffusion: float = 0.05
    advection: float = 0.1
    forcing: float = 1.0
    relaxation: float = 0.2
    n_channels: int = 4
    horizon: int = 2000
    substeps: int = 4
    train_frac: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.n_channels < N_WIND + 1:
            raise ValueError(f"n_channels must be >= {N_WIND + 1} (two wind channels plus tracers)")
        if self.n_nodes < 1 or self.horizon < 1 or self.substeps < 1:
            raise ValueError("n_nodes, horizon and substeps must be positive")
        if min(self.diffusion, self.advection, self.forcing, self.relaxation) < 0:
            raise ValueError("diffusion, advection, forcing and relaxation must be non-negative")
        if not 0 < self.train_frac <= 1:
            raise ValueError("train_frac must lie in (0, 1]")


def _sinusoid_bank(rng: np.random.Generator, n_channels: int, n_terms: int = 3):
    amps = rng.uniform(0.2, 1.0, size=(n_channels, n_terms))
    amps /= amps.sum(axis=1, keepdims=True)
    kx = rng.integers(-2, 3, size=(n_channels, n_terms)).astype(np.float64)
    ky = rng.integers(-2, 3, size=(n_channels, n_terms)).astype(np.float64)
    periods = rng.uniform(12.0, 48.0, size=(n_channels, n_terms))
    phase = rng.uniform(0.0, 2 * math.pi, size=(n_channels, n_terms))
    return amps, kx, ky, 2 * math.pi / periods, phase


class SynthSystem:
    """The deterministic hourly map for one spec; state arrays are [V, c] float64."""

    def __init__(self, spec: SynthSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        pos = rng.uniform(0.0, 1.0, size=(spec.n_nodes, 2)) * spec.extent_km
        nodes = [Node(i, (float(x), float(y)), 0.0) for i, (x, y) in enumerate(pos)]
        self.graph = Graph(nodes, build_edges(nodes, spec.connection_radius))
        self.src, self.dst = self.graph.src_dst()
        direction = np.array([e.direction for e in self.graph.edges])
        self.ex, self.ey = np.cos(direction), np.sin(direction)
        self.max_degree = int(self.graph.degrees().max()) if self.graph.edges else 0

        h = 1.0 / spec.substeps
        wind_max = math.sqrt(N_WIND) * spec.forcing
        self.step_factor = ((spec.diffusion + spec.advection * wind_max) * self.max_degree + spec.relaxation) * h
        if self.step_factor >= 1.0:
            raise UnstableSpecError(
                f"explicit step factor {self.step_factor:.3f} >= 1 "
                f"(max degree {self.max_degree}, substep {h} h); lower diffusion/advection or add substeps"
            )

        cx = pos[:, 0:1] / spec.extent_km
        cy = pos[:, 1:2] / spec.extent_km
        amps, kx, ky, omega, phase = _sinusoid_bank(rng, spec.n_channels)
        # spatial phase per (node, channel, term)
        self._space = 2 * math.pi * (kx[None] * cx[:, :, None] + ky[None] * cy[:, :, None]) + phase[None]
        self._amps, self._omega = amps, omega
        init_amps, ikx, iky, _, iphase = _sinusoid_bank(rng, spec.n_channels)
        init_space = 2 * math.pi * (ikx[None] * cx[:, :, None] + iky[None] * cy[:, :, None]) + iphase[None]
        self.initial_state = 0.5 * spec.forcing * (init_amps[None] * np.sin(init_space)).sum(axis=-1)

    def forcing_field(self, t: float) -> np.ndarray:
        return (self._amps[None] * np.sin(self._space + self._omega[None] * t)).sum(axis=-1)

    def _laplacian(self, u: np.ndarray) -> np.ndarray:
        out = np.zeros_like(u)
        np.add.at(out, self.dst, u[self.src] - u[self.dst])
        return out

    def _substep(self, u: np.ndarray, t: float, h: float) -> np.ndarray:
        s = self.spec
        du = s.diffusion * self._laplacian(u)
        du += s.relaxation * (s.forcing * self.forcing_field(t) - u)
        if s.advection and len(self.src):
            gate = np.maximum(0.0, u[self.src, 0] * self.ex + u[self.src, 1] * self.ey)
            flux = np.zeros_like(u[:, N_WIND:])
            np.add.at(flux, self.dst, gate[:, None] * (u[self.src, N_WIND:] - u[self.dst, N_WIND:]))
            du[:, N_WIND:] += s.advection * flux
        return u + h * du

    def step(self, u: np.ndarray, hour: int) -> np.ndarray:
        """Advance one hour starting at integer hour ``hour``."""
        h = 1.0 / self.spec.substeps
        for i in range(self.spec.substeps):
            u = self._substep(u, hour + i * h, h)
        return u

    def evolve(self, u: np.ndarray, start_hour: int, hours: int) -> np.ndarray:
        u = np.array(u, dtype=np.float64)
        for k in range(hours):
            u = self.step(u, start_hour + k)
        return u

    def trajectory(self, horizon: int) -> np.ndarray:
        frames = np.empty((horizon, self.spec.n_nodes, self.spec.n_channels))
        u = self.initial_state.copy()
        for t in range(horizon):
            frames[t] = u
            u = self.step(u, t)
        return frames


def channel_names(n_channels: int):
    return ["wind_u", "wind_v"] + [f"tracer_{i}" for i in range(n_channels - N_WIND)]


def synth_generate(spec: SynthSpec) -> Tuple[Graph, Series]:
    system = SynthSystem(spec)
    frames = system.trajectory(spec.horizon).astype(np.float32)
    series = Series(
        frames,
        np.arange(spec.horizon, dtype=np.int64),
        channel_names(spec.n_channels),
        list(range(N_WIND, spec.n_channels)),
    )
    return system.graph, series


def synth_dataset(spec: SynthSpec) -> Dataset:
    graph, series = synth_generate(spec)
    train_end = max(1, int(spec.horizon * spec.train_frac))
    stats = ChannelStats.from_frames(series.frames[:train_end])
    return Dataset(graph, series, stats, train_end, series_id=f"synth-{spec.seed}")


def spec_dict(spec: SynthSpec) -> dict:
    return asdict(spec)
