"""RMSE evaluation protocols and report files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .data import Dataset
from .retrieval import ExamplePool, cosine_scores, retrieve
from .training import TrainState, TrainingData

CSV_HEADER = ["dt", "example_count", "channel", "rmse", "rmse_noise", "n_queries", "flags"]


class SchemaError(ValueError):
    pass


class CellError(RuntimeError):
    """One (dt, count) cell could not be evaluated; the sweep records it and moves on."""


def rmse(preds, truth) -> np.ndarray:
    """Root-mean-square error per channel (last axis) over everything else."""
    preds = np.asarray(preds, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if preds.shape != truth.shape:
        raise ValueError(f"shape mismatch {preds.shape} vs {truth.shape}")
    if preds.size == 0:
        raise ValueError("rmse of an empty set")
    r = (preds - truth).reshape(-1, preds.shape[-1])
    return np.sqrt((r ** 2).mean(axis=0))


@dataclass
class EvalSpec:
    dts: List[int] = field(default_factory=lambda: [24])
    counts: List[int] = field(default_factory=lambda: [0, 1, 2, 5, 10, 20, 50, 100])
    selection: str = "topk"  # "topk" or "random"
    noise_sigma: float = 0.0  # > 0 turns on the gaussian-context pass
    stride: int = 1
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if any(c < 0 for c in self.counts) or list(self.counts) != sorted(self.counts):
            raise ValueError("counts must be non-negative and ascending")
        if self.selection not in ("topk", "random"):
            raise ValueError(f"selection must be 'topk' or 'random', got {self.selection!r}")
        if self.stride < 1 or self.batch_size < 1:
            raise ValueError("stride and batch_size must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if any(dt < 1 for dt in self.dts):
            raise ValueError("dts must be positive")


@dataclass
class ReportRow:
    dt: int
    example_count: int
    channel: str
    rmse: float
    rmse_noise: float = math.nan
    n_queries: int = 0
    flags: str = ""

    @property
    def difference(self) -> float:
        return self.rmse - self.rmse_noise


@dataclass
class Report:
    rows: List[ReportRow] = field(default_factory=list)
    provenance: Dict[str, object] = field(default_factory=dict)

    @property
    def has_errors(self) -> bool:
        return any("error" in r.flags for r in self.rows)

    def table(self) -> Dict[tuple, ReportRow]:
        return {(r.dt, r.example_count, r.channel): r for r in self.rows}


class Evaluator:
    """Runs query-only predictions of one checkpoint over one dataset's test split."""

    def __init__(self, state: TrainState, dataset: Dataset, pool: Optional[ExamplePool] = None):
        mcfg = state.model.cfg
        names, targets = dataset.channel_schema()
        schema = state.schema or {}
        if schema.get("channel_names", names) != names or list(schema.get("target_channels", targets)) != targets:
            raise SchemaError(
                f"dataset channels {names} / targets {targets} do not match the checkpoint's "
                f"{schema.get('channel_names')} / {schema.get('target_channels')}"
            )
        if dataset.series.n_channels != mcfg.in_channels:
            raise SchemaError(f"dataset has {dataset.series.n_channels} channels, model expects {mcfg.in_channels}")
        self.state = state
        self.model = state.model
        self.dataset = dataset
        dtype = next(self.model.parameters()).dtype
        self.data = TrainingData(dataset, mcfg.tau, state.train_cfg.tau_r or mcfg.tau, dtype, state.edge_stats, pool)
        self.targets = list(mcfg.target_channels)
        self.channel_names = [dataset.series.channel_names[c] for c in self.targets]
        self.raw = np.asarray(dataset.series.frames, dtype=np.float64)

    def query_times(self, dt: int, stride: int) -> np.ndarray:
        tau, T = self.data.tau, self.dataset.series.horizon
        first = self.dataset.train_end + tau - 1
        return np.arange(first, T - dt, stride, dtype=np.int64)

    def contexts(self, ts: np.ndarray, dt: int, count: int, spec: EvalSpec) -> List[np.ndarray]:
        if count == 0:
            return [np.zeros(0, dtype=np.int64) for _ in ts]
        feats = self.data.features(ts)
        if spec.selection == "topk":
            ctx = retrieve(self.data.pool, feats, ts, dt, count)
        else:
            rng = np.random.default_rng([spec.seed, dt, count, 0x5E1])
            scores = cosine_scores(self.data.pool.features, feats)
            ctx = []
            for t, row in zip(ts, scores):
                allowed = np.flatnonzero(self.data.pool.allowed(dt, self._guard(t, dt)))
                if len(allowed) < count:
                    ctx.append(allowed)
                    continue
                pick = rng.choice(allowed, size=count, replace=False)
                ctx.append(pick[np.argsort(-row[pick], kind="stable")])
        short = min(len(c) for c in ctx)
        if short < count:
            raise CellError(f"pool too small: {short} eligible examples for count {count}")
        return ctx

    def _guard(self, t, dt):
        from .retrieval import LeakageGuard

        return LeakageGuard(int(t), self.data.tau, dt, self.dataset.series_id)

    def predict_queries(self, ts, dt, count, spec: EvalSpec, noise: bool = False) -> np.ndarray:
        """De-normalized query predictions ``[Q, V, n_targets]``."""
        ctx = self.contexts(ts, dt, count, spec)
        out = []
        rng = np.random.default_rng([spec.seed, dt, count, 0x401]) if noise else None
        with torch.no_grad():
            for lo in range(0, len(ts), spec.batch_size):
                sl = slice(lo, lo + spec.batch_size)
                b = self.data.gather(ts[sl].tolist(), [dt] * len(ts[sl]), [c.tolist() for c in ctx[sl]])
                keys, values = b.keys, b.values
                if noise and count:
                    keys = torch.tensor(rng.normal(0.0, spec.noise_sigma, size=tuple(keys.shape)), dtype=keys.dtype)
                    values = torch.tensor(rng.normal(0.0, spec.noise_sigma, size=tuple(values.shape)), dtype=values.dtype)
                pred = self.model(keys, values, b.query, self.data.graph)[:, -1]
                out.append(pred.double().numpy())
        pred = np.concatenate(out, axis=0)
        st = self.dataset.stats
        return pred * st.std[self.targets] + st.mean[self.targets]

    def cell(self, dt: int, count: int, spec: EvalSpec, flags: str = "") -> List[ReportRow]:
        try:
            ts = self.query_times(dt, spec.stride)
            if len(ts) == 0:
                raise CellError(f"dt={dt} exceeds the test horizon")
            truth = self.raw[ts + dt][..., self.targets]
            err = rmse(self.predict_queries(ts, dt, count, spec), truth)
            err_noise = [math.nan] * len(self.targets)
            if spec.noise_sigma > 0:
                err_noise = rmse(self.predict_queries(ts, dt, count, spec, noise=True), truth)
        except CellError as exc:
            msg = "error:" + str(exc).replace(",", ";")
            return [ReportRow(dt, count, ch, math.nan, math.nan, 0, _join(flags, msg)) for ch in self.channel_names]
        return [
            ReportRow(dt, count, ch, float(e), float(en), len(ts), flags)
            for ch, e, en in zip(self.channel_names, err, err_noise)
        ]

    def run(self, spec: EvalSpec, ood_outside=None) -> Report:
        report = Report(provenance={"seed": spec.seed, "spec": asdict(spec)})
        for dt in spec.dts:
            flags = ""
            if ood_outside is not None and not ood_outside[0] <= dt <= ood_outside[1]:
                flags = "ood"
            for count in spec.counts:
                report.rows.extend(self.cell(dt, count, spec, flags))
        return report


def _join(*flags: str) -> str:
    return ";".join(f for f in flags if f)


def cardinality_sweep(state: TrainState, dataset: Dataset, spec: EvalSpec, pool=None) -> Report:
    return Evaluator(state, dataset, pool).run(spec)


def extrapolate_eval(state: TrainState, dataset: Dataset, spec: EvalSpec, pool=None) -> Report:
    """Same pipeline, rows flagged ``ood`` when dt lies outside the training range."""
    return Evaluator(state, dataset, pool).run(spec, ood_outside=state.train_cfg.dt_range)


def transfer_eval(state: TrainState, dataset: Dataset, spec: EvalSpec, pool=None) -> Report:
    """Evaluate on another graph; nothing in the model depends on |V| or the edge set."""
    return Evaluator(state, dataset, pool).run(spec)


def noise_ablation(state: TrainState, dataset: Dataset, spec: EvalSpec, sigma: float = 1.0, pool=None) -> Report:
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    spec = EvalSpec(**{**asdict(spec), "noise_sigma": sigma})
    return Evaluator(state, dataset, pool).run(spec)


def _fmt(x: float) -> str:
    return "" if x is None or math.isnan(x) else f"{x:.12g}"


def write_report_csv(report: Report, path) -> None:
    if not report.rows:
        raise ValueError("refusing to write an empty report")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in report.rows:
            w.writerow([r.dt, r.example_count, r.channel, _fmt(r.rmse), _fmt(r.rmse_noise), r.n_queries, r.flags])


def read_report_csv(path) -> Report:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected report header {header}")
        for dt, n, ch, e, en, q, flags in reader:
            rows.append(ReportRow(int(dt), int(n), ch, float(e) if e else math.nan,
                                  float(en) if en else math.nan, int(q), flags))
    return Report(rows)


def emit_report(report: Report, csv_path, svg_path=None, json_path=None) -> None:
    """CSV rows, plus an SVG line chart and a JSON sidecar (provenance, differences) when asked."""
    write_report_csv(report, csv_path)
    if svg_path is not None:
        from .plotting import save_rmse_chart

        save_rmse_chart(report, svg_path)
    if json_path is not None:
        doc = {
            "provenance": report.provenance,
            "rows": [_null_nans(dict(asdict(r), difference=r.difference)) for r in report.rows],
        }
        Path(json_path).write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _null_nans(row: dict) -> dict:
    return {k: None if isinstance(v, float) and math.isnan(v) else v for k, v in row.items()}
