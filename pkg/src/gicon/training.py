"""Loss, schedule, optimizer, batches, training loop and checkpoints."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import container
from .data import Dataset, check_window
from .graph import EdgeStats
from .model import GICON, GraphTensors, ModelConfig, uses_muon
from .numeric import NumericError, backward, resolve_dtype
from .retrieval import ExamplePool, build_pool, frame_means, query_features, retrieve, sample_context

CHECKPOINT_MAGIC = b"GICON-CK"

NS_COEFFS = (3.4445, -4.7750, 2.0315)


@dataclass
class TrainConfig:
    total_steps: int = 90_000
    batch_size: int = 8
    base_lr: float = 1e-4
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    warmup_frac: float = 0.10
    end_lr_factor: float = 0.1
    regime: str = "uniform"  # "single" or "uniform"
    dt: int = 24
    dt_lo: int = 1
    dt_hi: int = 24
    k_max: int = 5
    K: int = 32
    tau_r: int = 0  # 0 means tau_r = tau
    momentum: float = 0.95
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    seed: int = 0
    precision: str = "float32"
    log_interval: int = 100
    checkpoint_interval: int = 0

    def __post_init__(self):
        if not 0 < self.warmup_frac < 1:
            raise ValueError("warmup_frac must lie in (0, 1)")
        if self.regime not in ("single", "uniform"):
            raise ValueError(f"regime must be 'single' or 'uniform', got {self.regime!r}")
        if self.regime == "uniform" and not 1 <= self.dt_lo <= self.dt_hi:
            raise ValueError("need 1 <= dt_lo <= dt_hi")
        if self.regime == "single" and self.dt < 1:
            raise ValueError("dt must be >= 1")
        if self.k_max < 0 or self.K < max(1, self.k_max):
            raise ValueError("need k_max >= 0 and K >= max(1, k_max)")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be >= 1")
        resolve_dtype(self.precision)

    @property
    def dt_range(self):
        return (self.dt, self.dt) if self.regime == "single" else (self.dt_lo, self.dt_hi)


def compute_loss(preds: torch.Tensor, targets: torch.Tensor, target_channels: Sequence[int]) -> torch.Tensor:
    """MSE over every decoded position (examples and query), target channels only.

    ``targets`` holds full frames ``[..., k+1, V, c]``.
    """
    picked = targets[..., list(target_channels)]
    if preds.shape != picked.shape:
        raise ValueError(f"prediction shape {tuple(preds.shape)} != target shape {tuple(picked.shape)}")
    return ((preds - picked) ** 2).mean()


def lr_at_step(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine decay to end_lr_factor * base_lr."""
    total = cfg.total_steps
    warmup = int(math.floor(cfg.warmup_frac * total))
    step = min(max(step, 0), total)
    if step < warmup:
        return cfg.base_lr * step / warmup
    end = cfg.end_lr_factor * cfg.base_lr
    progress = (step - warmup) / max(1, total - warmup)
    return end + (cfg.base_lr - end) * 0.5 * (1.0 + math.cos(math.pi * progress))


def newton_schulz(G: torch.Tensor, steps: int = 5, eps: float = 1e-7) -> torch.Tensor:
    """Approximate the orthogonal polar factor of ``G`` with a quintic iteration."""
    a, b, c = NS_COEFFS
    X = G / (G.norm() + eps)
    tall = X.shape[0] > X.shape[1]
    if tall:
        X = X.T
    for _ in range(steps):
        A = X @ X.T
        B = b * A + c * A @ A
        X = a * X + B @ X
    return X.T if tall else X


def muon_update(
    param: torch.Tensor,
    grad: torch.Tensor,
    momentum: torch.Tensor,
    lr: float,
    weight_decay: float,
    beta: float = 0.95,
    nesterov: bool = True,
) -> torch.Tensor:
    if param.ndim != 2:
        raise ValueError("muon_update only handles 2-D matrices")
    momentum.mul_(beta).add_(grad)
    g = grad + beta * momentum if nesterov else momentum
    update = newton_schulz(g)
    rows, cols = param.shape
    scale = 0.2 * math.sqrt(max(rows, cols) / min(rows, cols))
    param.mul_(1.0 - lr * weight_decay).add_(update, alpha=-lr * scale)
    return param


def adamw_update(param, grad, exp_avg, exp_avg_sq, step: int, lr: float, weight_decay: float, betas, eps: float):
    b1, b2 = betas
    exp_avg.mul_(b1).add_(grad, alpha=1 - b1)
    exp_avg_sq.mul_(b2).addcmul_(grad, grad, value=1 - b2)
    m_hat = exp_avg / (1 - b1 ** step)
    v_hat = exp_avg_sq / (1 - b2 ** step)
    param.mul_(1.0 - lr * weight_decay).addcdiv_(m_hat, v_hat.sqrt().add_(eps), value=-lr)
    return param


class Muon:
    """Orthogonalized momentum for hidden matrices, AdamW for the rest."""

    def __init__(self, named_params, cfg: TrainConfig):
        self.cfg = cfg
        self.params: Dict[str, torch.Tensor] = dict(named_params)
        self.muon_names = [n for n, p in self.params.items() if uses_muon(n, p)]
        self.adam_names = [n for n in self.params if n not in set(self.muon_names)]
        self.momentum = {n: torch.zeros_like(self.params[n]) for n in self.muon_names}
        self.exp_avg = {n: torch.zeros_like(self.params[n]) for n in self.adam_names}
        self.exp_avg_sq = {n: torch.zeros_like(self.params[n]) for n in self.adam_names}
        self.adam_step = 0

    @torch.no_grad()
    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.adam_step += 1
        for n in self.muon_names:
            p = self.params[n]
            muon_update(p, p.grad, self.momentum[n], lr, cfg.weight_decay, cfg.momentum)
        for n in self.adam_names:
            p = self.params[n]
            adamw_update(
                p, p.grad, self.exp_avg[n], self.exp_avg_sq[n], self.adam_step, lr, cfg.weight_decay,
                (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps,
            )

    def state_tensors(self) -> Dict[str, torch.Tensor]:
        out = {f"muon_momentum/{n}": t for n, t in self.momentum.items()}
        out.update({f"adam_m/{n}": t for n, t in self.exp_avg.items()})
        out.update({f"adam_v/{n}": t for n, t in self.exp_avg_sq.items()})
        return out

    def load_state_tensors(self, tensors: Dict[str, torch.Tensor], adam_step: int) -> None:
        for table, prefix in ((self.momentum, "muon_momentum/"), (self.exp_avg, "adam_m/"), (self.exp_avg_sq, "adam_v/")):
            for n in table:
                table[n].copy_(tensors[prefix + n])
        self.adam_step = adam_step


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = torch.sqrt(sum((g.detach() ** 2).sum() for g in grads)).item() if grads else 0.0
    if total > max_norm:
        for g in grads:
            g.mul_(max_norm / (total + 1e-12))
    return total


@dataclass
class Batch:
    keys: torch.Tensor  # [B, k, tau, V, c]
    values: torch.Tensor  # [B, k, V, c]
    query: torch.Tensor  # [B, tau, V, c]
    targets: torch.Tensor  # [B, k+1, V, c]
    dts: List[int]
    query_ts: List[int]
    example_origins: List[List[int]]

    @property
    def k(self) -> int:
        return self.values.shape[1]


class TrainingData:
    """Normalized frames, graph tensors and the retrieval pool for one dataset."""

    def __init__(self, dataset: Dataset, tau: int, tau_r: int, dtype=torch.float32,
                 edge_stats: Optional[EdgeStats] = None, pool: Optional[ExamplePool] = None):
        self.dataset = dataset
        self.tau = tau
        self.tau_r = tau_r or tau
        self.dtype = dtype
        norm = dataset.normalized_frames()
        self.frames = torch.tensor(norm, dtype=dtype)
        self.means = frame_means(norm)
        self.edge_stats = edge_stats or EdgeStats.from_graph(dataset.graph)
        self.graph = GraphTensors.from_graph(dataset.graph, self.edge_stats, dtype)
        self.pool = pool if pool is not None else build_pool(dataset, tau, self.tau_r)
        if self.pool.tau != tau:
            raise ValueError(f"pool was built for tau={self.pool.tau}, model uses tau={tau}")
        if self.pool.tau_r != self.tau_r:
            raise ValueError(f"pool was built for tau_r={self.pool.tau_r}, expected {self.tau_r}")

    def features(self, ts) -> np.ndarray:
        return query_features(self.means, np.asarray(ts), self.tau_r)

    def gather(self, query_ts: Sequence[int], dts: Sequence[int], contexts: Sequence[Sequence[int]]) -> Batch:
        """Materialize keys/values/targets; ``contexts`` are pool indices per query."""
        tau = self.tau
        origins = [[int(self.pool.origins[i]) for i in ctx] for ctx in contexts]
        lag = torch.arange(-tau + 1, 1)
        qt = torch.tensor(list(query_ts))
        dts_t = torch.tensor(list(dts))
        query = self.frames[qt[:, None] + lag]
        label = self.frames[qt + dts_t]
        k = len(origins[0]) if origins else 0
        if k:
            o = torch.tensor(origins)  # [B, k]
            keys = self.frames[o[..., None] + lag]
            values = self.frames[o + dts_t[:, None]]
        else:
            V, c = self.frames.shape[1:]
            keys = self.frames.new_zeros((len(qt), 0, tau, V, c))
            values = self.frames.new_zeros((len(qt), 0, V, c))
        targets = torch.cat([values, label[:, None]], dim=1)
        return Batch(keys, values, query, targets, list(dts), list(query_ts), origins)


def sample_dt(rng: np.random.Generator, cfg: TrainConfig) -> int:
    lo, hi = cfg.dt_range
    return int(rng.integers(lo, hi + 1))


def make_batch(data: TrainingData, cfg: TrainConfig, step: int, k: Optional[int] = None) -> Batch:
    """The training batch for ``step``; a pure function of (seed, step)."""
    rng = np.random.default_rng([cfg.seed, step, 0xB47C])
    if k is None:
        k = int(rng.integers(0, cfg.k_max + 1))
    end = data.dataset.train_end
    query_ts, dts, contexts = [], [], []
    attempts = 0
    while len(query_ts) < cfg.batch_size:
        attempts += 1
        if attempts > 100 * cfg.batch_size:
            raise RuntimeError("could not assemble a batch: training split too small for the requested k")
        dt = sample_dt(rng, cfg)
        hi = end - 1 - dt
        if hi < data.tau - 1:
            continue
        t = int(rng.integers(data.tau - 1, hi + 1))
        check_window(end, t, dt, data.tau)
        cands = retrieve(data.pool, data.features([t]), [t], dt, cfg.K)[0]
        if len(cands) < k:
            continue
        query_ts.append(t)
        dts.append(dt)
        contexts.append(sample_context(cands, k, rng))
    return data.gather(query_ts, dts, contexts)


@dataclass
class TrainState:
    model: GICON
    optimizer: Muon
    step: int
    train_cfg: TrainConfig
    edge_stats: EdgeStats
    schema: dict = field(default_factory=dict)


def new_state(model_cfg: ModelConfig, train_cfg: TrainConfig, edge_stats: EdgeStats, schema: Optional[dict] = None) -> TrainState:
    model = GICON(model_cfg, seed=train_cfg.seed).to(resolve_dtype(train_cfg.precision))
    opt = Muon(model.named_parameters(), train_cfg)
    return TrainState(model, opt, 0, train_cfg, edge_stats, dict(schema or {}))


def dropout_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step, 0xD50]).generate_state(1)[0])


def train_step(state: TrainState, batch: Batch, data: TrainingData) -> float:
    model, cfg = state.model, state.train_cfg
    model.zero_grad(set_to_none=True)
    preds = model(batch.keys, batch.values, batch.query, data.graph, train=True,
                  seed=dropout_seed(cfg.seed, state.step))
    loss = compute_loss(preds, batch.targets, model.cfg.target_channels)
    backward(loss)
    params = list(model.parameters())
    for name, p in model.named_parameters():
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            raise NumericError(f"non-finite gradient for {name} at step {state.step}")
    clip_grad_norm(params, cfg.grad_clip)
    state.optimizer.step(lr_at_step(state.step + 1, cfg))
    state.step += 1
    return float(loss.item())


def train(state: TrainState, data: TrainingData, until: Optional[int] = None, log_path=None,
          checkpoint_dir=None, progress=None) -> List[float]:
    """Run steps up to ``until`` (default total_steps); returns per-step losses."""
    cfg = state.train_cfg
    until = cfg.total_steps if until is None else min(until, cfg.total_steps)
    losses = []
    writer = None
    fh = None
    if log_path is not None:
        new = not Path(log_path).exists()
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(["step", "lr", "train_loss", "wall_time"])
    t0 = time.perf_counter()
    try:
        while state.step < until:
            batch = make_batch(data, cfg, state.step)
            lr = lr_at_step(state.step + 1, cfg)
            loss = train_step(state, batch, data)
            losses.append(loss)
            if writer is not None and (state.step % cfg.log_interval == 0 or state.step == until):
                writer.writerow([state.step, f"{lr:.6e}", f"{loss:.6e}", f"{time.perf_counter() - t0:.3f}"])
            if progress is not None:
                progress(state.step, loss)
            if checkpoint_dir is not None and cfg.checkpoint_interval and state.step % cfg.checkpoint_interval == 0:
                save_checkpoint(state, Path(checkpoint_dir) / f"step_{state.step:06d}.ckpt")
    finally:
        if fh is not None:
            fh.close()
    return losses


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()


def checkpoint_bytes(state: TrainState) -> bytes:
    model = state.model
    meta = {
        "kind": "checkpoint",
        "step": state.step,
        "adam_step": state.optimizer.adam_step,
        "model_config": model.cfg.to_dict(),
        "train_config": asdict(state.train_cfg),
        "edge_stats": {"mean": state.edge_stats.mean, "std": state.edge_stats.std},
        "schema": state.schema,
        # every random draw is keyed on (seed, step), so this is the full rng state
        "rng": {"seed": state.train_cfg.seed, "step": state.step},
    }
    tensors = {f"param/{n}": _to_numpy(p) for n, p in model.named_parameters()}
    tensors.update({k: _to_numpy(v) for k, v in state.optimizer.state_tensors().items()})
    return container.dumps(CHECKPOINT_MAGIC, meta, tensors)


def save_checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(state))


def load_checkpoint(path) -> TrainState:
    meta, tensors = container.read(path, CHECKPOINT_MAGIC)
    mcfg = ModelConfig(**meta["model_config"])
    tcfg = TrainConfig(**meta["train_config"])
    es = EdgeStats(**meta["edge_stats"])
    state = new_state(mcfg, tcfg, es, meta.get("schema"))
    with torch.no_grad():
        for n, p in state.model.named_parameters():
            arr = tensors[f"param/{n}"]
            if tuple(arr.shape) != tuple(p.shape):
                raise container.FormatError(f"parameter {n} has shape {arr.shape}, expected {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr))
    state.optimizer.load_state_tensors({k: torch.from_numpy(v) for k, v in tensors.items()}, meta["adam_step"])
    state.step = int(meta["step"])
    return state
