"""GICON: graph message passing interleaved with per-node causal attention.

Token layout for ``k`` examples is ``[k1, v1, ..., kk, vk, k_query]``: keys sit
at even positions, values at odd ones, and the query key is last. Hidden
states are kept as ``[B, P, V, d]`` with ``P = 2k + 1``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .graph import RAW_EDGE_FEATURES, EdgeStats, Graph, edge_feature_matrix
from .numeric import assert_finite, dropout, gelu, masked_softmax, rms_norm, segment_sum


@dataclass
class ModelConfig:
    tau: int = 24
    in_channels: int = 13
    target_channels: Tuple[int, ...] = (11, 12)
    d_node: int = 128
    d_edge: int = 128
    d_msg: int = 256
    layers: int = 3
    heads: int = 4
    d_ff: int = 512
    dropout: float = 0.1
    bias_per_layer: bool = True
    norm_eps: float = 1e-6

    def __post_init__(self):
        self.target_channels = tuple(int(c) for c in self.target_channels)
        if self.d_node % self.heads:
            raise ValueError(f"d_node={self.d_node} is not divisible by heads={self.heads}")
        if not self.target_channels or any(not 0 <= c < self.in_channels for c in self.target_channels):
            raise ValueError(f"target_channels {self.target_channels} out of range for {self.in_channels} channels")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        for name in ("tau", "in_channels", "d_node", "d_edge", "d_msg", "layers", "heads", "d_ff"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_channels"] = list(self.target_channels)
        return d


@dataclass
class GraphTensors:
    src: torch.Tensor
    dst: torch.Tensor
    edge_attr: torch.Tensor  # [E, 3]
    n_nodes: int

    @classmethod
    def from_graph(cls, graph: Graph, stats: EdgeStats, dtype=torch.float32) -> "GraphTensors":
        src, dst = graph.src_dst()
        attr = edge_feature_matrix(graph, stats)
        return cls(torch.from_numpy(src), torch.from_numpy(dst), torch.tensor(attr, dtype=dtype), graph.n_nodes)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.eps = eps

    def forward(self, x):
        return rms_norm(x, self.gain, self.eps)


class MLP(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.lin1 = nn.Linear(d_in, d_hidden)
        self.lin2 = nn.Linear(d_hidden, d_out)

    def forward(self, x):
        return self.lin2(gelu(self.lin1(x)))


class MessagePassing(nn.Module):
    """h_i + sum_{j->i} MLP([h_i, h_j, e_ij]), applied at every sequence position."""

    def __init__(self, d_node: int, d_edge: int, d_msg: int):
        super().__init__()
        self.d_node = d_node
        self.mlp = MLP(2 * d_node + d_edge, d_msg, d_node)

    def forward(self, h: torch.Tensor, edge_emb: torch.Tensor, graph: GraphTensors) -> torch.Tensor:
        if graph.src.numel() == 0:
            return h
        w = self.mlp.lin1.weight
        d = self.d_node
        # the first linear layer acts on a concatenation, so split it per block
        recv = h @ w[:, :d].T
        send = h @ w[:, d:2 * d].T
        pre = recv[..., graph.dst, :] + send[..., graph.src, :] + edge_emb @ w[:, 2 * d:].T + self.mlp.lin1.bias
        messages = self.mlp.lin2(gelu(pre))
        return h + segment_sum(messages, graph.dst, graph.n_nodes, dim=-2)


class ExampleBias(nn.Module):
    """Head-wise attention bias from node-pooled key tokens, shared by each key/value pair."""

    def __init__(self, d_node: int, heads: int):
        super().__init__()
        self.heads = heads
        self.mlp = MLP(d_node, d_node, d_node)
        self.wq = nn.Linear(d_node, d_node, bias=False)
        self.wk = nn.Linear(d_node, d_node, bias=False)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        B, P, _, d = h.shape
        n_ex = (P + 1) // 2
        dh = d // self.heads
        z = self.mlp(h[:, 0::2].mean(dim=2))  # [B, k+1, d]
        q = self.wq(z).view(B, n_ex, self.heads, dh).transpose(1, 2)
        k = self.wk(z).view(B, n_ex, self.heads, dh).transpose(1, 2)
        s = q @ k.transpose(-1, -2) / math.sqrt(dh)  # [B, H, k+1, k+1]
        idx = torch.arange(P) // 2
        return s[:, :, idx][:, :, :, idx]


class AttentionBlock(nn.Module):
    """Pre-norm causal self-attention over the sequence axis, then a feed-forward, per node."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_node
        self.heads = cfg.heads
        self.p = cfg.dropout
        self.norm1 = RMSNorm(d, cfg.norm_eps)
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)
        self.wv = nn.Linear(d, d, bias=False)
        self.wo = nn.Linear(d, d)
        self.norm2 = RMSNorm(d, cfg.norm_eps)
        self.ff = MLP(d, cfg.d_ff, d)

    def forward(self, h: torch.Tensor, bias: torch.Tensor, gen: Optional[torch.Generator] = None) -> torch.Tensor:
        B, P, V, d = h.shape
        H, dh = self.heads, d // self.heads
        x = self.norm1(h).transpose(1, 2)  # [B, V, P, d]

        def split(t):
            return t.view(B, V, P, H, dh).transpose(2, 3)  # [B, V, H, P, dh]

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
        causal = torch.ones(P, P, dtype=torch.bool).tril()
        attn = masked_softmax(logits, bias[:, None], causal)
        attn = dropout(attn, self.p, gen)
        out = (attn @ v).transpose(2, 3).reshape(B, V, P, d)
        h = h + dropout(self.wo(out), self.p, gen).transpose(1, 2)
        return h + dropout(self.ff(self.norm2(h)), self.p, gen)


class GICONLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mp = MessagePassing(cfg.d_node, cfg.d_edge, cfg.d_msg)
        self.bias = ExampleBias(cfg.d_node, cfg.heads) if cfg.bias_per_layer else None
        self.attn = AttentionBlock(cfg)


def interleave(keys: torch.Tensor, values: torch.Tensor, query: torch.Tensor) -> torch.Tensor:
    """[B,k,V,d] keys and values plus [B,V,d] query -> [B, 2k+1, V, d]."""
    B, k, V, d = keys.shape
    pairs = torch.stack([keys, values], dim=2).reshape(B, 2 * k, V, d)
    return torch.cat([pairs, query[:, None]], dim=1)


def kv_signs(P: int, dtype=torch.float32) -> torch.Tensor:
    return torch.where(torch.arange(P) % 2 == 0, 1.0, -1.0).to(dtype)


class GICON(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_node
        self.proj_k = nn.Linear(cfg.tau * cfg.in_channels, d)
        self.proj_v = nn.Linear(cfg.in_channels, d)
        self.kv_offset = nn.Parameter(torch.zeros(d))
        self.edge_embed = nn.Linear(RAW_EDGE_FEATURES, cfg.d_edge)
        self.layers = nn.ModuleList(GICONLayer(cfg) for _ in range(cfg.layers))
        self.input_bias = None if cfg.bias_per_layer else ExampleBias(d, cfg.heads)
        self.decoder = MLP(d, d, len(cfg.target_channels))
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, mod in self.named_modules():
                if isinstance(mod, nn.Linear):
                    bound = 1.0 / math.sqrt(mod.in_features)
                    mod.weight.uniform_(-bound, bound, generator=gen)
                    if mod.bias is not None:
                        mod.bias.uniform_(-bound, bound, generator=gen)
                elif isinstance(mod, RMSNorm):
                    mod.gain.fill_(1.0)
            for layer in self.layers:
                layer.mp.mlp.lin2.weight.zero_()
                layer.mp.mlp.lin2.bias.zero_()
            self.kv_offset.zero_()

    def embed(self, keys: torch.Tensor, values: torch.Tensor, query: torch.Tensor) -> torch.Tensor:
        """Project and interleave, then apply the +r / -r key-value offsets."""
        B, k, tau, V, c = keys.shape
        if values.shape[:2] != (B, k) or values.shape[2:] != (V, c) or query.shape != (B, tau, V, c):
            raise ValueError(
                f"inconsistent shapes: keys {tuple(keys.shape)}, values {tuple(values.shape)}, query {tuple(query.shape)}"
            )
        kt = self.proj_k(keys.permute(0, 1, 3, 2, 4).reshape(B, k, V, tau * c))
        qt = self.proj_k(query.permute(0, 2, 1, 3).reshape(B, V, tau * c))
        vt = self.proj_v(values)
        tokens = interleave(kt, vt, qt)
        signs = kv_signs(tokens.shape[1], tokens.dtype)
        return tokens + signs[None, :, None, None] * self.kv_offset

    def forward(
        self,
        keys: torch.Tensor,
        values: torch.Tensor,
        query: torch.Tensor,
        graph: GraphTensors,
        train: bool = False,
        seed: Optional[int] = None,
        return_bias: bool = False,
    ):
        """Predict target channels at every key position.

        keys ``[B, k, tau, V, c]``, values ``[B, k, V, c]``, query ``[B, tau, V, c]``
        (all normalized). Returns ``[B, k+1, V, n_targets]``; row ``j < k`` is the
        prediction for example ``j``'s value, row ``k`` the query prediction.
        Training mode draws dropout masks from ``seed``.
        """
        gen = None
        if train and self.cfg.dropout > 0:
            gen = torch.Generator().manual_seed(0 if seed is None else int(seed))
        V = query.shape[2]
        if V != graph.n_nodes:
            raise ValueError(f"inputs have {V} nodes, graph has {graph.n_nodes}")
        h = self.embed(keys, values, query)
        edge_emb = self.edge_embed(graph.edge_attr)
        biases = []
        shared = self.input_bias(h) if self.input_bias is not None else None
        for i, layer in enumerate(self.layers):
            h = layer.mp(h, edge_emb, graph)
            bias = layer.bias(h) if layer.bias is not None else shared
            biases.append(bias)
            h = layer.attn(h, bias, gen)
            assert_finite(h, f"GICON layer {i}")
        out = assert_finite(self.decoder(h[:, 0::2]), "decoder")
        if return_bias:
            return out, biases
        return out

    def predict(self, examples, query_key, graph: GraphTensors) -> torch.Tensor:
        """Unbatched, eval-mode convenience over ExamplePair-like objects (normalized arrays)."""
        dtype = self.proj_v.weight.dtype
        tau, V, c = np.shape(query_key)
        keys = torch.tensor(np.array([e.key for e in examples]).reshape(1, len(examples), tau, V, c), dtype=dtype)
        values = torch.tensor(np.array([e.value for e in examples]).reshape(1, len(examples), V, c), dtype=dtype)
        query = torch.tensor(np.asarray(query_key)[None], dtype=dtype)
        sizes = {np.shape(e.key) for e in examples} | {(tau, V, c)}
        if len(sizes) > 1:
            raise ValueError(f"examples and query disagree on shape: {sorted(sizes)}")
        with torch.no_grad():
            return self.forward(keys, values, query, graph)[0]


FALLBACK_PREFIXES = ("proj_k.", "proj_v.", "edge_embed.", "decoder.", "kv_offset")


def uses_muon(name: str, param: torch.Tensor) -> bool:
    """Hidden 2-D weight matrices get orthogonalized updates; everything else falls back."""
    return param.ndim == 2 and not name.startswith(FALLBACK_PREFIXES)
