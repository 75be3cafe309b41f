import math

import numpy as np
import pytest
import torch

from conftest import graph_tensors, random_graph, random_inputs, randomize, tiny_model
from gicon.data import ExamplePair
from gicon.graph import EdgeStats, Graph, Node
from gicon.model import GICON, ExampleBias, GraphTensors, ModelConfig, interleave, kv_signs, uses_muon
from gicon.numeric import NumericError

f64 = torch.float64


def np_gelu(x):
    return 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))


class TestSequence:
    def test_lengths(self):
        model, cfg = tiny_model()
        g = graph_tensors(random_graph(4, 0))
        for k in (0, 2):
            keys, values, query = random_inputs(cfg, 4, k, 1)
            assert model.embed(keys, values, query).shape == (1, 2 * k + 1, 4, cfg.d_node)

    def test_full_size_input_width(self):
        model = GICON(ModelConfig(tau=24, in_channels=13))
        assert model.proj_k.in_features == 312
        assert model.proj_v.in_features == 13

    def test_interleave_order(self):
        keys = torch.arange(2.0).view(1, 2, 1, 1)
        values = 10 + torch.arange(2.0).view(1, 2, 1, 1)
        query = torch.full((1, 1, 1), 99.0)
        assert interleave(keys, values, query).flatten().tolist() == [0.0, 10.0, 1.0, 11.0, 99.0]

    def test_mixed_graph_sizes(self):
        model, cfg = tiny_model()
        keys, values, _ = random_inputs(cfg, 4, 2, 1)
        _, _, query = random_inputs(cfg, 5, 2, 1)
        with pytest.raises(ValueError, match="inconsistent"):
            model.embed(keys, values, query)

    def test_predict_rejects_mixed_sizes(self):
        model, cfg = tiny_model()
        g = graph_tensors(random_graph(4, 0))
        ex = [ExamplePair(np.zeros((3, 5, 2)), np.zeros((5, 2)), 1, 0)]
        with pytest.raises(ValueError):
            model.predict(ex, np.zeros((3, 4, 2)), g)


class TestKVOffsets:
    def _embed(self, r, k=2):
        model, cfg = tiny_model()
        with torch.no_grad():
            model.kv_offset.copy_(r)
        keys, values, query = random_inputs(cfg, 3, k, 4)
        with torch.no_grad():
            model.kv_offset.zero_()
            base = model.embed(keys, values, query)
            model.kv_offset.copy_(r)
            shifted = model.embed(keys, values, query)
        return base, shifted

    def test_zero_offset_is_identity(self):
        base, shifted = self._embed(torch.zeros(8, dtype=f64))
        assert torch.equal(base, shifted)

    def test_signs_by_parity(self):
        r = torch.arange(8, dtype=f64)
        base, shifted = self._embed(r)
        diff = shifted - base
        for p in (0, 2, 4):
            assert torch.allclose(diff[0, p], r.expand(3, 8), atol=1e-12)
        for p in (1, 3):
            assert torch.allclose(diff[0, p], -r.expand(3, 8), atol=1e-12)
        assert kv_signs(5).tolist() == [1, -1, 1, -1, 1]

    def test_symmetric_about_embedding(self):
        e = torch.randn(8, dtype=f64)
        r = torch.randn(8, dtype=f64)
        tokens = torch.stack([e, e])[None, :, None] + kv_signs(2, f64)[None, :, None, None] * r
        assert torch.allclose(tokens[0, 0, 0], e + r) and torch.allclose(tokens[0, 1, 0], e - r)
        assert torch.allclose(tokens.mean(dim=1)[0, 0], e, atol=1e-15)


class TestExampleBias:
    def head(self):
        return randomize(ExampleBias(8, 2).double(), 3)

    def test_k1_layout(self):
        bias = self.head()
        h = torch.randn(1, 3, 4, 8, dtype=f64)
        A = bias(h)
        assert A.shape == (1, 2, 3, 3)
        z = bias.mlp(h[:, 0::2].mean(dim=2))
        q = bias.wq(z).view(1, 2, 2, 4).transpose(1, 2)
        k = bias.wk(z).view(1, 2, 2, 4).transpose(1, 2)
        S = q @ k.transpose(-1, -2) / math.sqrt(8 / 2)
        assert S.shape == (1, 2, 2, 2)
        for i in range(3):
            for j in range(3):
                assert torch.allclose(A[0, :, i, j], S[0, :, i // 2, j // 2], atol=1e-14)
        assert torch.allclose(A[0, :, 0, 1], S[0, :, 0, 0]) and torch.allclose(A[0, :, 1, 2], S[0, :, 0, 1])

    def test_identical_keys_equal_rows(self):
        bias = self.head()
        h = torch.randn(1, 5, 4, 8, dtype=f64)
        h[:, 2] = h[:, 0]
        A = bias(h)[0]
        assert torch.allclose(A[:, 0], A[:, 2], atol=1e-14)
        assert torch.allclose(A[:, :, 0], A[:, :, 2], atol=1e-14)

    def test_node_permutation_invariant(self):
        bias = self.head()
        h = torch.randn(1, 7, 6, 8, dtype=f64)
        perm = torch.randperm(6)
        assert torch.allclose(bias(h), bias(h[:, :, perm]), atol=1e-12)


def naive_message_passing(h, graph: Graph, edge_emb, lin1_w, lin1_b, lin2_w, lin2_b):
    out = h.copy()
    for i in range(graph.n_nodes):
        m = np.zeros(h.shape[1])
        for e_idx, e in enumerate(graph.edges):
            if e.dst != i:
                continue
            x = np.concatenate([h[i], h[e.src], edge_emb[e_idx]])
            m += lin2_w @ np_gelu(lin1_w @ x + lin1_b) + lin2_b
        out[i] += m
    return out


class TestMessagePassing:
    def test_zero_final_layer_is_identity(self):
        model = GICON(ModelConfig(tau=2, in_channels=2, target_channels=(0,), d_node=8, heads=2)).double()
        g = graph_tensors(random_graph(5, 1))
        h = torch.randn(1, 3, 5, 8, dtype=f64)
        emb = model.edge_embed(g.edge_attr)
        assert torch.equal(model.layers[0].mp(h, emb, g), h)

    def test_isolated_node_unchanged(self):
        model, cfg = tiny_model()
        nodes = [Node(0, (0.0, 0.0)), Node(1, (0.1, 0.0)), Node(2, (5.0, 5.0))]
        from gicon.graph import build_edges

        g = graph_tensors(Graph(nodes, build_edges(nodes, 1.0)))
        h = torch.randn(1, 3, 3, cfg.d_node, dtype=f64)
        out = model.layers[0].mp(h, model.edge_embed(g.edge_attr), g)
        assert torch.equal(out[:, :, 2], h[:, :, 2])
        assert not torch.allclose(out[:, :, 0], h[:, :, 0])

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_naive_oracle(self, seed):
        model, cfg = tiny_model(seed)
        graph = random_graph(4, seed, radius=0.8)
        g = graph_tensors(graph)
        mp = model.layers[0].mp
        emb = model.edge_embed(g.edge_attr)
        h = torch.randn(1, 1, 4, cfg.d_node, dtype=f64, generator=torch.Generator().manual_seed(seed))
        with torch.no_grad():
            out = mp(h, emb, g)[0, 0].numpy()
        ref = naive_message_passing(
            h[0, 0].numpy(), graph, emb.detach().numpy(),
            mp.mlp.lin1.weight.detach().numpy(), mp.mlp.lin1.bias.detach().numpy(),
            mp.mlp.lin2.weight.detach().numpy(), mp.mlp.lin2.bias.detach().numpy(),
        )
        assert np.max(np.abs(out - ref)) <= 1e-12


def naive_attention_block(block, h, bias):
    """Loop-based reference for AttentionBlock in eval mode; h [P, V, d], bias [H, P, P]."""
    W = {n: p.detach().numpy() for n, p in block.named_parameters()}
    P, V, d = h.shape
    H = block.heads
    dh = d // H
    eps = block.norm1.eps

    def norm(x, g):
        return x / np.sqrt((x ** 2).mean() + eps) * g

    out = h.copy()
    for v in range(V):
        x = np.array([norm(h[p, v], W["norm1.gain"]) for p in range(P)])
        q, k, val = x @ W["wq.weight"].T, x @ W["wk.weight"].T, x @ W["wv.weight"].T
        att = np.zeros((P, d))
        for head in range(H):
            s = slice(head * dh, (head + 1) * dh)
            for i in range(P):
                logits = np.array([q[i, s] @ k[j, s] / math.sqrt(dh) + bias[head, i, j] for j in range(i + 1)])
                w = np.exp(logits - logits.max())
                w /= w.sum()
                att[i, s] = sum(w[j] * val[j, s] for j in range(i + 1))
        y = h[:, v] + att @ W["wo.weight"].T + W["wo.bias"]
        for p in range(P):
            z = norm(y[p], W["norm2.gain"])
            ff = W["ff.lin2.weight"] @ np_gelu(W["ff.lin1.weight"] @ z + W["ff.lin1.bias"]) + W["ff.lin2.bias"]
            out[p, v] = y[p] + ff
    return out


class TestAttention:
    @pytest.mark.parametrize("P", [1, 3, 6])
    def test_matches_naive_oracle(self, P):
        model, cfg = tiny_model(P)
        block = model.layers[0].attn
        gen = torch.Generator().manual_seed(P)
        h = torch.randn(1, P, 3, cfg.d_node, generator=gen, dtype=f64)
        bias = torch.randn(1, cfg.heads, P, P, generator=gen, dtype=f64)
        with torch.no_grad():
            out = block(h, bias)[0].numpy()
        assert np.max(np.abs(out - naive_attention_block(block, h[0].numpy(), bias[0].numpy()))) <= 1e-10

    def test_causal(self):
        model, cfg = tiny_model(1)
        block = model.layers[0].attn
        h = torch.randn(1, 6, 3, cfg.d_node, dtype=f64)
        bias = torch.randn(1, cfg.heads, 6, 6, dtype=f64)
        h2 = h.clone()
        h2[:, 3] += torch.randn(3, cfg.d_node, dtype=f64)
        bias2 = bias.clone()
        bias2[..., 3:, :] += 1.0
        with torch.no_grad():
            a, b = block(h, bias), block(h2, bias2)
        assert torch.equal(a[:, :3], b[:, :3])
        assert not torch.allclose(a[:, 3], b[:, 3])


class TestForward:
    def setup_method(self):
        self.model, self.cfg = tiny_model(5)
        self.graph = graph_tensors(random_graph(6, 2))

    def test_shape_finite_deterministic(self):
        keys, values, query = random_inputs(self.cfg, 6, 3, 0, batch=2)
        with torch.no_grad():
            a = self.model(keys, values, query, self.graph)
            b = self.model(keys, values, query, self.graph)
        assert a.shape == (2, 4, 6, 1)
        assert torch.isfinite(a).all()
        assert torch.equal(a, b)

    def test_default_init_is_finite(self):
        model = GICON(ModelConfig(tau=4, in_channels=3, target_channels=(1, 2), d_node=16, d_edge=8, d_msg=16, heads=4, d_ff=16))
        g = GraphTensors.from_graph(random_graph(7, 0), EdgeStats(0.3, 0.1))
        keys = torch.randn(1, 2, 4, 7, 3)
        out = model(keys, torch.randn(1, 2, 7, 3), torch.randn(1, 4, 7, 3), g)
        assert out.shape == (1, 3, 7, 2) and torch.isfinite(out).all()

    def test_predict_unbatched(self):
        rng = np.random.default_rng(0)
        ex = [ExamplePair(rng.normal(size=(3, 6, 2)), rng.normal(size=(6, 2)), 2, 10 + i) for i in range(2)]
        out = self.model.predict(ex, rng.normal(size=(3, 6, 2)), self.graph)
        assert out.shape == (3, 6, 1)

    def test_k0_depends_only_on_query(self):
        _, _, query = random_inputs(self.cfg, 6, 0, 1)
        empty_k = torch.zeros(1, 0, 3, 6, 2, dtype=f64)
        empty_v = torch.zeros(1, 0, 6, 2, dtype=f64)
        with torch.no_grad():
            out = self.model(empty_k, empty_v, query, self.graph)
            again = self.model(empty_k, empty_v, query.clone(), self.graph)
        assert out.shape == (1, 1, 6, 1)
        assert torch.equal(out, again)

    def test_nan_names_layer(self):
        keys, values, query = random_inputs(self.cfg, 6, 1, 0)
        with torch.no_grad():
            self.model.layers[1].attn.ff.lin2.bias[0] = float("nan")
        with pytest.raises(NumericError, match="layer 1"):
            self.model(keys, values, query, self.graph)

    def test_dropout_is_seeded(self):
        model, cfg = tiny_model(5, dropout=0.3)
        keys, values, query = random_inputs(cfg, 6, 2, 0)
        a = model(keys, values, query, self.graph, train=True, seed=1)
        b = model(keys, values, query, self.graph, train=True, seed=1)
        c = model(keys, values, query, self.graph, train=True, seed=2)
        e = model(keys, values, query, self.graph)
        assert torch.equal(a, b) and not torch.equal(a, c) and not torch.equal(a, e)

    def test_bias_once_at_input(self):
        model, cfg = tiny_model(5, bias_per_layer=False)
        keys, values, query = random_inputs(cfg, 6, 2, 0)
        out, biases = model(keys, values, query, self.graph, return_bias=True)
        assert out.shape == (1, 3, 6, 1)
        assert biases[0] is biases[1]

    def test_any_count_works(self):
        for k in (0, 1, 7, 20):
            keys, values, query = random_inputs(self.cfg, 6, k, k)
            with torch.no_grad():
                out, biases = self.model(keys, values, query, self.graph, return_bias=True)
            assert out.shape == (1, k + 1, 6, 1)
            assert biases[0].shape == (1, self.cfg.heads, 2 * k + 1, 2 * k + 1)


def test_muon_routing():
    model = GICON(ModelConfig(tau=2, in_channels=2, target_channels=(0,), d_node=8, heads=2))
    routed = {n for n, p in model.named_parameters() if uses_muon(n, p)}
    assert "layers.0.attn.wq.weight" in routed
    assert "layers.0.mp.mlp.lin1.weight" in routed
    assert not any(n.endswith(".bias") or "gain" in n for n in routed)
    assert not any(n.startswith(("proj_k", "proj_v", "decoder", "edge_embed", "kv_offset")) for n in routed)
