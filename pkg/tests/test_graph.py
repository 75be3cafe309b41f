import math

import numpy as np
import pytest

from gicon.graph import Edge, EdgeStats, Graph, Node, build_edges, displacement, edge_feature_matrix, edge_features


def pair(dist_km, alt=(0.0, 0.0)):
    return [Node(0, (0.0, 0.0), alt[0]), Node(1, (dist_km, 0.0), alt[1])]


def test_within_threshold_gives_both_directions():
    edges = build_edges(pair(150.0), 200.0)
    assert {(e.src, e.dst) for e in edges} == {(0, 1), (1, 0)}
    assert all(e.distance == pytest.approx(150.0) for e in edges)


def test_beyond_threshold_gives_no_edge():
    assert build_edges(pair(250.0), 200.0) == []


def test_ridge_removes_edge():
    nodes = pair(150.0, alt=(50.0, 100.0))

    def ridge(x, y):
        return 1400.0 if 60.0 < x < 90.0 else 0.0  # 1300 m above the higher station

    assert build_edges(nodes, 200.0, terrain=ridge, terrain_limit_m=1200.0) == []
    assert len(build_edges(nodes, 200.0, terrain=lambda x, y: 1000.0, terrain_limit_m=1200.0)) == 2


def test_ridge_rule_uses_lower_endpoint():
    nodes = pair(150.0, alt=(0.0, 500.0))
    # 1300 m: above the low station's 1200 m ceiling, below the high station's 1700 m
    assert build_edges(nodes, 200.0, terrain=lambda x, y: 1300.0 if 50 < x < 100 else 0.0) == []


def test_thresholds_must_be_positive():
    with pytest.raises(ValueError):
        build_edges(pair(1.0), 0.0)


@pytest.mark.parametrize("seed", range(10))
def test_symmetric_without_terrain(seed):
    rng = np.random.default_rng(seed)
    nodes = [Node(i, tuple(rng.uniform(0, 500, 2))) for i in range(20)]
    pairs = {(e.src, e.dst) for e in build_edges(nodes, 150.0)}
    assert pairs == {(d, s) for s, d in pairs}


def test_haversine_one_degree_latitude():
    dist, _, dy = displacement((116.0, 39.0), (116.0, 40.0), geographic=True)
    assert dist == pytest.approx(6371.0088 * math.pi / 180, rel=1e-12)
    assert dy > 0


class TestEdgeFeatures:
    stats = EdgeStats(mean=5.0, std=2.0)

    def test_hand_trigonometry(self):
        nodes = [Node(0, (0.0, 0.0)), Node(1, (3.0, 4.0))]
        e = [e for e in build_edges(nodes, 10.0) if e.src == 0][0]
        assert e.distance == pytest.approx(5.0)
        assert e.direction == pytest.approx(0.927295218, abs=1e-9)
        f = edge_features(e, self.stats)
        assert f.tolist() == pytest.approx([0.0, 0.8, 0.6], abs=1e-12)

    def test_reversed(self):
        nodes = [Node(0, (0.0, 0.0)), Node(1, (3.0, 4.0))]
        fwd, rev = sorted(build_edges(nodes, 10.0), key=lambda e: e.src)
        a, b = edge_features(fwd, self.stats), edge_features(rev, self.stats)
        assert rev.distance == fwd.distance
        assert abs(abs(rev.direction - fwd.direction) - math.pi) < 1e-12
        assert b[1:].tolist() == pytest.approx((-a[1:]).tolist(), abs=1e-12)

    def test_zero_padding(self):
        f = edge_features(Edge(0, 1, 7.0, 0.0), self.stats, width=6)
        assert f.tolist() == [1.0, 0.0, 1.0, 0.0, 0.0, 0.0]

    def test_stats_from_graph(self):
        nodes = [Node(0, (0.0, 0.0)), Node(1, (3.0, 4.0)), Node(2, (0.0, 1.0))]
        g = Graph(nodes, build_edges(nodes, 10.0))
        feats = edge_feature_matrix(g, EdgeStats.from_graph(g))
        assert feats[:, 0].mean() == pytest.approx(0.0, abs=1e-12)
        assert feats[:, 0].std() == pytest.approx(1.0, abs=1e-12)


class TestGraph:
    def test_rejects_duplicates_and_self_loops(self):
        nodes = pair(1.0)
        with pytest.raises(ValueError, match="duplicate"):
            Graph(nodes, [Edge(0, 1, 1.0, 0.0), Edge(0, 1, 1.0, 0.0)])
        with pytest.raises(ValueError):
            Graph(nodes, [Edge(0, 0, 1.0, 0.0)])

    def test_dense_ids(self):
        with pytest.raises(ValueError, match="dense"):
            Graph([Node(1, (0.0, 0.0))], [])

    def test_permuted(self):
        nodes = [Node(i, (float(i), 0.0)) for i in range(3)]
        g = Graph(nodes, build_edges(nodes, 1.5))
        p = g.permuted([2, 0, 1])
        assert p.nodes[2].position == (0.0, 0.0)
        assert {(e.src, e.dst) for e in p.edges} == {(2, 0), (0, 2), (0, 1), (1, 0)}
