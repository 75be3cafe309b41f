import numpy as np
import pytest
import torch

from gicon.model import GICON, GraphTensors, ModelConfig
from gicon.graph import EdgeStats, Graph, Node, build_edges


def random_graph(n_nodes, seed, radius=0.5):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0, 1, size=(n_nodes, 2))
    nodes = [Node(i, (float(x), float(y))) for i, (x, y) in enumerate(pos)]
    return Graph(nodes, build_edges(nodes, radius))


def randomize(model: torch.nn.Module, seed: int, scale: float = 0.3):
    """Fill every parameter (including zero-initialized ones) with random values."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return model


def tiny_model(seed=0, **overrides):
    kw = dict(tau=3, in_channels=2, target_channels=(1,), d_node=8, d_edge=4, d_msg=8, layers=2, heads=2, d_ff=8,
              dropout=0.0)
    kw.update(overrides)
    cfg = ModelConfig(**kw)
    return randomize(GICON(cfg).double(), seed), cfg


def random_inputs(cfg, n_nodes, k, seed, batch=1):
    gen = torch.Generator().manual_seed(seed)
    keys = torch.randn(batch, k, cfg.tau, n_nodes, cfg.in_channels, generator=gen, dtype=torch.float64)
    values = torch.randn(batch, k, n_nodes, cfg.in_channels, generator=gen, dtype=torch.float64)
    query = torch.randn(batch, cfg.tau, n_nodes, cfg.in_channels, generator=gen, dtype=torch.float64)
    return keys, values, query


def graph_tensors(graph):
    return GraphTensors.from_graph(graph, EdgeStats.from_graph(graph), torch.float64)


# ---- acceptance summary -------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "measured")
    _CRITERIA[number] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        line = f"criterion {number:>2}: {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
