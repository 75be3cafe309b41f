"""Graph in-context operator networks for irregularly sampled spatiotemporal data."""

__version__ = "0.1.0"

from .graph import Edge, Graph, Node, build_edges, edge_features
from .data import ExamplePair, Series, make_example
from .model import GICON, ModelConfig

__all__ = [
    "Edge",
    "ExamplePair",
    "GICON",
    "Graph",
    "ModelConfig",
    "Node",
    "Series",
    "build_edges",
    "edge_features",
    "make_example",
]
