"""Structural balance for imbalanced node classification."""

from graphsb.errors import ConfigurationError, GraphFormatError, NodeIndexError
from graphsb.graph import Graph, SbmSpec, SplitSpec, generate_sbm, load_graph, make_split

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "Graph",
    "GraphFormatError",
    "NodeIndexError",
    "SbmSpec",
    "SplitSpec",
    "generate_sbm",
    "load_graph",
    "make_split",
]
