"""Flow-guided two-choice allocation on graphs."""

from .allocation import Strategy, simulate_batch
from .decomposition import DecompTree, build_tree
from .flows import EdgePlans, preprocess
from .graph import Graph, generate, load_edge_list
from .simulator import RunStats, make_strategy, run, sweep

__version__ = "0.1.0"

__all__ = [
    "Graph",
    "generate",
    "load_edge_list",
    "DecompTree",
    "build_tree",
    "EdgePlans",
    "preprocess",
    "Strategy",
    "simulate_batch",
    "RunStats",
    "make_strategy",
    "run",
    "sweep",
]
