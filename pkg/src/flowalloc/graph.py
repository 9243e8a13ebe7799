"""Undirected multigraphs with unit capacities, generators and loaders."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numba
import numpy as np

__all__ = [
    "Graph",
    "GraphError",
    "EdgeListError",
    "FAMILIES",
    "load_edge_list",
    "dump_edge_list",
    "generate",
    "edge_connectivity",
    "validate_regular",
]


class GraphError(ValueError):
    """Invalid graph or generator parameters."""


class EdgeListError(GraphError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True, eq=False)
class Graph:
    """Connected undirected multigraph on vertices ``0..n-1``.

    ``edges`` is an ``(m, 2)`` array; row ``e`` is edge id ``e``. Parallel
    edges are allowed and keep distinct ids. ``family`` and ``params`` only
    label the graph for reports.
    """

    n: int
    edges: np.ndarray
    family: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        if self.n < 1:
            raise GraphError("graph needs at least one vertex")
        if len(edges) and (edges.min() < 0 or edges.max() >= self.n):
            raise GraphError("edge endpoint out of range")
        loops = np.flatnonzero(edges[:, 0] == edges[:, 1])
        if len(loops):
            raise GraphError(f"self-loop at edge {int(loops[0])}")
        if not self.is_connected():
            raise GraphError("graph is disconnected")

    @property
    def m(self) -> int:
        return len(self.edges)

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n)

    @cached_property
    def adjacency(self) -> list[list[tuple[int, int]]]:
        """Per-vertex list of ``(neighbor, edge_id)``."""
        adj: list[list[tuple[int, int]]] = [[] for _ in range(self.n)]
        for e, (u, v) in enumerate(self.edges.tolist()):
            adj[u].append((v, e))
            adj[v].append((u, e))
        return adj

    @cached_property
    def canonical(self) -> tuple[np.ndarray, np.ndarray]:
        """Endpoints ``(x, y)`` of every edge with ``x < y``."""
        x = self.edges.min(axis=1)
        y = self.edges.max(axis=1)
        return x, y

    @property
    def is_regular(self) -> bool:
        return bool(np.all(self.degrees == self.degrees[0]))

    @property
    def mean_degree(self) -> float:
        return 2 * self.m / self.n

    def is_connected(self) -> bool:
        if self.n == 1:
            return True
        seen = np.zeros(self.n, dtype=bool)
        seen[0] = True
        stack = [0]
        adj = self.adjacency
        while stack:
            u = stack.pop()
            for v, _ in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        return bool(seen.all())

    def label(self) -> str:
        if not self.params:
            return self.family
        args = ",".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.family}({args})"


# ---------------------------------------------------------------------------
# edge-list text format
# ---------------------------------------------------------------------------


def load_edge_list(text: str) -> Graph:
    """Parse ``n <count>`` followed by ``u v`` lines; ``#`` starts a comment line."""
    n = None
    edges: list[tuple[int, int]] = []
    edge_lines: list[int] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if n is None:
            if len(parts) != 2 or parts[0] != "n":
                raise EdgeListError("expected header 'n <count>'", lineno)
            try:
                n = int(parts[1])
            except ValueError:
                raise EdgeListError(f"bad vertex count {parts[1]!r}", lineno) from None
            if n < 1:
                raise EdgeListError("vertex count must be positive", lineno)
            continue
        if len(parts) != 2:
            raise EdgeListError(f"malformed edge line {line!r}", lineno)
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise EdgeListError(f"malformed edge line {line!r}", lineno) from None
        if not (0 <= u < n and 0 <= v < n):
            raise EdgeListError(f"vertex out of range in {line!r} (n={n})", lineno)
        if u == v:
            raise EdgeListError(f"self-loop at vertex {u}", lineno)
        edges.append((u, v))
        edge_lines.append(lineno)
    if n is None:
        raise EdgeListError("missing header 'n <count>'")
    try:
        return Graph(n, np.array(edges, dtype=np.int64).reshape(-1, 2), family="file")
    except GraphError as exc:
        raise EdgeListError(str(exc), edge_lines[-1] if edge_lines else None) from None


def dump_edge_list(g: Graph) -> str:
    lines = [f"# {g.label()}", f"n {g.n}"]
    lines.extend(f"{u} {v}" for u, v in g.edges.tolist())
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def _cycle(n: int) -> np.ndarray:
    if n < 3:
        raise GraphError("cycle needs n >= 3")
    u = np.arange(n)
    return np.stack([u, (u + 1) % n], axis=1)


def _torus2d(side: int) -> np.ndarray:
    if side < 3:
        raise GraphError("torus side must be >= 3")
    idx = np.arange(side * side).reshape(side, side)
    right = np.stack([idx.ravel(), np.roll(idx, -1, axis=1).ravel()], axis=1)
    down = np.stack([idx.ravel(), np.roll(idx, -1, axis=0).ravel()], axis=1)
    return np.concatenate([right, down])


def _hypercube(dim: int) -> np.ndarray:
    if dim < 1:
        raise GraphError("hypercube dimension must be >= 1")
    n = 1 << dim
    out = []
    for b in range(dim):
        u = np.arange(n)
        u = u[(u >> b) & 1 == 0]
        out.append(np.stack([u, u | (1 << b)], axis=1))
    return np.concatenate(out)


def _complete(n: int) -> np.ndarray:
    if n < 2:
        raise GraphError("complete graph needs n >= 2")
    u, v = np.triu_indices(n, k=1)
    return np.stack([u, v], axis=1)


def _random_regular(n: int, d: int, seed: int, max_tries: int = 1000) -> np.ndarray:
    if d < 1 or d >= n:
        raise GraphError(f"random_regular needs 1 <= d < n (got n={n}, d={d})")
    if (n * d) % 2:
        raise GraphError("random_regular needs n*d even")
    rng = np.random.Generator(np.random.PCG64(seed))
    stubs = np.repeat(np.arange(n), d)
    for _ in range(max_tries):
        perm = rng.permutation(stubs).reshape(-1, 2)
        if np.any(perm[:, 0] == perm[:, 1]):
            continue
        pairs = np.sort(perm, axis=1)
        keys = pairs[:, 0] * n + pairs[:, 1]
        if len(np.unique(keys)) != len(keys):
            continue
        try:
            Graph(n, pairs)
        except GraphError:
            continue
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        return pairs[order]
    raise GraphError(f"random_regular: no simple connected graph after {max_tries} tries")


def _dumbbell(n: int, k: int) -> np.ndarray:
    if n < 4 or n % 2:
        raise GraphError("dumbbell needs even n >= 4")
    h = n // 2
    if not 1 <= k <= h:
        raise GraphError(f"dumbbell needs 1 <= k <= n/2 (got k={k})")
    left = _complete(h)
    bridges = np.stack([np.arange(k), h + np.arange(k)], axis=1)
    return np.concatenate([left, left + h, bridges])


FAMILIES = ("cycle", "torus2d", "hypercube", "complete", "random_regular", "dumbbell")


def generate(family: str, **params) -> Graph:
    """Build a graph of a named family.

    ``cycle(n)``, ``torus2d(side)``, ``hypercube(dim)``, ``complete(n)``,
    ``random_regular(n, d, seed=0)``, ``dumbbell(n, k)``. The dumbbell is two
    cliques on ``n/2`` vertices joined by ``k`` vertex-disjoint bridges.
    """
    try:
        if family == "cycle":
            edges, n = _cycle(params["n"]), params["n"]
        elif family == "torus2d":
            edges, n = _torus2d(params["side"]), params["side"] ** 2
        elif family == "hypercube":
            edges, n = _hypercube(params["dim"]), 1 << params["dim"]
        elif family == "complete":
            edges, n = _complete(params["n"]), params["n"]
        elif family == "random_regular":
            params.setdefault("seed", 0)
            edges = _random_regular(params["n"], params["d"], params["seed"])
            n = params["n"]
        elif family == "dumbbell":
            edges, n = _dumbbell(params["n"], params["k"]), params["n"]
        else:
            raise GraphError(f"unknown family {family!r}; choose from {', '.join(FAMILIES)}")
    except KeyError as exc:
        raise GraphError(f"{family} needs parameter {exc.args[0]!r}") from None
    return Graph(n, edges, family=family, params=dict(params))


# ---------------------------------------------------------------------------
# structural parameters
# ---------------------------------------------------------------------------


def validate_regular(g: Graph) -> int:
    deg = g.degrees
    if g.is_regular:
        return int(deg[0])
    values, counts = np.unique(deg, return_counts=True)
    common = values[np.argmax(counts)]
    bad = np.flatnonzero(deg != common)
    shown = ", ".join(f"{v}(deg {deg[v]})" for v in bad[:10])
    more = f" and {len(bad) - 10} more" if len(bad) > 10 else ""
    raise GraphError(f"graph is not regular: vertices {shown}{more} differ from degree {common}")


@numba.njit(cache=True)
def _stoer_wagner(w):
    n = w.shape[0]
    w = w.copy()
    active = np.ones(n, dtype=np.bool_)
    best = np.inf
    for phase in range(n - 1):
        added = np.zeros(n, dtype=np.bool_)
        conn = np.zeros(n)
        prev = -1
        last = -1
        for _ in range(n - phase):
            sel = -1
            for v in range(n):
                if active[v] and not added[v] and (sel == -1 or conn[v] > conn[sel]):
                    sel = v
            added[sel] = True
            prev, last = last, sel
            for v in range(n):
                conn[v] += w[sel, v]
        if conn[last] < best:
            best = conn[last]
        # merge last into prev
        for v in range(n):
            w[prev, v] += w[last, v]
            w[v, prev] = w[prev, v]
        w[prev, prev] = 0.0
        active[last] = False
    return best


def edge_connectivity(g: Graph) -> int:
    """Size of a global minimum edge cut (Stoer-Wagner)."""
    if g.n == 1:
        raise GraphError("edge connectivity undefined for a single vertex")
    w = np.zeros((g.n, g.n))
    np.add.at(w, (g.edges[:, 0], g.edges[:, 1]), 1.0)
    w += w.T
    return int(round(_stoer_wagner(w)))
