"""Balancing flows for decomposition-tree nodes and the per-edge sampling plans.

Each internal node ``i`` asks for a drift that takes ``D/|S_l|`` away from
every vertex of its left child set and hands ``D/|S_r|`` to every vertex of
the right child set. The drift is realized by a flow inside ``G[S_i]``. The
absolute flow values on an edge, summed over nodes, must not exceed one, which
fixes the global scale ``D``.
"""

from __future__ import annotations

import math
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .decomposition import DecompTree
from .graph import Graph, GraphError

__all__ = [
    "FlowNetwork",
    "MaxFlowResult",
    "NodeFlow",
    "EdgePlans",
    "FlowError",
    "VerificationError",
    "max_flow",
    "min_congestion_node_flow",
    "routing_set",
    "compute_node_flows",
    "assemble_edge_plans",
    "preprocess",
    "drift_matrix",
    "verify_orthogonality",
    "verify_total_demand",
    "verify_conservation",
    "verify_plans",
    "dump_plans",
    "load_plans",
]

EPS = 1e-15
FEASIBLE_SLACK = 1e-12
MAX_BISECTIONS = 60
REL_PRECISION = 1e-7
VERIFY_TOL = 1e-9


class FlowError(ArithmeticError):
    """Numerical failure while computing a balancing flow."""


class VerificationError(AssertionError):
    def __init__(self, check: str, violations: list):
        self.check = check
        self.violations = violations
        super().__init__(f"{check}: {len(violations)} violation(s), first {violations[0]}")


# ---------------------------------------------------------------------------
# max flow (Dinic)
# ---------------------------------------------------------------------------


class FlowNetwork:
    """Directed network stored as paired arcs ``a`` / ``a ^ 1``."""

    def __init__(self, num_nodes: int):
        self.num_nodes = num_nodes
        self.adj: list[list[int]] = [[] for _ in range(num_nodes)]
        self.head: list[int] = []
        self.cap: list[float] = []

    def add_arc(self, u: int, v: int, cap: float, rev_cap: float = 0.0) -> int:
        if cap < 0 or rev_cap < 0:
            raise ValueError("capacities must be non-negative")
        a = len(self.head)
        self.head += [v, u]
        self.cap += [float(cap), float(rev_cap)]
        self.adj[u].append(a)
        self.adj[v].append(a + 1)
        return a

    def add_undirected(self, u: int, v: int, cap: float) -> int:
        return self.add_arc(u, v, cap, cap)

    @classmethod
    def from_graph(cls, g: Graph, cap: float = 1.0) -> FlowNetwork:
        net = cls(g.n)
        for u, v in g.edges.tolist():
            net.add_undirected(u, v, cap)
        return net


@dataclass
class MaxFlowResult:
    value: float
    residual: list[float]
    network: FlowNetwork

    def flow(self, arc: int) -> float:
        """Net flow along ``arc`` (negative means the opposite direction)."""
        return self.network.cap[arc] - self.residual[arc]

    def min_cut_side(self, s: int) -> set[int]:
        net, res = self.network, self.residual
        seen = {s}
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for a in net.adj[u]:
                v = net.head[a]
                if res[a] > EPS and v not in seen:
                    seen.add(v)
                    queue.append(v)
        return seen


def max_flow(net: FlowNetwork, s: int, t: int) -> MaxFlowResult:
    """Maximum s-t flow by Dinic's algorithm."""
    if s == t:
        raise ValueError("source and sink must differ")
    head, adj = net.head, net.adj
    res = list(net.cap)
    n = net.num_nodes
    total = 0.0
    while True:
        level = [-1] * n
        level[s] = 0
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for a in adj[u]:
                v = head[a]
                if level[v] < 0 and res[a] > EPS:
                    level[v] = level[u] + 1
                    queue.append(v)
        if level[t] < 0:
            break
        it = [0] * n
        while True:
            path: list[int] = []
            u = s
            while u != t:
                arcs = adj[u]
                i = it[u]
                while i < len(arcs):
                    a = arcs[i]
                    v = head[a]
                    if res[a] > EPS and level[v] == level[u] + 1:
                        break
                    i += 1
                it[u] = i
                if i == len(arcs):
                    if u == s:
                        break
                    level[u] = -1
                    a = path.pop()
                    u = head[a ^ 1]
                    it[u] += 1
                    continue
                path.append(a)
                u = v
            if u != t:
                break
            push = min(res[a] for a in path)
            for a in path:
                res[a] -= push
                res[a ^ 1] += push
            total += push
    return MaxFlowResult(total, res, net)


# ---------------------------------------------------------------------------
# per-node balancing flows
# ---------------------------------------------------------------------------


@dataclass
class NodeFlow:
    """Flow of one tree node's commodity, signed along ``(min, max)`` endpoints.

    ``scale`` is the total drift ``D``; a unit flow has ``scale == 1``.
    """

    node: int
    left: np.ndarray
    right: np.ndarray
    edge_ids: np.ndarray
    values: np.ndarray
    scale: float = 1.0

    @property
    def congestion(self) -> float:
        return float(np.abs(self.values).max()) if len(self.values) else 0.0

    def drift(self, n: int) -> np.ndarray:
        d = np.zeros(n)
        d[self.left] = -self.scale / len(self.left)
        d[self.right] = self.scale / len(self.right)
        return d

    def scaled(self, factor: float) -> NodeFlow:
        return NodeFlow(
            self.node, self.left, self.right, self.edge_ids, self.values * factor, self.scale * factor
        )

    def inflow(self, g: Graph) -> np.ndarray:
        """Net flow entering every vertex."""
        x, y = g.canonical
        out = np.zeros(g.n)
        np.add.at(out, y[self.edge_ids], self.values)
        np.add.at(out, x[self.edge_ids], -self.values)
        return out


def _induced_edges(g: Graph, verts: np.ndarray) -> np.ndarray:
    inside = np.zeros(g.n, dtype=bool)
    inside[verts] = True
    return np.flatnonzero(inside[g.edges[:, 0]] & inside[g.edges[:, 1]])


def _tree_flow(g: Graph, verts: np.ndarray, eids: np.ndarray, demand: dict[int, float]) -> np.ndarray:
    """The unique flow on a spanning tree meeting ``demand`` (inflow per vertex)."""
    x, y = g.canonical
    adj: dict[int, list[tuple[int, int]]] = {int(v): [] for v in verts}
    for k, e in enumerate(eids.tolist()):
        adj[int(x[e])].append((int(y[e]), k))
        adj[int(y[e])].append((int(x[e]), k))
    root = int(verts[0])
    order = [root]
    parent = {root: (-1, -1)}
    for u in order:
        for v, k in adj[u]:
            if v not in parent:
                parent[v] = (u, k)
                order.append(v)
    acc = {int(v): demand.get(int(v), 0.0) for v in verts}
    values = np.zeros(len(eids))
    for v in reversed(order[1:]):
        p, k = parent[v]
        # inflow needed by the subtree of v arrives from p
        values[k] = acc[v] if p == int(x[eids[k]]) else -acc[v]
        acc[p] += acc[v]
    return values


def _is_connected(g: Graph, verts: np.ndarray, eids: np.ndarray) -> bool:
    x, y = g.canonical
    adj: dict[int, list[int]] = {int(v): [] for v in verts}
    for e in eids.tolist():
        adj[int(x[e])].append(int(y[e]))
        adj[int(y[e])].append(int(x[e]))
    start = int(verts[0])
    seen = {start}
    stack = [start]
    while stack:
        for v in adj[stack.pop()]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == len(verts)


def routing_set(g: Graph, tree: DecompTree, i: int) -> int:
    """Nearest node at or above ``i`` whose set induces a connected subgraph."""
    j = i
    while tree.parent[j] >= 0 and not _is_connected(g, tree.sets[j], _induced_edges(g, tree.sets[j])):
        j = int(tree.parent[j])
    return j


def min_congestion_node_flow(g: Graph, tree: DecompTree, i: int) -> NodeFlow:
    """Unit balancing flow for internal node ``i`` with near-minimal max edge load.

    The flow lives in ``G[S_i]``, or in the nearest ancestor set that induces
    a connected subgraph when ``G[S_i]`` does not. When that subgraph is a
    tree the flow is unique and computed directly. Otherwise the smallest
    feasible uniform edge capacity is bracketed by bisection, each step a
    max-flow feasibility test, until the bracket is within a relative ``1e-7``.
    """
    if tree.left[i] < 0:
        raise ValueError(f"node {i} is a leaf")
    left = tree.sets[tree.left[i]]
    right = tree.sets[tree.right[i]]
    verts = tree.sets[routing_set(g, tree, i)]
    eids = _induced_edges(g, verts)
    if len(eids) == len(verts) - 1:
        demand = {int(u): -1.0 / len(left) for u in left}
        demand.update({int(v): 1.0 / len(right) for v in right})
        values = _tree_flow(g, verts, eids, demand)
        keep = values != 0.0
        return NodeFlow(i, left, right, eids[keep], values[keep])

    local = {int(v): k for k, v in enumerate(verts.tolist())}
    x, y = g.canonical
    ex = [local[int(u)] for u in x[eids]]
    ey = [local[int(v)] for v in y[eids]]
    s, t = len(verts), len(verts) + 1
    in_left = np.zeros(g.n, dtype=bool)
    in_left[left] = True
    # any unit flow sends all of it across the edges leaving S_l
    crossing = int(np.count_nonzero(in_left[x[eids]] != in_left[y[eids]]))

    def attempt(c: float):
        net = FlowNetwork(len(verts) + 2)
        arcs = [net.add_undirected(a, b, c) for a, b in zip(ex, ey)]
        for u in left.tolist():
            net.add_arc(s, local[u], 1.0 / len(left))
        for v in right.tolist():
            net.add_arc(local[v], t, 1.0 / len(right))
        res = max_flow(net, s, t)
        return res.value >= 1.0 - FEASIBLE_SLACK, res, arcs

    lo, hi = 1.0 / crossing, 1.0
    ok, best, arcs = attempt(lo)
    if not ok:
        ok, best, arcs = attempt(hi)
        if not ok:
            raise FlowError(f"node {i}: unit capacity infeasible; is G[S_i] connected?")
        steps = 0
        while hi > lo * (1 + REL_PRECISION):
            steps += 1
            if steps > MAX_BISECTIONS:
                raise FlowError(f"node {i}: bisection did not converge")
            mid = 0.5 * (lo + hi)
            ok, res, mid_arcs = attempt(mid)
            if ok:
                hi, best, arcs = mid, res, mid_arcs
            else:
                lo = mid
    values = np.array([best.flow(a) for a in arcs])
    values[np.abs(values) < EPS] = 0.0
    keep = values != 0.0
    return NodeFlow(i, left, right, eids[keep], values[keep])


def _node_flow_job(args):
    g, tree, nodes = args
    return [min_congestion_node_flow(g, tree, int(i)) for i in nodes]


def compute_node_flows(g: Graph, tree: DecompTree, jobs: int = 1) -> list[NodeFlow]:
    """Unit flows for every internal node, in ``tree.internal`` order."""
    nodes = tree.internal.tolist()
    if jobs <= 1 or len(nodes) < 2 * jobs:
        return [min_congestion_node_flow(g, tree, i) for i in nodes]
    chunks = [nodes[k::jobs] for k in range(jobs)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(_node_flow_job, [(g, tree, c) for c in chunks]))
    by_node = {f.node: f for part in parts for f in part}
    return [by_node[i] for i in nodes]


# ---------------------------------------------------------------------------
# edge plans
# ---------------------------------------------------------------------------


@dataclass
class EdgePlans:
    """Sparse per-edge distributions over tree nodes.

    Entries of edge ``e`` live in ``ptr[e]:ptr[e+1]`` of ``node``/``prob``/
    ``sign``; signs refer to the orientation ``(min, max)`` of the edge.
    ``scale`` is the per-node total drift ``D``; ``congestion`` is the
    largest summed unit-flow load on an edge.
    """

    n: int
    m: int
    ptr: np.ndarray
    node: np.ndarray
    prob: np.ndarray
    sign: np.ndarray
    scale: float
    congestion: float
    connectivity: int | None = None
    _cum: np.ndarray | None = field(default=None, repr=False)

    @property
    def total(self) -> np.ndarray:
        """``sum_i p_e(i)`` per edge."""
        owner = np.repeat(np.arange(self.m), np.diff(self.ptr))
        return np.bincount(owner, weights=self.prob, minlength=self.m)

    @property
    def empty(self) -> np.ndarray:
        """Residual mass ``p_e(empty)`` per edge."""
        return 1.0 - self.total

    @property
    def support(self) -> np.ndarray:
        return np.diff(self.ptr)

    @property
    def cumulative(self) -> np.ndarray:
        """Running sum of ``prob`` restarted at every edge."""
        if self._cum is None:
            cum = np.empty_like(self.prob)
            for e in range(self.m):
                a, b = self.ptr[e], self.ptr[e + 1]
                cum[a:b] = np.cumsum(self.prob[a:b])
            self._cum = cum
        return self._cum

    @property
    def measured_alpha(self) -> float | None:
        """Congestion ratio implied by the realized scale, ``k / (8 D)``."""
        if self.connectivity is None:
            return None
        return self.connectivity / (8 * self.scale)

    def entries(self, e: int) -> list[tuple[int, float, int]]:
        a, b = self.ptr[e], self.ptr[e + 1]
        return list(zip(self.node[a:b].tolist(), self.prob[a:b].tolist(), self.sign[a:b].tolist()))

    def flow_values(self) -> np.ndarray:
        """Signed ``g_i(x, y)`` for every stored entry."""
        return self.sign * self.prob


def assemble_edge_plans(
    g: Graph, tree: DecompTree, unit_flows: list[NodeFlow], gamma: float = 1.0, k: int | None = None
) -> EdgePlans:
    """Scale unit flows by the largest feasible ``D`` and build the edge plans."""
    load = np.zeros(g.m)
    for f in unit_flows:
        np.add.at(load, f.edge_ids, np.abs(f.values))
    peak = float(load.max()) if g.m else 0.0
    if peak <= 0:
        raise GraphError("no balancing flow to assemble (single-vertex graph?)")
    scale = gamma / peak
    if not unit_flows:
        raise GraphError("no internal tree nodes")
    eid = np.concatenate([f.edge_ids for f in unit_flows])
    nid = np.concatenate([np.full(len(f.edge_ids), f.node) for f in unit_flows])
    val = np.concatenate([f.values for f in unit_flows]) * scale
    order = np.lexsort((nid, eid))
    eid, nid, val = eid[order], nid[order], val[order]
    ptr = np.zeros(g.m + 1, dtype=np.int64)
    np.add.at(ptr, eid + 1, 1)
    ptr = np.cumsum(ptr)
    return EdgePlans(
        n=g.n,
        m=g.m,
        ptr=ptr,
        node=nid.astype(np.int64),
        prob=np.abs(val),
        sign=np.where(val > 0, 1, -1).astype(np.int64),
        scale=scale,
        congestion=peak,
        connectivity=k,
    )


def preprocess(
    g: Graph, tree: DecompTree, jobs: int = 1, k: int | None = None
) -> tuple[EdgePlans, list[NodeFlow]]:
    """Unit flows for every node, assembled into plans; returns plans and scaled flows."""
    unit = compute_node_flows(g, tree, jobs)
    plans = assemble_edge_plans(g, tree, unit, k=k)
    return plans, [f.scaled(plans.scale) for f in unit]


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def drift_matrix(tree: DecompTree, scale: float) -> np.ndarray:
    """Rows ``d_i`` for ``i`` in ``tree.internal`` order."""
    d = np.zeros((len(tree.internal), tree.n))
    for r, i in enumerate(tree.internal):
        left, right = tree.sets[tree.left[i]], tree.sets[tree.right[i]]
        d[r, left] = -scale / len(left)
        d[r, right] = scale / len(right)
    return d


def _drifts(tree: DecompTree, flows: list[NodeFlow], g: Graph | None = None) -> np.ndarray:
    """Requested drifts, or the realized inflows when ``g`` is given."""
    pos = {int(i): r for r, i in enumerate(tree.internal)}
    d = np.zeros((len(tree.internal), tree.n))
    for f in flows:
        d[pos[f.node]] = f.drift(tree.n) if g is None else f.inflow(g)
    return d


@dataclass
class OrthogonalityReport:
    max_offdiag: float
    max_diag_error: float
    violations: list[tuple[int, int, float]]

    @property
    def ok(self) -> bool:
        return not self.violations


def verify_orthogonality(
    tree: DecompTree, flows: list[NodeFlow], tol: float = VERIFY_TOL, strict: bool = True, g: Graph | None = None
) -> OrthogonalityReport:
    """Normalized sibling difference of every drift at every node.

    Off the diagonal it must vanish; on it, equal ``-D (1/|S_l| + 1/|S_r|)``.
    With ``g`` the drifts are read off the flows themselves.
    """
    d = _drifts(tree, flows, g)
    internal = tree.internal
    probe = np.zeros((tree.n, len(internal)))
    for c, j in enumerate(internal):
        left, right = tree.sets[tree.left[j]], tree.sets[tree.right[j]]
        probe[left, c] = 1.0 / len(left)
        probe[right, c] = -1.0 / len(right)
    resid = d @ probe
    scales = np.zeros(len(internal))
    for f in flows:
        scales[np.searchsorted(internal, f.node)] = f.scale
    sl = tree.size[tree.left[internal]]
    sr = tree.size[tree.right[internal]]
    expected = -scales * (1.0 / sl + 1.0 / sr)
    diag_err = np.abs(np.diag(resid) - expected)
    off = resid.copy()
    np.fill_diagonal(off, 0.0)
    violations = [
        (int(internal[r]), int(internal[c]), float(off[r, c])) for r, c in zip(*np.nonzero(np.abs(off) > tol))
    ]
    violations += [
        (int(internal[r]), int(internal[r]), float(diag_err[r])) for r in np.flatnonzero(diag_err > tol)
    ]
    report = OrthogonalityReport(float(np.abs(off).max(initial=0.0)), float(diag_err.max(initial=0.0)), violations)
    if strict and violations:
        raise VerificationError("orthogonality", violations)
    return report


@dataclass
class DemandReport:
    totals: np.ndarray
    bound: float
    violations: list[tuple[int, float]]

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def max_total(self) -> float:
        return float(self.totals.max(initial=0.0))


def verify_total_demand(
    tree: DecompTree, flows: list[NodeFlow], strict: bool = True, g: Graph | None = None
) -> DemandReport:
    """``sum_i |d_i(S_j)| <= 8 D`` for every tree node ``j``."""
    d = _drifts(tree, flows, g)
    scale = max((f.scale for f in flows), default=0.0)
    totals = np.abs(d @ tree.membership().T.astype(float)).sum(axis=0)
    bound = 8 * scale
    bad = np.flatnonzero(totals > bound * (1 + 1e-12) + 1e-15)
    report = DemandReport(totals, bound, [(int(j), float(totals[j])) for j in bad])
    if strict and bad.size:
        raise VerificationError("total demand", report.violations)
    return report


def verify_conservation(g: Graph, tree: DecompTree, flows: list[NodeFlow], tol: float = VERIFY_TOL, strict: bool = True):
    """Every flow meets its drift exactly and stays inside its routing set."""
    violations = []
    for f in flows:
        err = np.abs(f.inflow(g) - f.drift(g.n))
        if err.max() > tol:
            v = int(np.argmax(err))
            violations.append(("conservation", f.node, v, float(err[v])))
        inside = np.zeros(g.n, dtype=bool)
        inside[tree.sets[routing_set(g, tree, f.node)]] = True
        x, y = g.canonical
        outside = ~(inside[x[f.edge_ids]] & inside[y[f.edge_ids]])
        if outside.any():
            violations.append(("support", f.node, int(f.edge_ids[outside][0]), 0.0))
    if strict and violations:
        raise VerificationError("flow conservation", violations)
    return violations


def verify_plans(plans: EdgePlans, tol: float = 1e-12, strict: bool = True):
    """Each edge's distribution is non-negative and sums to at most one."""
    violations = []
    if (plans.prob < 0).any():
        violations.append(("negative", int(np.flatnonzero(plans.prob < 0)[0])))
    over = np.flatnonzero(plans.total > 1 + tol)
    violations += [("sum>1", int(e), float(plans.total[e])) for e in over]
    if strict and violations:
        raise VerificationError("plan validity", violations)
    return violations


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------


def dump_plans(g: Graph, plans: EdgePlans) -> str:
    """``x y : (i p sigma)* empty=<p>`` per edge, 12 significant digits."""
    x, y = g.canonical
    lines = [
        f"# plans n={plans.n} m={plans.m}",
        f"scale {plans.scale:.17g}",
        f"congestion {plans.congestion:.17g}",
    ]
    if plans.connectivity is not None:
        lines.append(f"connectivity {plans.connectivity}")
    empty = plans.empty
    for e in range(plans.m):
        groups = " ".join(f"({i} {p:.12g} {s:+d})" for i, p, s in plans.entries(e))
        sep = " " if groups else ""
        lines.append(f"{x[e]} {y[e]} : {groups}{sep}empty={empty[e]:.12g}")
    return "\n".join(lines) + "\n"


def load_plans(text: str, g: Graph) -> EdgePlans:
    x, y = g.canonical
    meta = {}
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            key, _, value = line.partition(" ")
            meta[key] = value
            continue
        head, _, tail = line.partition(":")
        try:
            u, v = (int(t) for t in head.split())
        except ValueError:
            raise ValueError(f"line {lineno}: malformed edge header") from None
        e = len(rows)
        if e >= g.m or (u, v) != (int(x[e]), int(y[e])):
            raise ValueError(f"line {lineno}: edge {u} {v} does not match the graph")
        body = tail.split("empty=")[0]
        entries = []
        for grp in body.replace(")", "").split("("):
            if grp.strip():
                i, p, s = grp.split()
                entries.append((int(i), float(p), int(s)))
        rows.append(entries)
    if len(rows) != g.m:
        raise ValueError(f"plan file has {len(rows)} edges, graph has {g.m}")
    ptr = np.cumsum([0] + [len(r) for r in rows]).astype(np.int64)
    flat = [t for r in rows for t in r]
    conn = meta.get("connectivity")
    return EdgePlans(
        n=g.n,
        m=g.m,
        ptr=ptr,
        node=np.array([t[0] for t in flat], dtype=np.int64),
        prob=np.array([t[1] for t in flat], dtype=float),
        sign=np.array([t[2] for t in flat], dtype=np.int64),
        scale=float(meta["scale"]),
        congestion=float(meta["congestion"]),
        connectivity=int(conn) if conn is not None else None,
    )
