"""Online allocation strategies and the load bookkeeping they share.

Single-step functions (``flow_allocate``, ``greedy_allocate``, ...) follow the
textbook rules one ball at a time and are the reference semantics. Bulk
simulation goes through ``simulate_batch``, a compiled loop that consumes
pre-drawn random numbers in the same order as the single-step functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .decomposition import DecompTree
from .flows import EdgePlans
from .graph import Graph

__all__ = [
    "LoadState",
    "StrategyOutcome",
    "Strategy",
    "ONE_CHOICE",
    "GREEDY",
    "FLOW",
    "flow_allocate",
    "greedy_allocate",
    "one_choice_allocate",
    "one_plus_beta_wrap",
    "stale_flow_allocate",
    "induced_bias",
    "sibling_signs",
    "allocation_probabilities",
    "drift_probabilities",
    "sibling_drift_error",
    "simulate_batch",
    "sample_frozen",
    "draw_requests",
    "default_refresh_interval",
]

ONE_CHOICE, GREEDY, FLOW = 0, 1, 2
_CODES = {"one_choice": ONE_CHOICE, "greedy": GREEDY, "flow": FLOW, "stale_flow": FLOW}


class LoadState:
    """Vertex loads plus per-tree-node totals (leaves included).

    ``stale`` is the batched table read by the stale-table variant; it is
    ``None`` in fresh mode.
    """

    def __init__(self, g: Graph, tree: DecompTree | None = None, refresh_interval: int | None = None):
        self.graph = g
        self.tree = tree
        self.loads = np.zeros(g.n, dtype=np.int64)
        nodes = tree.num_nodes if tree is not None else 0
        self.totals = np.zeros(nodes, dtype=np.int64)
        self.t = 0
        self.refresh_interval = refresh_interval
        self.stale = np.zeros(nodes, dtype=np.int64) if refresh_interval else None
        self.since_refresh = 0
        self.table_updates = 0
        self.max_stale_excess = 0.0

    @classmethod
    def from_loads(cls, g: Graph, tree: DecompTree | None, loads) -> LoadState:
        state = cls(g, tree)
        state.loads = np.asarray(loads, dtype=np.int64).copy()
        state.t = int(state.loads.sum())
        if tree is not None:
            state.totals = np.array([state.loads[s].sum() for s in tree.sets], dtype=np.int64)
        return state

    def add_ball(self, v: int) -> None:
        self.loads[v] += 1
        self.t += 1
        if self.tree is not None:
            j = self.tree.leaf_of[v]
            while j >= 0:
                self.totals[j] += 1
                j = self.tree.parent[j]
                if self.stale is None:
                    self.table_updates += 1
            if self.stale is not None:
                self.since_refresh += 1
                if self.since_refresh >= self.refresh_interval:
                    self.refresh()

    def refresh(self) -> None:
        """Push every vertex's pending balls into the stale table."""
        tree = self.tree
        excess = (self.totals - self.stale) / tree.size
        self.max_stale_excess = max(self.max_stale_excess, float(excess.max(initial=0)))
        for v in range(self.graph.n):
            c = self.loads[v] - self.stale[tree.leaf_of[v]]
            if c > 0:
                j = tree.leaf_of[v]
                while j >= 0:
                    self.stale[j] += c
                    self.table_updates += 1
                    j = tree.parent[j]
        self.since_refresh = 0

    @property
    def gap(self) -> int:
        return int(self.loads.max() - self.loads.min())

    @property
    def upper_gap(self) -> float:
        return float(self.loads.max() - self.t / self.graph.n)

    def compare(self, i: int, stale: bool = False) -> int:
        """``Q_L(i)``: sign of (left average - right average), exact."""
        tab = self.stale if stale else self.totals
        tree = self.tree
        l, r = tree.left[i], tree.right[i]
        a = int(tab[l]) * int(tree.size[r])
        b = int(tab[r]) * int(tree.size[l])
        return (a > b) - (a < b)

    def check(self) -> None:
        assert self.loads.sum() == self.t
        if self.tree is not None:
            t = self.tree
            assert np.array_equal(self.totals[t.leaf_of], self.loads)
            inner = t.internal
            assert np.array_equal(self.totals[inner], self.totals[t.left[inner]] + self.totals[t.right[inner]])


@dataclass
class StrategyOutcome:
    chosen: int
    node: int | None = None
    sign: int = 0


# ---------------------------------------------------------------------------
# single-step strategies
# ---------------------------------------------------------------------------


def _endpoints(state: LoadState, e: int) -> tuple[int, int]:
    x, y = state.graph.canonical
    return int(x[e]), int(y[e])


def _pick_node(plans: EdgePlans, e: int, u: float) -> int:
    a, b = plans.ptr[e], plans.ptr[e + 1]
    k = a + int(np.searchsorted(plans.cumulative[a:b], u, side="right"))
    return k if k < b else -1


def _flow_step(plans: EdgePlans, state: LoadState, e: int, rng, stale: bool) -> StrategyOutcome:
    x, y = _endpoints(state, e)
    pick, coin = rng.random(), rng.random()
    k = _pick_node(plans, e, pick)
    if k < 0:
        v, node, s = (x if coin < 0.5 else y), None, 0
    else:
        node = int(plans.node[k])
        s = int(plans.sign[k]) * state.compare(node, stale=stale)
        v = y if s > 0 else x if s < 0 else (x if coin < 0.5 else y)
    state.add_ball(v)
    return StrategyOutcome(v, node, s)


def flow_allocate(plans: EdgePlans, tree: DecompTree, state: LoadState, e: int, rng) -> StrategyOutcome:
    """Sample a tree node from the edge's plan and send the ball down the lighter side.

    Edge ``e`` is read as ``(x, y)`` with ``x < y``. A positive
    ``sign * Q_L(node)`` sends the ball to ``y``, negative to ``x``; the empty
    outcome or a tie falls back to a fair coin.
    """
    return _flow_step(plans, state, e, rng, stale=False)


def stale_flow_allocate(plans: EdgePlans, tree: DecompTree, state: LoadState, e: int, rng) -> StrategyOutcome:
    """As ``flow_allocate`` but comparisons read the batched table."""
    if state.stale is None:
        raise ValueError("state has no stale table; pass refresh_interval to LoadState")
    return _flow_step(plans, state, e, rng, stale=True)


def greedy_allocate(state: LoadState, e: int, rng) -> StrategyOutcome:
    x, y = _endpoints(state, e)
    coin = rng.random()
    lx, ly = state.loads[x], state.loads[y]
    v = x if lx < ly else y if ly < lx else (x if coin < 0.5 else y)
    state.add_ball(v)
    return StrategyOutcome(v)


def one_choice_allocate(state: LoadState, e: int, rng) -> StrategyOutcome:
    x, y = _endpoints(state, e)
    v = x if rng.random() < 0.5 else y
    state.add_ball(v)
    return StrategyOutcome(v)


def one_plus_beta_wrap(inner, beta: float, state: LoadState, e: int, rng) -> StrategyOutcome:
    """With probability ``beta`` run ``inner(state, e, rng)``, else a uniform vertex."""
    if not 0 < beta <= 1:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    if beta < 1 and rng.random() >= beta:
        v = int(rng.integers(state.graph.n))
        state.add_ball(v)
        return StrategyOutcome(v)
    return inner(state, e, rng)


def sibling_signs(tree: DecompTree, totals: np.ndarray) -> np.ndarray:
    """``Q_L(i)`` for every tree node (0 at leaves)."""
    q = np.zeros(tree.num_nodes, dtype=np.int64)
    i = tree.internal
    a = totals[tree.left[i]] * tree.size[tree.right[i]]
    b = totals[tree.right[i]] * tree.size[tree.left[i]]
    q[i] = np.sign(a - b)
    return q


def induced_bias(plans: EdgePlans, state: LoadState, e: int) -> float:
    """Expected bias toward the larger endpoint: ``sum_i g_i(x, y) Q_L(i)``."""
    a, b = plans.ptr[e], plans.ptr[e + 1]
    q = sibling_signs(state.tree, state.totals)
    return float(np.sum(plans.sign[a:b] * plans.prob[a:b] * q[plans.node[a:b]]))


def allocation_probabilities(plans: EdgePlans, state: LoadState) -> np.ndarray:
    """Exact probability that the next ball lands on each vertex, from edge biases."""
    g = state.graph
    q = sibling_signs(state.tree, state.totals)
    owner = np.repeat(np.arange(plans.m), np.diff(plans.ptr))
    bias = np.bincount(owner, weights=plans.sign * plans.prob * q[plans.node], minlength=plans.m)
    x, y = g.canonical
    prob = np.zeros(g.n)
    np.add.at(prob, y, (1 + bias) / 2)
    np.add.at(prob, x, (1 - bias) / 2)
    return prob / g.m


def drift_probabilities(tree: DecompTree, scale: float, state: LoadState) -> np.ndarray:
    """``1/n + (1/2m) sum_i d_i(y) Q_L(i)`` for every vertex (regular graphs)."""
    g = state.graph
    q = sibling_signs(tree, state.totals)
    out = np.full(g.n, 1.0 / g.n)
    for i in tree.internal:
        if q[i]:
            left, right = tree.sets[tree.left[i]], tree.sets[tree.right[i]]
            out[left] -= q[i] * scale / len(left) / (2 * g.m)
            out[right] += q[i] * scale / len(right) / (2 * g.m)
    return out


def sibling_drift_error(plans: EdgePlans, state: LoadState) -> np.ndarray:
    """Per internal node, deviation from the exact sibling relative drift.

    The measured side is ``q(S_l)/|S_l| - q(S_r)/|S_r|`` with ``q`` from
    :func:`allocation_probabilities`; the prediction is
    ``-(D/2m) Q_L(i) (1/|S_l| + 1/|S_r|)``. On irregular graphs the
    load-independent degree share ``deg/2m`` is removed from ``q`` first.
    """
    g, tree = state.graph, state.tree
    q = allocation_probabilities(plans, state) - g.degrees / (2 * g.m)
    sign = sibling_signs(tree, state.totals)
    member = tree.membership().astype(float)
    mass = member @ q
    i = tree.internal
    l, r = tree.left[i], tree.right[i]
    measured = mass[l] / tree.size[l] - mass[r] / tree.size[r]
    predicted = -(plans.scale / (2 * g.m)) * sign[i] * (1.0 / tree.size[l] + 1.0 / tree.size[r])
    return np.abs(measured - predicted)


# ---------------------------------------------------------------------------
# compiled bulk simulation
# ---------------------------------------------------------------------------


def default_refresh_interval(n: int, c: float = 1.0) -> int:
    return max(1, int(math.floor(c * n * math.log(n))))


@dataclass
class Strategy:
    """A named allocation rule plus whatever preprocessing it needs."""

    kind: str
    plans: EdgePlans | None = None
    tree: DecompTree | None = None
    beta: float = 1.0
    refresh_interval: int | None = None

    def __post_init__(self):
        if self.kind not in _CODES:
            raise ValueError(f"unknown strategy {self.kind!r}; choose from {sorted(_CODES)}")
        if not 0 < self.beta <= 1:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if self.kind in ("flow", "stale_flow") and (self.plans is None or self.tree is None):
            raise ValueError(f"{self.kind} needs plans and a tree; run preprocess first")
        if self.kind == "stale_flow" and not self.refresh_interval:
            raise ValueError("stale_flow needs a refresh interval")

    @property
    def name(self) -> str:
        return self.kind if self.beta == 1 else f"{self.kind}_beta{self.beta:g}"

    @property
    def code(self) -> int:
        return _CODES[self.kind]

    def new_state(self, g: Graph, tree: DecompTree | None = None) -> LoadState:
        t = self.tree if self.tree is not None else tree
        interval = self.refresh_interval if self.kind == "stale_flow" else None
        return LoadState(g, t, interval)


@dataclass
class Requests:
    """Pre-drawn randomness for a block of balls."""

    edges: np.ndarray
    pick: np.ndarray
    coin: np.ndarray
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    vertex: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.edges)


def draw_requests(rng: np.random.Generator, g: Graph, count: int, strategy: Strategy) -> Requests:
    edges = rng.integers(0, g.m, size=count)
    pick = rng.random(count) if strategy.code == FLOW else np.zeros(0)
    coin = rng.random(count)
    if strategy.beta < 1:
        return Requests(edges, pick, coin, rng.random(count), rng.integers(0, g.n, size=count))
    return Requests(edges, pick, coin)


_EMPTY_I = np.zeros(0, dtype=np.int64)
_EMPTY_F = np.zeros(0)


@numba.njit(cache=True, inline="always")
def _choose(code, e, pick, coin, ex, ey, loads, table, ptr, pnode, pcum, psign, left, right, size):
    x = ex[e]
    y = ey[e]
    if code == GREEDY:
        if loads[x] < loads[y]:
            return x, -1, 0
        if loads[y] < loads[x]:
            return y, -1, 0
        return (x if coin < 0.5 else y), -1, 0
    if code == FLOW:
        lo = ptr[e]
        hi = ptr[e + 1]
        # first entry whose running sum exceeds the draw
        while lo < hi:
            mid = (lo + hi) // 2
            if pcum[mid] <= pick:
                lo = mid + 1
            else:
                hi = mid
        if lo < ptr[e + 1]:
            i = pnode[lo]
            a = table[left[i]] * size[right[i]]
            b = table[right[i]] * size[left[i]]
            q = 1 if a > b else (-1 if a < b else 0)
            s = psign[lo] * q
            if s > 0:
                return y, i, s
            if s < 0:
                return x, i, s
            return (x if coin < 0.5 else y), i, 0
        return (x if coin < 0.5 else y), -1, 0
    return (x if coin < 0.5 else y), -1, 0


@numba.njit(cache=True)
def _refresh(loads, totals, stale, parent, size, leaf_of):
    """Return ``(table updates, worst per-vertex stale excess)``."""
    worst = 0.0
    for j in range(totals.shape[0]):
        ex = (totals[j] - stale[j]) / size[j]
        if ex > worst:
            worst = ex
    updates = 0
    for v in range(loads.shape[0]):
        j = leaf_of[v]
        c = loads[v] - stale[j]
        if c > 0:
            while j >= 0:
                stale[j] += c
                updates += 1
                j = parent[j]
    return updates, worst


@numba.njit(cache=True)
def _simulate_plain(code, beta, edges, coin, rbeta, rvertex, ex, ey, loads, trace_v):
    # no tree to maintain: greedy and one-choice only
    for t in range(edges.shape[0]):
        if beta < 1.0 and rbeta[t] >= beta:
            v = rvertex[t]
        else:
            e = edges[t]
            x = ex[e]
            y = ey[e]
            if code == GREEDY and loads[x] < loads[y]:
                v = x
            elif code == GREEDY and loads[y] < loads[x]:
                v = y
            else:
                v = x if coin[t] < 0.5 else y
        loads[v] += 1
        if trace_v.shape[0] > 0:
            trace_v[t] = v


@numba.njit(cache=True)
def _simulate(
    code, beta, interval, edges, pick, coin, rbeta, rvertex,
    ex, ey, ptr, pnode, pcum, psign, parent, left, right, size, leaf_of,
    loads, totals, stale, since, trace_node, trace_v,
):
    # The choice is written out here rather than calling _choose: the call
    # made this loop several times slower under numba.
    updates = 0
    worst = 0.0
    stale_mode = interval > 0
    table = stale if stale_mode else totals
    for t in range(edges.shape[0]):
        node = -1
        e = edges[t]
        x = ex[e]
        y = ey[e]
        s = 0
        if beta < 1.0 and rbeta[t] >= beta:
            v = rvertex[t]
        else:
            if code == FLOW:
                u = pick[t]
                lo = ptr[e]
                end = ptr[e + 1]
                hi = end
                while lo < hi:
                    mid = (lo + hi) >> 1
                    if pcum[mid] <= u:
                        lo = mid + 1
                    else:
                        hi = mid
                if lo < end:
                    node = pnode[lo]
                    a = table[left[node]] * size[right[node]]
                    b = table[right[node]] * size[left[node]]
                    s = psign[lo] * ((a > b) - (a < b))
            elif code == GREEDY:
                s = (loads[x] > loads[y]) - (loads[x] < loads[y])
            if s > 0:
                v = y
            elif s < 0:
                v = x
            else:
                v = x if coin[t] < 0.5 else y
        loads[v] += 1
        j = leaf_of[v]
        depth = 0
        while j >= 0:
            totals[j] += 1
            depth += 1
            j = parent[j]
        if stale_mode:
            since += 1
            if since >= interval:
                c, w = _refresh(loads, totals, stale, parent, size, leaf_of)
                updates += c
                if w > worst:
                    worst = w
                since = 0
        else:
            updates += depth
        if trace_v.shape[0] > 0:
            trace_node[t] = node
            trace_v[t] = v
    return since, updates, worst


def _plan_arrays(plans: EdgePlans | None):
    if plans is None:
        return _EMPTY_I, _EMPTY_I, _EMPTY_F, _EMPTY_I
    return plans.ptr, plans.node, plans.cumulative, plans.sign


def _tree_arrays(tree: DecompTree | None):
    if tree is None:
        return _EMPTY_I, _EMPTY_I, _EMPTY_I, np.ones(0, dtype=np.int64), _EMPTY_I
    return tree.parent, tree.left, tree.right, tree.size, tree.leaf_of


def simulate_batch(
    strategy: Strategy, state: LoadState, req: Requests, trace: bool = False
) -> tuple[np.ndarray, np.ndarray] | None:
    """Allocate every ball in ``req``, mutating ``state``.

    With ``trace=True`` returns ``(node_or_-1, chosen_vertex)`` per ball.
    """
    g = state.graph
    ex, ey = g.canonical
    tree = state.tree
    interval = strategy.refresh_interval if strategy.kind == "stale_flow" else 0
    if strategy.code == FLOW and tree is None:
        raise ValueError("flow strategies need a tree in the load state")
    count = len(req)
    trace_node = np.zeros(count if trace else 0, dtype=np.int64)
    trace_v = np.zeros(count if trace else 0, dtype=np.int64)
    stale = state.stale if state.stale is not None else _EMPTY_I
    if tree is None:
        _simulate_plain(strategy.code, float(strategy.beta), req.edges, req.coin, req.beta, req.vertex,
                        ex, ey, state.loads, trace_v)
        trace_node[:] = -1
    else:
        since, updates, worst = _simulate(
            strategy.code, float(strategy.beta), int(interval or 0),
            req.edges, req.pick, req.coin, req.beta, req.vertex,
            ex, ey, *_plan_arrays(strategy.plans), *_tree_arrays(tree),
            state.loads, state.totals, stale, state.since_refresh, trace_node, trace_v,
        )
        state.since_refresh = int(since)
        state.table_updates += int(updates)
        state.max_stale_excess = max(state.max_stale_excess, float(worst))
    state.t += count
    if trace:
        return trace_node, trace_v
    return None


@numba.njit(cache=True)
def _frozen(code, edges, pick, coin, ex, ey, ptr, pnode, pcum, psign, left, right, size, loads, totals, hits):
    for t in range(edges.shape[0]):
        v, _, _ = _choose(code, edges[t], pick[t], coin[t], ex, ey, loads, totals, ptr, pnode, pcum, psign, left, right, size)
        hits[v] += 1


def sample_frozen(strategy: Strategy, state: LoadState, count: int, rng: np.random.Generator) -> np.ndarray:
    """Per-vertex hit counts of ``count`` independent allocations from a fixed state."""
    g = state.graph
    ex, ey = g.canonical
    hits = np.zeros(g.n, dtype=np.int64)
    block = 1 << 20
    ptr, pnode, pcum, psign = _plan_arrays(strategy.plans)
    _, left, right, size, _ = _tree_arrays(state.tree)
    done = 0
    while done < count:
        c = min(block, count - done)
        edges = rng.integers(0, g.m, size=c)
        pick, coin = rng.random(c), rng.random(c)
        _frozen(strategy.code, edges, pick, coin, ex, ey, ptr, pnode, pcum, psign, left, right, size,
                state.loads, state.totals, hits)
        done += c
    return hits
