"""Simulation drivers: single runs, sweeps, the two-point process and lower bounds."""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from .allocation import Strategy, default_refresh_interval, draw_requests, simulate_batch
from .decomposition import DecompTree, build_tree
from .flows import preprocess
from .graph import Graph, edge_connectivity, generate

__all__ = [
    "RunStats",
    "TwoPointProcess",
    "TwoPointResult",
    "SweepResult",
    "CSV_FIELDS",
    "make_strategy",
    "geometric_checkpoints",
    "node_totals",
    "max_sibling_gap",
    "max_parent_child_gap",
    "run",
    "sweep",
    "fit_power_law",
    "two_point_run",
    "lower_bound_mincut",
    "lower_bound_coupon",
    "upper_gap_stat",
    "write_csv",
]

BLOCK = 1 << 16
CSV_FIELDS = ("family", "n", "d", "k", "strategy", "seed", "t", "gap", "upper_gap", "max_sibling_gap")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def make_strategy(
    g: Graph,
    kind: str,
    partitioner: str | None = None,
    tree_seed: int = 0,
    beta: float = 1.0,
    staleness: float = 1.0,
    jobs: int = 1,
) -> Strategy:
    """Build a strategy, running the flow preprocessing when the kind needs it."""
    if kind not in ("flow", "stale_flow"):
        return Strategy(kind, beta=beta)
    if partitioner is None:
        partitioner = "arc" if g.family == "cycle" else "mincut_balanced"
    tree = build_tree(g, partitioner, tree_seed)
    plans, _ = preprocess(g, tree, jobs=jobs)
    interval = default_refresh_interval(g.n, staleness) if kind == "stale_flow" else None
    return Strategy(kind, plans, tree, beta=beta, refresh_interval=interval)


def geometric_checkpoints(T: int) -> np.ndarray:
    """Powers of two below ``T`` plus ``T`` itself."""
    if T <= 0:
        return np.zeros(1, dtype=np.int64)
    pts = [1 << j for j in range(int(T).bit_length()) if (1 << j) < T]
    return np.array(pts + [T], dtype=np.int64)


def node_totals(tree: DecompTree, loads: np.ndarray) -> np.ndarray:
    """Load of every tree node set, built bottom-up (children follow parents in preorder)."""
    totals = np.zeros(tree.num_nodes, dtype=np.int64)
    totals[tree.leaf_of] = loads
    for i in tree.internal[::-1]:
        totals[i] = totals[tree.left[i]] + totals[tree.right[i]]
    return totals


def max_sibling_gap(tree: DecompTree, totals: np.ndarray) -> float:
    inner = tree.internal
    if len(inner) == 0:
        return 0.0
    l, r = tree.left[inner], tree.right[inner]
    return float(np.max(np.abs(totals[l] / tree.size[l] - totals[r] / tree.size[r])))


def max_parent_child_gap(tree: DecompTree, totals: np.ndarray) -> float:
    kids = np.flatnonzero(tree.parent >= 0)
    if len(kids) == 0:
        return 0.0
    p = tree.parent[kids]
    return float(np.max(np.abs(totals[kids] / tree.size[kids] - totals[p] / tree.size[p])))


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------


@dataclass
class RunStats:
    """Checkpointed gap statistics of one run."""

    seed: int
    strategy: str
    t: np.ndarray
    gap: np.ndarray
    upper_gap: np.ndarray
    max_sibling_gap: np.ndarray
    loads: np.ndarray
    depth: int | None = None
    table_updates: int = 0

    @property
    def final_gap(self) -> int:
        return int(self.gap[-1])

    def records(self) -> list[dict]:
        return [
            {"t": int(t), "gap": int(g), "upper_gap": float(u), "max_sibling_gap": float(s)}
            for t, g, u, s in zip(self.t, self.gap, self.upper_gap, self.max_sibling_gap)
        ]


def run(
    g: Graph,
    strategy: Strategy,
    T: int,
    checkpoints=None,
    seed: int = 0,
    tree: DecompTree | None = None,
) -> RunStats:
    """Throw ``T`` balls at uniformly random edges and record stats at checkpoints.

    Randomness is drawn in fixed blocks, so the trajectory does not depend on
    where the checkpoints fall. ``tree`` supplies sibling gaps for strategies
    that carry no tree of their own.
    """
    if T < 0:
        raise ValueError("T must be non-negative")
    cps = geometric_checkpoints(T) if checkpoints is None else np.unique(np.asarray(checkpoints, dtype=np.int64))
    if len(cps) and (cps[0] < 0 or cps[-1] > T):
        raise ValueError("checkpoints must lie in [0, T]")
    stat_tree = strategy.tree if strategy.tree is not None else tree
    state = strategy.new_state(g)
    rng = make_rng(seed)
    rec_t, rec_gap, rec_up, rec_sib = [], [], [], []

    def record():
        rec_t.append(state.t)
        rec_gap.append(state.gap)
        rec_up.append(state.upper_gap)
        if stat_tree is None:
            rec_sib.append(math.nan)
        else:
            tot = state.totals if state.tree is not None else node_totals(stat_tree, state.loads)
            rec_sib.append(max_sibling_gap(stat_tree, tot))

    ci = 0
    while ci < len(cps) and cps[ci] == 0:
        record()
        ci += 1
    while state.t < T:
        req = draw_requests(rng, g, min(BLOCK, T - state.t), strategy)
        pos = 0
        while pos < len(req):
            stop = len(req)
            if ci < len(cps):
                stop = min(stop, int(cps[ci] - state.t) + pos)
            simulate_batch(strategy, state, _slice(req, pos, stop))
            pos = stop
            while ci < len(cps) and cps[ci] == state.t:
                record()
                ci += 1
    return RunStats(
        seed=seed,
        strategy=strategy.name,
        t=np.array(rec_t, dtype=np.int64),
        gap=np.array(rec_gap, dtype=np.int64),
        upper_gap=np.array(rec_up),
        max_sibling_gap=np.array(rec_sib),
        loads=state.loads.copy(),
        depth=None if stat_tree is None else stat_tree.max_depth,
        table_updates=state.table_updates,
    )


def _slice(req, a: int, b: int):
    from .allocation import Requests

    return Requests(
        req.edges[a:b],
        req.pick[a:b] if len(req.pick) else req.pick,
        req.coin[a:b],
        req.beta[a:b] if len(req.beta) else req.beta,
        req.vertex[a:b] if len(req.vertex) else req.vertex,
    )


def upper_gap_stat(stats: RunStats) -> np.ndarray:
    return stats.upper_gap.copy()


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    family: str
    strategy: str
    sizes: list[int]
    runs: list[list[RunStats]]
    degree: list[int]
    connectivity: list[int]

    def final_gaps(self, idx: int) -> np.ndarray:
        return np.array([r.final_gap for r in self.runs[idx]], dtype=float)

    def summary(self) -> list[tuple[int, float, float]]:
        """``(n, mean final gap, 95% half-width)`` per size (normal approximation)."""
        out = []
        for i, n in enumerate(self.sizes):
            gaps = self.final_gaps(i)
            half = 1.96 * gaps.std(ddof=1) / math.sqrt(len(gaps)) if len(gaps) > 1 else 0.0
            out.append((n, float(gaps.mean()), float(half)))
        return out

    def rows(self) -> list[dict]:
        rows = []
        for i, n in enumerate(self.sizes):
            for stats in self.runs[i]:
                for rec in stats.records():
                    rows.append({
                        "family": self.family, "n": n, "d": self.degree[i], "k": self.connectivity[i],
                        "strategy": self.strategy, "seed": stats.seed, **rec,
                    })
        return rows


def _family_params(family: str, n: int) -> dict:
    if family == "torus2d":
        side = math.isqrt(n)
        if side * side != n:
            raise ValueError(f"torus2d needs a square n, got {n}")
        return {"side": side}
    if family == "hypercube":
        if n & (n - 1):
            raise ValueError(f"hypercube needs n a power of two, got {n}")
        return {"dim": n.bit_length() - 1}
    if family == "random_regular":
        return {"n": n, "d": 4}
    if family == "dumbbell":
        return {"n": n, "k": 1}
    return {"n": n}


def _sweep_job(args):
    g, strategy, T, seed, tree = args
    return run(g, strategy, T, seed=seed, tree=tree)


def sweep(
    family: str,
    sizes,
    kind: str,
    balls,
    runs: int,
    seed: int = 0,
    partitioner: str | None = None,
    jobs: int | None = None,
    beta: float = 1.0,
    staleness: float = 1.0,
) -> SweepResult:
    """Run ``runs`` seeds per size; ``balls(n)`` gives the ball count.

    Run ``r`` uses seed ``seed + r`` at every size. Results are ordered by
    size then seed whatever ``jobs`` is.
    """
    sizes = [int(n) for n in sizes]
    if not sizes:
        raise ValueError("empty size list")
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be strictly increasing")
    if runs < 1:
        raise ValueError("runs must be positive")
    jobs = jobs or os.cpu_count() or 1
    tasks, degree, conn, name = [], [], [], kind
    for n in sizes:
        g = generate(family, **_family_params(family, n))
        strat = make_strategy(g, kind, partitioner, beta=beta, staleness=staleness)
        name = strat.name
        degree.append(int(round(g.mean_degree)))
        conn.append(edge_connectivity(g))
        for r in range(runs):
            tasks.append((g, strat, int(balls(n)), seed + r, strat.tree))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_job, tasks))
    else:
        results = [_sweep_job(t) for t in tasks]
    grouped = [results[i * runs:(i + 1) * runs] for i in range(len(sizes))]
    return SweepResult(family, name, sizes, grouped, degree, conn)


def fit_power_law(ns, values) -> tuple[float, float]:
    """Least-squares ``(exponent, prefactor)`` of ``values ~ c * n**a``."""
    a, b = np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(values, float)), 1)
    return float(a), float(math.exp(b))


def write_csv(rows: list[dict], fh=None) -> str:
    buf = io.StringIO() if fh is None else fh
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(row[k]) for k in CSV_FIELDS})
    return buf.getvalue() if fh is None else ""


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return v


# ---------------------------------------------------------------------------
# two-point process
# ---------------------------------------------------------------------------

EPS_MODES = ("floor", "max", "uniform")


@dataclass
class TwoPointProcess:
    """Two bins with target shares ``pi1``, ``pi2`` and a drift of at least ``eps``.

    ``mode`` picks ``eps_t`` each step: ``floor`` uses ``eps``, ``max`` uses
    ``max(pi)/2`` and ``uniform`` draws from ``[eps, max(pi)/2]``.
    """

    pi1: float = 0.5
    eps: float = 0.1
    mode: str = "floor"

    def __post_init__(self):
        if not 0 < self.pi1 < 1:
            raise ValueError("pi1 must lie in (0, 1)")
        if self.mode not in EPS_MODES:
            raise ValueError(f"unknown eps mode {self.mode!r}; choose from {', '.join(EPS_MODES)}")
        if not 0 < self.eps <= min(self.pi1, self.pi2) / 2:
            raise ValueError(f"eps must lie in (0, min(pi1, pi2)/2] = (0, {min(self.pi1, self.pi2) / 2:g}]")

    @property
    def pi2(self) -> float:
        return 1.0 - self.pi1

    @property
    def eps_max(self) -> float:
        return max(self.pi1, self.pi2) / 2

    def prob_bin1(self, l1: int, l2: int, eps_t: float) -> float:
        """Probability that the next ball lands in bin 1."""
        a, b = l1 * self.pi2, l2 * self.pi1
        if a > b:
            return self.pi1 - eps_t
        if a < b:
            return self.pi1 + eps_t
        return self.pi1


@dataclass
class TwoPointResult:
    checkpoints: np.ndarray
    delta: np.ndarray
    thresholds: np.ndarray
    tail: np.ndarray
    loads: tuple[int, int]
    steps: int = 0
    extra: dict = field(default_factory=dict)


@numba.njit(cache=True)
def _two_point(pi1, pi2, eps, eps_hi, mode, u_alloc, u_eps, checkpoints, thresholds, counts, delta_out):
    l1 = 0
    l2 = 0
    ci = 0
    for t in range(u_alloc.shape[0]):
        if mode == 0:
            e = eps
        elif mode == 1:
            e = eps_hi
        else:
            e = eps + (eps_hi - eps) * u_eps[t]
        a = l1 * pi2
        b = l2 * pi1
        p = pi1 - e if a > b else (pi1 + e if a < b else pi1)
        if u_alloc[t] < p:
            l1 += 1
        else:
            l2 += 1
        d = abs(l1 / pi1 - l2 / pi2) * eps
        for k in range(thresholds.shape[0]):
            if d >= thresholds[k]:
                counts[k] += 1
        while ci < checkpoints.shape[0] and checkpoints[ci] == t + 1:
            delta_out[ci] = l1 / pi1 - l2 / pi2
            ci += 1
    return l1, l2


def two_point_run(proc: TwoPointProcess, T: int, seed: int = 0, thresholds=(8, 16, 24, 32, 40), checkpoints=None):
    """Simulate ``T`` steps; the tail is the fraction of steps with ``|delta| * eps >= x``."""
    rng = make_rng(seed)
    u_alloc = rng.random(T)
    u_eps = rng.random(T) if proc.mode == "uniform" else np.zeros(0)
    cps = geometric_checkpoints(T) if checkpoints is None else np.asarray(checkpoints, dtype=np.int64)
    thr = np.asarray(thresholds, dtype=float)
    counts = np.zeros(len(thr), dtype=np.int64)
    delta = np.zeros(len(cps))
    l1, l2 = _two_point(
        proc.pi1, proc.pi2, proc.eps, proc.eps_max, EPS_MODES.index(proc.mode),
        u_alloc, u_eps, cps, thr, counts, delta,
    )
    return TwoPointResult(cps, delta, thr, counts / max(T, 1), (int(l1), int(l2)), steps=T)


# ---------------------------------------------------------------------------
# lower bounds
# ---------------------------------------------------------------------------


@dataclass
class MincutBound:
    T: int
    d: int
    k: int
    threshold: float
    gaps: np.ndarray

    @property
    def frequency(self) -> float:
        return float(np.mean(self.gaps >= self.threshold))


def lower_bound_mincut(g: Graph, strategy: Strategy, seeds: int = 20, seed: int = 0, c: float = 0.01, c_prime: float = 0.25):
    """Gaps after ``ceil(c n^2 d^2 / k^2)`` balls and how often they reach ``c' d / k``.

    ``d`` is the rounded mean degree; ``k`` the edge connectivity.
    """
    d = int(round(g.mean_degree))
    k = edge_connectivity(g)
    T = math.ceil(c * g.n**2 * d**2 / k**2)
    gaps = np.array([run(g, strategy, T, checkpoints=[T], seed=seed + s).final_gap for s in range(seeds)])
    return MincutBound(T, d, k, c_prime * d / k, gaps)


@dataclass
class CouponBound:
    window: int
    windows: int
    hits: int

    @property
    def frequency(self) -> float:
        return self.hits / self.windows if self.windows else math.nan


def lower_bound_coupon(g: Graph, windows: int = 100, window: int | None = None, seed: int = 0) -> CouponBound:
    """How often some vertex sees no incident request in a window of ``ceil(n ln n)`` balls.

    Only the request stream matters, so no strategy is involved.
    """
    if window is None:
        window = math.ceil(g.n * math.log(g.n)) if g.n > 1 else 0
    rng = make_rng(seed)
    hits = 0
    for _ in range(windows):
        eids = rng.integers(0, g.m, size=window)
        touched = np.zeros(g.n, dtype=bool)
        touched[g.edges[eids].ravel()] = True
        hits += not touched.all()
    return CouponBound(window, windows, hits)
