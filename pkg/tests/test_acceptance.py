"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import math

import numpy as np
import pytest

from conftest import brute_min_cut, brute_st_cut, report
from flowalloc.allocation import LoadState, Strategy, drift_probabilities, sample_frozen, sibling_drift_error
from flowalloc.decomposition import RawNode, binarize, build_tree, verify_balance
from flowalloc.flows import FlowNetwork, max_flow, preprocess, verify_orthogonality, verify_plans, verify_total_demand
from flowalloc.graph import Graph, edge_connectivity, generate
from flowalloc.simulator import TwoPointProcess, fit_power_law, lower_bound_mincut, make_strategy, run, two_point_run

pytestmark = pytest.mark.acceptance


def final_gaps(g, strategy, T, seeds):
    return np.array([run(g, strategy, T, checkpoints=[T], seed=s).final_gap for s in seeds], dtype=float)


def test_criterion_1_greedy_cycle_curve():
    sizes, means = [25, 100, 400], []
    ok = True
    parts = []
    for n in sizes:
        g = generate("cycle", n=n)
        m = final_gaps(g, make_strategy(g, "greedy"), 10**7, range(16)).mean()
        target = 1.85 * math.sqrt(n) - 1
        within = abs(m - target) <= 0.3 * target
        ok &= within
        means.append(m)
        parts.append(f"n={n} gap {m:.2f} vs {target:.2f}")
    slope, _ = fit_power_law(sizes, means)
    ok &= 0.4 <= slope <= 0.6
    assert report(1, ok, "; ".join(parts) + f"; slope {slope:.3f}")


def test_criterion_2_flow_polylog_gap():
    means = {}
    for n in (64, 256, 1024):
        g = generate("cycle", n=n)
        T = int(min(n**2.5, 3e7))
        means[n] = final_gaps(g, make_strategy(g, "flow", partitioner="arc"), T, range(8)).mean()
    g = generate("cycle", n=1024)
    greedy = final_gaps(g, make_strategy(g, "greedy"), int(3e7), range(8)).mean()
    ratio = means[1024] / means[64]
    ok_ratio = ratio <= 4
    ok_vs_greedy = means[1024] <= greedy / 2
    detail = (
        f"gap 64/256/1024 = {means[64]:.2f}/{means[256]:.2f}/{means[1024]:.2f}, "
        f"ratio {ratio:.2f} (<= 4: {ok_ratio}); greedy(1024) {greedy:.2f}, "
        f"flow <= greedy/2: {ok_vs_greedy}"
    )
    assert report(2, ok_ratio and ok_vs_greedy, detail)


def identity_suite():
    graphs = [(generate("cycle", n=n), "arc") for n in (8, 16, 33, 64, 128)]
    graphs += [(generate("torus2d", side=s), "mincut_balanced") for s in (3, 4, 6, 8, 11)]
    graphs += [(generate("complete", n=n), "mincut_balanced") for n in (4, 7, 16, 32)]
    sizes = np.linspace(16, 128, 20).astype(int) // 2 * 2
    graphs += [(generate("random_regular", n=int(n), d=4, seed=s), "mincut_balanced") for s, n in enumerate(sizes)]
    return graphs


def test_criterion_3_exact_identities():
    rng = np.random.Generator(np.random.PCG64(3))
    worst_orth = worst_sib = worst_mass = 0.0
    demand_ok = True
    graphs = identity_suite()
    for g, part in graphs:
        t = build_tree(g, part)
        plans, flows = preprocess(g, t)
        orth = verify_orthogonality(t, flows, strict=False, g=g)
        worst_orth = max(worst_orth, orth.max_offdiag, orth.max_diag_error)
        demand_ok &= verify_total_demand(t, flows, strict=False, g=g).ok
        worst_mass = max(worst_mass, float(plans.total.max()))
        verify_plans(plans, strict=False)
        for _ in range(100):
            state = LoadState.from_loads(g, t, rng.integers(0, 100, size=g.n))
            worst_sib = max(worst_sib, float(sibling_drift_error(plans, state).max()))
    ok = worst_orth <= 1e-9 and demand_ok and worst_mass <= 1 + 1e-12 and worst_sib <= 1e-9
    detail = (
        f"{len(graphs)} graphs; orthogonality residual {worst_orth:.2e}; demand <= 8D: {demand_ok}; "
        f"max sum p {worst_mass:.15f}; sibling identity error {worst_sib:.2e}"
    )
    assert report(3, ok, detail)


def test_criterion_4_allocation_probability_oracle():
    g = generate("cycle", n=32)
    t = build_tree(g, "arc")
    plans, _ = preprocess(g, t)
    rng = np.random.Generator(np.random.PCG64(4))
    state = LoadState.from_loads(g, t, rng.integers(0, 20, size=g.n))
    N = 10**6
    hits = sample_frozen(Strategy("flow", plans, t), state, N, rng)
    q = drift_probabilities(t, plans.scale, state)
    se = np.sqrt(q * (1 - q) / N)
    inside = int(np.sum(np.abs(hits / N - q) <= 3 * se))
    spread = float(q.max() - q.min())
    assert report(4, inside >= 31, f"{inside}/32 vertices within 3 SE (q range {spread:.4f})")


def test_criterion_5_two_point_tail():
    xs = np.array([8, 16, 24, 32], dtype=float)
    proc = TwoPointProcess(0.5, 0.1, "floor")
    tail = np.mean([two_point_run(proc, 10**6, seed=s, thresholds=xs).tail for s in range(32)], axis=0)
    env = 10 * np.exp(-xs / 8)
    ok = bool(np.all(tail <= env))
    detail = ", ".join(f"x={x:g}: {p:.2e} <= {e:.2e}" for x, p, e in zip(xs, tail, env))
    assert report(5, ok, detail)


def test_criterion_6_mincut_lower_bound():
    g = generate("dumbbell", n=40, k=1)
    res = lower_bound_mincut(g, make_strategy(g, "flow"), seeds=20)
    assert res.T == math.ceil(0.01 * 40**2 * 19**2) and res.k == 1
    ok = res.frequency >= 0.25
    detail = f"T={res.T}, d={res.d}, threshold {res.threshold:.2f}, frequency {res.frequency:.2f}, median gap {np.median(res.gaps):.1f}"
    assert report(6, ok, detail)


def test_criterion_7_maxflow_mincut_oracle():
    rng = np.random.Generator(np.random.PCG64(7))
    agree = 0
    for _ in range(200):
        n = int(rng.integers(2, 11))
        p = rng.uniform(0.2, 0.8)
        edges = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < p]
        s, t = (int(v) for v in rng.choice(n, size=2, replace=False))
        net = FlowNetwork(n)
        for u, v in edges:
            net.add_undirected(u, v, 1.0)
        arcs = [(u, v, 1) for u, v in edges] + [(v, u, 1) for u, v in edges]
        same = max_flow(net, s, t).value == pytest.approx(brute_st_cut(n, arcs, s, t))
        # global min cut through n - 1 max flows and through Stoer-Wagner
        if edges and same:
            try:
                g = Graph(n, np.array(edges))
            except ValueError:
                g = None
            if g is not None:
                brute = brute_min_cut(n, g.edges)
                flows = min(max_flow(FlowNetwork.from_graph(g), 0, v).value for v in range(1, n))
                same = round(flows) == brute == edge_connectivity(g)
        agree += bool(same)
    assert report(7, agree == 200, f"{agree}/200 instances agree")


def test_criterion_8_structural_suite():
    def leaves(lo, hi):
        return RawNode(tuple(range(lo, hi)), [RawNode((v,)) for v in range(lo, hi)])

    t = binarize(RawNode(tuple(range(10)), [leaves(0, 5), leaves(5, 8), leaves(8, 10)]))
    rule_a = (
        t.sets[t.left[0]].tolist() == [0, 1, 2, 3, 4]
        and t.sets[t.left[t.right[0]]].tolist() == [5, 6, 7]
        and t.sets[t.right[t.right[0]]].tolist() == [8, 9]
    )
    t = binarize(RawNode(tuple(range(10)), [leaves(2 * h, 2 * h + 2) for h in range(5)]))
    rule_b = t.sets[t.left[0]].tolist() == [0, 1, 2, 3] and t.sets[t.right[0]].tolist() == [4, 5, 6, 7, 8, 9]

    built = [build_tree(generate("cycle", n=n), "arc") for n in (8, 17, 64, 100, 256)]
    built += [build_tree(generate("torus2d", side=s)) for s in (4, 9, 16)]
    built += [build_tree(generate("hypercube", dim=d)) for d in (3, 6, 8)]
    built += [build_tree(generate("complete", n=n)) for n in (5, 32)]
    built += [build_tree(generate("random_regular", n=n, d=d, seed=n)) for n in (20, 64, 128, 256) for d in (3, 4)]
    built += [build_tree(generate("dumbbell", n=n, k=k)) for n, k in ((40, 1), (64, 4))]
    built += [build_tree(generate("torus2d", side=s), "bfs") for s in (5, 12)]
    reports = [verify_balance(t, strict=False) for t in built]
    balanced = all(not r.violations for r in reports)
    shallow = all(r.max_depth <= r.depth_bound for r in reports)
    worst = max(r.worst_ratio for r in reports)
    ok = rule_a and rule_b and balanced and shallow
    detail = f"rule (a) {rule_a}, rule (b) {rule_b}, {len(built)} trees, worst ratio {worst:.3f}, depth bound held {shallow}"
    assert report(8, ok, detail)


def test_criterion_9_stale_robustness():
    g = generate("cycle", n=256)
    fresh = make_strategy(g, "flow", partitioner="arc")
    stale = make_strategy(g, "stale_flow", partitioner="arc", staleness=1.0)
    assert stale.refresh_interval == math.floor(256 * math.log(256))
    T = int(256**2.5)
    a = final_gaps(g, fresh, T, range(8))
    b = final_gaps(g, stale, T, range(8))
    ok = b.mean() <= 3 * a.mean()
    detail = f"stale mean gap {b.mean():.2f} vs fresh {a.mean():.2f} (ratio {b.mean() / a.mean():.2f}), worst per-seed ratio {np.max(b / a):.2f}"
    assert report(9, ok, detail)
