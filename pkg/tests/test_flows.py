import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from conftest import brute_st_cut, petersen, random_connected_graph
from flowalloc.decomposition import build_tree
from flowalloc.flows import (
    FlowNetwork,
    VerificationError,
    assemble_edge_plans,
    compute_node_flows,
    dump_plans,
    load_plans,
    max_flow,
    min_congestion_node_flow,
    preprocess,
    routing_set,
    verify_conservation,
    verify_orthogonality,
    verify_plans,
    verify_total_demand,
)
from flowalloc.graph import Graph, generate

# --- max flow -------------------------------------------------------------


def test_max_flow_textbook():
    net = FlowNetwork(4)
    net.add_arc(0, 1, 3)
    net.add_arc(0, 2, 2)
    net.add_arc(1, 2, 1)
    net.add_arc(1, 3, 2)
    net.add_arc(2, 3, 3)
    res = max_flow(net, 0, 3)
    assert res.value == pytest.approx(5)
    assert res.min_cut_side(0) == {0}


def test_max_flow_rejects_same_terminal():
    with pytest.raises(ValueError):
        max_flow(FlowNetwork(2), 1, 1)


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 7), st.integers(0, 2**32 - 1))
def test_max_flow_equals_brute_force_cut(n, seed):
    rng = np.random.default_rng(seed)
    net = FlowNetwork(n)
    arcs = []
    for _ in range(rng.integers(0, 3 * n)):
        u, v = rng.integers(n, size=2)
        if u != v:
            c = int(rng.integers(1, 5))
            net.add_arc(int(u), int(v), c)
            arcs.append((int(u), int(v), c))
    res = max_flow(net, 0, n - 1)
    assert res.value == pytest.approx(brute_st_cut(n, arcs, 0, n - 1))


def test_max_flow_conserves_at_inner_vertices():
    g = petersen()
    net = FlowNetwork.from_graph(g)
    res = max_flow(net, 0, 7)
    assert res.value == pytest.approx(3)
    net_in = np.zeros(g.n)
    for a in range(0, len(net.head), 2):
        f = res.flow(a)
        net_in[net.head[a]] += f
        net_in[net.head[a ^ 1]] -= f
    assert np.allclose(np.delete(net_in, [0, 7]), 0)


# --- node flows -----------------------------------------------------------


def lp_congestion(g, left, right, verts):
    """Minimum uniform capacity for a unit left-to-right drift inside G[verts] (LP oracle)."""
    inside = np.zeros(g.n, dtype=bool)
    inside[verts] = True
    eids = np.flatnonzero(inside[g.edges[:, 0]] & inside[g.edges[:, 1]])
    x, y = g.canonical
    pos = {int(v): k for k, v in enumerate(verts)}
    m = len(eids)
    A = np.zeros((len(verts), m + 1))
    for j, e in enumerate(eids):
        A[pos[int(y[e])], j] += 1
        A[pos[int(x[e])], j] -= 1
    b = np.zeros(len(verts))
    for u in left:
        b[pos[int(u)]] = -1 / len(left)
    for v in right:
        b[pos[int(v)]] = 1 / len(right)
    ub = np.zeros((2 * m, m + 1))
    for j in range(m):
        ub[2 * j, j], ub[2 * j, m] = 1, -1
        ub[2 * j + 1, j], ub[2 * j + 1, m] = -1, -1
    c = np.zeros(m + 1)
    c[m] = 1
    res = linprog(c, A_ub=ub, b_ub=np.zeros(2 * m), A_eq=A, b_eq=b, bounds=[(None, None)] * m + [(0, None)])
    assert res.status == 0
    return res.fun


def test_c4_root_flow_splits_evenly():
    g = generate("cycle", n=4)
    t = build_tree(g, "arc")
    f = min_congestion_node_flow(g, t, 0)
    assert f.congestion == pytest.approx(0.5, rel=1e-6)
    crossing = [e for e in f.edge_ids if (g.edges[e] < 2).sum() == 1]
    assert len(crossing) == 2


def test_k4_root_congestion():
    g = generate("complete", n=4)
    t = build_tree(g)
    f = min_congestion_node_flow(g, t, 0)
    assert f.congestion == pytest.approx(0.25, rel=1e-6)


def test_path_flow_is_prefix_sum():
    # G[S] is a path: the flow is forced, edge k carries the drift of vertices 0..k
    g = Graph(6, np.array([[k, k + 1] for k in range(5)] + [[5, 0]]))
    t = build_tree(g, "arc")
    i = int(t.internal[1])
    f = min_congestion_node_flow(g, t, i)
    d = f.drift(g.n)
    assert np.allclose(f.inflow(g), d)
    verts = sorted(t.sets[i].tolist())
    x, y = g.canonical
    for e, val in zip(f.edge_ids, f.values):
        a, b = int(x[e]), int(y[e])
        lo = verts.index(a)
        expected = -d[verts[: lo + 1]].sum() if verts[lo + 1] == b else None
        if expected is not None:
            assert val == pytest.approx(expected)


@pytest.mark.parametrize(
    "g",
    [generate("complete", n=6), generate("torus2d", side=3), petersen(), generate("dumbbell", n=8, k=2)],
    ids=["K6", "torus3", "petersen", "dumbbell"],
)
def test_node_flow_congestion_matches_lp(g):
    t = build_tree(g)
    for i in t.internal:
        f = min_congestion_node_flow(g, t, int(i))
        lp = lp_congestion(g, t.sets[t.left[i]], t.sets[t.right[i]], t.sets[i])
        assert f.congestion == pytest.approx(lp, rel=2e-7, abs=1e-12)
        assert np.allclose(f.inflow(g), f.drift(g.n), atol=1e-9)


def test_parallel_jobs_match_serial():
    g = generate("torus2d", side=5)
    t = build_tree(g)
    a = compute_node_flows(g, t, jobs=1)
    b = compute_node_flows(g, t, jobs=2)
    assert [f.node for f in a] == [f.node for f in b]
    for fa, fb in zip(a, b):
        assert np.array_equal(fa.edge_ids, fb.edge_ids) and np.allclose(fa.values, fb.values)


# --- plans and identities -------------------------------------------------


@pytest.mark.parametrize(
    "g,partitioner",
    [
        (generate("cycle", n=32), "arc"),
        (generate("torus2d", side=5), "mincut_balanced"),
        (generate("complete", n=9), "mincut_balanced"),
        (generate("random_regular", n=40, d=4, seed=3), "mincut_balanced"),
        (generate("dumbbell", n=16, k=1), "mincut_balanced"),
    ],
    ids=["cycle", "torus", "complete", "rr4", "dumbbell"],
)
def test_identities(g, partitioner):
    t = build_tree(g, partitioner)
    plans, flows = preprocess(g, t)
    verify_plans(plans)
    verify_orthogonality(t, flows, g=g)
    verify_total_demand(t, flows, g=g)
    verify_conservation(g, t, flows)
    assert plans.total.max() == pytest.approx(1.0)


def test_scale_is_inverse_peak_load():
    g = generate("cycle", n=16)
    t = build_tree(g, "arc")
    unit = compute_node_flows(g, t)
    plans = assemble_edge_plans(g, t, unit)
    load = np.zeros(g.m)
    for f in unit:
        np.add.at(load, f.edge_ids, np.abs(f.values))
    assert plans.scale == pytest.approx(1 / load.max())
    assert plans.congestion == pytest.approx(load.max())


def test_broken_flow_detected():
    g = generate("cycle", n=8)
    t = build_tree(g, "arc")
    _, flows = preprocess(g, t)
    flows[0].values[0] += 0.1
    with pytest.raises(VerificationError, match="conservation"):
        verify_conservation(g, t, flows)
    verify_orthogonality(t, flows)
    with pytest.raises(VerificationError, match="orthogonality"):
        verify_orthogonality(t, flows, g=g)


def test_plan_text_round_trip():
    g = generate("torus2d", side=4)
    t = build_tree(g)
    plans, _ = preprocess(g, t, k=4)
    text = dump_plans(g, plans)
    back = load_plans(text, g)
    assert dump_plans(g, back) == text
    assert np.array_equal(back.node, plans.node) and np.array_equal(back.sign, plans.sign)
    assert np.allclose(back.prob, plans.prob, rtol=1e-11)
    assert back.connectivity == 4


def test_plan_text_rejects_wrong_graph():
    g = generate("cycle", n=8)
    plans, _ = preprocess(g, build_tree(g, "arc"))
    with pytest.raises(ValueError, match="does not match"):
        load_plans(dump_plans(g, plans), generate("complete", n=8))


@settings(max_examples=15, deadline=None)
@given(st.integers(4, 12), st.integers(0, 10), st.integers(0, 2**32 - 1))
def test_random_graph_identities(n, extra, seed):
    g = random_connected_graph(np.random.default_rng(seed), n, extra)
    t = build_tree(g, seed=seed)
    plans, flows = preprocess(g, t)
    verify_plans(plans)
    verify_orthogonality(t, flows, g=g)
    verify_total_demand(t, flows, g=g)


def test_disconnected_node_set_routes_through_ancestor():
    # a star: no balanced split of the leaves is connected without the centre
    g = Graph(9, np.array([[0, v] for v in range(1, 9)]))
    t = build_tree(g, "bfs")
    assert any(routing_set(g, t, int(i)) != i for i in t.internal)
    plans, flows = preprocess(g, t)
    verify_conservation(g, t, flows)
    verify_orthogonality(t, flows, g=g)
    verify_plans(plans)
