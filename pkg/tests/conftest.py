import itertools

import numpy as np
import pytest

from flowalloc.graph import Graph


def brute_min_cut(n, edges):
    """Global minimum edge cut by enumerating every bipartition (vertex 0 on side A)."""
    edges = np.asarray(edges).reshape(-1, 2)
    best = None
    for bits in range(1 << (n - 1)):
        side = np.array([(bits >> (v - 1)) & 1 if v else 0 for v in range(n)])
        if side.sum() == 0:
            continue
        cut = int(np.sum(side[edges[:, 0]] != side[edges[:, 1]]))
        best = cut if best is None else min(best, cut)
    return best


def brute_st_cut(n, arcs, s, t):
    """Minimum s-t cut over all vertex subsets containing s and not t."""
    others = [v for v in range(n) if v not in (s, t)]
    best = float("inf")
    for r in range(len(others) + 1):
        for extra in itertools.combinations(others, r):
            side = {s, *extra}
            cut = sum(c for u, v, c in arcs if u in side and v not in side)
            best = min(best, cut)
    return best


def random_connected_graph(rng, n, extra):
    """Random spanning tree plus ``extra`` random non-loop edges (parallels allowed)."""
    edges = [(int(rng.integers(v)), v) for v in range(1, n)]
    while extra > 0:
        u, v = rng.integers(n, size=2)
        if u != v:
            edges.append((int(u), int(v)))
            extra -= 1
    return Graph(n, np.array(edges).reshape(-1, 2))


def petersen():
    outer = [(i, (i + 1) % 5) for i in range(5)]
    spokes = [(i, i + 5) for i in range(5)]
    inner = [(5 + i, 5 + (i + 2) % 5) for i in range(5)]
    return Graph(10, np.array(outer + spokes + inner))


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(12345))


ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> bool:
    """Record one acceptance line; printed in the terminal summary."""
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
