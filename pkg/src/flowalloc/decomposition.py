"""Binary hierarchical decomposition trees over the vertices of a graph.

The raw tree is a laminar family built by recursive partitioning into
connected parts. ``binarize`` turns a rose tree into a binary one using the
two grouping rules (one heavy child on the left, or a balanced packing of
light children).
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field

import numpy as np

from .graph import Graph, GraphError

__all__ = [
    "RawNode",
    "DecompTree",
    "BalanceReport",
    "TreeBalanceError",
    "PARTITIONERS",
    "build_raw_tree",
    "binarize",
    "build_tree",
    "verify_balance",
    "cut_capacity",
    "dump_tree",
    "load_tree",
]

PARTITIONERS = ("arc", "mincut_balanced", "bfs")

BALANCE_LO = 0.25
BALANCE_HI = 0.75
EXHAUSTIVE_LIMIT = 16


@dataclass
class RawNode:
    vertices: tuple[int, ...]
    children: list[RawNode] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.vertices)

    def walk(self):
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))


# ---------------------------------------------------------------------------
# partitioners
# ---------------------------------------------------------------------------


def _induced_adj(g: Graph, verts) -> dict[int, list[tuple[int, int]]]:
    inside = set(verts)
    return {u: [(v, e) for v, e in g.adjacency[u] if v in inside] for u in verts}


def _components(adj: dict[int, list[tuple[int, int]]], part) -> list[list[int]]:
    part = set(part)
    seen: set[int] = set()
    comps = []
    for s in sorted(part):
        if s in seen:
            continue
        comp = [s]
        seen.add(s)
        stack = [s]
        while stack:
            u = stack.pop()
            for v, _ in adj[u]:
                if v in part and v not in seen:
                    seen.add(v)
                    comp.append(v)
                    stack.append(v)
        comps.append(sorted(comp))
    return comps


def _is_balanced(a: int, total: int) -> bool:
    return BALANCE_LO * total <= a <= BALANCE_HI * total


def _arc_split(g: Graph, verts: tuple[int, ...], rng) -> list[list[int]]:
    if not (g.degrees == 2).all():
        raise GraphError("arc partitioner needs a cycle")
    adj = _induced_adj(g, verts)
    if len(verts) == g.n:
        start = min(verts)
        order = [start]
        prev, cur = None, start
        # walk towards the smaller-id neighbour first
        nxt = min(v for v, _ in adj[start])
        while nxt != start:
            order.append(nxt)
            prev, cur = cur, nxt
            cand = [v for v, _ in adj[cur] if v != prev]
            nxt = cand[0] if cand else start
    else:
        ends = sorted(u for u in verts if len(adj[u]) < 2)
        start = ends[0]
        order = [start]
        prev, cur = None, start
        while True:
            cand = [v for v, _ in adj[cur] if v != prev]
            if not cand:
                break
            prev, cur = cur, cand[0]
            order.append(cur)
    h = (len(order) + 1) // 2
    return [sorted(order[:h]), sorted(order[h:])]


def _exhaustive_split(g: Graph, verts: tuple[int, ...], rng) -> list[list[int]] | None:
    """Best balanced connected bipartition by enumeration (small sets).

    Splits are ranked by crossing edges per separated vertex pair, then by
    balance, so equal cuts prefer the more even split.
    """
    s = len(verts)
    pos = {v: i for i, v in enumerate(verts)}
    adj = _induced_adj(g, verts)
    pairs = np.array(
        [(pos[u], pos[v]) for u in verts for v, _ in adj[u] if u < v], dtype=np.int64
    ).reshape(-1, 2)
    # vertex verts[0] always sits on side A
    masks = np.arange(1 << (s - 1), dtype=np.int64) * 2 + 1
    sizes = np.zeros(len(masks), dtype=np.int64)
    for b in range(s):
        sizes += (masks >> b) & 1
    cuts = np.zeros(len(masks), dtype=np.int64)
    for a, b in pairs:
        cuts += ((masks >> a) ^ (masks >> b)) & 1
    ok = (4 * sizes >= s) & (4 * sizes <= 3 * s) & (sizes < s)
    cand = np.flatnonzero(ok)
    ratio = cuts[cand] / (sizes[cand] * (s - sizes[cand]))
    order = np.lexsort((masks[cand], np.abs(2 * sizes[cand] - s), ratio))
    for idx in cand[order]:
        mask = int(masks[idx])
        a = [verts[b] for b in range(s) if mask >> b & 1]
        b = [verts[b] for b in range(s) if not mask >> b & 1]
        if len(_components(adj, a)) == 1 and len(_components(adj, b)) == 1:
            return [sorted(a), sorted(b)]
    return None


def _dfs_tree_cuts(adj, verts, root, rng):
    """Random DFS tree; returns (order, parent, subtree size, cut per subtree)."""
    nbrs = {u: list(adj[u]) for u in verts}
    for u in verts:
        rng.shuffle(nbrs[u])
    parent = {root: -1}
    parent_edge = {root: -1}
    depth = {root: 0}
    order = [root]
    it = {u: 0 for u in verts}
    stack = [root]
    while stack:
        u = stack[-1]
        lst = nbrs[u]
        while it[u] < len(lst) and lst[it[u]][0] in parent:
            it[u] += 1
        if it[u] == len(lst):
            stack.pop()
            continue
        v, e = lst[it[u]]
        it[u] += 1
        parent[v] = u
        parent_edge[v] = e
        depth[v] = depth[u] + 1
        order.append(v)
        stack.append(v)
    # every non-tree edge of a DFS tree joins a vertex to one of its ancestors
    score = {u: 0 for u in verts}
    for u in verts:
        for v, e in adj[u]:
            if e == parent_edge[u] or e == parent_edge.get(v, -2):
                continue
            if depth[v] < depth[u]:
                score[u] += 1
                score[v] -= 1
    size = {u: 1 for u in verts}
    cut = {u: 1 + score[u] for u in verts}
    for u in reversed(order[1:]):
        p = parent[u]
        size[p] += size[u]
        cut[p] += cut[u] - 1
    # cut[u] now counts edges leaving the subtree of u (tree edge included)
    return order, parent, size, cut


def _subtree(order, parent, top) -> list[int]:
    inside = {top}
    out = [top]
    for u in order:
        if u != top and parent[u] in inside:
            inside.add(u)
            out.append(u)
    return out


def _mincut_split(g: Graph, verts: tuple[int, ...], rng, trials: int = 12) -> list[list[int]] | None:
    if len(verts) <= EXHAUSTIVE_LIMIT:
        return _exhaustive_split(g, verts, rng)
    adj = _induced_adj(g, verts)
    s = len(verts)
    best = None
    for _ in range(trials):
        root = verts[int(rng.integers(len(verts)))]
        order, parent, size, cut = _dfs_tree_cuts(adj, verts, root, rng)
        for u in order[1:]:
            if not _is_balanced(size[u], s):
                continue
            key = (cut[u] / (size[u] * (s - size[u])), abs(2 * size[u] - s))
            if best is None or key < best[0]:
                best = (key, order, parent, u)
    if best is None:
        return None
    _, order, parent, top = best
    a = sorted(_subtree(order, parent, top))
    inside = set(a)
    b = [v for v in verts if v not in inside]
    return sorted([a, b])


def _bfs_split(g: Graph, verts: tuple[int, ...], rng) -> list[list[int]]:
    adj = _induced_adj(g, verts)
    start = min(verts)
    order = [start]
    seen = {start}
    i = 0
    while i < len(order):
        u = order[i]
        i += 1
        for v, _ in sorted(adj[u]):
            if v not in seen:
                seen.add(v)
                order.append(v)
    h = (len(order) + 1) // 2
    a, rest = order[:h], order[h:]
    comps = _components(adj, rest)
    # every suffix component touches the prefix; fold the small ones in while
    # the prefix stays within the balance bound, keep the others as siblings
    comps.sort(key=lambda c: (len(c), c[0]))
    while len(comps) > 1 and len(a) + len(comps[0]) <= BALANCE_HI * len(verts):
        a = a + comps.pop(0)
    return [sorted(a)] + [sorted(c) for c in comps]


_SPLITTERS = {"arc": _arc_split, "mincut_balanced": _mincut_split, "bfs": _bfs_split}


def build_raw_tree(g: Graph, partitioner: str = "mincut_balanced", seed: int = 0) -> RawNode:
    """Recursively split ``V`` into connected parts down to singletons."""
    if partitioner not in _SPLITTERS:
        raise ValueError(f"unknown partitioner {partitioner!r}; choose from {PARTITIONERS}")
    split = _SPLITTERS[partitioner]
    rng = np.random.Generator(np.random.PCG64(seed))
    root = RawNode(tuple(range(g.n)))
    stack = [root]
    while stack:
        node = stack.pop()
        if node.size == 1:
            continue
        parts = split(g, node.vertices, rng)
        if parts is None:
            parts = _bfs_split(g, node.vertices, rng)
        node.children = [RawNode(tuple(p)) for p in parts]
        stack.extend(node.children)
    return root


# ---------------------------------------------------------------------------
# binarization
# ---------------------------------------------------------------------------


def _binarize_node(node: RawNode) -> RawNode:
    kids = [_binarize_node(c) for c in node.children]
    return _group(node.vertices, kids)


def _merge(children: list[RawNode]) -> RawNode:
    if len(children) == 1:
        return children[0]
    verts = tuple(sorted(v for c in children for v in c.vertices))
    return _group(verts, children)


def _group(verts: tuple[int, ...], kids: list[RawNode]) -> RawNode:
    if len(kids) <= 2:
        return RawNode(verts, kids)
    total = len(verts)
    # deterministic order: heavier first, then smallest vertex id
    kids = sorted(kids, key=lambda c: (-c.size, c.vertices[0]))
    heavy = kids[0]
    if 4 * heavy.size > total:
        return RawNode(verts, [heavy, _merge(kids[1:])])
    group_a: list[RawNode] = []
    acc = 0
    rest = list(kids)
    while 4 * acc < total:
        child = rest.pop(0)
        group_a.append(child)
        acc += child.size
    return RawNode(verts, [_merge(group_a), _merge(rest)])


def binarize(raw: RawNode) -> DecompTree:
    """Binary decomposition tree with the same leaves as ``raw``."""
    return DecompTree.from_raw(_binarize_node(raw))


# ---------------------------------------------------------------------------
# decomposition tree
# ---------------------------------------------------------------------------


class DecompTree:
    """Binary laminar family over ``V``, nodes numbered in preorder (root 0).

    ``left``/``right`` are ``-1`` at leaves. ``cut`` holds the number of
    graph edges leaving each node set once a graph is attached.
    """

    def __init__(self, sets: list[np.ndarray], parent, left, right):
        self.sets = sets
        self.parent = np.asarray(parent, dtype=np.int64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.size = np.array([len(s) for s in sets], dtype=np.int64)
        self.n = int(self.size[0])
        self.depth = np.zeros(len(sets), dtype=np.int64)
        for i in range(1, len(sets)):
            self.depth[i] = self.depth[self.parent[i]] + 1
        self.internal = np.flatnonzero(self.left >= 0)
        self.leaf_of = np.full(self.n, -1, dtype=np.int64)
        for i in np.flatnonzero(self.left < 0):
            if len(sets[i]) != 1:
                raise ValueError(f"leaf {i} is not a singleton")
            self.leaf_of[sets[i][0]] = i
        if (self.leaf_of < 0).any():
            raise ValueError("some vertex has no leaf")
        self.cut: np.ndarray | None = None
        self._check_partition()

    @classmethod
    def from_raw(cls, raw: RawNode) -> DecompTree:
        sets, parent, left, right = [], [], [], []

        def visit(node: RawNode, par: int) -> int:
            idx = len(sets)
            sets.append(np.array(sorted(node.vertices), dtype=np.int64))
            parent.append(par)
            left.append(-1)
            right.append(-1)
            if node.children:
                if len(node.children) != 2:
                    raise ValueError("raw node is not binary; call binarize")
                left[idx] = visit(node.children[0], idx)
                right[idx] = visit(node.children[1], idx)
            return idx

        old = sys.getrecursionlimit()
        sys.setrecursionlimit(max(old, 4 * len(raw.vertices) + 100))
        try:
            visit(raw, -1)
        finally:
            sys.setrecursionlimit(old)
        return cls(sets, parent, left, right)

    def _check_partition(self):
        for i in self.internal:
            a, b = self.sets[self.left[i]], self.sets[self.right[i]]
            if len(a) + len(b) != len(self.sets[i]) or not np.array_equal(
                np.union1d(a, b), self.sets[i]
            ):
                raise ValueError(f"children of node {i} do not partition it")

    @property
    def num_nodes(self) -> int:
        return len(self.sets)

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    def attach(self, g: Graph) -> DecompTree:
        """Compute cut capacities against ``g``."""
        if g.n != self.n:
            raise ValueError("tree and graph have different vertex counts")
        cut = np.zeros(self.num_nodes, dtype=np.int64)
        for u, v in g.edges.tolist():
            a, b = self.leaf_of[u], self.leaf_of[v]
            # climb both leaves to their lowest common ancestor
            while a != b:
                if self.depth[a] >= self.depth[b]:
                    cut[a] += 1
                    a = self.parent[a]
                else:
                    cut[b] += 1
                    b = self.parent[b]
        self.cut = cut
        return self

    def membership(self) -> np.ndarray:
        """Boolean matrix ``[node, vertex]``."""
        mem = np.zeros((self.num_nodes, self.n), dtype=bool)
        for i, s in enumerate(self.sets):
            mem[i, s] = True
        return mem

    def ancestors(self, node: int) -> list[int]:
        out = []
        node = self.parent[node]
        while node >= 0:
            out.append(int(node))
            node = self.parent[node]
        return out

    def lca(self, u: int, v: int) -> int:
        a, b = self.leaf_of[u], self.leaf_of[v]
        while a != b:
            if self.depth[a] >= self.depth[b]:
                a = self.parent[a]
            else:
                b = self.parent[b]
        return int(a)

    def is_connected_in(self, g: Graph) -> list[int]:
        """Node ids whose induced subgraph is disconnected."""
        bad = []
        for i, s in enumerate(self.sets):
            if len(s) > 1 and len(_components(_induced_adj(g, s.tolist()), s.tolist())) != 1:
                bad.append(i)
        return bad


def build_tree(g: Graph, partitioner: str = "mincut_balanced", seed: int = 0) -> DecompTree:
    return binarize(build_raw_tree(g, partitioner, seed)).attach(g)


def cut_capacity(t: DecompTree, i: int, g: Graph | None = None) -> int:
    if t.cut is None:
        if g is None:
            raise ValueError("tree has no graph attached")
        t.attach(g)
    return int(t.cut[i])


# ---------------------------------------------------------------------------
# balance check
# ---------------------------------------------------------------------------


class TreeBalanceError(AssertionError):
    def __init__(self, violations):
        self.violations = violations
        a, b, q = violations[0]
        super().__init__(
            f"{len(violations)} ancestor pair(s) violate the 3/4 ratio bound, "
            f"first: ancestor {a}, descendant {b}, distance {q}"
        )


@dataclass
class BalanceReport:
    max_depth: int
    depth_bound: float
    worst_ratio: float
    violations: list[tuple[int, int, int]]

    @property
    def ok(self) -> bool:
        return not self.violations and self.max_depth <= self.depth_bound


def verify_balance(t: DecompTree, strict: bool = True) -> BalanceReport:
    """Check ``|S_b| <= (3/4)**(q // 2) |S_a|`` for every ancestor pair at distance q.

    ``worst_ratio`` is the largest ``|S_b| / ((3/4)**(q//2) |S_a|)`` seen.
    """
    violations = []
    worst = 0.0
    for b in range(t.num_nodes):
        a = t.parent[b]
        q = 1
        while a >= 0:
            ratio = t.size[b] / ((0.75 ** (q // 2)) * t.size[a])
            worst = max(worst, ratio)
            if ratio > 1 + 1e-12:
                violations.append((int(a), b, q))
            a = t.parent[a]
            q += 1
    bound = 2 * math.log(t.n, 4 / 3) + 2 if t.n > 1 else 0
    report = BalanceReport(t.max_depth, bound, worst, violations)
    if strict and violations:
        raise TreeBalanceError(violations)
    return report


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------


def dump_tree(t: DecompTree) -> str:
    """One node per line: ``id parent [left right] size cut : v1 v2 ...``."""
    cut = t.cut if t.cut is not None else np.full(t.num_nodes, -1)
    lines = [f"# tree n={t.n} nodes={t.num_nodes}"]
    for i in range(t.num_nodes):
        head = [i, int(t.parent[i])]
        if t.left[i] >= 0:
            head += [int(t.left[i]), int(t.right[i])]
        head += [int(t.size[i]), int(cut[i])]
        verts = " ".join(map(str, t.sets[i].tolist()))
        lines.append(" ".join(map(str, head)) + " : " + verts)
    return "\n".join(lines) + "\n"


def load_tree(text: str) -> DecompTree:
    rows = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        head, _, tail = line.partition(":")
        nums = [int(x) for x in head.split()]
        verts = np.array([int(x) for x in tail.split()], dtype=np.int64)
        if len(nums) == 6:
            i, par, l, r, size, cut = nums
        elif len(nums) == 4:
            i, par, size, cut = nums
            l = r = -1
        else:
            raise ValueError(f"line {lineno}: malformed tree node")
        if size != len(verts):
            raise ValueError(f"line {lineno}: size {size} does not match vertex list")
        rows[i] = (par, l, r, cut, verts)
    ids = sorted(rows)
    if ids != list(range(len(ids))):
        raise ValueError("tree node ids must be 0..N-1")
    t = DecompTree(
        [rows[i][4] for i in ids],
        [rows[i][0] for i in ids],
        [rows[i][1] for i in ids],
        [rows[i][2] for i in ids],
    )
    cut = np.array([rows[i][3] for i in ids], dtype=np.int64)
    t.cut = None if (cut < 0).any() else cut
    return t
