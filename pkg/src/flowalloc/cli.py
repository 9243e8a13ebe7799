"""Command-line interface: ``flowalloc <command> [options]``.

Exit codes: 0 success, 2 validation failure, 3 usage error.
"""

from __future__ import annotations

import argparse
import ast
import math
import operator
import os
import sys
from pathlib import Path

import numpy as np

from . import simulator
from .allocation import LoadState, Strategy, default_refresh_interval, sibling_drift_error
from .decomposition import PARTITIONERS, TreeBalanceError, build_tree, dump_tree, load_tree, verify_balance
from .flows import (
    VerificationError,
    dump_plans,
    load_plans,
    preprocess,
    verify_conservation,
    verify_orthogonality,
    verify_plans,
    verify_total_demand,
)
from .graph import FAMILIES, GraphError, dump_edge_list, edge_connectivity, generate, load_edge_list

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 2, 3
STRATEGIES = ("one_choice", "greedy", "flow", "stale_flow")


class UsageError(Exception):
    pass


class ValidationFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

_OPS = {
    ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
    ast.Div: operator.truediv, ast.Pow: operator.pow, ast.USub: operator.neg,
}
_FUNCS = {"log": math.log, "sqrt": math.sqrt, "min": min, "max": max, "ceil": math.ceil}


def ball_formula(text: str):
    """Compile an arithmetic expression in ``n`` (e.g. ``min(n**2.5, 3e7)``) to a function."""
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError:
        raise UsageError(f"bad --balls expression {text!r}") from None

    def ev(node, n):
        if isinstance(node, ast.Expression):
            return ev(node.body, n)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return node.value
        if isinstance(node, ast.Name) and node.id == "n":
            return n
        if isinstance(node, ast.BinOp) and type(node.op) in _OPS:
            return _OPS[type(node.op)](ev(node.left, n), ev(node.right, n))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _OPS:
            return _OPS[type(node.op)](ev(node.operand, n))
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS:
            return _FUNCS[node.func.id](*(ev(a, n) for a in node.args))
        raise UsageError(f"unsupported element in --balls expression {text!r}")

    ev(tree, 2)
    return lambda n: int(math.ceil(ev(tree, n)))


def parse_sizes(text: str) -> list[int]:
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if not parts:
        raise UsageError("empty size list")
    try:
        sizes = [int(p) for p in parts]
    except ValueError:
        raise UsageError(f"bad size list {text!r}") from None
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise UsageError("sizes must be strictly increasing")
    return sizes


def load_graph(args):
    if args.graph and args.family:
        raise UsageError("give either --graph or --family, not both")
    if args.graph:
        path = Path(args.graph)
        try:
            text = path.read_text()
        except OSError as exc:
            raise UsageError(f"cannot read {path}: {exc.strerror}") from None
        try:
            return load_edge_list(text)
        except GraphError as exc:
            raise ValidationFailure(f"{path}: {exc}") from None
    if not args.family:
        raise UsageError("need a graph: --graph FILE or --family NAME --n N")
    params = family_params(args)
    try:
        return generate(args.family, **params)
    except GraphError as exc:
        raise UsageError(str(exc)) from None


def family_params(args) -> dict:
    fam = args.family
    if args.n is None:
        raise UsageError(f"--family {fam} needs --n")
    try:
        params = simulator._family_params(fam, args.n)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if fam == "random_regular":
        params["d"] = args.degree or 4
        params["seed"] = args.seed
    if fam == "dumbbell" and args.bridges:
        params["k"] = args.bridges
    return params


def load_artifacts(args, g):
    """Tree and plans from ``--plans PREFIX`` (``PREFIX.tree``, ``PREFIX.plans``)."""
    prefix = Path(args.plans)
    try:
        tree = load_tree(Path(f"{prefix}.tree").read_text()).attach(g)
        plans = load_plans(Path(f"{prefix}.plans").read_text(), g)
    except OSError as exc:
        raise UsageError(f"cannot read plans {exc.filename}: run preprocess first") from None
    except ValueError as exc:
        raise ValidationFailure(f"{prefix}: {exc}") from None
    return tree, plans


def build_strategy(args, g) -> Strategy:
    kind = args.strategy
    if kind in ("flow", "stale_flow"):
        if not args.plans:
            raise UsageError(f"strategy {kind} needs --plans: run preprocess first")
        tree, plans = load_artifacts(args, g)
        interval = default_refresh_interval(g.n, args.staleness) if kind == "stale_flow" else None
        return Strategy(kind, plans, tree, beta=args.beta, refresh_interval=interval)
    return Strategy(kind, beta=args.beta)


def emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def note(msg: str):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    g = load_graph(args)
    emit(dump_edge_list(g), args.out)
    return EXIT_OK


def cmd_preprocess(args) -> int:
    g = load_graph(args)
    if not args.out:
        raise UsageError("preprocess needs --out PREFIX")
    partitioner = args.partitioner or ("arc" if g.family == "cycle" else "mincut_balanced")
    try:
        tree = build_tree(g, partitioner, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    k = edge_connectivity(g)
    plans, flows = preprocess(g, tree, jobs=args.jobs or 1, k=k)
    try:
        verify_plans(plans)
        verify_orthogonality(tree, flows, g=g)
        verify_total_demand(tree, flows, g=g)
    except VerificationError as exc:
        raise ValidationFailure(f"flows: {exc}") from None
    Path(f"{args.out}.tree").write_text(dump_tree(tree))
    Path(f"{args.out}.plans").write_text(dump_plans(g, plans))
    print(f"n {g.n}")
    print(f"m {g.m}")
    print(f"d {round(g.mean_degree)}")
    print(f"k {k}")
    print(f"depth {tree.max_depth}")
    print(f"D {plans.scale:.6g}")
    print(f"congestion_ratio {plans.measured_alpha:.6g}")
    print(f"max_support {int(plans.support.max())}")
    return EXIT_OK


def cmd_run(args) -> int:
    g = load_graph(args)
    strategy = build_strategy(args, g)
    T = ball_formula(args.balls)(g.n)
    stats = simulator.run(g, strategy, T, seed=args.seed)
    d = round(g.mean_degree)
    k = strategy.plans.connectivity if strategy.plans is not None and strategy.plans.connectivity else edge_connectivity(g)
    rows = [
        {"family": g.family, "n": g.n, "d": d, "k": k, "strategy": strategy.name, "seed": args.seed, **rec}
        for rec in stats.records()
    ]
    emit(simulator.write_csv(rows), args.out)
    note(f"final gap {stats.final_gap} after {T} balls")
    return EXIT_OK


def cmd_sweep(args) -> int:
    sizes = parse_sizes(args.sizes)
    if not args.family:
        raise UsageError("sweep needs --family")
    if args.family not in FAMILIES:
        raise UsageError(f"unknown family {args.family!r}")
    balls = ball_formula(args.balls)
    try:
        res = simulator.sweep(
            args.family, sizes, args.strategy, balls, args.runs, seed=args.seed,
            partitioner=args.partitioner, jobs=args.jobs, beta=args.beta, staleness=args.staleness,
        )
    except (ValueError, GraphError) as exc:
        raise UsageError(str(exc)) from None
    emit(simulator.write_csv(res.rows()), args.out)
    for n, mean, half in res.summary():
        note(f"n={n} gap={mean:.3f} +/- {half:.3f}")
    if len(sizes) > 1:
        slope, _ = simulator.fit_power_law(sizes, [m for _, m, _ in res.summary()])
        note(f"power-law exponent {slope:.3f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    g = load_graph(args)
    if args.plans:
        tree, plans = load_artifacts(args, g)
        flows = None
    else:
        partitioner = args.partitioner or ("arc" if g.family == "cycle" else "mincut_balanced")
        tree = build_tree(g, partitioner, args.seed)
        plans, flows = preprocess(g, tree, jobs=args.jobs or 1)
    failures = []

    def check(module, name, fn):
        try:
            fn()
            print(f"ok   {module}.{name}")
        except (VerificationError, TreeBalanceError) as exc:
            print(f"FAIL {module}.{name}: {exc}")
            failures.append(name)

    check("decomposition", "balance", lambda: verify_balance(tree))
    check("flows", "plan_validity", lambda: verify_plans(plans))
    if flows is not None:
        check("flows", "orthogonality", lambda: verify_orthogonality(tree, flows, g=g))
        check("flows", "total_demand", lambda: verify_total_demand(tree, flows, g=g))
        check("flows", "conservation", lambda: verify_conservation(g, tree, flows))

    def sibling_identity():
        rng = np.random.Generator(np.random.PCG64(args.seed))
        bad = []
        for s in range(args.states):
            state = LoadState.from_loads(g, tree, rng.integers(0, 50, size=g.n))
            err = sibling_drift_error(plans, state)
            if err.max() > 1e-9:
                bad.append((s, int(tree.internal[np.argmax(err)]), float(err.max())))
        if bad:
            raise VerificationError("sibling drift identity (state, node, error)", bad)

    check("allocation", "sibling_drift", sibling_identity)
    return EXIT_INVALID if failures else EXIT_OK


def cmd_twopoint(args) -> int:
    try:
        proc = simulator.TwoPointProcess(args.pi1, args.eps, args.mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    T = ball_formula(args.balls)(2)
    xs = [float(x) for x in args.thresholds.split(",") if x]
    tails = np.zeros(len(xs))
    for r in range(args.runs):
        res = simulator.two_point_run(proc, T, seed=args.seed + r, thresholds=xs)
        tails += res.tail
    tails /= args.runs
    lines = ["x,tail,envelope"]
    lines += [f"{x:g},{p:.6g},{10 * math.exp(-x / 8):.6g}" for x, p in zip(xs, tails)]
    emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output file (stdout if omitted)")
    common.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")

    source = argparse.ArgumentParser(add_help=False)
    source.add_argument("--graph", help="edge-list file")
    source.add_argument("--family", choices=FAMILIES)
    source.add_argument("--n", type=int, help="number of vertices")
    source.add_argument("--degree", type=int, help="degree for random_regular (default 4)")
    source.add_argument("--bridges", type=int, help="bridge count for dumbbell (default 1)")

    strat = argparse.ArgumentParser(add_help=False)
    strat.add_argument("--strategy", choices=STRATEGIES, default="greedy")
    strat.add_argument("--plans", help="prefix written by preprocess")
    strat.add_argument("--balls", default="n**2", help="ball count or expression in n")
    strat.add_argument("--beta", type=float, default=1.0)
    strat.add_argument("--staleness", type=float, default=1.0, help="refresh constant c for stale_flow")
    strat.add_argument("--partitioner", choices=PARTITIONERS)

    p = _Parser(prog="flowalloc", description="Flow-guided balls-into-bins on graphs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("generate", parents=[common, source], help="write an edge list")

    pre = sub.add_parser("preprocess", parents=[common, source], help="build tree and plans")
    pre.add_argument("--partitioner", choices=PARTITIONERS)

    sub.add_parser("run", parents=[common, source, strat], help="one run, CSV of checkpoints")

    sw = sub.add_parser("sweep", parents=[common, strat], help="many sizes and seeds")
    sw.add_argument("--family", choices=FAMILIES)
    sw.add_argument("--sizes", required=True, help="comma-separated increasing sizes")
    sw.add_argument("--runs", type=int, default=8)

    ver = sub.add_parser("verify", parents=[common, source], help="check every identity")
    ver.add_argument("--plans", help="prefix written by preprocess")
    ver.add_argument("--partitioner", choices=PARTITIONERS)
    ver.add_argument("--states", type=int, default=100, help="random load states for the drift identity")

    tp = sub.add_parser("twopoint", parents=[common], help="two-point concentration tails")
    tp.add_argument("--pi1", type=float, default=0.5)
    tp.add_argument("--eps", type=float, default=0.1)
    tp.add_argument("--mode", choices=simulator.EPS_MODES, default="floor")
    tp.add_argument("--balls", default="1000000")
    tp.add_argument("--runs", type=int, default=32)
    tp.add_argument("--thresholds", default="8,16,24,32,40")
    return p


COMMANDS = {
    "generate": cmd_generate,
    "preprocess": cmd_preprocess,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "verify": cmd_verify,
    "twopoint": cmd_twopoint,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", None) is None and args.command == "sweep":
        args.jobs = os.cpu_count() or 1
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"flowalloc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationFailure as exc:
        print(f"flowalloc {args.command}: validation failed: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
