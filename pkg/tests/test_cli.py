import csv
import io

import pytest

from flowalloc.cli import ball_formula, main


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_generate_writes_edge_list(tmp_path, capsys):
    path = tmp_path / "c.txt"
    code, _, _ = run_cli(capsys, "generate", "--family", "cycle", "--n", "5", "--out", str(path))
    assert code == 0
    assert "n 5" in path.read_text().splitlines()


def test_preprocess_report_and_determinism(tmp_path, capsys):
    prefix = str(tmp_path / "c64")
    code, out, _ = run_cli(capsys, "preprocess", "--family", "cycle", "--n", "64", "--out", prefix)
    assert code == 0
    report = dict(line.split() for line in out.splitlines())
    assert report["depth"] == "6" and report["k"] == "2"
    first = (tmp_path / "c64.plans").read_bytes(), (tmp_path / "c64.tree").read_bytes()
    run_cli(capsys, "preprocess", "--family", "cycle", "--n", "64", "--out", prefix)
    assert first == ((tmp_path / "c64.plans").read_bytes(), (tmp_path / "c64.tree").read_bytes())


def test_disconnected_edge_list_fails_before_output(tmp_path, capsys):
    src = tmp_path / "bad.txt"
    src.write_text("n 4\n0 1\n2 3\n")
    prefix = tmp_path / "bad"
    code, out, err = run_cli(capsys, "preprocess", "--graph", str(src), "--out", str(prefix))
    assert code == 2
    assert "disconnected" in err and "line 3" in err
    assert out == "" and not (tmp_path / "bad.plans").exists()


def test_flow_run_needs_plans(capsys):
    code, _, err = run_cli(capsys, "run", "--family", "cycle", "--n", "16", "--strategy", "flow")
    assert code == 3 and "run preprocess first" in err


def test_flow_run_with_missing_plan_file(tmp_path, capsys):
    code, _, err = run_cli(
        capsys, "run", "--family", "cycle", "--n", "16", "--strategy", "flow", "--plans", str(tmp_path / "nope")
    )
    assert code == 3 and "run preprocess first" in err


def test_flow_run_from_plans(tmp_path, capsys):
    prefix = str(tmp_path / "c32")
    run_cli(capsys, "preprocess", "--family", "cycle", "--n", "32", "--out", prefix)
    code, out, _ = run_cli(capsys, "run", "--family", "cycle", "--n", "32", "--strategy", "stale_flow",
                           "--plans", prefix, "--balls", "n**2", "--seed", "3")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert rows[-1]["t"] == "1024" and rows[-1]["strategy"] == "stale_flow"


def test_greedy_run_on_cycle_100(capsys):
    code, out, _ = run_cli(capsys, "run", "--family", "cycle", "--n", "100", "--seed", "7", "--balls", "1e7")
    assert code == 0
    final = list(csv.DictReader(io.StringIO(out)))[-1]
    assert 10 <= int(final["gap"]) <= 26


def test_verify_cycle_128(capsys):
    code, out, _ = run_cli(capsys, "verify", "--family", "cycle", "--n", "128", "--states", "20")
    assert code == 0
    assert "FAIL" not in out and "allocation.sibling_drift" in out


def test_verify_flags_tampered_plans(tmp_path, capsys):
    prefix = tmp_path / "c16"
    run_cli(capsys, "preprocess", "--family", "cycle", "--n", "16", "--out", str(prefix))
    plans = prefix.with_suffix(".plans")
    lines = plans.read_text().splitlines()
    idx = next(i for i, line in enumerate(lines) if line.startswith("0 1 :"))
    lines[idx] = lines[idx].replace("(0 ", "(0 9", 1)
    plans.write_text("\n".join(lines) + "\n")
    code, out, _ = run_cli(capsys, "verify", "--family", "cycle", "--n", "16", "--plans", str(prefix))
    assert code == 2
    assert "FAIL flows.plan_validity" in out


def test_sweep_empty_sizes_is_usage_error(capsys):
    code, _, err = run_cli(capsys, "sweep", "--family", "cycle", "--sizes", "")
    assert code == 3 and "empty size list" in err


def test_sweep_csv(tmp_path, capsys):
    out = tmp_path / "s.csv"
    code, _, err = run_cli(capsys, "sweep", "--family", "cycle", "--sizes", "10,20", "--runs", "2",
                           "--balls", "n**2", "--jobs", "1", "--out", str(out))
    assert code == 0 and "power-law exponent" in err
    rows = list(csv.DictReader(out.open()))
    assert {r["n"] for r in rows} == {"10", "20"} and {r["seed"] for r in rows} == {"0", "1"}


def test_twopoint_csv(capsys):
    code, out, _ = run_cli(capsys, "twopoint", "--balls", "20000", "--runs", "2")
    assert code == 0
    assert out.splitlines()[0] == "x,tail,envelope"


def test_usage_errors(capsys):
    assert run_cli(capsys, "run", "--family", "cycle")[0] == 3
    assert run_cli(capsys, "twopoint", "--eps", "0.4")[0] == 3
    with pytest.raises(SystemExit) as info:
        main(["nonsense"])
    assert info.value.code == 3


def test_ball_formula():
    f = ball_formula("min(n**2.5, 3e7)")
    assert f(64) == 32768 and f(1024) == 30_000_000
    with pytest.raises(Exception):
        ball_formula("__import__('os')")
