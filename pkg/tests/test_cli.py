from __future__ import annotations

import csv
import json

import pytest

from dissem.cli import (
    AGG_COLUMNS,
    EXIT_INVALID,
    EXIT_OK,
    EXIT_PARAM,
    EXIT_RUNTIME,
    generate_instance,
    main,
    scenario_points,
)
from dissem.dynamics import AdversarySchedule, Retune
from dissem.engine import SimulationTrace
from dissem.metric import Instance


def _gen(tmp_path, capsys, *args):
    out = tmp_path / f"{args[0]}.json"
    code = main(["--out", str(out), "gen", *args])
    summary = json.loads(capsys.readouterr().out)
    return code, out, summary


def test_gen_grid_diameter(tmp_path, capsys):
    code, path, summary = _gen(tmp_path, capsys, "grid", "5x5")
    assert code == EXIT_OK and path.exists()
    assert summary["diameter"] == 8
    assert summary["metricity_ok"] and summary["independence_ok"]


def test_gen_trivial_and_lowerbound(tmp_path, capsys):
    code, _, summary = _gen(tmp_path, capsys, "euclidean", "n=1")
    assert code == EXIT_OK and summary["nodes"] == 1
    code, path, summary = _gen(tmp_path, capsys, "lowerbound", "n=64", "ε=0.2", "R=1")
    assert code == EXIT_OK and summary["nodes"] == 64
    inst = Instance.load(path)
    assert inst.radii.epsilon == 0.2


def test_gen_bad_params_exit_2(tmp_path, capsys):
    assert main(["--out", str(tmp_path / "x.json"), "gen", "euclidean", "n=-3"]) == EXIT_PARAM
    assert main(["gen", "euclidean", "epsilon=2"]) == EXIT_PARAM
    assert main(["gen", "line", "oops"]) == EXIT_PARAM
    assert main(["gen", "nosuchkind"]) == EXIT_PARAM


def test_validate_instance(tmp_path, capsys):
    _, path, _ = _gen(tmp_path, capsys, "euclidean", "n=20", "side=3")
    assert main(["validate", str(path)]) == EXIT_OK
    capsys.readouterr()
    data = json.loads(path.read_text())
    data["losses"][0][1] = 0.0
    bad = tmp_path / "zero.json"
    bad.write_text(json.dumps(data))
    assert main(["validate", str(bad)]) == EXIT_PARAM
    garbled = tmp_path / "garbled.json"
    garbled.write_text("{")
    assert main(["validate", str(garbled)]) == EXIT_PARAM


def test_validate_schedule_budget_violation(tmp_path, capsys):
    inst = generate_instance("grid", {"rows": 5, "cols": 5})
    ipath = tmp_path / "grid.json"
    inst.save(ipath)
    evs = {3: [Retune(0, v, 0.01) for v in (6, 12, 18, 24, 4, 20)]}
    sched = AdversarySchedule(evs, tau=1.0, k=3.0, window=2, horizon=8)
    spath = tmp_path / "sched.json"
    sched.save(spath)
    capsys.readouterr()
    assert main(["validate", str(spath), "--instance", str(ipath)]) == EXIT_INVALID
    rep = json.loads(capsys.readouterr().out)
    assert not rep["passed"] and rep["budget_violations"][0][0] == 0
    fine = tmp_path / "fine.json"
    AdversarySchedule(horizon=8).save(fine)
    assert main(["validate", str(fine), "--instance", str(ipath)]) == EXIT_OK
    assert main(["validate", str(spath)]) == EXIT_PARAM


def _scenario(tmp_path, **extra):
    scn = {
        "schema_version": 1,
        "instance": {"generate": {"kind": "grid", "rows": 4, "cols": 4}},
        "protocol": {"name": "local_bcast"},
        "horizon": 200,
        "whp_override": True,
    }
    scn.update(extra)
    path = tmp_path / "scn.json"
    path.write_text(json.dumps(scn))
    return path


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_run_twenty_seed_sweep(tmp_path, capsys):
    scn = _scenario(tmp_path, sweep={"seeds": {"start": 0, "count": 20}})
    out = tmp_path / "out"
    assert main(["--out", str(out), "run", str(scn)]) == EXIT_OK
    assert len(list(out.glob("trace_*.jsonl"))) == 20
    assert len(list(out.glob("summary_*.csv"))) == 20
    rows = _rows(out / "aggregate.csv")
    assert len(rows) == 20
    assert tuple(rows[0]) == AGG_COLUMNS
    assert [int(r["seed"]) for r in rows] == list(range(20))


def test_rerun_and_parallel_are_byte_identical(tmp_path, capsys):
    scn = _scenario(tmp_path, sweep={"seeds": [3, 1, 2], "kinds": ["sinr", "protocol"]})
    outs = [tmp_path / "a", tmp_path / "b", tmp_path / "c"]
    assert main(["--out", str(outs[0]), "run", str(scn)]) == EXIT_OK
    assert main(["--out", str(outs[1]), "run", str(scn)]) == EXIT_OK
    assert main(["--jobs", "2", "--out", str(outs[2]), "run", str(scn)]) == EXIT_OK
    blobs = [(o / "aggregate.csv").read_bytes() for o in outs]
    assert blobs[0] == blobs[1] == blobs[2]
    rows = _rows(outs[0] / "aggregate.csv")
    keys = [(r["kind"], int(r["seed"])) for r in rows]
    assert keys == sorted(keys)
    for r in rows:
        tr = SimulationTrace.load(next(outs[0].glob(f"trace_{r['kind']}_*_s{r['seed']}.jsonl")))
        assert tr.hash == r["hash"]


def test_empty_sweep_header_only(tmp_path, capsys):
    scn = _scenario(tmp_path, sweep={"seeds": []})
    out = tmp_path / "out"
    assert main(["--out", str(out), "run", str(scn)]) == EXIT_OK
    assert (out / "aggregate.csv").read_text().strip() == ",".join(AGG_COLUMNS)


def test_run_errors(tmp_path, capsys):
    assert main(["run", str(tmp_path / "missing.json")]) == EXIT_PARAM
    bad = _scenario(tmp_path, horizon=10_000, whp_override=False)
    assert main(["--out", str(tmp_path / "o"), "run", str(bad)]) == EXIT_PARAM
    wrong = _scenario(tmp_path, schema_version=99)
    assert main(["--out", str(tmp_path / "o"), "run", str(wrong)]) == EXIT_PARAM


def test_runtime_failure_exit_1(tmp_path, capsys, monkeypatch):
    import dissem.cli as cli

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "run_scenario", boom)
    assert main(["run", str(_scenario(tmp_path))]) == EXIT_RUNTIME


def test_report(tmp_path, capsys):
    scn = _scenario(tmp_path, protocol={"name": "bcast_star", "source": 0})
    out = tmp_path / "out"
    assert main(["--out", str(out), "run", str(scn)]) == EXIT_OK
    capsys.readouterr()
    trace = next(out.glob("trace_*.jsonl"))
    csv_out = tmp_path / "rep.csv"
    assert main(["--out", str(csv_out), "report", str(trace)]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert rep["problem"] == "global" and rep["uninformed"] == []
    assert len(_rows(csv_out)) == 16
    lines = trace.read_text().splitlines()
    rec = json.loads(lines[1])
    rec["t"] = 7
    trace.write_text("\n".join([lines[0], json.dumps(rec)] + lines[2:]) + "\n")
    assert main(["report", str(trace)]) == EXIT_PARAM


def test_scenario_points_sorted():
    pts = scenario_points({"sweep": {"seeds": [2, 0], "n": [20, 10]}}, 0)
    assert [(p["n"], p["seed"]) for p in pts] == [(10, 0), (10, 2), (20, 0), (20, 2)]
    assert scenario_points({"seed": 9}, 0) == [{"kind": None, "n": None, "seed": 9}]


@pytest.mark.parametrize("argv", [["--help"], ["gen", "--help"]])
def test_help_exit_0(argv, capsys):
    assert main(argv) == EXIT_OK
