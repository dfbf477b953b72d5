"""Command-line front end: ``gen``, ``validate``, ``run`` and ``report``.

Exit codes: 0 success, 1 runtime failure, 2 parse or parameter error,
3 validation failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import re
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Mapping, Sequence

import networkx as nx
import numpy as np

from .dynamics import AdversarySchedule, hop_metrics, validate_schedule
from .engine import (
    SensingParams,
    SimulationConfig,
    SimulationTrace,
    completion_metrics,
    run,
    summary_rows,
    write_summary_csv,
)
from .errors import DissemError, IntegrityFailure, InvalidInstance
from .metric import (
    Instance,
    QuasiMetricSpace,
    RadiusSet,
    compute_metricity,
    from_positions,
    gen_big_instance,
    gen_euclidean_instance,
    gen_grid_positions,
    gen_line_positions,
    gen_lower_bound_instance,
    validate_bounded_independence,
)
from .models import ReceptionModelConfig
from .protocols import ProtocolConfig

log = logging.getLogger("dissem")

EXIT_OK, EXIT_RUNTIME, EXIT_PARAM, EXIT_INVALID = 0, 1, 2, 3
SCENARIO_SCHEMA_VERSION = 1
GEN_KINDS = ("euclidean", "lowerbound", "big", "grid", "line", "clique")


class ParamError(Exception):
    pass


# ---------------------------------------------------------------------------
# instance generation


def sinr_power(R: float, zeta: float, sinr_threshold: float = 1.0, noise: float = 1.0) -> float:
    """Transmit power that makes ``R`` the clear-channel range of the SINR rule."""
    return sinr_threshold * noise * R**zeta


def _graph_from_spec(spec: str) -> nx.Graph:
    kind, _, arg = spec.partition(":")
    if kind == "path":
        return nx.path_graph(int(arg))
    if kind == "cycle":
        return nx.cycle_graph(int(arg))
    if kind == "complete":
        return nx.complete_graph(int(arg))
    if kind == "grid":
        r, c = (int(x) for x in arg.lower().split("x"))
        g = nx.grid_2d_graph(r, c)
        return nx.convert_node_labels_to_integers(g, ordering="sorted")
    path = Path(spec)
    if path.exists():
        return nx.Graph([tuple(e) for e in json.loads(path.read_text())])
    raise ParamError(f"unknown graph spec {spec!r}")


def generate_instance(kind: str, params: Mapping[str, Any], seed: int = 0) -> Instance:
    """Build one of the named benchmark instances.

    Euclidean-style instances get the SINR-consistent power for the requested
    ``R`` (``P = beta N R^zeta``) and the plane's independence constants.
    """
    p = dict(params)
    eps = float(p.get("epsilon", 0.2))
    beta = float(p.get("sinr_threshold", 1.0))
    noise = float(p.get("noise", 1.0))
    if not 0 < eps < 1:
        raise ParamError("epsilon must lie in (0, 1)")
    if kind == "lowerbound":
        n, R = int(p.get("n", 64)), float(p.get("R", 1.0))
        power = sinr_power(R, 2.0, beta, noise)
        base = gen_lower_bound_instance(n, eps, R, power)
        space = QuasiMetricSpace(base, 2.0, r_min=eps * R / 8, lam=1.0, indep_const=1.0)
        return Instance(space, RadiusSet(R, eps))
    if kind == "big":
        g = _graph_from_spec(str(p.get("graph", "path:5")))
        zeta = p.get("zeta")
        space = gen_big_instance(g, None if zeta is None else float(zeta))
        R = float(p.get("R", 1.0 / (1 - eps)))
        return Instance(space, RadiusSet(R, eps))
    zeta = float(p.get("zeta", 3.0))
    if kind == "euclidean":
        n, side = int(p.get("n", 50)), float(p.get("side", 4.0))
        R = float(p.get("R", 1.0))
        base = gen_euclidean_instance(n, side, zeta, int(p.get("seed", seed)),
                                      sinr_power(R, zeta, beta, noise))
    elif kind in ("grid", "line", "clique"):
        spacing = float(p.get("spacing", 1.0))
        if kind == "grid":
            rows, cols = int(p.get("rows", 5)), int(p.get("cols", 5))
            pos = gen_grid_positions(rows, cols, spacing)
        elif kind == "line":
            pos = gen_line_positions(int(p.get("n", 9)), spacing)
        else:
            n = int(p.get("n", 10))
            pos = gen_line_positions(n, spacing * 0.01)
        default_R = 1.05 * spacing / (1 - eps)
        R = float(p.get("R", default_R))
        base = from_positions(pos, zeta, sinr_power(R, zeta, beta, noise))
    else:
        raise ParamError(f"unknown instance kind {kind!r}")
    space = QuasiMetricSpace(base, zeta, r_min=float(p.get("r_min", eps * R / 8)),
                             lam=float(p.get("lambda", 2.0)), indep_const=float(p.get("C", 4.0)))
    return Instance(space, RadiusSet(R, eps))


def instance_summary(inst: Instance, q_samples: Sequence[float] = (1, 2, 4)) -> dict:
    space = inst.space
    zeta_star = compute_metricity(space.base) if space.n else 1.0
    ind = validate_bounded_independence(space, q_samples) if space.r_min > 0 and space.n else None
    hm = hop_metrics(space, inst.radii)
    out = {
        "nodes": space.n,
        "metricity": zeta_star,
        "zeta": space.zeta,
        "metricity_ok": zeta_star <= space.zeta + 1e-6,
        "independence_ok": None if ind is None else ind.passed,
        "symmetry_factor": space.symmetry_factor(),
        "diameter": hm.diameter,
        "strongly_connected": hm.strongly_connected,
    }
    if ind is not None and ind.worst is not None:
        w = ind.worst
        out["independence_worst"] = {"node": w.node, "q": w.q, "size": w.size, "bound": w.bound}
    if space.lam >= space.zeta:
        out["warning"] = "lambda >= zeta"
    return out


# ---------------------------------------------------------------------------
# scenarios


def _load_json(path: str | Path) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParamError(f"cannot read {path}: {exc}") from exc


def _resolve_instance(spec: Any, base_dir: Path, n: int | None, seed: int) -> Instance:
    if isinstance(spec, str):
        return Instance.load(base_dir / spec)
    if isinstance(spec, Mapping) and "generate" in spec:
        g = dict(spec["generate"])
        kind = g.pop("kind")
        if n is not None:
            g["n"] = n
        return generate_instance(kind, g, seed)
    if isinstance(spec, Mapping):
        return Instance.from_dict(spec)
    raise ParamError("scenario.instance must be a path, an inline instance or a generator block")


def scenario_points(scn: Mapping[str, Any], default_seed: int) -> list[dict]:
    sweep = scn.get("sweep", {}) or {}
    seeds = sweep.get("seeds")
    if isinstance(seeds, Mapping):
        seeds = list(range(int(seeds.get("start", 0)), int(seeds.get("start", 0)) + int(seeds["count"])))
    if seeds is None:
        seeds = [int(scn.get("seed", default_seed))]
    ns = sweep.get("n", [None])
    kinds = sweep.get("kinds", [None])
    points = []
    for kind in kinds:
        for n in ns:
            for s in seeds:
                points.append({"kind": kind, "n": n, "seed": int(s)})
    return sorted(points, key=lambda p: (str(p["kind"]), p["n"] or 0, p["seed"]))


def build_config(scn: Mapping[str, Any], point: Mapping[str, Any], base_dir: Path) -> SimulationConfig:
    inst = _resolve_instance(scn["instance"], base_dir, point.get("n"), point["seed"])
    model = dict(scn.get("model", {}))
    if point.get("kind"):
        model["kind"] = point["kind"]
    sched = scn.get("schedule")
    if isinstance(sched, str):
        sched = AdversarySchedule.load(base_dir / sched)
    elif isinstance(sched, Mapping):
        sched = AdversarySchedule.from_dict(sched)
    return SimulationConfig(
        instance=inst,
        model=ReceptionModelConfig.from_dict(model),
        protocol=ProtocolConfig.from_dict(scn.get("protocol", {})),
        sensing=SensingParams(**scn.get("sensing", {})),
        schedule=sched,
        horizon=int(scn.get("horizon", 1000)),
        seed=int(point["seed"]),
        mode=scn.get("mode", "synchronous"),
        n_bound=scn.get("n_bound"),
        whp_override=bool(scn.get("whp_override", False)),
        stop_on_completion=bool(scn.get("stop_on_completion", True)),
    )


def _run_point(args: tuple) -> dict:
    scn, point, base_dir, out_dir = args
    tag = f"{point['kind'] or 'default'}_n{point['n'] or 'x'}_s{point['seed']}"
    cfg = build_config(scn, point, Path(base_dir))
    trace = run(cfg)
    digest = trace.save(Path(out_dir) / f"trace_{tag}.jsonl")
    rows = summary_rows(trace, cfg)
    write_summary_csv(rows, Path(out_dir) / f"summary_{tag}.csv")
    ratios = [r["bound_ratio"] for r in rows if r["bound_ratio"] is not None]
    q50, q90 = (float(x) for x in np.quantile(ratios, [0.5, 0.9])) if ratios else (None, None)
    comp = completion_metrics(trace)
    key = "first_reception" if comp.problem == "global" else "first_mass_delivery"
    vals = [v for v in getattr(comp, key).values() if v is not None]
    return {"kind": point["kind"] or cfg.model.kind, "n": cfg.instance.space.n, "seed": point["seed"],
            "rounds": trace.rounds, "completed": trace.footer["completed"],
            "completion_round": comp.completion_round,
            "median_round": statistics.median(vals) if vals else None,
            "uninformed": len(comp.uninformed), "ratio_q50": q50, "ratio_q90": q90, "hash": digest}


AGG_COLUMNS = ("kind", "n", "seed", "rounds", "completed", "completion_round", "median_round",
               "uninformed", "ratio_q50", "ratio_q90", "hash")


def run_scenario(path: str | Path, out: str | Path, jobs: int = 1, default_seed: int = 0) -> list[dict]:
    scn = _load_json(path)
    if int(scn.get("schema_version", SCENARIO_SCHEMA_VERSION)) != SCENARIO_SCHEMA_VERSION:
        raise ParamError("unsupported scenario schema_version")
    if "instance" not in scn:
        raise ParamError("scenario needs an instance")
    out_dir = Path(scn.get("out", out))
    out_dir.mkdir(parents=True, exist_ok=True)
    base_dir = Path(path).resolve().parent
    points = scenario_points(scn, default_seed)
    work = [(scn, p, str(base_dir), str(out_dir)) for p in points]
    rows: list[dict] = []
    failures = 0
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_point, w) for w in work]
            for f in futures:
                try:
                    rows.append(f.result())
                except DissemError:
                    raise
                except Exception as exc:  # keep the other points' outputs
                    log.error("sweep point failed: %s", exc)
                    failures += 1
    else:
        for w in work:
            try:
                rows.append(_run_point(w))
            except DissemError:
                raise
            except Exception as exc:
                log.error("sweep point failed: %s", exc)
                failures += 1
    with open(out_dir / "aggregate.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=AGG_COLUMNS)
        wr.writeheader()
        for r in rows:
            wr.writerow({k: ("" if r[k] is None else r[k]) for k in AGG_COLUMNS})
    if failures:
        raise RuntimeError(f"{failures} sweep point(s) failed")
    return rows


# ---------------------------------------------------------------------------
# command handlers


def _kv(pairs: Sequence[str]) -> dict:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ParamError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


_ALIASES = {"ε": "epsilon", "eps": "epsilon", "ζ": "zeta", "λ": "lambda"}


def cmd_gen(args) -> int:
    bare = [x for x in args.params if "=" not in x]
    params = _kv([x for x in args.params if "=" in x])
    params = {_ALIASES.get(k, k): v for k, v in params.items()}
    for item in bare:
        # grid shorthand: RxC
        m = re.fullmatch(r"(\d+)x(\d+)", item)
        if args.kind != "grid" or not m:
            raise ParamError(f"expected key=value, got {item!r}")
        params.setdefault("rows", int(m.group(1)))
        params.setdefault("cols", int(m.group(2)))
    try:
        inst = generate_instance(args.kind, params, args.seed)
    except (ValueError, TypeError, KeyError) as exc:
        if isinstance(exc, DissemError):
            raise
        raise ParamError(f"invalid parameters for {args.kind}: {exc}") from exc
    out = Path(args.out) if args.out else Path(f"{args.kind}.json")
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / f"{args.kind}.json"
    inst.save(out)
    summary = instance_summary(inst)
    summary["file"] = str(out)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_validate(args) -> int:
    data = _load_json(args.file)
    if "events" in data or "tau" in data:
        if not args.instance:
            raise ParamError("validating a schedule needs --instance")
        inst = Instance.load(args.instance)
        sched = AdversarySchedule.from_dict(data)
        rep = validate_schedule(sched, inst, args.window)
        print(json.dumps({"passed": rep.passed, "summary": rep.summary(),
                          "budget_violations": rep.budget_violations[:10],
                          "tail_violations": rep.tail_violations[:10]}, default=str))
        return EXIT_OK if rep.passed else EXIT_INVALID
    inst = Instance.from_dict(data)
    summary = instance_summary(inst)
    print(json.dumps(summary, sort_keys=True, default=str))
    ok = summary["metricity_ok"] and summary["independence_ok"] is not False
    return EXIT_OK if ok else EXIT_INVALID


def cmd_run(args) -> int:
    out = args.out or "runs"
    rows = run_scenario(args.scenario, out, args.jobs, args.seed)
    print(json.dumps({"points": len(rows), "out": str(out)}))
    return EXIT_OK


def cmd_report(args) -> int:
    trace = SimulationTrace.load(args.trace)
    comp = completion_metrics(trace)
    rep = {"hash": trace.hash, "rounds": trace.rounds, "problem": comp.problem,
           "completion_round": comp.completion_round, "uninformed": comp.uninformed}
    if args.out:
        with open(args.out, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["node", "first_reception", "first_mass_delivery"])
            for k in comp.first_reception:
                fr, fm = comp.first_reception[k], comp.first_mass_delivery[k]
                wr.writerow([k, "" if fr is None else fr, "" if fm is None else fm])
    print(json.dumps(rep))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dissem", description="Wireless dissemination simulator")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen", help="generate an instance file")
    g.add_argument("kind", choices=GEN_KINDS)
    g.add_argument("params", nargs="*", help="key=value parameters (n, epsilon, R, zeta, ...)")
    g.set_defaults(func=cmd_gen)
    v = sub.add_parser("validate", help="validate an instance or schedule file")
    v.add_argument("file")
    v.add_argument("--instance", default=None)
    v.add_argument("--window", type=int, default=None)
    v.set_defaults(func=cmd_validate)
    r = sub.add_parser("run", help="execute a scenario sweep")
    r.add_argument("scenario")
    r.set_defaults(func=cmd_run)
    p = sub.add_parser("report", help="summarize a trace file")
    p.add_argument("trace")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PARAM if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ParamError, InvalidInstance, IntegrityFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARAM
    except DissemError as exc:
        code = EXIT_PARAM if isinstance(exc, ValueError) else EXIT_RUNTIME
        print(f"error: {exc}", file=sys.stderr)
        return code
    except Exception as exc:
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
