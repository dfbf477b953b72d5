"""Empirical experiments shared by the acceptance suite and ``calibrate.py``.

Every function is deterministic in its seeds and returns plain numbers so the
calibration script can freeze them and the acceptance tests can compare.
"""

from __future__ import annotations

import math
import statistics
from pathlib import Path

import networkx as nx
import numpy as np

from dissem.cli import generate_instance, sinr_power
from dissem.dynamics import (
    TemporalTopology,
    gen_churn_schedule,
    gen_drift_schedule,
    validate_schedule,
    vicinity_history,
)
from dissem.engine import SimulationConfig, good_round_stats, run
from dissem.metric import Instance, QuasiMetricSpace, RadiusSet, from_positions, gen_cluster_positions
from dissem.models import ReceptionModelConfig, neighbor_matrix
from dissem.protocols import PhaseParams, ProtocolConfig, dominating_set_validate

FIXTURES = Path(__file__).parent / "fixtures"
CALIBRATION = FIXTURES / "calibration.json"

SEEDS = 20

# static local broadcast: sparse plane, steep path loss (see the decisions ledger)
LB_ZETA = 5.0
LB_DENSITY = 1.5  # side = LB_DENSITY * sqrt(n)
LB_SIZES = (50, 100, 200)

# broadcast benchmarks: source 0 at a corner, D_G = 8, 16, 32
BCAST_ZETA = 5.0
BCAST_INSTANCES = (
    ("line", {"n": 9}),
    ("line", {"n": 17}),
    ("line", {"n": 33}),
    ("grid", {"rows": 5, "cols": 5}),
    ("grid", {"rows": 5, "cols": 13}),
    ("grid", {"rows": 5, "cols": 29}),
)

LB_N = (32, 64)
LB_SEEDS = 50


def _config(inst, name, horizon, seed, **kw):
    proto = {k: kw.pop(k) for k in ("source", "p_init") if k in kw}
    return SimulationConfig(instance=inst, model=ReceptionModelConfig(kind="SINR"),
                            protocol=ProtocolConfig(name=name, **proto), horizon=horizon,
                            seed=seed, **kw)


def max_degree(inst: Instance) -> int:
    return int(neighbor_matrix(inst.space, inst.radii).sum(axis=1).max())


def slope(x, y) -> float:
    return float(np.polyfit(np.asarray(x, float), np.asarray(y, float), 1)[0])


# ---------------------------------------------------------------------------
# Try&Adjust stabilization


def stabilization(seeds: int = SEEDS, n: int = 200, phases: int = 4) -> dict:
    """Good-round fractions per (node, phase) after the first phase."""
    phase = PhaseParams()
    L = phase.length(n)
    total = good = 0
    worst = 1.0
    for seed in range(seeds):
        zeta, R, eps = 3.0, 1.0, 0.2
        pos = gen_cluster_positions(n, 0.05, seed)
        space = QuasiMetricSpace(from_positions(pos, zeta, sinr_power(R, zeta)), zeta,
                                 r_min=eps * R / 8, lam=2.0, indep_const=4.0)
        inst = Instance(space, RadiusSet(R, eps))
        tr = run(_config(inst, "try_adjust", phases * L, seed, p_init=0.5,
                         stop_on_completion=False))
        for v in space.node_ids:
            for st in good_round_stats(tr, v, phase)[1:]:
                total += 1
                good += st.good_fraction >= 1 - phase.sigma
                worst = min(worst, st.good_fraction)
    return {"pairs": total, "good_pairs": good, "fraction": good / total, "worst": worst}


# ---------------------------------------------------------------------------
# static local broadcast


def local_broadcast_instance(n: int, seed: int) -> Instance:
    return generate_instance("euclidean", {"n": n, "side": LB_DENSITY * math.sqrt(n),
                                           "zeta": LB_ZETA}, seed)


def local_broadcast(seeds: int = SEEDS) -> dict:
    out = {}
    for n in LB_SIZES:
        comps, ratios, degs = [], [], []
        for seed in range(seeds):
            inst = local_broadcast_instance(n, seed)
            D = max_degree(inst)
            tr = run(_config(inst, "local_bcast", n * n, seed, record_metrics=False))
            c = tr.footer["completion_round"]
            if c is None:
                c = math.inf
            comps.append(c)
            degs.append(D)
            ratios.append(c / (D + math.log2(n)))
        out[str(n)] = {"median_completion": statistics.median(comps),
                       "median_degree": statistics.median(degs),
                       "median_ratio": statistics.median(ratios)}
    meds = [out[str(n)]["median_completion"] for n in LB_SIZES]
    out["slope"] = slope(np.log(LB_SIZES), np.log(meds))
    return out


# ---------------------------------------------------------------------------
# global broadcast


def bcast_instance(kind: str, params: dict) -> tuple[Instance, dict]:
    inst = generate_instance(kind, dict(params, zeta=BCAST_ZETA))
    g = nx.from_numpy_array(neighbor_matrix(inst.space, inst.radii).astype(int))
    return inst, nx.single_source_shortest_path_length(g, 0)


def global_broadcast(seeds: int = SEEDS) -> dict:
    """Bcast* reception rounds over hop distance and completion per instance."""
    rows = []
    for kind, params in BCAST_INSTANCES:
        inst, dist = bcast_instance(kind, params)
        n = inst.space.n
        D = max(dist.values())
        logn = math.log2(n)
        worst, comps, fails = 0.0, [], 0
        for seed in range(seeds):
            tr = run(_config(inst, "bcast_star", n * n, seed, source=0, record_metrics=False))
            if not tr.footer["completed"]:
                fails += 1
                continue
            fr = tr.footer["first_reception"]
            worst = max(worst, max(fr[str(v)] / (logn * dist[v]) for v in range(n) if v != 0))
            comps.append(tr.footer["completion_round"])
        rows.append({"kind": kind, "n": n, "D": D, "fails": fails, "max_ratio": worst,
                     "median_completion": statistics.median(comps) if comps else None})
    xs = [r["D"] * math.log2(r["n"]) for r in rows]
    ys = [r["median_completion"] for r in rows]
    return {"rows": rows, "slope": slope(xs, ys) if None not in ys else math.nan}


def spontaneous(seeds: int = SEEDS) -> dict:
    rows = []
    for kind, params in BCAST_INSTANCES:
        inst, dist = bcast_instance(kind, params)
        n = inst.space.n
        D = max(dist.values())
        horizon = max(n * n, 2000)
        worst, fails, ds_fail = 0.0, 0, 0
        for seed in range(seeds):
            tr = run(_config(inst, "spontaneous", horizon, seed, source=0, whp_override=True,
                             record_metrics=False))
            if not tr.footer["completed"]:
                fails += 1
                continue
            by = {int(k): v for k, v in tr.footer["dominated_by"].items()}
            rep = dominating_set_validate(tr.footer["dominators"], by, inst.space, inst.radii)
            ds_fail += not rep.passed
            worst = max(worst, tr.footer["completion_round"] / (D + math.log2(n)))
        rows.append({"kind": kind, "n": n, "D": D, "fails": fails, "ds_failures": ds_fail,
                     "max_ratio": worst})
    return {"rows": rows}


# ---------------------------------------------------------------------------
# necessity of near-transmitter detection


def ntd_necessity(seeds: int = LB_SEEDS) -> dict:
    out = {}
    for n in LB_N:
        inst = generate_instance("lowerbound", {"n": n, "epsilon": 0.2, "R": 1.0})
        res = {}
        for name in ("ntd_free", "bcast"):
            comps = []
            for seed in range(seeds):
                tr = run(_config(inst, name, n * n, seed, source=0, record_metrics=False))
                c = tr.footer["completion_round"]
                comps.append(math.inf if c is None else c)
            res[name] = comps
        free, bc = statistics.median(res["ntd_free"]), statistics.median(res["bcast"])
        out[str(n)] = {"ntd_free_median": free, "bcast_median": bc,
                       "bcast_max": max(res["bcast"]),
                       "bcast_max_ratio": max(res["bcast"]) / math.log2(n),
                       "ratio": free / bc}
    return out


# ---------------------------------------------------------------------------
# dynamic local broadcast


def dynamic_local_broadcast(C: float, seeds: int = SEEDS, n: int = 100, horizon: int = 600,
                            churn: float = 0.005, rho: float = 4.0) -> dict:
    """Fraction of qualifying (node, life, seed) intervals that contain a mass delivery."""
    total = ok = 0
    schedules_ok = True
    for seed in range(seeds):
        inst = local_broadcast_instance(n, seed)
        drift = gen_drift_schedule(inst, 0.01, horizon, 1.0, 3.0, seed)
        schedules_ok &= validate_schedule(drift, inst).passed
        sched = drift.merged(gen_churn_schedule(list(inst.space.node_ids), churn, horizon,
                                                seed + 1000))
        tr = run(_config(inst, "local_bcast", horizon, seed, schedule=sched,
                         stop_on_completion=False, record_metrics=False))
        T = tr.rounds
        V = vicinity_history(TemporalTopology(inst, sched), rho, 1, T)
        mass = np.zeros((T + 1, n), dtype=bool)
        for rec in tr.records:
            for s in rec["slots"]:
                for u in s["mass"]:
                    mass[rec["t"], inst.space.index(u)] = True
        logn = math.log2(n)
        for i in range(n):
            alive = tr.alive[:, i]
            t = 1
            while t <= T:
                if not alive[t - 1]:
                    t += 1
                    continue
                start = t
                while t <= T and alive[t - 1]:
                    t += 1
                end = t - 1
                # earliest window [start, start + L - 1] whose length covers the bound
                L = None
                seen = np.zeros(n, dtype=bool)
                for e in range(start, end + 1):
                    seen |= V[e - 1, :, i]
                    deg = int(seen.sum())
                    need = math.ceil(4 * C * (deg + logn))
                    if e - start + 1 >= need:
                        L = e - start + 1
                        break
                if L is None:
                    continue
                total += 1
                ok += bool(mass[start:start + L, i].any())
    return {"intervals": total, "delivered": ok, "fraction": ok / total if total else math.nan,
            "schedules_valid": bool(schedules_ok)}
