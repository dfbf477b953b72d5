"""Deterministic round loop, traces and the analysis statistics computed from them."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from .dynamics import (
    AdversarySchedule,
    Move,
    Retune,
    TemporalTopology,
    dynamic_degrees,
    neighbor_history,
    stable_distances_from,
    stable_path_length,
)
from .errors import ConfigInvalid, IntegrityFailure, StaticOnly
from .metric import Instance
from .models import ReceptionModelConfig, close_ball_matrix, vicinity_matrix
from .protocols import (
    GLOBAL_PROTOCOLS,
    PhaseParams,
    Protocol,
    ProtocolConfig,
    default_i_hat,
    make_protocol,
)
from .sensing import Channel, SensingConfig

log = logging.getLogger(__name__)

TRACE_SCHEMA_VERSION = 1
ASYNC_PROTOCOLS = ("try_adjust", "local_bcast")


@dataclass
class SensingParams:
    h1: float = 2.0
    h2: float = 2.0
    cd_fraction: float = 0.5
    ack_fraction: float = 0.5


@dataclass
class SimulationConfig:
    instance: Instance
    model: ReceptionModelConfig = field(default_factory=ReceptionModelConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    sensing: SensingParams = field(default_factory=SensingParams)
    schedule: AdversarySchedule | None = None
    horizon: int = 1000
    seed: int = 0
    mode: str = "synchronous"
    n_bound: int | None = None
    whp_override: bool = False
    stop_on_completion: bool = True
    record_metrics: bool = True
    check_model: bool = True

    @property
    def n(self) -> int:
        return int(self.n_bound or self.instance.space.n)

    def validate(self) -> None:
        if self.horizon < 0:
            raise ConfigInvalid("horizon must be non-negative", "horizon")
        if not 0 <= self.seed < 2**64:
            raise ConfigInvalid("seed must be a 64-bit unsigned integer", "seed")
        if self.mode not in ("synchronous", "asynchronous"):
            raise ConfigInvalid(f"unknown mode {self.mode!r}", "mode")
        if self.horizon > self.n ** 2 and not self.whp_override:
            raise ConfigInvalid(f"horizon {self.horizon} exceeds n_bound^2 = {self.n ** 2}", "horizon")
        name = self.protocol.name
        if self.mode == "asynchronous" and name not in ASYNC_PROTOCOLS:
            raise ConfigInvalid(f"{name} needs the synchronous engine", "mode")
        dynamic = self.schedule is not None and bool(self.schedule.events)
        if dynamic and name in ("bcast_star", "spontaneous"):
            raise StaticOnly(f"{name} is defined for static networks only")
        if self.check_model:
            self.model.check_consistency(self.instance.space, self.instance.radii)
        src = self.protocol.source
        if name in GLOBAL_PROTOCOLS and src is not None and src not in self.instance.space.node_ids:
            raise ConfigInvalid(f"source {src!r} is not a node", "protocol.source")

    def source_index(self) -> int | None:
        if self.protocol.name not in GLOBAL_PROTOCOLS:
            return None
        src = self.protocol.source
        ids = self.instance.space.node_ids
        return 0 if src is None else ids.index(src)

    def echo(self) -> dict:
        space = self.instance.space
        return {
            "instance_digest": self.instance.digest(),
            "n_nodes": space.n,
            "zeta": space.zeta,
            "R": self.instance.radii.R,
            "epsilon": self.instance.radii.epsilon,
            "model": self.model.to_dict(),
            "protocol": self.protocol.to_dict(),
            "sensing": self.sensing.__dict__.copy(),
            "schedule_digest": _digest(self.schedule.to_dict()) if self.schedule else None,
            "horizon": self.horizon,
            "seed": self.seed,
            "mode": self.mode,
            "n_bound": self.n,
            "log_base": 2,
        }


def _digest(obj: Any) -> str:
    return hashlib.sha256(_canon(obj).encode()).hexdigest()


def _canon(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(o: Any):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o)}")


# ---------------------------------------------------------------------------
# traces


@dataclass(eq=False)
class SimulationTrace:
    header: dict
    records: list
    footer: dict
    # in-memory analysis arrays, rows are rounds 1..T
    p: np.ndarray | None = None
    alive: np.ndarray | None = None
    tx: np.ndarray | None = None
    busy: np.ndarray | None = None
    close_contention: np.ndarray | None = None
    vicinity_contention: np.ndarray | None = None
    expected_interference: np.ndarray | None = None
    first_rx: np.ndarray | None = None
    first_mass: np.ndarray | None = None
    born: np.ndarray | None = None
    protocol: Protocol | None = None

    def lines(self) -> list[str]:
        out = [_canon({"kind": "header", **self.header})]
        out += [_canon({"kind": "round", **r}) for r in self.records]
        out.append(_canon({"kind": "footer", **self.footer}))
        return out

    @property
    def hash(self) -> str:
        h = hashlib.sha256()
        for line in self.lines():
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()

    @property
    def rounds(self) -> int:
        return len(self.records)

    @property
    def node_ids(self) -> list:
        return self.header["node_ids"]

    def save(self, path: str | Path) -> str:
        lines = self.lines()
        digest = self.hash
        with open(path, "w") as fh:
            for line in lines:
                fh.write(line + "\n")
            fh.write(_canon({"kind": "hash", "sha256": digest}) + "\n")
        return digest

    @classmethod
    def load(cls, path: str | Path) -> "SimulationTrace":
        try:
            raw = Path(path).read_text().splitlines()
            objs = [json.loads(line) for line in raw]
        except (OSError, json.JSONDecodeError) as exc:
            raise IntegrityFailure(f"unreadable trace: {exc}") from exc
        if len(objs) < 3 or objs[0].get("kind") != "header" or objs[-1].get("kind") != "hash" \
                or objs[-2].get("kind") != "footer":
            raise IntegrityFailure("trace is truncated or malformed")
        strip = lambda o: {k: v for k, v in o.items() if k != "kind"}
        trace = cls(strip(objs[0]), [strip(o) for o in objs[1:-2]], strip(objs[-2]))
        if trace.hash != objs[-1]["sha256"]:
            raise IntegrityFailure("trace content does not match its hash")
        if trace.footer.get("rounds") != len(trace.records):
            raise IntegrityFailure("round count mismatch")
        return trace


def _ids(node_ids: tuple, mask_or_idx: np.ndarray) -> list:
    idx = np.flatnonzero(mask_or_idx) if mask_or_idx.dtype == bool else mask_or_idx
    return [node_ids[i] for i in idx]


def _slot_record(node_ids: tuple, res) -> dict:
    real, out = res.realization, res.outcomes
    rows, cols = np.nonzero(real.recv)
    return {
        "prec": real.precision,
        "tx": _ids(node_ids, real.transmitters),
        "rx": [[node_ids[real.transmitters[r]], node_ids[c]] for r, c in zip(rows, cols)],
        "busy": _ids(node_ids, out.busy),
        "ack": _ids(node_ids, real.transmitters[out.ack]),
        "ntd": [[node_ids[v], node_ids[out.ntd_sender[v]]] for v in np.flatnonzero(out.ntd)],
        "mass": _ids(node_ids, real.transmitters[res.mass]),
    }


def async_schedule(seed: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-node round length in engine ticks (1 or 2) and tick offset."""
    rng = np.random.default_rng([seed, 0xA5A5])
    period = rng.integers(1, 3, size=n)
    offset = (rng.random(n) * period).astype(int)
    return period, offset


def run(config: SimulationConfig) -> SimulationTrace:
    config.validate()
    inst = config.instance
    ids = inst.space.node_ids
    n_univ = inst.space.n
    schedule = config.schedule or AdversarySchedule(horizon=config.horizon)
    topo = TemporalTopology(inst, schedule)
    space, alive = topo.at(0)
    src = config.source_index()
    proto = make_protocol(config.protocol, n_univ, config.n, inst.radii.epsilon, src)
    for i in np.flatnonzero(alive):
        proto.arrive(int(i), 0)
    sp = config.sensing
    ch = Channel(space, inst.radii, config.model, sp.h1, sp.h2, sp.cd_fraction, sp.ack_fraction, alive)
    base_sense = ch.sensing()
    half_sense = ch.sensing(inst.radii.epsilon / 2)
    phase = config.protocol.phase
    rho_c, i_c = config.model.succclear(inst.radii.epsilon, inst.radii.R, space.zeta)
    i_hat = phase.i_hat if phase.i_hat is not None else default_i_hat(
        phase.rho, space.zeta, i_c, base_sense.i_cd, base_sense.i_ack)
    header = {
        "schema_version": TRACE_SCHEMA_VERSION,
        "config": config.echo(),
        "node_ids": list(ids),
        "source": None if src is None else ids[src],
        "sensing": {"base": base_sense.to_dict(), "half": half_sense.to_dict()},
        "constants": {"rho": phase.rho, "eta_hat": phase.eta_hat, "gamma": phase.gamma,
                      "sigma": phase.sigma, "i_hat": i_hat, "eta": base_sense.eta,
                      "rho_c": rho_c, "I_c": i_c, "beta": proto.beta,
                      "phase_length": phase.length(config.n)},
    }
    if config.mode == "asynchronous":
        period, offset = async_schedule(config.seed, n_univ)
        header["async"] = {"period": period.tolist(), "offset": offset.tolist()}
    H = config.horizon
    p_hist = np.zeros((H, n_univ))
    alive_hist = np.zeros((H, n_univ), dtype=bool)
    tx_hist = np.zeros((H, n_univ), dtype=bool)
    busy_hist = np.zeros((H, n_univ), dtype=bool)
    mets = config.record_metrics
    close_h = np.zeros((H, n_univ)) if mets else None
    vic_h = np.zeros((H, n_univ)) if mets else None
    ihat_h = np.zeros((H, n_univ)) if mets else None
    mats_for = None
    mats = None
    records = []
    completed_at = None
    if config.stop_on_completion and proto.problem == "global" and proto.complete():
        completed_at = 0
    for t in range(1, H + 1):
        if completed_at is not None:
            break
        arrived, departed = topo.advance()
        _, space, alive = topo.current
        for i in departed:
            proto.depart(i)
        for i in arrived:
            proto.arrive(i, t)
        if space is not ch.space:
            ch.space = space
        ch.alive = alive.copy()
        p_now = proto.transmitting_probability()
        row = t - 1
        p_hist[row] = p_now
        alive_hist[row] = alive
        if mets:
            if mats_for is not space:
                outside = ~vicinity_matrix(space, inst.radii, phase.rho)
                mats = (close_ball_matrix(space, inst.radii), ~outside,
                        space.base.signal * outside)
                mats_for = space
            q = p_now * alive
            close_h[row] = q @ mats[0]
            vic_h[row] = q @ mats[1]
            ihat_h[row] = q @ mats[2]
        acting = None
        if config.mode == "asynchronous":
            acting = (t + offset) % period == 0
        seed = config.seed

        def draw(slot: int, _t=t) -> np.ndarray:
            return np.random.default_rng([seed, _t, slot]).random(n_univ)

        outcome = proto.step(t, ch, draw, acting)
        first = outcome.slots[0]
        tx_hist[row, first.realization.transmitters] = True
        busy_hist[row] = first.outcomes.busy
        records.append({
            "t": t,
            "arrive": _ids(ids, np.asarray(arrived, dtype=int)),
            "depart": _ids(ids, np.asarray(departed, dtype=int)),
            "geometry": any(isinstance(e, (Retune, Move)) for e in schedule.events_at(t)),
            "p": p_now.tolist(),
            "slots": [_slot_record(ids, s) for s in outcome.slots],
        })
        if config.stop_on_completion and proto.complete():
            completed_at = t
    rounds = len(records)
    st = proto.state
    footer = {
        "rounds": rounds,
        "completed": completed_at is not None,
        "completion_round": completed_at,
        "first_reception": {str(ids[i]): (int(st.first_rx[i]) if st.first_rx[i] >= 0 else None)
                            for i in range(n_univ)},
        "first_mass_delivery": {str(ids[i]): (int(st.first_mass[i]) if st.first_mass[i] >= 0 else None)
                                for i in range(n_univ)},
    }
    if config.protocol.name == "spontaneous":
        footer["dominators"] = _ids(ids, st.role == 1)
        footer["dominated_by"] = {str(ids[v]): ids[st.dominated_by[v]]
                                  for v in np.flatnonzero(st.dominated_by >= 0)}
    trace = SimulationTrace(header, records, footer,
                            p=p_hist[:rounds], alive=alive_hist[:rounds], tx=tx_hist[:rounds],
                            busy=busy_hist[:rounds],
                            close_contention=None if close_h is None else close_h[:rounds],
                            vicinity_contention=None if vic_h is None else vic_h[:rounds],
                            expected_interference=None if ihat_h is None else ihat_h[:rounds],
                            first_rx=st.first_rx.copy(), first_mass=st.first_mass.copy(),
                            born=st.born.copy(), protocol=proto)
    log.debug("run finished after %d rounds (completed=%s)", rounds, completed_at is not None)
    return trace


def replay_verify(trace: SimulationTrace, config: SimulationConfig) -> bool:
    return run(config).hash == trace.hash


def rederive_round(trace: SimulationTrace, config: SimulationConfig, t: int) -> bool:
    """Re-resolve every slot of round ``t`` from its recorded transmitter set."""
    from .models import resolve_round

    inst = config.instance
    topo = TemporalTopology(inst, config.schedule or AdversarySchedule(horizon=config.horizon))
    space, alive = topo.at(t)
    rec = trace.records[t - 1]
    for k, slot in enumerate(rec["slots"], start=1):
        tx = np.zeros(space.n, dtype=bool)
        for u in slot["tx"]:
            tx[space.index(u)] = True
        real = resolve_round(space, config.model, inst.radii, tx, slot["prec"], alive, t, k)
        got = sorted([list(p) for p in real.deliveries], key=repr)
        if got != sorted([list(p) for p in slot["rx"]], key=repr):
            return False
    return True


# ---------------------------------------------------------------------------
# statistics


@dataclass
class PhaseStat:
    start: int
    end: int
    good_fraction: float
    high_rounds: int
    low_rounds: int
    kind: str


def good_round_stats(trace: SimulationTrace, v: Any, phase: PhaseParams | None = None,
                     i_hat: float | None = None, n: int | None = None) -> list[PhaseStat]:
    """Per-phase good-round fraction and phase type for node ``v``."""
    phase = phase or PhaseParams()
    ids = trace.node_ids
    j = ids.index(v)
    n = n or trace.header["config"]["n_bound"]
    L = phase.length(n)
    eta = trace.header["constants"]["eta"]
    i_hat = trace.header["constants"]["i_hat"] if i_hat is None else i_hat
    vic = trace.vicinity_contention[:, j]
    ext = trace.expected_interference[:, j]
    good = (vic <= phase.eta_hat) & (ext <= i_hat)
    high = vic > eta
    out = []
    for s in range(0, len(vic) - L + 1, L):
        g = good[s:s + L]
        h = int(high[s:s + L].sum())
        kind = "A" if h >= L / 10 else "B"
        out.append(PhaseStat(s + 1, s + L, float(g.mean()), h, L - h, kind))
    return out


@dataclass
class CompletionReport:
    problem: str
    first_reception: dict
    first_mass_delivery: dict
    completion_round: int | None
    uninformed: list


def completion_metrics(trace: SimulationTrace, problem: str | None = None) -> CompletionReport:
    problem = problem or ("global" if trace.header["config"]["protocol"]["name"] in GLOBAL_PROTOCOLS
                          else "local")
    fr = trace.footer["first_reception"]
    fm = trace.footer["first_mass_delivery"]
    if problem == "global":
        missing = [k for k, v in fr.items() if v is None]
        rounds = [v for v in fr.values() if v is not None]
    else:
        missing = [k for k, v in fm.items() if v is None]
        rounds = [v for v in fm.values() if v is not None]
    done = max(rounds) if rounds and not missing else None
    return CompletionReport(problem, fr, fm, done, missing)


def summary_rows(trace: SimulationTrace, config: SimulationConfig, c: float = 1.0) -> list[dict]:
    """Per-node summary with dynamic degree, stable distance and the bound ratio."""
    inst = config.instance
    ids = inst.space.node_ids
    T = max(trace.rounds, 1)
    schedule = config.schedule or AdversarySchedule(horizon=T)
    topo = TemporalTopology(inst, schedule)
    n = config.n
    logn = math.log2(max(n, 2))
    rho = config.protocol.phase.rho
    deg = dynamic_degrees(topo, rho, 1, T) if trace.rounds else np.zeros(len(ids), dtype=int)
    src = config.source_index()
    stable = None
    if src is not None and trace.rounds:
        hist = neighbor_history(topo, 1, T)
        stable = stable_distances_from(hist, src, stable_path_length(c, n), 1)
    rows = []
    for i, u in enumerate(ids):
        fr = trace.footer["first_reception"][str(u)]
        fm = trace.footer["first_mass_delivery"][str(u)]
        sd = None if stable is None else float(stable[i])
        if src is not None:
            ratio = fr / sd if fr is not None and sd not in (None, 0.0) and math.isfinite(sd) else None
        else:
            ratio = fm / (deg[i] + logn) if fm is not None else None
        rows.append({"node": u, "first_reception": fr, "first_mass_delivery": fm,
                     "dyn_degree": int(deg[i]), "stable_dist": sd, "bound_ratio": ratio})
    return rows


CSV_COLUMNS = ("node", "first_reception", "first_mass_delivery", "dyn_degree", "stable_dist", "bound_ratio")


def write_summary_csv(rows: Iterable[Mapping], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in CSV_COLUMNS})
