"""Adversarial dynamics: churn and budgeted path-loss changes, plus dynamic metrics.

The node universe is fixed by the instance; churn toggles presence and
retunes rewrite individual losses.  A :class:`TemporalTopology` replays a
schedule round by round.  Events stamped with round ``t`` take effect before
round ``t`` is played; round 0 is the initial configuration.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

from .errors import BudgetInfeasible, InvalidInstance
from .metric import (
    Instance,
    NodeId,
    QuasiMetricSpace,
    compute_metricity,
    validate_bounded_independence,
)
from .models import hop_distances, neighbor_matrix, vicinity_matrix

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# events and schedules


@dataclass(frozen=True)
class Arrive:
    node: Any


@dataclass(frozen=True)
class Depart:
    node: Any


@dataclass(frozen=True)
class Retune:
    u: Any
    v: Any
    f: float


@dataclass(frozen=True)
class Move:
    """Relocate a node of a Euclidean instance; rewrites its whole loss row and column."""

    node: Any
    position: tuple


def event_to_dict(e) -> dict:
    if isinstance(e, Arrive):
        return {"type": "arrive", "node": e.node}
    if isinstance(e, Depart):
        return {"type": "depart", "node": e.node}
    if isinstance(e, Retune):
        return {"type": "retune", "u": e.u, "v": e.v, "f": e.f}
    if isinstance(e, Move):
        return {"type": "move", "node": e.node, "position": list(e.position)}
    raise TypeError(f"not an event: {e!r}")


def event_from_dict(d: Mapping[str, Any]):
    kind = d["type"]
    if kind == "arrive":
        return Arrive(d["node"])
    if kind == "depart":
        return Depart(d["node"])
    if kind == "retune":
        f = float(d["f"])
        if not f > 0 or not math.isfinite(f):
            raise InvalidInstance("retuned loss must be finite and positive")
        return Retune(d["u"], d["v"], f)
    if kind == "move":
        return Move(d["node"], tuple(float(x) for x in d["position"]))
    raise ValueError(f"unknown event type {kind!r}")


@dataclass
class AdversarySchedule:
    events: dict = field(default_factory=dict)
    tau: float = 1.0
    k: float = 3.0
    window: int = 32
    a: float = 1.0
    horizon: int = 0
    initial: list | None = None  # nodes present at round 0; None means all

    def events_at(self, t: int) -> list:
        return self.events.get(t, [])

    @property
    def has_geometry_changes(self) -> bool:
        return any(isinstance(e, (Retune, Move)) for evs in self.events.values() for e in evs)

    def to_dict(self) -> dict:
        return {
            "tau": self.tau, "k": self.k, "window": self.window, "a": self.a,
            "horizon": self.horizon, "initial": self.initial,
            "events": [{"round": t, **event_to_dict(e)}
                       for t in sorted(self.events) for e in self.events[t]],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AdversarySchedule":
        events: dict = {}
        for d in data.get("events", []):
            events.setdefault(int(d["round"]), []).append(event_from_dict(d))
        horizon = int(data.get("horizon", max(events, default=0)))
        return cls(events, float(data.get("tau", 1.0)), float(data.get("k", 3.0)),
                   int(data.get("window", 32)), float(data.get("a", 1.0)), horizon,
                   data.get("initial"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "AdversarySchedule":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def merged(self, other: "AdversarySchedule") -> "AdversarySchedule":
        events = {t: list(evs) for t, evs in self.events.items()}
        for t, evs in other.events.items():
            events.setdefault(t, []).extend(evs)
        initial = self.initial if other.initial is None else other.initial
        return AdversarySchedule(events, self.tau, self.k, self.window, self.a,
                                 max(self.horizon, other.horizon), initial)


# ---------------------------------------------------------------------------
# replay


class TemporalTopology:
    """Sequential replay of a schedule over a base instance.

    Snapshots are produced in increasing round order; asking for an earlier
    round restarts the replay from round 0.
    """

    def __init__(self, instance: Instance, schedule: AdversarySchedule | None = None):
        self.instance = instance
        self.schedule = schedule or AdversarySchedule()
        self.radii = instance.radii
        self._reset()

    def _reset(self) -> None:
        space = self.instance.space
        self._t = 0
        self._loss = None
        self._pos = None if space.base.positions is None else np.array(space.base.positions)
        self._space = space
        alive = np.ones(space.n, dtype=bool)
        if self.schedule.initial is not None:
            alive[:] = False
            for u in self.schedule.initial:
                alive[space.index(u)] = True
        self._alive = alive
        self._apply(self.schedule.events_at(0))

    @property
    def node_ids(self) -> tuple:
        return self.instance.space.node_ids

    @property
    def n(self) -> int:
        return self.instance.space.n

    def _apply(self, events: Sequence) -> tuple[list[int], list[int]]:
        base = self.instance.space
        arrived, departed = [], []
        geometry = False
        for e in events:
            if isinstance(e, Arrive):
                i = base.index(e.node)
                if not self._alive[i]:
                    self._alive[i] = True
                    arrived.append(i)
            elif isinstance(e, Depart):
                i = base.index(e.node)
                if self._alive[i]:
                    self._alive[i] = False
                    departed.append(i)
            elif isinstance(e, Retune):
                if self._loss is None:
                    self._loss = np.array(self._space.base.loss)
                self._loss[base.index(e.u), base.index(e.v)] = e.f
                geometry = True
            elif isinstance(e, Move):
                if self._pos is None:
                    raise InvalidInstance("move events need an instance with positions")
                if self._loss is None:
                    self._loss = np.array(self._space.base.loss)
                i = base.index(e.node)
                self._pos[i] = e.position
                diff = self._pos - self._pos[i]
                dist = np.sqrt(np.sum(diff * diff, axis=1))
                row = dist ** base.zeta if base.zeta != 1 else dist
                self._loss[i, :] = row
                self._loss[:, i] = row
                self._loss[i, i] = np.inf
                geometry = True
            else:
                raise TypeError(f"unknown event {e!r}")
        if geometry:
            if np.any(self._loss[~np.eye(self.n, dtype=bool)] <= 0):
                raise InvalidInstance("an event produced a non-positive loss")
            pos = None if self._pos is None else self._pos.copy()
            self._space = base.with_base(base.base.with_loss(self._loss, pos))
        return arrived, departed

    def advance(self) -> tuple[list[int], list[int]]:
        """Move to the next round; returns indices of nodes that arrived and departed."""
        self._t += 1
        return self._apply(self.schedule.events_at(self._t))

    def at(self, t: int) -> tuple[QuasiMetricSpace, np.ndarray]:
        if t < self._t:
            self._reset()
        while self._t < t:
            self.advance()
        return self._space, self._alive.copy()

    def iter(self, t0: int, t1: int) -> Iterator[tuple[int, QuasiMetricSpace, np.ndarray]]:
        self.at(t0)
        yield t0, self._space, self._alive.copy()
        for t in range(t0 + 1, t1 + 1):
            self.advance()
            yield t, self._space, self._alive.copy()

    @property
    def current(self) -> tuple[int, QuasiMetricSpace, np.ndarray]:
        return self._t, self._space, self._alive


# ---------------------------------------------------------------------------
# validation


@dataclass
class ScheduleReport:
    passed: bool
    budget_violations: list = field(default_factory=list)
    tail_violations: list = field(default_factory=list)
    metric_violations: list = field(default_factory=list)
    max_window_count: int = 0

    def summary(self) -> str:
        if self.passed:
            return "schedule ok"
        parts = []
        if self.budget_violations:
            node, start, end, cnt, cap = self.budget_violations[0]
            parts.append(f"node {node} window [{start},{end}] has {cnt} new neighbors > {cap:g}")
        if self.tail_violations:
            node, start, end, phi, frac, cap = self.tail_violations[0]
            parts.append(f"node {node} window [{start},{end}] phi={phi}: {frac:.3f} > {cap:.3f}")
        if self.metric_violations:
            parts.append(f"metric bounds broken at round {self.metric_violations[0][0]}")
        return "; ".join(parts)


def new_neighbor_counts(topology: TemporalTopology, horizon: int) -> np.ndarray:
    """``c[t, v]``: nodes entering ``N(v, eps)`` at round ``t`` through loss changes only.

    Only pairs alive in both rounds ``t - 1`` and ``t`` count, so arrivals and
    departures never contribute.
    """
    n = topology.n
    counts = np.zeros((horizon + 1, n), dtype=int)
    radii = topology.radii
    prev_space, prev_alive = topology.at(0)
    prev_nb = neighbor_matrix(prev_space, radii)
    for t in range(1, horizon + 1):
        topology.advance()
        _, space, alive = topology.current
        if space is prev_space:
            prev_alive = alive.copy()
            continue
        nb = neighbor_matrix(space, radii)
        persist = prev_alive & alive
        new = nb & ~prev_nb & persist[:, None] & persist[None, :]
        counts[t] = new.sum(axis=1)
        prev_space, prev_nb, prev_alive = space, nb, alive.copy()
    return counts


def phi_levels(max_count: int) -> list[int]:
    out, phi = [], 1
    while phi < max(max_count, 1):
        out.append(phi)
        phi *= 2
    return out or [1]


def _window_sums(x: np.ndarray, w: int) -> np.ndarray:
    """Sums over every length-``w`` window of rows ``1..T`` (a single clipped window if T < w)."""
    body = x[1:]
    T = body.shape[0]
    if T == 0:
        return np.zeros((0,) + x.shape[1:], dtype=x.dtype)
    w = min(w, T)
    c = np.concatenate([np.zeros((1,) + body.shape[1:], dtype=body.dtype), np.cumsum(body, axis=0)])
    return c[w:] - c[:-w]


def validate_schedule(schedule: AdversarySchedule, instance: Instance, phase_len: int | None = None,
                      metric_samples: int = 4, q_samples: Sequence[float] = (1.0, 2.0),
                      zeta_tol: float = 1e-6) -> ScheduleReport:
    """Check the edge-change budgets on every sliding window and re-check the metric bounds.

    Metricity and bounded independence are re-validated on a handful of
    evenly spaced rounds after geometry-changing events.
    """
    w = int(phase_len or schedule.window)
    horizon = schedule.horizon
    topo = TemporalTopology(instance, schedule)
    report = ScheduleReport(True)
    if horizon <= 0:
        return report
    counts = new_neighbor_counts(topo, horizon)
    w_eff = min(w, horizon)
    sums = _window_sums(counts, w)
    cap = schedule.tau * w_eff
    ids = instance.space.node_ids
    report.max_window_count = int(sums.max()) if sums.size else 0
    for s, v in zip(*np.nonzero(sums > cap + 1e-9)):
        report.budget_violations.append((ids[v], int(s) + 1, int(s) + w_eff, int(sums[s, v]), cap))
    for phi in phi_levels(int(counts.max())):
        allowed = schedule.a * phi ** (-schedule.k)
        fr = _window_sums((counts > phi).astype(int), w) / w_eff
        for s, v in zip(*np.nonzero(fr > allowed + 1e-12)):
            report.tail_violations.append((ids[v], int(s) + 1, int(s) + w_eff, phi, float(fr[s, v]), allowed))
    if schedule.has_geometry_changes:
        geo_rounds = sorted(t for t, evs in schedule.events.items()
                            if any(isinstance(e, (Retune, Move)) for e in evs) and t <= horizon)
        picks = sorted(set(geo_rounds[i] for i in np.linspace(0, len(geo_rounds) - 1,
                                                               min(metric_samples, len(geo_rounds))).astype(int)))
        base = instance.space
        for t in picks:
            space, alive = topo.at(t)
            sub = _restrict(space, alive)
            if sub.n >= 3 and compute_metricity(sub.base, zeta_max=max(16.0, base.zeta + 1)) > base.zeta + zeta_tol:
                report.metric_violations.append((t, "metricity"))
            if base.r_min > 0 and sub.n:
                rep = validate_bounded_independence(sub, q_samples)
                if not rep.passed:
                    report.metric_violations.append((t, "independence"))
    report.passed = not (report.budget_violations or report.tail_violations or report.metric_violations)
    return report


def _restrict(space: QuasiMetricSpace, alive: np.ndarray) -> QuasiMetricSpace:
    from .metric import PathLossMap

    idx = np.flatnonzero(alive)
    ids = tuple(space.node_ids[i] for i in idx)
    pos = None if space.base.positions is None else space.base.positions[idx]
    base = PathLossMap(ids, space.base.loss[np.ix_(idx, idx)], space.power, pos)
    return QuasiMetricSpace(base, space.zeta, space.r_min, space.lam, space.indep_const)


# ---------------------------------------------------------------------------
# generators


def gen_churn_schedule(nodes: int | Sequence[NodeId], rate: float, horizon: int, seed: int,
                       source: NodeId | None = None) -> AdversarySchedule:
    """Independent per-round arrivals and departures; every node starts present."""
    if not 0 <= rate <= 1:
        raise ValueError("rate must lie in [0, 1]")
    ids = list(range(nodes)) if isinstance(nodes, int) else list(nodes)
    rng = np.random.default_rng(seed)
    present = np.ones(len(ids), dtype=bool)
    protected = np.array([u == source for u in ids]) if source is not None else np.zeros(len(ids), dtype=bool)
    events: dict = {}
    for t in range(1, horizon + 1):
        r = rng.random(len(ids))
        arrive = ~present & (r < rate)
        depart = present & ~protected & (r < rate)
        evs = [Arrive(ids[i]) for i in np.flatnonzero(arrive)]
        evs += [Depart(ids[i]) for i in np.flatnonzero(depart)]
        if evs:
            events[t] = evs
        present ^= arrive | depart
    return AdversarySchedule(events, horizon=horizon, initial=None)


def gen_drift_schedule(instance: Instance, speed: float, horizon: int, tau: float, k: float,
                       seed: int, window: int | None = None, a: float = 1.0,
                       max_redraws: int = 8) -> AdversarySchedule:
    """Random-walk drift of every node, kept inside the initial bounding box.

    A round's moves are redrawn when they would break a trailing window
    budget; after ``max_redraws`` failures the round is skipped (no movement
    always satisfies the budgets).  More than half of the rounds skipped
    raises :class:`BudgetInfeasible`.
    """
    space = instance.space
    if space.base.positions is None:
        raise InvalidInstance("drift needs an instance with positions")
    if speed < 0:
        raise ValueError("speed must be non-negative")
    n = space.n
    w = int(window or max(1, math.ceil(32 * math.log2(max(n, 2)))))
    sched = AdversarySchedule({}, tau, k, w, a, horizon, None)
    if speed == 0 or horizon == 0:
        return sched
    rng = np.random.default_rng(seed)
    pos = np.array(space.base.positions, dtype=float)
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    radius = instance.radii.R_B
    w_eff = min(w, horizon)
    cap = tau * w_eff
    counts = np.zeros((horizon + 1, n), dtype=int)
    nb_prev = _euclid_nb(pos, radius)
    rejected = 0
    for t in range(1, horizon + 1):
        lo_t = max(1, t - w_eff + 1)
        trailing = counts[lo_t:t].sum(axis=0)
        accepted = None
        for _ in range(max_redraws):
            ang = rng.uniform(0, 2 * np.pi, n)
            step = rng.uniform(0, speed, n)
            cand = pos + np.column_stack([np.cos(ang), np.sin(ang)]) * step[:, None]
            cand = np.where(cand < lo, 2 * lo - cand, cand)
            cand = np.where(cand > hi, 2 * hi - cand, cand)
            cand = np.clip(cand, lo, hi)
            if _has_coincident(cand):
                continue
            nb = _euclid_nb(cand, radius)
            c = (nb & ~nb_prev).sum(axis=1)
            if np.any(trailing + c > cap):
                continue
            if not _tail_ok(counts[lo_t:t], c, w_eff, a, k):
                continue
            accepted = (cand, nb, c)
            break
        if accepted is None:
            rejected += 1
            continue
        pos, nb_prev, counts[t] = accepted
        sched.events[t] = [Move(space.node_ids[i], tuple(pos[i])) for i in range(n)]
    if rejected > 0.5 * horizon:
        raise BudgetInfeasible(f"{rejected} of {horizon} rounds could not respect the budgets")
    if rejected:
        log.info("drift schedule skipped %d rounds", rejected)
    return sched


def _euclid_nb(pos: np.ndarray, radius: float) -> np.ndarray:
    diff = pos[:, None, :] - pos[None, :, :]
    nb = np.sqrt(np.sum(diff * diff, axis=-1)) <= radius
    np.fill_diagonal(nb, False)
    return nb


def _has_coincident(pos: np.ndarray) -> bool:
    return len(np.unique(pos, axis=0)) < len(pos)


def _tail_ok(history: np.ndarray, current: np.ndarray, w: int, a: float, k: float) -> bool:
    rows = np.vstack([history, current[None, :]])
    top = int(rows.max()) if rows.size else 0
    for phi in phi_levels(top):
        if np.any((rows > phi).sum(axis=0) > a * phi ** (-k) * w + 1e-9):
            return False
    return True


# ---------------------------------------------------------------------------
# dynamic metrics


def dynamic_degree(topology: TemporalTopology, v: NodeId, rho: float, t0: int, t1: int) -> int:
    """Size of the union of in-balls ``D(v, rho R)`` over rounds ``t0..t1``."""
    if t1 < t0:
        raise ValueError("t1 must be >= t0")
    j = topology.instance.space.index(v)
    seen = np.zeros(topology.n, dtype=bool)
    R = topology.radii.R
    last_space = None
    col = None
    for _, space, alive in topology.iter(t0, t1):
        if space is not last_space:
            col = space.d[:, j] < rho * R
            last_space = space
        seen |= col & alive
    return int(seen.sum())


def dynamic_degrees(topology: TemporalTopology, rho: float, t0: int, t1: int) -> np.ndarray:
    """Vectorized :func:`dynamic_degree` for every node."""
    seen = np.zeros((topology.n, topology.n), dtype=bool)
    last_space = None
    vic = None
    for _, space, alive in topology.iter(t0, t1):
        if space is not last_space:
            vic = vicinity_matrix(space, topology.radii, rho)
            last_space = space
        seen |= vic & alive[:, None]
    return seen.sum(axis=0)


def vicinity_history(topology: TemporalTopology, rho: float, t0: int, t1: int) -> np.ndarray:
    """``V[t - t0, w, v]``: alive ``w`` lies in ``D_t(v, rho R)``.

    ``V[a:b].any(axis=0).sum(axis=0)`` gives the dynamic degree of every node
    over any sub-interval without replaying the schedule again.
    """
    out = np.zeros((t1 - t0 + 1, topology.n, topology.n), dtype=bool)
    last_space = None
    vic = None
    for t, space, alive in topology.iter(t0, t1):
        if space is not last_space:
            vic = vicinity_matrix(space, topology.radii, rho)
            last_space = space
        out[t - t0] = vic & alive[:, None]
    return out


def neighbor_history(topology: TemporalTopology, t0: int, t1: int) -> np.ndarray:
    """``H[t - t0, x, y]``: ``y`` in ``N_t(x, eps)`` with both alive."""
    out = np.zeros((t1 - t0 + 1, topology.n, topology.n), dtype=bool)
    last_space = None
    nb = None
    for t, space, alive in topology.iter(t0, t1):
        if space is not last_space:
            nb = neighbor_matrix(space, topology.radii)
            last_space = space
        out[t - t0] = nb & alive[:, None] & alive[None, :]
    return out


def stable_path_length(c: float, n: int) -> int:
    return int(math.ceil(c * math.log2(max(n, 2))))


def stable_distances_from(history: np.ndarray, s: int, L: int, t0: int = 0) -> np.ndarray:
    """Minimum stable-path time-length from node index ``s`` to every node.

    ``history`` is a neighbor history starting at round ``t0``.  Each hop uses
    an interval ``[e - L, e]`` on which the link holds throughout (shrinking
    an interval to length ``L`` never breaks a constraint), and consecutive
    hop ends are at least ``L`` apart.  ``G[y]`` tracks, for hops ending at
    the current round, the latest possible first-hop end; the time-length of
    a path is ``e_last - e_first + L``.
    """
    T, n, _ = history.shape
    best = np.full(n, np.inf)
    best[s] = 0.0
    neg = -np.inf
    M = np.full((T, n), neg)  # prefix max of G over ends <= row
    run = np.zeros((n, n), dtype=int)
    for r in range(T):
        run = np.where(history[r], run + 1, 0)
        G = np.full(n, neg)
        if r >= L:
            feas = run >= L + 1
            if feas.any():
                e = r + t0
                base = M[r - L].copy()
                base[s] = max(base[s], e)
                cand = np.where(feas, base[:, None], neg)
                G = cand.max(axis=0)
                ok = G > neg
                best[ok] = np.minimum(best[ok], e - G[ok] + L)
        M[r] = G if r == 0 else np.maximum(M[r - 1], G)
    best[s] = 0.0
    return best


def stable_distance(topology: TemporalTopology, c: float, s: NodeId, v: NodeId, n: int,
                    t_start: int = 1, t_end: int | None = None) -> float:
    """Stable ``s``-``v`` distance with ``L = ceil(c log2 n)``; ``inf`` if no stable path exists."""
    if c <= 0:
        raise ValueError("c must be positive")
    if s == v:
        return 0.0
    t_end = topology.schedule.horizon if t_end is None else t_end
    hist = neighbor_history(topology, t_start, t_end)
    L = stable_path_length(c, n)
    space = topology.instance.space
    return float(stable_distances_from(hist, space.index(s), L, t_start)[space.index(v)])


@dataclass
class HopMetrics:
    dist: np.ndarray
    diameter: float
    strongly_connected: bool
    node_ids: tuple

    def distance(self, u: NodeId, v: NodeId) -> float:
        return float(self.dist[self.node_ids.index(u), self.node_ids.index(v)])


def hop_metrics(space: QuasiMetricSpace, radii, alive: np.ndarray | None = None,
                epsilon: float | None = None) -> HopMetrics:
    """All-pairs directed BFS over the communication graph ``d(u, v) <= (1 - eps) R``."""
    nb = neighbor_matrix(space, radii, epsilon, alive)
    dist = hop_distances(nb)
    if alive is not None:
        dist = np.where(alive[:, None] & alive[None, :], dist, np.inf)
        np.fill_diagonal(dist, 0.0)
        live = np.flatnonzero(alive)
        sub = dist[np.ix_(live, live)]
    else:
        sub = dist
    finite = sub[np.isfinite(sub)]
    diam = float(finite.max()) if finite.size else 0.0
    return HopMetrics(dist, diam, bool(np.all(np.isfinite(sub))), space.node_ids)
