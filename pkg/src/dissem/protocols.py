"""Try&Adjust and the dissemination protocols built on it.

Protocols keep their per-node state in flat arrays (:class:`NetworkState`)
indexed by node position and are advanced one round at a time by the
engine.  Each round consumes one uniform draw per node per slot; a node
transmits in a slot when its draw falls below its probability.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping

import numpy as np

from .errors import ConfigInvalid, NotSymmetric
from .metric import NodeId, QuasiMetricSpace, RadiusSet, covers, is_packing
from .models import hop_distances
from .sensing import BUSY, Channel, SlotResult

log = logging.getLogger(__name__)

UNDECIDED, DOMINATOR, DOMINATED = 0, 1, 2
ROLE_NAMES = {UNDECIDED: "undecided", DOMINATOR: "dominator", DOMINATED: "dominated"}

PROTOCOLS = ("try_adjust", "local_bcast", "bcast", "bcast_star", "spontaneous", "ntd_free")
GLOBAL_PROTOCOLS = ("bcast", "bcast_star", "spontaneous", "ntd_free")


# ---------------------------------------------------------------------------
# single-node Try&Adjust


@dataclass(frozen=True)
class NodeProtocolState:
    p: float
    passiveness: float = 1.0
    has_message: bool = True
    stopped: bool = False
    role: str = "undecided"
    awake: bool = True
    floor_enabled: bool = True

    def floor(self, n: int) -> float:
        return n ** (-self.passiveness) if self.floor_enabled else 0.0


def try_adjust_init(n: int, beta: float, p_init: float | None = None) -> NodeProtocolState:
    """Fresh state; an explicit ``p_init`` selects the variant without a lower clamp."""
    if n < 1 or beta < 1:
        raise ValueError("need n >= 1 and beta >= 1")
    if p_init is None:
        return NodeProtocolState(p=0.5 * n ** (-beta), passiveness=beta)
    if not 0 < p_init <= 0.5:
        raise ValueError("p_init must lie in (0, 1/2]")
    return NodeProtocolState(p=p_init, passiveness=beta, floor_enabled=False)


def try_adjust_step(state: NodeProtocolState, cd: str, n: int) -> NodeProtocolState:
    if state.stopped:
        return state
    if cd == BUSY:
        p = max(state.p / 2, state.floor(n))
    else:
        p = min(2 * state.p, 0.5)
    return replace(state, p=p)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class PhaseParams:
    gamma: float = 32.0
    rho: float = 4.0
    eta_hat: float = 16.0
    sigma: float = 0.1
    i_hat: float | None = None

    def length(self, n: int) -> int:
        return max(1, math.ceil(self.gamma * math.log2(max(n, 2))))


def default_i_hat(rho: float, zeta: float, i_c: float, i_cd: float, i_ack: float) -> float:
    """Interference threshold for good rounds; infinite terms are skipped."""
    terms = [(1 - 1 / rho) ** zeta * i_c, i_cd, i_ack]
    finite = [x for x in terms if math.isfinite(x)]
    return min(finite) / 10 if finite else math.inf


@dataclass
class ProtocolConfig:
    name: str = "local_bcast"
    beta: float | None = None
    p0: float = 0.1
    p_init: float | None = None
    source: Any = None
    phase: PhaseParams = field(default_factory=PhaseParams)

    def __post_init__(self) -> None:
        if self.name not in PROTOCOLS:
            raise ConfigInvalid(f"unknown protocol {self.name!r}", "protocol.name")
        if isinstance(self.phase, Mapping):
            self.phase = PhaseParams(**self.phase)
        if self.p_init is not None and not 0 < self.p_init <= 0.5:
            raise ConfigInvalid("p_init must lie in (0, 1/2]", "protocol.p_init")
        if not 0 < self.p0 <= 0.5:
            raise ConfigInvalid("p0 must lie in (0, 1/2]", "protocol.p0")
        if self.name == "bcast_star" and self.beta not in (None, 1, 1.0):
            raise ConfigInvalid("bcast_star runs with beta = 1", "protocol.beta")

    @property
    def effective_beta(self) -> float:
        if self.beta is not None:
            return float(self.beta)
        if self.name == "bcast":
            return self.phase.gamma + 5
        return 1.0

    def to_dict(self) -> dict:
        return {"name": self.name, "beta": self.effective_beta, "p0": self.p0, "p_init": self.p_init,
                "source": self.source, "phase": self.phase.__dict__.copy()}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ProtocolConfig":
        d = dict(data)
        if "protocol" in d and "name" not in d:
            d["name"] = d.pop("protocol")
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


# ---------------------------------------------------------------------------
# network state


@dataclass(eq=False)
class NetworkState:
    n: int
    p: np.ndarray
    floor: np.ndarray
    alive: np.ndarray
    running: np.ndarray
    has_message: np.ndarray
    stopped: np.ndarray
    role: np.ndarray
    dominated_by: np.ndarray
    first_rx: np.ndarray
    first_mass: np.ndarray
    stop_round: np.ndarray
    stage2_done: np.ndarray
    born: np.ndarray

    @classmethod
    def empty(cls, n: int) -> "NetworkState":
        return cls(n=n, p=np.zeros(n), floor=np.zeros(n), alive=np.zeros(n, dtype=bool),
                   running=np.zeros(n, dtype=bool), has_message=np.zeros(n, dtype=bool),
                   stopped=np.zeros(n, dtype=bool), role=np.zeros(n, dtype=np.int8),
                   dominated_by=np.full(n, -1), first_rx=np.full(n, -1),
                   first_mass=np.full(n, -1), stop_round=np.full(n, -1),
                   stage2_done=np.zeros(n, dtype=bool), born=np.zeros(n, dtype=int))

    def clear(self, i: int | np.ndarray) -> None:
        for arr, val in ((self.p, 0.0), (self.floor, 0.0), (self.running, False),
                         (self.has_message, False), (self.stopped, False), (self.role, UNDECIDED),
                         (self.dominated_by, -1), (self.first_rx, -1), (self.first_mass, -1),
                         (self.stop_round, -1), (self.stage2_done, False)):
            arr[i] = val

    def node_state(self, i: int, beta: float) -> NodeProtocolState:
        return NodeProtocolState(
            p=float(self.p[i]), passiveness=beta, has_message=bool(self.has_message[i]),
            stopped=bool(self.stopped[i]), role=ROLE_NAMES[int(self.role[i])],
            awake=bool(self.running[i] or self.stopped[i]), floor_enabled=bool(self.floor[i] > 0))


@dataclass(eq=False)
class RoundOutcome:
    slots: list
    stopped: np.ndarray
    restarted: np.ndarray
    woke: np.ndarray


Draw = Callable[[int], np.ndarray]


def _step_probabilities(st: NetworkState, busy: np.ndarray, mask: np.ndarray) -> None:
    p = st.p[mask]
    b = busy[mask]
    st.p[mask] = np.where(b, np.maximum(p / 2, st.floor[mask]), np.minimum(2 * p, 0.5))


class Protocol:
    """Base class; subclasses implement :meth:`step` for one round."""

    name = "base"
    problem = "local"

    def __init__(self, cfg: ProtocolConfig, n: int, n_bound: int, epsilon: float,
                 source: int | None = None):
        self.cfg = cfg
        self.n_bound = max(int(n_bound), 1)
        self.epsilon = epsilon
        self.beta = cfg.effective_beta
        self.source = source
        self.state = NetworkState.empty(n)

    # probability bookkeeping ------------------------------------------------
    @property
    def p_start(self) -> float:
        return 0.5 * self.n_bound ** (-self.beta)

    @property
    def p_floor(self) -> float:
        return self.n_bound ** (-self.beta)

    def start(self, i: int | np.ndarray) -> None:
        st = self.state
        st.running[i] = True
        st.stopped[i] = False
        st.p[i] = self.p_start
        st.floor[i] = self.p_floor

    def stop(self, mask: np.ndarray, t: int) -> None:
        st = self.state
        st.running[mask] = False
        st.stopped[mask] = True
        st.p[mask] = 0.0
        st.stop_round[mask & (st.stop_round < 0)] = t

    def receive(self, mask: np.ndarray, t: int) -> np.ndarray:
        """Mark message receipt; returns the nodes that were uninformed before."""
        st = self.state
        new = mask & st.alive & ~st.has_message
        st.has_message[new] = True
        st.first_rx[new] = t
        return new

    def note_mass(self, res: SlotResult, t: int) -> None:
        st = self.state
        idx = res.realization.transmitters[res.mass]
        fresh = idx[st.first_mass[idx] < 0]
        st.first_mass[fresh] = t

    # lifecycle --------------------------------------------------------------
    def arrive(self, i: int, t: int) -> None:
        st = self.state
        st.clear(i)
        st.alive[i] = True
        st.born[i] = t
        self.on_arrive(i, t)

    def depart(self, i: int) -> None:
        self.state.clear(i)
        self.state.alive[i] = False

    def on_arrive(self, i: int, t: int) -> None:
        pass

    def transmitting_probability(self) -> np.ndarray:
        """Per-node probability of transmitting in the Try&Adjust slot of the next round."""
        st = self.state
        return np.where(st.alive & st.running, st.p, 0.0)

    def step(self, t: int, ch: Channel, draw: Draw, acting: np.ndarray | None = None) -> RoundOutcome:
        raise NotImplementedError

    def complete(self) -> bool:
        st = self.state
        if self.problem == "global":
            return bool(np.all(st.has_message[st.alive]))
        return bool(np.all(st.stopped[st.alive] | (st.first_mass[st.alive] >= 0)))


class TryAdjust(Protocol):
    """Bare contention balancing: every alive node runs forever from ``p_init``."""

    name = "try_adjust"

    def start(self, i):
        super().start(i)
        if self.cfg.p_init is not None:
            self.state.p[i] = self.cfg.p_init
            self.state.floor[i] = 0.0

    def on_arrive(self, i, t):
        self.state.has_message[i] = True
        self.start(i)

    def step(self, t, ch, draw, acting=None):
        st = self.state
        run = st.alive & st.running
        if acting is not None:
            run &= acting
        tx = run & (draw(1) < st.p)
        res = ch.slot(tx, None, None, t, 1)
        self.note_mass(res, t)
        _step_probabilities(st, res.outcomes.busy, run)
        z = np.zeros(st.n, dtype=bool)
        return RoundOutcome([res], z, z.copy(), z.copy())

    def complete(self) -> bool:
        return False


class LocalBcast(TryAdjust):
    """Try&Adjust(beta) that stops on a positive ACK."""

    name = "local_bcast"

    complete = Protocol.complete

    def step(self, t, ch, draw, acting=None):
        st = self.state
        run = st.alive & st.running
        if acting is not None:
            run &= acting
        tx = run & (draw(1) < st.p)
        res = ch.slot(tx, None, None, t, 1)
        self.note_mass(res, t)
        stop = np.zeros(st.n, dtype=bool)
        stop[res.outcomes.transmitters[res.outcomes.ack]] = True
        _step_probabilities(st, res.outcomes.busy, run & ~stop)
        self.stop(stop, t)
        z = np.zeros(st.n, dtype=bool)
        return RoundOutcome([res], stop, z, z.copy())


class NtdFree(Protocol):
    """Flooding without NTD: informed nodes run Try&Adjust and stop once ACK confirms delivery."""

    name = "ntd_free"
    problem = "global"

    def on_arrive(self, i, t):
        if i == self.source:
            self.receive(np.eye(1, self.state.n, i, dtype=bool)[0], t)
            self.start(i)

    def step(self, t, ch, draw, acting=None):
        st = self.state
        run = st.alive & st.running
        tx = run & (draw(1) < st.p)
        res = ch.slot(tx, None, None, t, 1)
        self.note_mass(res, t)
        stop = np.zeros(st.n, dtype=bool)
        stop[res.outcomes.transmitters[res.outcomes.ack]] = True
        _step_probabilities(st, res.outcomes.busy, run & ~stop)
        self.stop(stop, t)
        woke = self.receive(res.realization.received, t)
        self.start(woke)
        return RoundOutcome([res], stop, np.zeros(st.n, dtype=bool), woke)


class Bcast(Protocol):
    """Two-slot broadcast: Try&Adjust in slot 1, ACK echoes in slot 2.

    An ACK in slot 1 (at half precision) makes the node echo in slot 2; the
    echo lets very close receivers notice via NTD that their neighborhood is
    covered.  Both events restart Try&Adjust.
    """

    name = "bcast"
    problem = "global"
    terminal = False

    def on_arrive(self, i, t):
        if i == self.source:
            self.receive(np.eye(1, self.state.n, i, dtype=bool)[0], t)
            self.start(i)

    def _events(self, mask: np.ndarray, t: int) -> None:
        if self.terminal:
            self.stop(mask, t)
        else:
            st = self.state
            st.p[mask] = self.p_start

    def step(self, t, ch, draw, acting=None):
        st = self.state
        half = self.epsilon / 2
        run = st.alive & st.running
        tx1 = run & (draw(1) < st.p)
        r1 = ch.slot(tx1, half, None, t, 1)
        self.note_mass(r1, t)
        rx1 = r1.realization.received & st.alive
        ackers = np.zeros(st.n, dtype=bool)
        ackers[r1.outcomes.transmitters[r1.outcomes.ack]] = True
        _step_probabilities(st, r1.outcomes.busy, run)
        woke = self.receive(rx1, t)
        self.start(woke)

        r2 = ch.slot(ackers, half, self.epsilon, t, 2)
        self.note_mass(r2, t)
        woke2 = self.receive(r2.realization.received & st.alive, t)
        self.start(woke2)
        ntd = rx1 & r2.outcomes.ntd
        events = ackers | ntd
        self._events(events, t)
        stopped = events if self.terminal else np.zeros(st.n, dtype=bool)
        restarted = np.zeros(st.n, dtype=bool) if self.terminal else events
        return RoundOutcome([r1, r2], stopped, restarted, woke | woke2)


class BcastStar(Bcast):
    """Static variant: ACK and NTD events end participation (beta = 1)."""

    name = "bcast_star"
    terminal = True


class Spontaneous(Protocol):
    """Dominator election plus a dominator-only flood, run side by side.

    Slot 1 and 2 form the election: a node whose Try&Adjust transmission is
    acknowledged becomes a dominator and echoes; an undecided receiver that
    hears a very close echo becomes dominated by it.  Slot 3 carries the
    message: informed dominators transmit with constant probability until
    their own ACK.  The source transmits in slot 3 of the first round.
    """

    name = "spontaneous"
    problem = "global"

    def on_arrive(self, i, t):
        self.start(i)
        if self.cfg.p_init is not None:
            self.state.p[i] = self.cfg.p_init
            self.state.floor[i] = 0.0
        if i == self.source:
            self.receive(np.eye(1, self.state.n, i, dtype=bool)[0], t)

    def transmitting_probability(self) -> np.ndarray:
        st = self.state
        return np.where(st.alive & (st.role == UNDECIDED), st.p, 0.0)

    def step(self, t, ch, draw, acting=None):
        st = self.state
        half = self.epsilon / 2
        und = st.alive & (st.role == UNDECIDED)
        tx1 = und & (draw(1) < st.p)
        r1 = ch.slot(tx1, half, None, t, 1)
        self.note_mass(r1, t)
        ackers = np.zeros(st.n, dtype=bool)
        ackers[r1.outcomes.transmitters[r1.outcomes.ack]] = True
        _step_probabilities(st, r1.outcomes.busy, und & ~ackers)
        rx1 = r1.realization.received & st.alive

        r2 = ch.slot(ackers, half, half, t, 2)
        # an ACK outranks a simultaneous NTD
        dominated = rx1 & r2.outcomes.ntd & (st.role == UNDECIDED) & ~ackers
        st.role[ackers] = DOMINATOR
        st.role[dominated] = DOMINATED
        st.dominated_by[dominated] = r2.outcomes.ntd_sender[dominated]
        decided = ackers | dominated
        st.running[decided] = False
        st.p[decided] = 0.0
        st.stop_round[decided & (st.stop_round < 0)] = t

        senders = st.alive & (st.role == DOMINATOR) & st.has_message & ~st.stage2_done
        tx3 = senders & (draw(3) < self.cfg.p0)
        if t == 1 and self.source is not None and st.alive[self.source]:
            tx3[self.source] = True
        r3 = ch.slot(tx3, half, None, t, 3)
        self.note_mass(r3, t)
        done = np.zeros(st.n, dtype=bool)
        done[r3.outcomes.transmitters[r3.outcomes.ack]] = True
        st.stage2_done |= done & (st.role == DOMINATOR)
        woke = self.receive(r3.realization.received, t)
        return RoundOutcome([r1, r2, r3], decided, np.zeros(st.n, dtype=bool), woke)

    def election_done(self) -> bool:
        st = self.state
        return bool(np.all(st.role[st.alive] != UNDECIDED))

    def complete(self) -> bool:
        # the dominating set is part of the output, so the election must finish too
        return Protocol.complete(self) and self.election_done()


_CLASSES = {c.name: c for c in (TryAdjust, LocalBcast, NtdFree, Bcast, BcastStar, Spontaneous)}


def make_protocol(cfg: ProtocolConfig, n: int, n_bound: int, epsilon: float,
                  source: int | None = None) -> Protocol:
    return _CLASSES[cfg.name](cfg, n, n_bound, epsilon, source)


# ---------------------------------------------------------------------------
# dominating-set validation


@dataclass
class DominatingSetReport:
    dominated: bool
    packing: bool
    kappa: float
    max_density: int
    density_ok: bool
    h_diameter: float
    g_diameter: float
    h_ok: bool
    undominated: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.dominated and self.packing and self.density_ok and self.h_ok


def dominating_set_validate(ds: Iterable[NodeId], dominated_map: Mapping[NodeId, NodeId],
                            space: QuasiMetricSpace, radii: RadiusSet,
                            symmetry_tol: float = 1e-9) -> DominatingSetReport:
    """Check domination radius, packing radius, density and the dominator graph diameter."""
    if not space.is_symmetric(symmetry_tol):
        raise NotSymmetric("dominating-set checks need a symmetric distance")
    eps, R = radii.epsilon, radii.R
    ds = list(ds)
    idx = np.array([space.index(u) for u in ds], dtype=int)
    dom_r = eps * R / 4
    everyone = list(space.node_ids)
    undominated = []
    if idx.size:
        near = space.d[idx] <= dom_r + 1e-9
        count = near.sum(axis=0)
        for j in np.flatnonzero(count == 0):
            undominated.append(space.node_ids[j])
        max_density = int(count.max())
    else:
        undominated = everyone
        max_density = 0
    for v, u in dominated_map.items():
        if space.dist(u, v) > dom_r + 1e-9 and v not in undominated:
            undominated.append(v)
    packing = is_packing(space, ds, eps * R / 8)
    kappa = space.indep_const * 2.0 ** space.lam
    g = space.d <= (1 - eps) * R
    np.fill_diagonal(g, False)
    g_diam = _diameter(hop_distances(g))
    if idx.size:
        h = space.d[np.ix_(idx, idx)] <= (1 - eps / 2) * R
        np.fill_diagonal(h, False)
        h_diam = _diameter(hop_distances(h))
    else:
        h_diam = math.inf
    return DominatingSetReport(
        dominated=not undominated and covers(space, ds, everyone, dom_r),
        packing=packing, kappa=kappa, max_density=max_density,
        density_ok=max_density <= kappa + 1e-9, h_diameter=h_diam, g_diameter=g_diam,
        h_ok=h_diam <= g_diam, undominated=undominated)


def _diameter(hops: np.ndarray) -> float:
    if hops.size == 0:
        return 0.0
    if not np.all(np.isfinite(hops)):
        return math.inf
    return float(hops.max())
