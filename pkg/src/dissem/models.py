"""Reception rules.

Every model shares one core guarantee: a transmitter ``u`` whose exclusion
ball ``D(u, rho_c R)`` holds no other transmitter and whose sensed
interference is at most ``I_c`` reaches all of its neighbors.  What happens
to other transmissions is decided by an adversary policy, which may fall back
on the model's own physical rule (SINR formula or graph rule).

All heavy lifting is done on index arrays; node ids only appear at the API
boundary.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .errors import ConfigInvalid, MissingScript, ModelMismatch, NotATransmitter, UnknownKind
from .metric import NodeId, QuasiMetricSpace, RadiusSet

log = logging.getLogger(__name__)

KINDS = ("SINR", "UDG", "QUDG", "PROTOCOL", "BIG", "KHOP")
GRAPH_KINDS = ("UDG", "QUDG", "PROTOCOL", "BIG", "KHOP")
POLICIES = ("pessimistic", "optimistic", "scripted")


# ---------------------------------------------------------------------------
# neighborhoods, interference, contention


def neighbor_matrix(space: QuasiMetricSpace, radii: RadiusSet, precision: float | None = None,
                    alive: np.ndarray | None = None) -> np.ndarray:
    """``nb[u, v]`` is true iff ``v`` is in ``N(u, precision)`` (directed, ``u != v``)."""
    nb = space.d <= radii.comm_radius(precision)
    np.fill_diagonal(nb, False)
    if alive is not None:
        nb &= alive[:, None] & alive[None, :]
    return nb


def neighbors(space: QuasiMetricSpace, radii: RadiusSet, u: NodeId, precision: float) -> frozenset:
    if not 0 < precision < 1:
        raise ValueError("precision must lie in (0, 1)")
    i = space.index(u)
    row = space.d[i] <= (1 - precision) * radii.R
    row[i] = False
    return frozenset(space.node_ids[j] for j in np.flatnonzero(row))


def _mask(space: QuasiMetricSpace, nodes: Iterable[NodeId]) -> np.ndarray:
    m = np.zeros(space.n, dtype=bool)
    for u in nodes:
        m[space.index(u)] = True
    return m


def interference_vector(space: QuasiMetricSpace, tx: np.ndarray) -> np.ndarray:
    """Interference at every node from the transmitter mask ``tx`` (own signal excluded)."""
    idx = np.flatnonzero(tx)
    if idx.size == 0:
        return np.zeros(space.n)
    return space.base.signal[idx].sum(axis=0)


def interference_at(space: QuasiMetricSpace, S: Iterable[NodeId], v: NodeId) -> float:
    j = space.index(v)
    total = 0.0
    for w in S:
        i = space.index(w)
        if i != j:
            total += float(space.base.signal[i, j])
    return total


def close_ball_matrix(space: QuasiMetricSpace, radii: RadiusSet) -> np.ndarray:
    """``M[w, v]`` true iff ``w`` lies in ``B(v, R/2)``."""
    r = radii.R / 2
    return np.maximum(space.d, space.d.T) < r


def vicinity_matrix(space: QuasiMetricSpace, radii: RadiusSet, rho: float) -> np.ndarray:
    """``M[w, v]`` true iff ``w`` lies in the in-ball ``D(v, rho R)``."""
    return space.d < rho * radii.R


def contention_vector(space: QuasiMetricSpace, radii: RadiusSet, p: np.ndarray,
                      kind: str = "close", rho: float = 1.0) -> np.ndarray:
    if kind == "close":
        m = close_ball_matrix(space, radii)
    elif kind == "vicinity":
        m = vicinity_matrix(space, radii, rho)
    else:
        raise ValueError(f"unknown contention kind {kind!r}")
    return p @ m


def contention(space: QuasiMetricSpace, radii: RadiusSet, probs: Mapping[NodeId, float], v: NodeId,
               kind: str = "close", rho: float = 1.0) -> float:
    """Sum of transmission probabilities over ``B(v, R/2)`` or ``D(v, rho R)``."""
    p = np.zeros(space.n)
    for u, q in probs.items():
        p[space.index(u)] = q
    return float(contention_vector(space, radii, p, kind, rho)[space.index(v)])


def expected_interference_vector(space: QuasiMetricSpace, radii: RadiusSet, p: np.ndarray,
                                 rho: float) -> np.ndarray:
    outside = ~vicinity_matrix(space, radii, rho)
    return p @ (space.base.signal * outside)


def expected_interference(space: QuasiMetricSpace, radii: RadiusSet, probs: Mapping[NodeId, float],
                          v: NodeId, rho: float) -> float:
    """``sum p(w) P / f(w, v)`` over ``w`` outside ``D(v, rho R)``."""
    if rho < 1:
        raise ValueError("rho must be >= 1")
    j = space.index(v)
    total = 0.0
    for w, q in probs.items():
        i = space.index(w)
        if i != j and not space.d[i, j] < rho * radii.R:
            total += q * float(space.base.signal[i, j])
    return total


# ---------------------------------------------------------------------------
# configuration


def derive_succclear_params(kind: str, *, epsilon: float, R: float = 1.0, zeta: float = 2.0,
                            sinr_threshold: float = 1.0, noise: float = 1.0,
                            R_prime: float | None = None, khop: int = 1) -> tuple[float, float]:
    """``(rho_c, I_c)`` instantiating the clear-channel guarantee for one model."""
    kind = kind.upper()
    if kind == "SINR":
        i_c = min(sinr_threshold, (1 - epsilon) ** (-zeta) - 1) * noise / 2**zeta
        return 0.0, i_c
    if kind in ("UDG", "BIG"):
        return 2.0, math.inf
    if kind in ("QUDG", "PROTOCOL"):
        rp = R if R_prime is None else R_prime
        return (R + rp) / R, math.inf
    if kind == "KHOP":
        # an interferer k hops from a neighbor is at most (k + 1 - eps) R away
        return float(khop + 1), math.inf
    raise UnknownKind(kind)


@dataclass
class ReceptionModelConfig:
    kind: str = "SINR"
    sinr_threshold: float = 1.0
    noise: float = 1.0
    R_prime: float | None = None
    khop: int = 1
    adversary_policy: str = "pessimistic"
    qudg_edges: list = field(default_factory=list)
    adversary_script: list = field(default_factory=list)
    rho_c: float | None = None
    I_c: float | None = None

    def __post_init__(self) -> None:
        self.kind = str(self.kind).upper()
        if self.kind not in KINDS:
            raise UnknownKind(self.kind)
        if self.adversary_policy not in POLICIES:
            raise ConfigInvalid(f"unknown policy {self.adversary_policy!r}", "model.adversary_policy")
        if self.kind == "SINR":
            if self.sinr_threshold < 1:
                raise ConfigInvalid("sinr_threshold must be >= 1", "model.sinr_threshold")
            if not self.noise > 0:
                raise ConfigInvalid("noise must be positive", "model.noise")
        if self.khop < 1:
            raise ConfigInvalid("khop must be >= 1", "model.khop")

    def succclear(self, precision: float, R: float, zeta: float) -> tuple[float, float]:
        rho_c, i_c = derive_succclear_params(
            self.kind, epsilon=precision, R=R, zeta=zeta, sinr_threshold=self.sinr_threshold,
            noise=self.noise, R_prime=self.R_prime, khop=self.khop)
        if self.rho_c is not None:
            rho_c = self.rho_c
        if self.I_c is not None:
            i_c = self.I_c
        return rho_c, i_c

    def check_consistency(self, space: QuasiMetricSpace, radii: RadiusSet) -> None:
        if self.kind == "SINR":
            r = (space.power / (self.sinr_threshold * self.noise)) ** (1 / space.zeta)
            if abs(r - radii.R) > 1e-9 * max(1.0, radii.R):
                raise ConfigInvalid(f"R={radii.R} but the SINR parameters give {r}", "model")
        if self.kind in ("QUDG", "PROTOCOL") and self.R_prime is not None and self.R_prime < radii.R:
            raise ConfigInvalid("R_prime must be >= R", "model.R_prime")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "sinr_threshold": self.sinr_threshold, "noise": self.noise,
            "R_prime": self.R_prime, "khop": self.khop, "adversary_policy": self.adversary_policy,
            "qudg_edges": [list(e) for e in self.qudg_edges],
            "adversary_script": list(self.adversary_script),
            "rho_c": self.rho_c, "I_c": self.I_c,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ReceptionModelConfig":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)


# ---------------------------------------------------------------------------
# realizations


@dataclass(eq=False)
class RoundRealization:
    """Outcome of one slot.

    ``recv[i, v]`` is true when node index ``v`` received the message of
    ``transmitters[i]``.  ``interference[v]`` is the aggregate signal at ``v``
    from all transmitters other than ``v`` itself.
    """

    node_ids: tuple
    transmitters: np.ndarray
    recv: np.ndarray
    interference: np.ndarray
    guaranteed: np.ndarray
    precision: float

    @property
    def received(self) -> np.ndarray:
        return self.recv.any(axis=0)

    @property
    def deliveries(self) -> set:
        rows, cols = np.nonzero(self.recv)
        return {(self.node_ids[self.transmitters[r]], self.node_ids[c]) for r, c in zip(rows, cols)}

    @property
    def transmitter_ids(self) -> frozenset:
        return frozenset(self.node_ids[i] for i in self.transmitters)

    def interference_at(self, v: NodeId) -> float:
        return float(self.interference[self.node_ids.index(v)])

    def row_of(self, u_index: int) -> int:
        hits = np.flatnonzero(self.transmitters == u_index)
        if hits.size == 0:
            raise NotATransmitter(self.node_ids[u_index])
        return int(hits[0])

    def sender_index(self) -> np.ndarray:
        """Index of a sender heard by each node (the first one), ``-1`` if none."""
        out = np.full(self.recv.shape[1], -1)
        if self.transmitters.size:
            got = self.recv.any(axis=0)
            out[got] = self.transmitters[np.argmax(self.recv[:, got], axis=0)]
        return out


def _tx_mask(space: QuasiMetricSpace, S: Any) -> np.ndarray:
    if isinstance(S, np.ndarray) and S.dtype == bool:
        return S
    return _mask(space, S)


def succ_clear_vector(space: QuasiMetricSpace, cfg: ReceptionModelConfig, radii: RadiusSet,
                      tx: np.ndarray, precision: float | None = None,
                      alive: np.ndarray | None = None) -> np.ndarray:
    """Guarantee flag for every transmitter index in ``tx`` (ordered as ``np.flatnonzero``)."""
    idx = np.flatnonzero(tx)
    if idx.size == 0:
        return np.zeros(0, dtype=bool)
    prec = radii.epsilon if precision is None else precision
    rho_c, i_c = cfg.succclear(prec, radii.R, space.zeta)
    interf = interference_vector(space, tx)[idx]
    ok = interf <= i_c
    if rho_c > 0:
        close = space.d[np.ix_(idx, idx)] < rho_c * radii.R
        np.fill_diagonal(close, False)
        ok &= ~close.any(axis=0)
    # half duplex: a neighbor that is itself transmitting cannot receive
    nb = neighbor_matrix(space, radii, prec, alive)[idx]
    ok &= ~(nb & tx[None, :]).any(axis=1)
    return ok


def succ_clear_guarantee(space: QuasiMetricSpace, cfg: ReceptionModelConfig, radii: RadiusSet,
                         S: Iterable[NodeId], u: NodeId, precision: float | None = None) -> str:
    tx = _mask(space, S)
    i = space.index(u)
    if not tx[i]:
        raise NotATransmitter(u)
    flags = succ_clear_vector(space, cfg, radii, tx, precision)
    row = int(np.searchsorted(np.flatnonzero(tx), i))
    return "guaranteed" if flags[row] else "adversarial"


# ---------------------------------------------------------------------------
# full physical rules


def sinr_reception(space: QuasiMetricSpace, cfg: ReceptionModelConfig, tx: np.ndarray,
                   alive: np.ndarray | None = None) -> np.ndarray:
    idx = np.flatnonzero(tx)
    sig = space.base.signal[idx]
    total = sig.sum(axis=0)
    recv = sig > cfg.sinr_threshold * (total[None, :] - sig + cfg.noise)
    recv[:, tx] = False
    if alive is not None:
        recv[:, ~alive] = False
    return recv


def resolve_round_sinr(space: QuasiMetricSpace, cfg: ReceptionModelConfig, radii: RadiusSet,
                       S: Any, alive: np.ndarray | None = None) -> RoundRealization:
    if cfg.kind != "SINR":
        raise ModelMismatch(f"SINR resolver called with {cfg.kind}")
    tx = _tx_mask(space, S)
    idx = np.flatnonzero(tx)
    return RoundRealization(space.node_ids, idx, sinr_reception(space, cfg, tx, alive),
                            interference_vector(space, tx), np.zeros(idx.size, dtype=bool),
                            radii.epsilon)


def hop_distances(adj: np.ndarray) -> np.ndarray:
    """Directed BFS hop counts (``inf`` when unreachable)."""
    return shortest_path(csr_matrix(adj.astype(np.int8)), method="D", directed=True, unweighted=True)


def _qudg_edge_matrix(space: QuasiMetricSpace, cfg: ReceptionModelConfig, R: float) -> np.ndarray:
    rp = R if cfg.R_prime is None else cfg.R_prime
    edge = space.d <= R
    grey = np.zeros_like(edge)
    for u, v in cfg.qudg_edges:
        if u in space.base._index and v in space.base._index:
            i, j = space.index(u), space.index(v)
            grey[i, j] = grey[j, i] = True
    edge |= grey & (space.d <= rp)
    np.fill_diagonal(edge, False)
    return edge


def graph_rule_matrices(space: QuasiMetricSpace, cfg: ReceptionModelConfig,
                        radii: RadiusSet) -> tuple[np.ndarray, np.ndarray]:
    """``(edge, interferes)``: ``edge[u, v]`` allows ``v`` to hear ``u``;
    ``interferes[w, v]`` means a transmitting ``w`` blocks every other sender at ``v``."""
    R = radii.R
    kind = cfg.kind
    if kind in ("UDG", "BIG"):
        edge = space.d <= R
        block = edge.copy()
    elif kind == "PROTOCOL":
        rp = R if cfg.R_prime is None else cfg.R_prime
        edge = space.d <= R
        block = space.d <= rp
    elif kind == "QUDG":
        rp = R if cfg.R_prime is None else cfg.R_prime
        edge = _qudg_edge_matrix(space, cfg, R)
        block = space.d <= rp
    elif kind == "KHOP":
        base = space.d <= R
        np.fill_diagonal(base, False)
        hops = hop_distances(base)
        edge = hops == 1
        block = hops <= cfg.khop
    else:
        raise ModelMismatch(f"graph resolver called with {kind}")
    edge = edge.copy()
    block = block.copy()
    np.fill_diagonal(edge, False)
    np.fill_diagonal(block, False)
    return edge, block


def graph_reception(space: QuasiMetricSpace, cfg: ReceptionModelConfig, radii: RadiusSet,
                    tx: np.ndarray, alive: np.ndarray | None = None) -> np.ndarray:
    edge, block = graph_rule_matrices(space, cfg, radii)
    idx = np.flatnonzero(tx)
    cnt = block[idx].sum(axis=0)
    recv = edge[idx] & ((cnt[None, :] - block[idx]) == 0)
    recv[:, tx] = False
    if alive is not None:
        recv[:, ~alive] = False
    return recv


def resolve_round_graph(space: QuasiMetricSpace, cfg: ReceptionModelConfig, radii: RadiusSet,
                        S: Any, alive: np.ndarray | None = None) -> RoundRealization:
    if cfg.kind not in GRAPH_KINDS:
        raise ModelMismatch(f"graph resolver called with {cfg.kind}")
    tx = _tx_mask(space, S)
    idx = np.flatnonzero(tx)
    return RoundRealization(space.node_ids, idx, graph_reception(space, cfg, radii, tx, alive),
                            interference_vector(space, tx), np.zeros(idx.size, dtype=bool),
                            radii.epsilon)


def full_rule(space: QuasiMetricSpace, cfg: ReceptionModelConfig, radii: RadiusSet,
              tx: np.ndarray, alive: np.ndarray | None = None) -> np.ndarray:
    if cfg.kind == "SINR":
        return sinr_reception(space, cfg, tx, alive)
    return graph_reception(space, cfg, radii, tx, alive)


# ---------------------------------------------------------------------------
# adversary


def script_entries(cfg: ReceptionModelConfig, round_no: int, slot: int | None = None) -> list | None:
    hits = [e for e in cfg.adversary_script
            if int(e["round"]) == round_no and (slot is None or e.get("slot") in (None, slot))]
    return hits or None


def resolve_adversarial(cfg: ReceptionModelConfig, pending: set, script: list | None = None,
                        full: set | None = None) -> set:
    """Subset of ``pending`` (sender, receiver) pairs that the adversary delivers.

    ``full`` is the model's own verdict for the optimistic policy; ``script``
    lists the entries scheduled for this round under the scripted policy.
    """
    if not pending:
        return set()
    policy = cfg.adversary_policy
    if policy == "pessimistic":
        return set()
    if policy == "optimistic":
        return set(pending) & set(full or ())
    if script is None:
        raise MissingScript("scripted adversary has no entry for a round with pending receptions")
    chosen = {tuple(e["pair"]) for e in script if e.get("deliver", True)}
    return {p for p in pending if p in chosen}


def resolve_round(space: QuasiMetricSpace, cfg: ReceptionModelConfig, radii: RadiusSet, S: Any,
                  precision: float | None = None, alive: np.ndarray | None = None,
                  round_no: int = 0, slot: int | None = None) -> RoundRealization:
    """Resolve one slot: guaranteed deliveries first, then the adversary policy.

    Deliveries are restricted to the sender's neighbors at ``precision``; a
    receiver already served by a guaranteed sender takes nothing else.
    """
    prec = radii.epsilon if precision is None else precision
    tx = _tx_mask(space, S)
    if alive is not None:
        tx = tx & alive
    idx = np.flatnonzero(tx)
    n = space.n
    interf = interference_vector(space, tx)
    if idx.size == 0:
        return RoundRealization(space.node_ids, idx, np.zeros((0, n), dtype=bool), interf,
                                np.zeros(0, dtype=bool), prec)
    nb = neighbor_matrix(space, radii, prec, alive)[idx]
    guaranteed = succ_clear_vector(space, cfg, radii, tx, prec, alive)
    recv = nb & guaranteed[:, None]
    candidates = nb & ~guaranteed[:, None] & ~tx[None, :] & ~recv.any(axis=0)[None, :]
    if cfg.adversary_policy == "pessimistic" or not candidates.any():
        return RoundRealization(space.node_ids, idx, recv, interf, guaranteed, prec)
    if cfg.adversary_policy == "optimistic":
        extra = candidates & full_rule(space, cfg, radii, tx, alive)
    else:
        ids = space.node_ids
        rows, cols = np.nonzero(candidates)
        pending = {(ids[idx[r]], ids[c]) for r, c in zip(rows, cols)}
        chosen = resolve_adversarial(cfg, pending, script_entries(cfg, round_no, slot))
        extra = np.zeros_like(candidates)
        row_of = {int(i): r for r, i in enumerate(idx)}
        for u, v in chosen:
            extra[row_of[space.index(u)], space.index(v)] = True
    # keep a single sender per receiver among adversarial extras
    first = np.argmax(extra, axis=0)
    keep = np.zeros_like(extra)
    got = extra.any(axis=0)
    keep[first[got], np.flatnonzero(got)] = True
    return RoundRealization(space.node_ids, idx, recv | keep, interf, guaranteed, prec)
