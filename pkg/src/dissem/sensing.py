"""Carrier-sensing implementations of the CD, ACK and NTD primitives.

Each primitive is a threshold test on the sensed aggregate signal.  A node
senses while transmitting, excluding its own signal.  Ambient noise is never
part of the sensed value, so the thresholds compare against interference
from other transmitters only.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import NotATransmitter
from .metric import NodeId, QuasiMetricSpace, RadiusSet
from .models import (
    ReceptionModelConfig,
    RoundRealization,
    close_ball_matrix,
    interference_vector,
    neighbor_matrix,
    resolve_round,
    vicinity_matrix,
)

log = logging.getLogger(__name__)

BUSY, IDLE = "Busy", "Idle"


@dataclass(frozen=True)
class SensingConfig:
    t_cd: float
    i_cd: float
    t_ack: float
    i_ack: float
    t_ntd: float
    precision: float
    h1: float = 2.0
    h2: float = 2.0

    def __post_init__(self) -> None:
        if not (self.h1 > 1 and self.h2 > 1):
            raise ValueError("h1 and h2 must exceed 1")
        if not self.i_cd < self.t_cd:
            raise ValueError("i_cd must be below t_cd")
        if not self.i_ack <= self.t_ack:
            raise ValueError("i_ack must not exceed t_ack")

    @property
    def eta(self) -> float:
        return math.log(10 / 9) / math.log(self.h2)

    @classmethod
    def build(cls, power: float, zeta: float, radii: RadiusSet, model: ReceptionModelConfig,
              precision: float | None = None, h1: float = 2.0, h2: float = 2.0,
              cd_fraction: float = 0.5, ack_fraction: float = 0.5) -> "SensingConfig":
        """Thresholds for one precision; ``i_cd``/``i_ack`` default to half their thresholds."""
        eps = radii.epsilon if precision is None else precision
        R = radii.R
        t_cd = power / ((1 - radii.epsilon) * R) ** zeta
        rho_c, i_c = model.succclear(eps, R, zeta)
        near = math.inf if rho_c == 0 else power / (rho_c * R) ** zeta
        t_ack = min(i_c, near)
        t_ntd = power / (eps * R / 2) ** zeta
        return cls(t_cd=t_cd, i_cd=cd_fraction * t_cd, t_ack=t_ack,
                   i_ack=ack_fraction * t_ack if math.isfinite(t_ack) else t_ack,
                   t_ntd=t_ntd, precision=eps, h1=h1, h2=h2)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__} | {"eta": self.eta}


@dataclass(eq=False)
class SensedOutcomes:
    node_ids: tuple
    busy: np.ndarray
    transmitters: np.ndarray
    ack: np.ndarray
    ntd: np.ndarray
    ntd_sender: np.ndarray

    @property
    def cd(self) -> dict:
        return {u: (BUSY if b else IDLE) for u, b in zip(self.node_ids, self.busy)}

    @property
    def ack_map(self) -> dict:
        return {self.node_ids[i]: int(a) for i, a in zip(self.transmitters, self.ack)}

    @property
    def ntd_map(self) -> dict:
        return {self.node_ids[v]: (1, self.node_ids[self.ntd_sender[v]]) for v in np.flatnonzero(self.ntd)}


# ---------------------------------------------------------------------------
# primitives


def cd_outcome(space: QuasiMetricSpace, cfg: SensingConfig, S: Iterable[NodeId], v: NodeId) -> str:
    j = space.index(v)
    total = 0.0
    for w in S:
        i = space.index(w)
        if i != j:
            total += float(space.base.signal[i, j])
    return BUSY if total >= cfg.t_cd else IDLE


def ack_outcome(space: QuasiMetricSpace, cfg: SensingConfig, S: Iterable[NodeId], u: NodeId,
                realization: RoundRealization | None = None, radii: RadiusSet | None = None) -> int:
    """Carrier-sense ACK: 1 iff the interference sensed at ``u`` is at most ``t_ack``.

    When a realization and radii are given, the soundness contract is
    asserted: a positive outcome means every neighbor at the sensing
    precision heard ``u``.
    """
    S = list(S)
    if u not in S:
        raise NotATransmitter(u)
    i = space.index(u)
    total = sum(float(space.base.signal[space.index(w), i]) for w in S if w != u)
    out = int(total <= cfg.t_ack)
    if out and realization is not None and radii is not None:
        row = realization.row_of(i)
        nb = space.d[i] <= radii.comm_radius(cfg.precision)
        nb[i] = False
        assert np.all(realization.recv[row][nb]), "ACK fired without delivery to every neighbor"
    return out


def ntd_outcome(space: QuasiMetricSpace, cfg: SensingConfig, realization: RoundRealization,
                v: NodeId, precision: float, R: float) -> tuple[int, NodeId | None]:
    """``(1, sender)`` if ``v`` received from a sender at distance below ``precision R / 2``."""
    j = space.index(v)
    for r, i in enumerate(realization.transmitters):
        if realization.recv[r, j] and space.d[i, j] < precision * R / 2:
            return 1, space.node_ids[i]
    return 0, None


def sense(space: QuasiMetricSpace, cd_cfg: SensingConfig, ack_cfg: SensingConfig,
          realization: RoundRealization, R: float, ntd_precision: float | None = None,
          interference: np.ndarray | None = None) -> SensedOutcomes:
    """All primitive outcomes of one slot, vectorized."""
    interf = realization.interference if interference is None else interference
    busy = interf >= cd_cfg.t_cd
    tx = realization.transmitters
    ack = interf[tx] <= ack_cfg.t_ack
    n = space.n
    ntd = np.zeros(n, dtype=bool)
    ntd_sender = np.full(n, -1)
    if ntd_precision is not None and tx.size:
        close = realization.recv & (space.d[tx] < ntd_precision * R / 2)
        hit = close.any(axis=0)
        ntd[hit] = True
        ntd_sender[hit] = tx[np.argmax(close[:, hit], axis=0)]
    return SensedOutcomes(space.node_ids, busy, tx, ack, ntd, ntd_sender)


# ---------------------------------------------------------------------------
# a slot of channel use


@dataclass(eq=False)
class SlotResult:
    realization: RoundRealization
    outcomes: SensedOutcomes
    mass: np.ndarray  # per transmitter row: every base-precision neighbor received


class Channel:
    """Binds a topology snapshot, a reception model and the sensing thresholds."""

    def __init__(self, space: QuasiMetricSpace, radii: RadiusSet, model: ReceptionModelConfig,
                 h1: float = 2.0, h2: float = 2.0, cd_fraction: float = 0.5,
                 ack_fraction: float = 0.5, alive: np.ndarray | None = None):
        self.radii = radii
        self.model = model
        self.h1, self.h2 = h1, h2
        self.cd_fraction, self.ack_fraction = cd_fraction, ack_fraction
        self._sensing: dict[float, SensingConfig] = {}
        self.alive = np.ones(space.n, dtype=bool) if alive is None else alive
        self.space = space

    @property
    def space(self) -> QuasiMetricSpace:
        return self._space

    @space.setter
    def space(self, value: QuasiMetricSpace) -> None:
        self._space = value
        self._base_nb = None

    def sensing(self, precision: float | None = None) -> SensingConfig:
        eps = self.radii.epsilon if precision is None else precision
        if eps not in self._sensing:
            self._sensing[eps] = SensingConfig.build(
                self.space.power, self.space.zeta, self.radii, self.model, eps,
                self.h1, self.h2, self.cd_fraction, self.ack_fraction)
        return self._sensing[eps]

    def base_neighbors(self) -> np.ndarray:
        if self._base_nb is None:
            self._base_nb = neighbor_matrix(self.space, self.radii, None)
        return self._base_nb & self.alive[:, None] & self.alive[None, :]

    def slot(self, tx: np.ndarray, precision: float | None = None, ntd_precision: float | None = None,
             round_no: int = 0, slot_no: int = 1) -> SlotResult:
        tx = tx & self.alive
        real = resolve_round(self.space, self.model, self.radii, tx, precision, self.alive,
                             round_no, slot_no)
        out = sense(self.space, self.sensing(None), self.sensing(precision), real, self.radii.R,
                    ntd_precision)
        nb = self.base_neighbors()[real.transmitters]
        mass = ~(nb & ~real.recv).any(axis=1)
        return SlotResult(real, out, mass)


# ---------------------------------------------------------------------------
# analytic bounds and Monte Carlo statistics


def product_bounds(x: Sequence[float]) -> tuple[float, float, float]:
    """``(4^-sum, prod(1 - x), e^-sum)`` for a probability vector."""
    x = np.asarray(x, dtype=float)
    s = float(x.sum())
    return 4.0 ** (-s), float(np.prod(1 - x)), math.exp(-s)


def busy_bound(phi: float) -> float:
    return 1 - (1 + 2 * phi) * math.exp(-phi)


def idle_bound(eta: float) -> float:
    return 4.0 ** (-eta)


@dataclass
class CdReport:
    busy_rounds: int
    busy_hits: int
    idle_rounds: int
    idle_hits: int
    busy_contract: float
    idle_contract: float

    @property
    def busy_frequency(self) -> float:
        return self.busy_hits / self.busy_rounds if self.busy_rounds else 1.0

    @property
    def idle_frequency(self) -> float:
        return self.idle_hits / self.idle_rounds if self.idle_rounds else 1.0


def cd_statistics(space: QuasiMetricSpace, radii: RadiusSet, cfg: SensingConfig,
                  p_hist: np.ndarray, tx_hist: np.ndarray, busy_hist: np.ndarray, v: NodeId,
                  phi: float, rho: float, eta: float) -> CdReport:
    """Empirical CD frequencies at ``v`` over recorded rounds.

    ``p_hist``, ``tx_hist`` and ``busy_hist`` are ``(rounds, n)`` arrays of
    transmission probabilities, transmitter masks and Busy flags.
    """
    j = space.index(v)
    close = close_ball_matrix(space, radii)[:, j]
    vic = vicinity_matrix(space, radii, rho)[:, j]
    signal = space.base.signal[:, j]
    b_rounds = b_hits = i_rounds = i_hits = 0
    for p, tx, busy in zip(p_hist, tx_hist, busy_hist):
        if p[close].sum() > phi:
            b_rounds += 1
            b_hits += bool(np.all(busy[close]))
        external = float(signal[tx & ~vic].sum())
        if p[vic].sum() <= eta and external < cfg.i_cd:
            i_rounds += 1
            i_hits += not busy[j]
    return CdReport(b_rounds, b_hits, i_rounds, i_hits, 1 - cfg.h1 ** (-phi), cfg.h2 ** (-eta))


def cd_monte_carlo(space: QuasiMetricSpace, radii: RadiusSet, cfg: SensingConfig, p: np.ndarray,
                   v: NodeId, trials: int, rng: np.random.Generator,
                   rho: float = 1.0) -> tuple[int, int, int]:
    """Draw ``trials`` independent rounds at fixed probabilities ``p``.

    Returns ``(all_busy, idle_at_v, clear_vicinity)`` counts: rounds where all
    of ``B(v, R/2)`` sensed Busy, rounds where ``v`` sensed Idle, and rounds
    in which no node of ``D(v, rho R)`` transmitted.
    """
    j = space.index(v)
    close = close_ball_matrix(space, radii)[:, j]
    vic = vicinity_matrix(space, radii, rho)[:, j]
    draws = rng.random((trials, space.n)) < p[None, :]
    busy = draws.astype(float) @ space.base.signal >= cfg.t_cd
    all_busy = int(np.all(busy[:, close], axis=1).sum())
    idle = int((~busy[:, j]).sum())
    clear = int((~draws[:, vic].any(axis=1)).sum())
    return all_busy, idle, clear
