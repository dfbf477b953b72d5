"""Path-loss instances, the derived quasi-metric, packings and instance generators.

A :class:`PathLossMap` is the physical ground truth: a strictly positive,
possibly asymmetric loss ``f(u, v)`` for every ordered pair plus a uniform
transmit power.  A :class:`QuasiMetricSpace` raises the losses to ``1/zeta``
to obtain distances and carries the bounded-independence parameters.

Node identifiers are opaque; internally every structure is indexed by the
position of the node in ``node_ids``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Hashable, Iterable, Literal, Sequence

import networkx as nx
import numpy as np

from .errors import (
    DisconnectedGraph,
    InvalidEpsilon,
    InvalidInstance,
    NoFeasibleZeta,
    UnknownNode,
)

NodeId = Hashable
BallKind = Literal["symmetric", "in"]

# slack accepted by validators on top of exact double comparisons
VALIDATION_SLACK = 1e-9
INSTANCE_SCHEMA_VERSION = 1


def _id_order(ids: Iterable[NodeId]) -> list[NodeId]:
    ids = list(ids)
    try:
        return sorted(ids)
    except TypeError:
        return sorted(ids, key=repr)


@dataclass(frozen=True, eq=False)
class PathLossMap:
    """Loss ``f(u, v) > 0`` for all ordered pairs of distinct nodes.

    ``loss`` is an ``(n, n)`` array whose diagonal is ``inf`` (a node causes
    no interference on itself).  ``positions`` is optional and only present
    for instances embedded in the plane.
    """

    node_ids: tuple
    loss: np.ndarray
    power: float = 1.0
    positions: np.ndarray | None = None

    def __post_init__(self) -> None:
        loss = np.array(self.loss, dtype=float, copy=True)
        n = len(self.node_ids)
        if loss.shape != (n, n):
            raise InvalidInstance(f"loss matrix has shape {loss.shape}, expected {(n, n)}")
        if len(set(self.node_ids)) != n:
            raise InvalidInstance("duplicate node ids")
        off = ~np.eye(n, dtype=bool)
        vals = loss[off]
        if vals.size and (not np.all(np.isfinite(vals)) or np.any(vals <= 0)):
            raise InvalidInstance("path loss must be finite and strictly positive for u != v")
        if not (self.power > 0 and math.isfinite(self.power)):
            raise InvalidInstance("power must be positive")
        np.fill_diagonal(loss, np.inf)
        loss.setflags(write=False)
        object.__setattr__(self, "loss", loss)
        object.__setattr__(self, "node_ids", tuple(self.node_ids))
        if self.positions is not None:
            pos = np.array(self.positions, dtype=float)
            pos.setflags(write=False)
            object.__setattr__(self, "positions", pos)

    @property
    def n(self) -> int:
        return len(self.node_ids)

    @cached_property
    def _index(self) -> dict:
        return {u: i for i, u in enumerate(self.node_ids)}

    def index(self, u: NodeId) -> int:
        try:
            return self._index[u]
        except KeyError:
            raise UnknownNode(u) from None

    def f(self, u: NodeId, v: NodeId) -> float:
        return float(self.loss[self.index(u), self.index(v)])

    @cached_property
    def signal(self) -> np.ndarray:
        """``P / f(u, v)``; zero on the diagonal."""
        sig = self.power / self.loss
        sig.setflags(write=False)
        return sig

    def losses(self) -> list[list]:
        out = []
        for i, j in itertools.permutations(range(self.n), 2):
            out.append([self.node_ids[i], self.node_ids[j], float(self.loss[i, j])])
        return out

    def with_loss(self, loss: np.ndarray, positions: np.ndarray | None = None) -> "PathLossMap":
        return PathLossMap(self.node_ids, loss, self.power,
                           self.positions if positions is None else positions)


@dataclass(frozen=True)
class RadiusSet:
    """Clear-channel range ``R`` and precision ``epsilon``."""

    R: float
    epsilon: float

    def __post_init__(self) -> None:
        if not self.R > 0:
            raise ValueError("R must be positive")
        if not 0 < self.epsilon < 1:
            raise InvalidEpsilon(f"epsilon must lie in (0, 1), got {self.epsilon}")

    @property
    def R_B(self) -> float:
        return (1 - self.epsilon) * self.R

    def comm_radius(self, precision: float | None = None) -> float:
        eps = self.epsilon if precision is None else precision
        return (1 - eps) * self.R


def _distances(loss: np.ndarray, zeta: float) -> np.ndarray:
    if zeta == 2:
        d = np.sqrt(loss)
    elif zeta == 1:
        d = loss.copy()
    else:
        d = np.power(loss, 1.0 / zeta)
    np.fill_diagonal(d, 0.0)
    return d


@dataclass(frozen=True, eq=False)
class QuasiMetricSpace:
    base: PathLossMap
    zeta: float
    r_min: float = 0.0
    lam: float = 2.0
    indep_const: float = 1.0

    def __post_init__(self) -> None:
        if self.zeta < 1:
            raise ValueError("zeta must be >= 1")

    @cached_property
    def d(self) -> np.ndarray:
        d = _distances(self.base.loss, self.zeta)
        d.setflags(write=False)
        return d

    @property
    def node_ids(self) -> tuple:
        return self.base.node_ids

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def power(self) -> float:
        return self.base.power

    def index(self, u: NodeId) -> int:
        return self.base.index(u)

    def dist(self, u: NodeId, v: NodeId) -> float:
        return float(self.d[self.index(u), self.index(v)])

    def symmetry_factor(self) -> float:
        """Smallest ``c`` with ``d(x, y) <= c * d(y, x)`` over all pairs."""
        if self.n < 2:
            return 1.0
        off = ~np.eye(self.n, dtype=bool)
        return float(np.max(self.d[off] / self.d.T[off]))

    def is_symmetric(self, tol: float = 1e-9) -> bool:
        return self.symmetry_factor() <= 1 + tol

    def with_base(self, base: PathLossMap) -> "QuasiMetricSpace":
        return QuasiMetricSpace(base, self.zeta, self.r_min, self.lam, self.indep_const)


# ---------------------------------------------------------------------------
# metricity


def triangle_violation(d: np.ndarray) -> float:
    """Largest ``d(u,v) - (d(u,w) + d(w,v))`` over all triplets (<= 0 when metric)."""
    n = d.shape[0]
    if n < 3:
        return -np.inf
    best = np.full((n, n), np.inf)
    for w in range(n):
        np.minimum(best, d[:, w, None] + d[None, w, :], out=best)
    return float(np.max(d - best))


def satisfies_triangle(loss: np.ndarray, zeta: float, tol: float = VALIDATION_SLACK) -> bool:
    return triangle_violation(_distances(loss, zeta)) <= tol


def compute_metricity(
    m: PathLossMap,
    tol: float = 1e-9,
    zeta_max: float = 16.0,
    precision: float = 1e-6,
) -> float:
    """Smallest ``zeta`` in ``[1, zeta_max]`` at which ``f^(1/zeta)`` is a quasi-metric.

    Feasibility is monotone in ``zeta`` so a bisection to ``precision`` with a
    full triplet scan per probe is exact up to that precision.
    """
    if m.n < 1:
        raise ValueError("map must contain at least one node")
    if tol <= 0:
        raise ValueError("tol must be positive")
    loss = m.loss
    if satisfies_triangle(loss, 1.0, tol):
        return 1.0
    if not satisfies_triangle(loss, zeta_max, tol):
        raise NoFeasibleZeta(f"triangle inequality fails even at zeta={zeta_max}")
    lo, hi = 1.0, float(zeta_max)
    while hi - lo > precision:
        mid = 0.5 * (lo + hi)
        if satisfies_triangle(loss, mid, tol):
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------------
# balls and packings


def _ball_mask(space: QuasiMetricSpace, i: int, r: float, kind: BallKind) -> np.ndarray:
    d_in = space.d[:, i]
    if kind == "in":
        return d_in < r
    if kind == "symmetric":
        return np.maximum(d_in, space.d[i, :]) < r
    raise ValueError(f"unknown ball kind {kind!r}")


def ball(space: QuasiMetricSpace, u: NodeId, r: float, kind: BallKind = "symmetric") -> frozenset:
    """``B(u, r)`` (``kind='symmetric'``) or the in-ball ``D(u, r)`` (``kind='in'``)."""
    if r < 0:
        raise ValueError("r must be non-negative")
    mask = _ball_mask(space, space.index(u), r, kind)
    return frozenset(space.node_ids[j] for j in np.flatnonzero(mask))


def _conflicts(space: QuasiMetricSpace, idx: np.ndarray, r: float) -> np.ndarray:
    sub = space.d[np.ix_(idx, idx)]
    far = (sub >= 2 * r) & (sub.T >= 2 * r)
    np.fill_diagonal(far, True)
    return ~far


def _region_indices(space: QuasiMetricSpace, region: Iterable[NodeId]) -> np.ndarray:
    known = [u for u in region if u in space.base._index]
    return np.array([space.index(u) for u in _id_order(known)], dtype=int)


def greedy_packing(space: QuasiMetricSpace, region: Iterable[NodeId], r: float) -> frozenset:
    """Maximal ``r``-packing of ``region``, scanning node ids in ascending order.

    Two centers are compatible when their distance is at least ``2r`` in both
    directions.  Region members unknown to the space are ignored.
    """
    if r <= 0:
        raise ValueError("r must be positive")
    idx = _region_indices(space, region)
    if idx.size == 0:
        return frozenset()
    conflict = _conflicts(space, idx, r)
    chosen: list[int] = []
    for a in range(idx.size):
        if not any(conflict[a, b] for b in chosen):
            chosen.append(a)
    return frozenset(space.node_ids[idx[a]] for a in chosen)


def max_packing(space: QuasiMetricSpace, region: Iterable[NodeId], r: float) -> frozenset:
    """Maximum-cardinality ``r``-packing (exact; exponential in the worst case)."""
    if r <= 0:
        raise ValueError("r must be positive")
    idx = _region_indices(space, region)
    if idx.size == 0:
        return frozenset()
    compatible = ~_conflicts(space, idx, r)
    g = nx.Graph()
    g.add_nodes_from(range(idx.size))
    a, b = np.nonzero(np.triu(compatible, k=1))
    g.add_edges_from(zip(a.tolist(), b.tolist()))
    clique, _ = nx.max_weight_clique(g, weight=None)
    return frozenset(space.node_ids[idx[k]] for k in clique)


def is_packing(space: QuasiMetricSpace, centers: Iterable[NodeId], r: float,
               slack: float = VALIDATION_SLACK) -> bool:
    idx = np.array([space.index(u) for u in centers], dtype=int)
    if idx.size < 2:
        return True
    sub = space.d[np.ix_(idx, idx)]
    off = ~np.eye(idx.size, dtype=bool)
    return bool(np.all(sub[off] >= 2 * r - slack))


def covers(space: QuasiMetricSpace, centers: Iterable[NodeId], region: Iterable[NodeId],
           r: float, slack: float = VALIDATION_SLACK) -> bool:
    """True iff every region node lies within symmetric distance ``r`` of a center."""
    c = np.array([space.index(u) for u in centers], dtype=int)
    reg = _region_indices(space, region)
    if reg.size == 0:
        return True
    if c.size == 0:
        return False
    sym = np.maximum(space.d[np.ix_(c, reg)], space.d[np.ix_(reg, c)].T)
    return bool(np.all(sym.min(axis=0) <= r + slack))


@dataclass(frozen=True)
class IndependenceCheck:
    node: NodeId
    q: float
    size: int
    bound: float
    exact: bool

    @property
    def ok(self) -> bool:
        return self.size <= self.bound + VALIDATION_SLACK


@dataclass
class IndependenceReport:
    passed: bool
    worst: IndependenceCheck | None
    checks: list[IndependenceCheck] = field(default_factory=list)

    @property
    def violations(self) -> list[IndependenceCheck]:
        return [c for c in self.checks if not c.ok]


def validate_bounded_independence(
    space: QuasiMetricSpace,
    q_samples: Sequence[float],
    exact_limit: int = 16,
    nodes: Iterable[NodeId] | None = None,
) -> IndependenceReport:
    """Check ``|max r_min-packing of D(u, q r_min)| <= C q^lambda`` for sampled ``q``.

    Regions with at most ``exact_limit`` nodes are packed exactly; larger ones
    use the greedy packing, which is a lower bound, so a reported violation is
    always genuine while a pass on a greedy region is only evidence.
    """
    if space.r_min <= 0:
        raise ValueError("r_min must be positive for the independence check")
    checks: list[IndependenceCheck] = []
    targets = space.node_ids if nodes is None else list(nodes)
    for q in q_samples:
        if q < 1:
            raise ValueError("q samples must be >= 1")
        bound = space.indep_const * q ** space.lam
        for u in targets:
            region = ball(space, u, q * space.r_min, "in")
            exact = len(region) <= exact_limit
            pack = (max_packing if exact else greedy_packing)(space, region, space.r_min)
            checks.append(IndependenceCheck(u, float(q), len(pack), bound, exact))
    worst = max(checks, key=lambda c: c.size - c.bound, default=None)
    return IndependenceReport(all(c.ok for c in checks), worst, checks)


# ---------------------------------------------------------------------------
# generators


def from_positions(
    positions: np.ndarray,
    zeta: float,
    power: float = 1.0,
    node_ids: Sequence[NodeId] | None = None,
) -> PathLossMap:
    """Euclidean instance: ``f(u, v) = |u - v|^zeta``."""
    pos = np.asarray(positions, dtype=float)
    if pos.ndim == 1:
        pos = pos[:, None]
    n = pos.shape[0]
    ids = tuple(range(n)) if node_ids is None else tuple(node_ids)
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    with np.errstate(divide="ignore"):
        loss = dist**zeta if zeta != 1 else dist.copy()
    np.fill_diagonal(loss, np.inf)
    return PathLossMap(ids, loss, power, pos)


def gen_euclidean_instance(n: int, side: float, zeta: float, seed: int,
                           power: float = 1.0) -> PathLossMap:
    """``n`` uniform points in a ``side x side`` square; coincident points are resampled."""
    if n < 1 or side <= 0 or zeta <= 0:
        raise ValueError("need n >= 1, side > 0, zeta > 0")
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0.0, side, size=(n, 2))
    while True:
        diff = pos[:, None, :] - pos[None, :, :]
        d2 = np.sum(diff * diff, axis=-1)
        np.fill_diagonal(d2, np.inf)
        clash = np.flatnonzero(np.triu(d2 == 0).any(axis=0))
        if clash.size == 0:
            break
        pos[clash] = rng.uniform(0.0, side, size=(clash.size, 2))
    return from_positions(pos, zeta, power)


def gen_grid_positions(rows: int, cols: int, spacing: float = 1.0) -> np.ndarray:
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.column_stack([c.ravel() * spacing, r.ravel() * spacing]).astype(float)


def gen_line_positions(n: int, spacing: float = 1.0) -> np.ndarray:
    return np.column_stack([np.arange(n) * spacing, np.zeros(n)]).astype(float)


def gen_ring_positions(n: int, radius: float = 1.0) -> np.ndarray:
    a = 2 * np.pi * np.arange(n) / n
    return np.column_stack([radius * np.cos(a), radius * np.sin(a)])


def gen_cluster_positions(n: int, radius: float, seed: int) -> np.ndarray:
    """``n`` distinct points uniform in a disk of the given radius."""
    rng = np.random.default_rng(seed)
    r = radius * np.sqrt(rng.uniform(size=n))
    a = rng.uniform(0, 2 * np.pi, size=n)
    pos = np.column_stack([r * np.cos(a), r * np.sin(a)])
    return pos + rng.uniform(-1e-9, 1e-9, size=pos.shape) * radius


def lower_bound_parameters(epsilon: float) -> tuple[float, float]:
    """``(delta, mu)`` of the lower-bound construction; raises if ``mu >= 1``."""
    if not 0 < epsilon < 1:
        raise InvalidEpsilon(f"epsilon must lie in (0, 1), got {epsilon}")
    delta = epsilon / (8 * (1 - epsilon))
    mu = epsilon * (1 + epsilon) / (1 - epsilon)
    if mu >= 1:
        raise InvalidEpsilon(f"mu = {mu} >= 1 for epsilon = {epsilon}")
    return delta, mu


def lower_bound_roles(n: int) -> tuple[list[int], int, int]:
    """Node ids of the cluster, the near relay and the far node."""
    return list(range(n - 2)), n - 2, n - 1


def gen_lower_bound_instance(n: int, epsilon: float, R: float, power: float = 1.0) -> PathLossMap:
    """Distance diagram that defeats NTD-free broadcast (``zeta = 2``).

    Nodes ``0..n-3`` form a tight cluster at mutual distance ``delta R_B``;
    node ``n-2`` sits at ``mu R_B`` from every cluster node and node ``n-1`` at
    ``R_B`` from ``n-2`` and ``(mu + 1) R_B`` from the cluster.  Assigning
    identities to points is left to the caller.
    """
    if n < 4:
        raise ValueError("n must be at least 4")
    delta, mu = lower_bound_parameters(epsilon)
    rb = (1 - epsilon) * R
    cluster, near, far = lower_bound_roles(n)
    d = np.full((n, n), delta * rb)
    d[cluster, near] = d[near, cluster] = mu * rb
    d[cluster, far] = d[far, cluster] = (mu + 1) * rb
    d[near, far] = d[far, near] = rb
    loss = d * d
    np.fill_diagonal(loss, np.inf)
    return PathLossMap(tuple(range(n)), loss, power)


def _as_graph(adjacency: Any) -> nx.Graph:
    if isinstance(adjacency, nx.Graph):
        return nx.Graph(adjacency)
    return nx.Graph(nx.to_networkx_graph(adjacency))


def estimate_independence(space: QuasiMetricSpace, q_samples: Sequence[float] = (1, 2, 3, 4),
                          exact_limit: int = 24) -> tuple[float, float]:
    """Fit ``(C, lambda)`` from the largest packings found at each sampled ``q``."""
    sizes = {}
    for q in q_samples:
        best = 0
        for u in space.node_ids:
            region = ball(space, u, q * space.r_min, "in")
            fn = max_packing if len(region) <= exact_limit else greedy_packing
            best = max(best, len(fn(space, region, space.r_min)))
        sizes[q] = best
    c = float(sizes[q_samples[0]]) / q_samples[0] ** 1.0
    lam = 1.0
    for q, m in sizes.items():
        if q > 1 and m > c:
            lam = max(lam, math.log(m / c) / math.log(q))
    return c, lam


def gen_big_instance(adjacency: Any, zeta: float | None = None, power: float = 1.0) -> QuasiMetricSpace:
    """Hop-distance space of a connected graph with ``r_min = 1``.

    ``lambda`` is estimated from a packing sweep; ``zeta`` defaults to
    ``lambda + 1`` since the graph itself fixes no path-loss exponent.
    """
    g = _as_graph(adjacency)
    if g.number_of_nodes() == 0 or not nx.is_connected(g):
        raise DisconnectedGraph("graph must be connected and non-empty")
    ids = tuple(_id_order(g.nodes))
    pos = {u: i for i, u in enumerate(ids)}
    n = len(ids)
    hop = np.zeros((n, n))
    for u, lengths in nx.all_pairs_shortest_path_length(g):
        for v, h in lengths.items():
            hop[pos[u], pos[v]] = h
    probe = QuasiMetricSpace(PathLossMap(ids, np.where(np.eye(n, dtype=bool), np.inf, hop), power),
                             1.0, r_min=1.0)
    c, lam = estimate_independence(probe)
    z = lam + 1 if zeta is None else float(zeta)
    loss = np.where(np.eye(n, dtype=bool), np.inf, hop**z)
    return QuasiMetricSpace(PathLossMap(ids, loss, power), z, r_min=1.0, lam=lam, indep_const=c)


# ---------------------------------------------------------------------------
# instance files


@dataclass(frozen=True, eq=False)
class Instance:
    """A space together with its radii; the unit written to instance files."""

    space: QuasiMetricSpace
    radii: RadiusSet

    @property
    def node_ids(self) -> tuple:
        return self.space.node_ids

    def to_dict(self) -> dict:
        base = self.space.base
        out = {
            "schema_version": INSTANCE_SCHEMA_VERSION,
            "nodes": list(base.node_ids),
            "power": base.power,
            "zeta": self.space.zeta,
            "losses": base.losses(),
            "r_min": self.space.r_min,
            "lambda": self.space.lam,
            "indep_const": self.space.indep_const,
            "R": self.radii.R,
            "epsilon": self.radii.epsilon,
        }
        if base.positions is not None:
            out["positions"] = base.positions.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Instance":
        try:
            nodes = [tuple(u) if isinstance(u, list) else u for u in data["nodes"]]
            index = {u: i for i, u in enumerate(nodes)}
            n = len(nodes)
            loss = np.full((n, n), np.nan)
            np.fill_diagonal(loss, np.inf)
            for u, v, f in data["losses"]:
                loss[index[u], index[v]] = float(f)
            if np.isnan(loss).any():
                raise InvalidInstance("losses do not cover every ordered pair")
            base = PathLossMap(tuple(nodes), loss, float(data["power"]), data.get("positions"))
            space = QuasiMetricSpace(base, float(data["zeta"]), float(data.get("r_min", 0.0)),
                                     float(data.get("lambda", 2.0)), float(data.get("indep_const", 1.0)))
            return cls(space, RadiusSet(float(data["R"]), float(data["epsilon"])))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InvalidInstance):
                raise
            raise InvalidInstance(f"malformed instance: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "Instance":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidInstance(f"not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()
