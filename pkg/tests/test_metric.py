from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from conftest import brute_max_packing, brute_metricity
from dissem.errors import InvalidEpsilon, InvalidInstance, NoFeasibleZeta, UnknownNode, DisconnectedGraph
from dissem.metric import (
    Instance,
    PathLossMap,
    QuasiMetricSpace,
    RadiusSet,
    ball,
    compute_metricity,
    covers,
    estimate_independence,
    from_positions,
    gen_big_instance,
    gen_euclidean_instance,
    gen_line_positions,
    gen_lower_bound_instance,
    greedy_packing,
    is_packing,
    lower_bound_parameters,
    max_packing,
    validate_bounded_independence,
)


def _map(loss, power=1.0):
    loss = np.array(loss, dtype=float)
    return PathLossMap(tuple(range(loss.shape[0])), loss, power)


# --- path-loss maps -----------------------------------------------------------


def test_loss_map_rejects_bad_entries():
    with pytest.raises(InvalidInstance):
        _map([[0, -1], [1, 0]])
    with pytest.raises(InvalidInstance):
        _map([[0, np.inf], [1, 0]])
    with pytest.raises(InvalidInstance):
        PathLossMap((0, 0), np.ones((2, 2)))


def test_loss_map_lookup_and_signal():
    m = _map([[0, 4.0], [9.0, 0]], power=2.0)
    assert m.f(0, 1) == 4.0 and m.f(1, 0) == 9.0
    assert m.signal[0, 1] == pytest.approx(0.5)
    assert m.signal[0, 0] == 0.0
    with pytest.raises(UnknownNode):
        m.f(0, 7)


def test_radius_set_validation():
    assert RadiusSet(2.0, 0.25).R_B == pytest.approx(1.5)
    for eps in (0.0, 1.0, -0.1):
        with pytest.raises(InvalidEpsilon):
            RadiusSet(1.0, eps)


# --- metricity ------------------------------------------------------------------


def test_metricity_of_euclidean_squares_is_two():
    # collinear points make zeta = 2 tight for squared distances
    m = from_positions(gen_line_positions(4), 2.0)
    assert compute_metricity(m) == pytest.approx(2.0, abs=1e-6)
    space = QuasiMetricSpace(m, 2.0)
    assert space.dist(0, 3) == 3.0  # exact square root


def test_metricity_of_metric_is_one():
    m = from_positions(gen_line_positions(5), 1.0)
    assert compute_metricity(m) == 1.0


@pytest.mark.parametrize("zeta", [2.0, 2.5, 3.0])
def test_random_euclidean_metricity_bounded(zeta):
    for seed in range(3):
        m = gen_euclidean_instance(25, 3.0, zeta, seed)
        assert compute_metricity(m) <= zeta + 1e-6


ASYM_FIXTURES = [
    [[0, 1, 9, 4], [2, 0, 1, 8], [10, 1.5, 0, 2], [3, 7, 2, 0]],
    [[0, 2, 30, 5], [1, 0, 3, 6], [25, 4, 0, 1], [6, 5, 2, 0]],
    [[0, 1, 1, 50], [1, 0, 60, 1], [1, 55, 0, 1], [40, 1, 1, 0]],
]


@pytest.mark.parametrize("loss", ASYM_FIXTURES)
def test_metricity_matches_grid_search(loss):
    loss = np.array(loss, dtype=float)
    np.fill_diagonal(loss, np.inf)
    got = compute_metricity(_map(loss))
    assert abs(got - brute_metricity(loss)) <= 1e-3


def test_metricity_infeasible_raises():
    # the same detour loss on both sides of an enormous direct loss
    loss = np.array([[0, 1, 1e12], [1, 0, 1], [1, 1, 0]], dtype=float)
    with pytest.raises(NoFeasibleZeta):
        compute_metricity(_map(loss), zeta_max=4.0)


# --- balls and packings -------------------------------------------------------------


def _line_space(n=6, spacing=1.0, zeta=2.0, r_min=0.5):
    return QuasiMetricSpace(from_positions(gen_line_positions(n, spacing), zeta), zeta, r_min=r_min,
                            lam=1.0, indep_const=2.0)


def test_balls_are_strict():
    s = _line_space()
    assert ball(s, 0, 1.0) == frozenset({0})
    assert ball(s, 0, 1.0001) == frozenset({0, 1})
    assert ball(s, 2, 2.5, "in") == frozenset({0, 1, 2, 3, 4})


def test_asymmetric_ball_kinds_differ():
    loss = np.array([[0, 1, 100], [100, 0, 100], [100, 100, 0]], dtype=float)
    s = QuasiMetricSpace(_map(loss), 1.0)
    assert ball(s, 1, 2.0, "in") == frozenset({0, 1})  # d(0,1) = 1 < 2
    assert ball(s, 1, 2.0, "symmetric") == frozenset({1})


def test_greedy_packing_on_line():
    s = _line_space(6)
    pk = greedy_packing(s, s.node_ids, 0.75)
    assert pk == frozenset({0, 2, 4})
    assert is_packing(s, pk, 0.75)
    assert covers(s, pk, s.node_ids, 1.5)


def test_packing_oracle_small_instances():
    rng = np.random.default_rng(3)
    for trial in range(30):
        n = int(rng.integers(3, 11))
        m = gen_euclidean_instance(n, 2.0, 2.0, int(rng.integers(1_000_000)))
        s = QuasiMetricSpace(m, 2.0)
        r = float(rng.uniform(0.1, 0.6))
        region = list(range(n))
        g = greedy_packing(s, region, r)
        x = max_packing(s, region, r)
        assert len(g) <= len(x) == brute_max_packing(s.d, region, r)
        assert is_packing(s, x, r)


def _star(leaves, r_min, hub):
    n = leaves + 1
    loss = np.full((n, n), 2 * r_min)
    loss[0, 1:] = loss[1:, 0] = hub
    np.fill_diagonal(loss, 0.0)
    return QuasiMetricSpace(_map(loss), 1.0, r_min=r_min, lam=1.0, indep_const=1.0)


@pytest.mark.parametrize("leaves", range(1, 8))
def test_star_independence(leaves):
    r = 0.5
    # in-balls are strict, so hub distance exactly 2 r_min would leave the leaves outside
    s = _star(leaves, r, 2 * r * (1 - 1e-9))
    rep = validate_bounded_independence(s, [2.0], nodes=[0])
    region = sorted(ball(s, 0, 2 * r, "in"))
    assert rep.checks[0].size == brute_max_packing(s.d, region, r) == leaves
    assert rep.passed == (leaves <= 2)
    assert validate_bounded_independence(_star(leaves, r, 2 * r), [2.0], nodes=[0]).passed


def test_bounded_independence_on_line():
    s = _line_space(10, r_min=0.5)
    rep = validate_bounded_independence(s, [1, 2, 4])
    assert rep.passed
    tight = QuasiMetricSpace(s.base, s.zeta, r_min=0.5, lam=0.1, indep_const=1.0)
    assert not validate_bounded_independence(tight, [4]).passed


# --- generators ---------------------------------------------------------------------


def test_lower_bound_parameters_and_distances():
    delta, mu = lower_bound_parameters(0.2)
    assert delta == pytest.approx(0.03125)
    assert mu == pytest.approx(0.3)
    with pytest.raises(InvalidEpsilon):
        lower_bound_parameters(0.5)
    m = gen_lower_bound_instance(8, 0.2, 1.0)
    s = QuasiMetricSpace(m, 2.0)
    rb = 0.8
    assert s.dist(0, 1) == pytest.approx(0.025)
    assert s.dist(0, 6) == pytest.approx(0.24)
    assert s.dist(0, 7) == pytest.approx(1.04)
    assert s.dist(6, 7) == pytest.approx(rb)
    assert compute_metricity(m) <= 2.0 + 1e-6


def test_lower_bound_independence_holds():
    m = gen_lower_bound_instance(16, 0.2, 1.0)
    s = QuasiMetricSpace(m, 2.0, r_min=0.2 / 8, lam=1.0, indep_const=1.0)
    assert validate_bounded_independence(s, [1, 2, 4, 8, 16, 48]).passed


def test_big_instance_hop_metric():
    import networkx as nx

    s = gen_big_instance(nx.path_graph(5))
    assert s.dist(0, 4) == pytest.approx(4.0)
    assert s.zeta == pytest.approx(s.lam + 1)
    assert compute_metricity(s.base) <= s.zeta + 1e-6
    with pytest.raises(DisconnectedGraph):
        gen_big_instance(nx.Graph([(0, 1), (2, 3)]))


def test_estimate_independence_line():
    s = _line_space(12, r_min=0.5)
    c, lam = estimate_independence(s, (1, 2, 4))
    assert c >= 1 and lam >= 1


def test_instance_roundtrip(tmp_path):
    m = gen_euclidean_instance(6, 2.0, 3.0, 1)
    inst = Instance(QuasiMetricSpace(m, 3.0, r_min=0.1, lam=2.0, indep_const=4.0), RadiusSet(1.0, 0.2))
    path = tmp_path / "inst.json"
    inst.save(path)
    back = Instance.load(path)
    assert back.digest() == inst.digest()
    assert np.allclose(back.space.d, inst.space.d)
    with pytest.raises(InvalidInstance):
        Instance.from_dict({"nodes": [0, 1]})
