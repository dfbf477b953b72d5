from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from dissem.cli import generate_instance


def brute_metricity(loss: np.ndarray, step: float = 1e-3, zeta_max: float = 16.0) -> float:
    """Smallest grid value of zeta at which every ordered triplet satisfies the triangle rule."""
    n = loss.shape[0]
    triples = [t for t in itertools.permutations(range(n), 3)]
    k = 0
    while True:
        z = 1.0 + k * step
        if z > zeta_max + 1e-12:
            raise ValueError("infeasible")
        ok = True
        for u, w, v in triples:
            if loss[u, v] ** (1 / z) > loss[u, w] ** (1 / z) + loss[w, v] ** (1 / z) + 1e-12:
                ok = False
                break
        if ok:
            return z
        k += 1


def brute_max_packing(d: np.ndarray, region: list[int], r: float) -> int:
    best = 0
    for k in range(len(region), 0, -1):
        for combo in itertools.combinations(region, k):
            if all(d[a, b] >= 2 * r and d[b, a] >= 2 * r for a, b in itertools.combinations(combo, 2)):
                return k
    return best


@pytest.fixture
def grid5():
    return generate_instance("grid", {"rows": 5, "cols": 5, "zeta": 3})


@pytest.fixture
def line9():
    return generate_instance("line", {"n": 9, "zeta": 3})


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
