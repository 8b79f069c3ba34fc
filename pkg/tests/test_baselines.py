import dataclasses
import itertools

import numpy as np
import pytest

from airshare import baselines as bl
from airshare import data
from airshare import objective as ob


@pytest.fixture(scope="module")
def small():
    m = data.generate_market(data.SynthConfig(seed=2))
    p = data.build_problem(m.panel, m.models, "C1", top=2)
    # keep the grid tiny so an explicit loop can check it
    return dataclasses.replace(p, f_max=np.minimum(p.f_max, 12.0), budget=float(np.dot(p.cost, [7.0, 5.0])))


def test_brute_force_matches_an_explicit_loop(small):
    best, best_x = -np.inf, None
    for x in itertools.product(*[range(int(f) + 1) for f in small.f_max]):
        x = np.array(x, dtype=float)
        if np.dot(small.cost, x) <= small.budget:
            v = float(ob.influence(small, x))
            if v > best:
                best, best_x = v, x
    res = bl.brute_force_optimize(small, bl.BruteForceConfig(batch_size=7))
    assert res.objective == pytest.approx(best, rel=1e-12)
    np.testing.assert_array_equal(small.route_vector(res.matrix), best_x)


def test_greedy_never_beats_brute_force(small):
    exact = bl.brute_force_optimize(small).objective
    for alpha in (1, 2, 5):
        g = bl.greedy_optimize(small, bl.GreedyConfig(alpha=alpha), timing=False)
        assert g.objective <= exact + 1e-9
        x = small.route_vector(g.matrix)
        assert small.is_feasible(x)
        assert np.all(x % alpha == 0)


def test_greedy_spend_all_uses_the_budget(small):
    g = bl.greedy_optimize(small, bl.GreedyConfig(spend_all=True), timing=False)
    x = small.route_vector(g.matrix)
    left = small.budget - small.spend(x)
    assert np.all((x + 1 > small.f_max) | (small.cost > left))


def test_grid_axes_include_the_ceiling(small):
    p = dataclasses.replace(small, f_max=np.array([10.0, 7.0]))
    a, b = bl.grid_axes(p, 3)
    np.testing.assert_array_equal(a, [0, 3, 6, 9, 10])
    np.testing.assert_array_equal(b, [0, 3, 6, 7])


def test_brute_force_refuses_large_grids(small):
    with pytest.raises(bl.GridTooLargeError):
        bl.brute_force_optimize(small, bl.BruteForceConfig(max_points=10))
    with pytest.raises(bl.GridTooLargeError):
        bl.brute_force_optimize(small, bl.BruteForceConfig(route_limit=1))


def test_zero_budget(small):
    p = dataclasses.replace(small, budget=0.0)
    np.testing.assert_array_equal(p.route_vector(bl.brute_force_optimize(p).matrix), 0.0)
    np.testing.assert_array_equal(p.route_vector(bl.greedy_optimize(p).matrix), 0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        bl.GreedyConfig(alpha=0)
    with pytest.raises(ValueError):
        bl.GreedyConfig(alpha=1.5)
    with pytest.raises(ValueError):
        bl.BruteForceConfig(batch_size=0)
