'''Tests for the transportation simplex and the earth mover's distance built on it.'''
import csv
import itertools
import json
import math

import numpy as np
import pytest
from scipy.optimize import linprog

from data_processing.grid import NumericalError, PsdrStack, SigmaGrid
from data_processing.simulator import Cell, Scene, make_profile, scene_to_psdr
from evaluation.transport import (SpatialDistribution,
                                  distribution_from_points, emd,
                                  northwest_corner, pixel_costs,
                                  psdr_to_distribution, transport_simplex,
                                  write_plan, write_result)


def random_distribution(rng, size, total=1.0, extent=20):
    '''size distinct pixels with positive masses summing to total.'''
    flat = rng.choice(extent * extent, size=size, replace=False)
    points = np.column_stack(np.unravel_index(flat, (extent, extent)))
    mass = rng.uniform(0.1, 1.0, size)
    return SpatialDistribution(points, mass * (total / mass.sum()))


def linprog_emd(p, q):
    '''Reference optimum from scipy's HiGHS solver.'''
    cost = pixel_costs(p.support, q.support)
    m, n = cost.shape
    a_eq = np.zeros((m + n, m * n))
    for i in range(m):
        a_eq[i, i * n:(i + 1) * n] = 1.0
    for j in range(n):
        a_eq[m + j, j::n] = 1.0
    result = linprog(cost.ravel(), A_eq=a_eq, b_eq=np.concatenate([p.mass, q.mass]),
                     bounds=(0, None), method='highs')
    assert result.success
    return result.fun / p.total


def exhaustive_basis_optimum(supply, demand, cost):
    '''Cheapest basic feasible solution over every (m+n-1)-cell spanning set.'''
    m, n = cost.shape
    cells = list(itertools.product(range(m), range(n)))
    rhs = np.concatenate([supply, demand])
    best = math.inf
    for subset in itertools.combinations(cells, m + n - 1):
        a = np.zeros((m + n, m + n - 1))
        for k, (i, j) in enumerate(subset):
            a[i, k] = 1.0
            a[m + j, k] = 1.0
        if np.linalg.matrix_rank(a) < m + n - 1:
            continue
        flow = np.linalg.lstsq(a, rhs, rcond=None)[0]
        if np.any(flow < -1e-12) or np.linalg.norm(a @ flow - rhs) > 1e-9:
            continue
        best = min(best, float(sum(f * cost[c] for f, c in zip(flow, subset))))
    return best


def test_single_edge_distance():
    '''Unit mass moved from (0,0) to (3,4) costs 5.'''
    value, plan = emd(SpatialDistribution([(0, 0)], [1.0]), SpatialDistribution([(3, 4)], [1.0]))
    assert value == pytest.approx(5.0, abs=1e-12)
    assert plan.flows == [(0, 0, 1.0)]


def test_identical_distributions():
    '''A distribution is at distance zero from itself with a diagonal plan.'''
    rng = np.random.default_rng(0)
    p = random_distribution(rng, 7, total=3.0)
    value, plan = emd(p, p)
    assert value == pytest.approx(0.0, abs=1e-12)
    assert all(i == j for i, j, _ in plan.flows)
    assert sorted(f for _, _, f in plan.flows) == pytest.approx(sorted(p.mass.tolist()))


def test_matches_exhaustive_basis_enumeration():
    '''Small supports agree with the best of all basic feasible solutions.'''
    rng = np.random.default_rng(1)
    for m, n in [(3, 3), (3, 3), (2, 4), (4, 3), (3, 3)]:
        p = random_distribution(rng, m)
        q = random_distribution(rng, n)
        cost = pixel_costs(p.support, q.support)
        flow, _, _, _ = transport_simplex(p.mass, q.mass, cost)
        assert float(np.sum(flow * cost)) == pytest.approx(
            exhaustive_basis_optimum(p.mass, q.mass, cost), abs=1e-9)


def test_matches_linear_programming():
    '''Random and heavily degenerate instances agree with HiGHS.'''
    rng = np.random.default_rng(2)
    for m, n in [(5, 6), (8, 4), (12, 12), (1, 5)]:
        p = random_distribution(rng, m, total=2.0)
        q = random_distribution(rng, n, total=2.0)
        assert emd(p, q)[0] == pytest.approx(linprog_emd(p, q), abs=1e-9)

    grid = [(i, j) for i in range(3) for j in range(3)]
    p = SpatialDistribution(grid, np.ones(9))
    q = SpatialDistribution([(i + 1, j + 2) for i, j in grid], np.ones(9))
    assert emd(p, q)[0] == pytest.approx(linprog_emd(p, q), abs=1e-9)
    assert emd(p, q)[0] == pytest.approx(math.sqrt(5), abs=1e-9)


def test_metric_properties():
    '''Symmetry and the triangle inequality on random triples.'''
    rng = np.random.default_rng(3)
    for _ in range(10):
        p, q, r = (random_distribution(rng, int(rng.integers(1, 8))) for _ in range(3))
        pq, qp = emd(p, q)[0], emd(q, p)[0]
        assert pq == pytest.approx(qp, abs=1e-10)
        assert emd(p, r)[0] <= pq + emd(q, r)[0] + 1e-10


def test_translation():
    '''Shifting a whole distribution by t costs exactly ‖t‖.'''
    rng = np.random.default_rng(4)
    p = random_distribution(rng, 6)
    shifted = SpatialDistribution(p.support + np.array([2, -5]), p.mass)
    assert emd(p, shifted)[0] == pytest.approx(math.hypot(2, 5), abs=1e-10)


def test_dual_certificate():
    '''Potentials are dual feasible, tight on used cells and close the duality gap.'''
    rng = np.random.default_rng(5)
    p = random_distribution(rng, 9, total=5.0)
    q = random_distribution(rng, 7, total=5.0)
    value, plan = emd(p, q)
    cost = pixel_costs(p.support, q.support)
    reduced = cost - plan.u[:, None] - plan.v[None, :]
    assert reduced.min() >= -1e-9
    for i, j, _ in plan.flows:
        assert abs(reduced[i, j]) <= 1e-9
    dual = float(plan.u @ p.mass + plan.v @ q.mass)
    assert dual == pytest.approx(plan.objective, abs=1e-9)
    assert value == pytest.approx(plan.objective / 5.0)


def test_northwest_corner_is_a_spanning_basis():
    '''The start has m+n-1 cells and respects both marginals.'''
    supply = np.array([0.5, 0.25, 0.25])
    demand = np.array([0.25, 0.25, 0.25, 0.25])
    flow, basis = northwest_corner(supply, demand)
    assert len(basis) == 6
    assert len(set(basis)) == 6
    assert np.allclose(flow.sum(axis=1), supply)
    assert np.allclose(flow.sum(axis=0), demand)


def test_invalid_inputs():
    '''Unbalanced totals, empty supports and bad masses are refused.'''
    with pytest.raises(NumericalError):
        emd(SpatialDistribution([(0, 0)], [1.0]), SpatialDistribution([(1, 1)], [2.0]))
    with pytest.raises(ValueError):
        emd(SpatialDistribution(np.zeros((0, 2)), []), SpatialDistribution([(1, 1)], [1.0]))
    with pytest.raises(ValueError):
        SpatialDistribution([(0, 0)], [0.0])
    with pytest.raises(ValueError):
        SpatialDistribution([(0, 0), (1, 1)], [1.0])


def test_distributions_from_points_and_stacks():
    '''Repeated pixels merge; PSDR stacks are integrated over σ, pruned and normalized.'''
    merged = distribution_from_points([(2, 2), (1, 1), (2, 2)], [1.0, 2.0, 3.0], normalize_to=3.0)
    assert merged.support.tolist() == [[1, 1], [2, 2]]
    assert merged.mass.tolist() == pytest.approx([1.0, 2.0])

    sigma = SigmaGrid.uniform(0.5, 3.0, 4)
    profile = tuple(make_profile('uniform', 4))
    one = scene_to_psdr(Scene((Cell(3, 4, 7.0, profile),), sigma, 10, 10))
    single = psdr_to_distribution(one, normalize_to=1.0)
    assert single.support.tolist() == [[3, 4]]
    assert single.mass.tolist() == pytest.approx([1.0])

    two = scene_to_psdr(Scene((Cell(1, 1, 5.0, profile), Cell(8, 8, 5.0, profile)), sigma, 10, 10))
    assert psdr_to_distribution(two, normalize_to=2.0).mass.tolist() == pytest.approx([1.0, 1.0])

    rng = np.random.default_rng(6)
    coeffs = rng.random((4, 12, 12))
    coeffs[:, 0, 0] = 1e-12
    dist = psdr_to_distribution(PsdrStack(coeffs, sigma), normalize_to=250.0)
    assert abs(dist.total - 250.0) <= 1e-12 * 250.0
    assert [0, 0] not in dist.support.tolist()

    with pytest.raises(NumericalError):
        psdr_to_distribution(PsdrStack.zeros(sigma, 4, 4), normalize_to=1.0)


def test_result_files(tmp_path):
    '''The plan CSV lists pixel pairs and the JSON carries the distance.'''
    p = SpatialDistribution([(0, 0), (5, 5)], [1.0, 1.0])
    q = SpatialDistribution([(0, 1), (5, 7)], [1.0, 1.0])
    value, plan = emd(p, q)
    assert value == pytest.approx(1.5)
    write_plan(plan, p, q, tmp_path / 'plan.csv')
    with open(tmp_path / 'plan.csv', newline='') as f:
        rows = list(csv.reader(f))
    assert rows[0] == ['i_row', 'i_col', 'j_row', 'j_col', 'flow']
    assert sorted(rows[1:]) == [['0', '0', '0', '1', '1'], ['5', '5', '5', '7', '1']]
    write_result(value, p, q, tmp_path / 'emd.json', prune_eps=1e-8)
    saved = json.loads((tmp_path / 'emd.json').read_text())
    assert saved['emd_pixels'] == pytest.approx(1.5)
    assert saved['support_sizes'] == [2, 2]


@pytest.mark.slow
def test_matches_exhaustive_enumeration_on_many_instances():
    '''200 random instances with supports up to 4x4 agree with enumeration to 1e-9.'''
    rng = np.random.default_rng(99)
    for _ in range(200):
        m, n = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        p = random_distribution(rng, m)
        q = random_distribution(rng, n)
        cost = pixel_costs(p.support, q.support)
        flow, _, _, _ = transport_simplex(p.mass, q.mass, cost)
        assert abs(float(np.sum(flow * cost)) - exhaustive_basis_optimum(p.mass, q.mass, cost)) <= 1e-9
