'''
Earth mover's distance between two equal-mass pixel distributions, solved
exactly as a balanced transportation problem with the MODI (u-v) simplex.

The basis is kept as an explicit spanning tree over row and column nodes
(m + n - 1 cells, degenerate zero-flow cells included), so no ε perturbation
is needed. Bland's rule picks the entering and leaving cells.
'''
import csv
import json
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from data_processing.grid import NumericalError, PsdrStack

PRUNE_EPS = 1e-8
BALANCE_TOL = 1e-6
REDUCED_COST_TOL = 1e-12
REFRESH_EVERY = 50

Cell = Tuple[int, int]


@dataclass(frozen=True)
class SpatialDistribution:
    '''Point masses on pixel positions (row, col).'''
    support: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        support = np.asarray(self.support, dtype=np.int64).reshape(-1, 2)
        mass = np.asarray(self.mass, dtype=np.float64).reshape(-1)
        if len(support) != len(mass):
            raise ValueError(f'{len(support)} support points for {len(mass)} masses')
        if np.any(mass <= 0) or not np.all(np.isfinite(mass)):
            raise ValueError('masses must be finite and positive')
        object.__setattr__(self, 'support', support)
        object.__setattr__(self, 'mass', mass)

    @property
    def total(self) -> float:
        return float(self.mass.sum())

    def __len__(self) -> int:
        return len(self.mass)


@dataclass
class TransportPlan:
    '''Non-zero flows (i, j, f) between support indices, objective Σ f·c and the dual potentials.'''
    flows: List[Tuple[int, int, float]]
    objective: float
    u: np.ndarray
    v: np.ndarray
    pivots: int = 0


def distribution_from_points(points: Sequence[Tuple[int, int]], mass: Sequence[float],
                             normalize_to: Optional[float] = None) -> SpatialDistribution:
    '''Merges masses on repeated pixels (row-major order) and optionally rescales.'''
    points = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    mass = np.asarray(mass, dtype=np.float64)
    unique, inverse = np.unique(points, axis=0, return_inverse=True)
    merged = np.bincount(inverse.reshape(-1), weights=mass, minlength=len(unique))
    if normalize_to is not None:
        merged = merged * (normalize_to / merged.sum())
    return SpatialDistribution(unique, merged)


def psdr_to_distribution(a: PsdrStack, normalize_to: float, prune_eps: float = PRUNE_EPS) -> SpatialDistribution:
    '''
    Per-pixel mass Σ_k √Δ_k·coeffs[k]; pixels below prune_eps·max are dropped
    and the rest rescaled to sum to normalize_to.
    '''
    if not normalize_to > 0:
        raise ValueError(f'normalize_to must be positive, got {normalize_to}')
    mass = a.spatial_mass()
    peak = float(mass.max())
    if not peak > 0:
        raise NumericalError('PSDR stack has no positive mass to distribute')
    keep = (mass > 0) & (mass >= prune_eps * peak)
    rows, cols = np.nonzero(keep)
    values = mass[rows, cols]
    dropped = int(np.count_nonzero(mass > 0)) - len(values)
    if dropped:
        logging.debug('Pruned %d pixels below %.1e of the peak mass', dropped, prune_eps)
    return SpatialDistribution(np.column_stack([rows, cols]), values * (normalize_to / values.sum()))


def pixel_costs(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    '''Euclidean distances between integer pixel positions.'''
    diff = source[:, None, :].astype(np.float64) - target[None, :, :].astype(np.float64)
    return np.hypot(diff[..., 0], diff[..., 1])


def northwest_corner(supply: np.ndarray, demand: np.ndarray) -> Tuple[np.ndarray, List[Cell]]:
    '''Initial staircase basis of exactly m + n - 1 cells (degenerate zeros included).'''
    m, n = len(supply), len(demand)
    supply = supply.astype(np.float64).copy()
    demand = demand.astype(np.float64).copy()
    flow = np.zeros((m, n))
    basis = []
    i = j = 0
    for step in range(m + n - 1):
        f = max(0.0, min(supply[i], demand[j]))
        flow[i, j] = f
        basis.append((i, j))
        supply[i] -= f
        demand[j] -= f
        if step == m + n - 2:
            break
        if i == m - 1:
            j += 1
        elif j == n - 1 or supply[i] <= demand[j]:
            i += 1
        else:
            j += 1
    return flow, basis


class _BasisTree:
    '''Basic cells as edges between row nodes 0..m-1 and column nodes m..m+n-1.'''

    def __init__(self, m: int, n: int, cells: Sequence[Cell]):
        self.m, self.n = m, n
        self.adj: List[Set[int]] = [set() for _ in range(m + n)]
        for i, j in cells:
            self.add(i, j)

    def add(self, i: int, j: int):
        self.adj[i].add(self.m + j)
        self.adj[self.m + j].add(i)

    def remove(self, i: int, j: int):
        self.adj[i].discard(self.m + j)
        self.adj[self.m + j].discard(i)

    def component(self, start: int) -> List[int]:
        seen = {start}
        queue = deque([start])
        while queue:
            node = queue.popleft()
            for nxt in self.adj[node]:
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        return list(seen)

    def path(self, start: int, goal: int) -> List[int]:
        prev: Dict[int, Optional[int]] = {start: None}
        queue = deque([start])
        while queue:
            node = queue.popleft()
            if node == goal:
                break
            for nxt in self.adj[node]:
                if nxt not in prev:
                    prev[nxt] = node
                    queue.append(nxt)
        if goal not in prev:
            raise NumericalError('basis is not a spanning tree')
        nodes = []
        cur = goal
        while cur is not None:
            nodes.append(cur)
            cur = prev[cur]
        return nodes[::-1]

    def cell(self, a: int, b: int) -> Cell:
        return (a, b - self.m) if a < self.m else (b, a - self.m)

    def potentials(self, cost: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        '''u_i + v_j = c_ij on every basic cell, with u_0 = 0.'''
        values = np.full(self.m + self.n, np.nan)
        values[0] = 0.0
        queue = deque([0])
        while queue:
            node = queue.popleft()
            for nxt in self.adj[node]:
                if np.isnan(values[nxt]):
                    i, j = self.cell(node, nxt)
                    values[nxt] = cost[i, j] - values[node]
                    queue.append(nxt)
        if np.isnan(values).any():
            raise NumericalError('basis is not a spanning tree')
        return values[:self.m].copy(), values[self.m:].copy()


def transport_simplex(supply: np.ndarray, demand: np.ndarray, cost: np.ndarray,
                      max_pivots: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    '''
    Minimizes Σ f·c over balanced transport plans. Returns (flow, u, v, pivots)
    where u, v are optimal dual potentials.
    '''
    m, n = cost.shape
    flow, basis = northwest_corner(supply, demand)
    tree = _BasisTree(m, n, basis)
    basic = np.zeros((m, n), dtype=bool)
    for cell in basis:
        basic[cell] = True

    u, v = tree.potentials(cost)
    tol = REDUCED_COST_TOL * max(1.0, float(cost.max()))
    limit = max_pivots if max_pivots is not None else 50 * (m + n) * max(m, n)
    pivots = 0
    while True:
        reduced = cost - u[:, None] - v[None, :]
        reduced[basic] = 0.0
        negative = np.flatnonzero(reduced.ravel() < -tol)
        if negative.size == 0:
            break
        if pivots >= limit:
            raise NumericalError(f'transportation simplex did not converge in {limit} pivots')
        ie, je = divmod(int(negative[0]), n)

        nodes = tree.path(ie, m + je)
        cycle = [tree.cell(a, b) for a, b in zip(nodes[:-1], nodes[1:])]
        minus, plus = cycle[0::2], cycle[1::2]
        theta = min(flow[c] for c in minus)
        leaving = min(c for c in minus if flow[c] == theta)
        for c in plus:
            flow[c] += theta
        for c in minus:
            flow[c] -= theta
        flow[leaving] = 0.0
        flow[ie, je] = theta

        tree.remove(*leaving)
        basic[leaving] = False
        pivots += 1
        if pivots % REFRESH_EVERY == 0:
            tree.add(ie, je)
            basic[ie, je] = True
            u, v = tree.potentials(cost)
        else:
            # shift the side holding row ie so the entering cell's reduced cost becomes 0
            delta = reduced[ie, je]
            side = np.asarray(tree.component(ie))
            rows, cols = side[side < m], side[side >= m] - m
            u[rows] += delta
            v[cols] -= delta
            tree.add(ie, je)
            basic[ie, je] = True
        logging.debug('pivot %d: enter (%d, %d), leave %s, theta %.3g', pivots, ie, je, leaving, theta)

    u, v = tree.potentials(cost)
    return flow, u, v, pivots


def emd(p_hat: SpatialDistribution, p_true: SpatialDistribution) -> Tuple[float, TransportPlan]:
    '''
    Exact earth mover's distance in pixels (objective divided by the total
    mass) and the optimal plan with its dual certificate.
    '''
    if len(p_hat) == 0 or len(p_true) == 0:
        raise ValueError('both distributions need a non-empty support')
    total = p_hat.total
    if abs(total - p_true.total) > BALANCE_TOL * max(total, p_true.total):
        raise NumericalError(f'unbalanced totals {total:.12g} vs {p_true.total:.12g}; normalize both first')

    cost = pixel_costs(p_hat.support, p_true.support)
    flow, u, v, pivots = transport_simplex(p_hat.mass, p_true.mass, cost)
    objective = float(np.sum(flow * cost))
    rows, cols = np.nonzero(flow > 0)
    flows = [(int(i), int(j), float(flow[i, j])) for i, j in zip(rows, cols)]
    value = objective / total
    logging.info('EMD %.6f px over %dx%d supports (%d pivots)', value, len(p_hat), len(p_true), pivots)
    return value, TransportPlan(flows, objective, u, v, pivots)


def write_plan(plan: TransportPlan, p_hat: SpatialDistribution, p_true: SpatialDistribution, path: Path) -> None:
    '''CSV i_row,i_col,j_row,j_col,flow.'''
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['i_row', 'i_col', 'j_row', 'j_col', 'flow'])
        for i, j, value in plan.flows:
            writer.writerow([*p_hat.support[i], *p_true.support[j], f'{value:.12g}'])


def write_result(value: float, p_hat: SpatialDistribution, p_true: SpatialDistribution, path: Path,
                 prune_eps: Optional[float] = None) -> None:
    payload = {
        'emd_pixels': value,
        'total_mass': p_true.total,
        'support_sizes': [len(p_hat), len(p_true)],
    }
    if prune_eps is not None:
        payload['prune_eps'] = prune_eps
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2)
