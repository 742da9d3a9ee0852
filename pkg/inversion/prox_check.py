'''
Randomized property batteries for the proximal operators: the Moreau
identity, ellipsoid KKT conditions, and agreement with independent oracles.
Backs the `prox-check` command.
'''
import logging
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np
from scipy.optimize import brentq

from inversion.prox import (positive_part, project_ellipsoid, prox_conjugate,
                            prox_nonneg_group_ball, prox_nonneg_group_weighted)

DEFAULT_CASES = 10_000
MAX_DIM = 16
MOREAU_TOL = 1e-8
KKT_TOL = 1e-8
ORACLE_TOL = 1e-6
CERTIFICATE_SAMPLES = 10_000


@dataclass
class CheckResult:
    name: str
    cases: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def random_case(rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, float]:
    '''One random (x, ξ, γ) triple with dimension 1..16.'''
    dim = int(rng.integers(1, MAX_DIM + 1))
    x = rng.normal(0.0, 2.0, dim)
    xi = rng.uniform(0.2, 5.0, dim)
    gamma = float(rng.uniform(0.05, 3.0))
    return x, xi, gamma


def badly_scaled_case(rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, float]:
    '''Like random_case, but ξ spans 10⁻³..10³ and γ spans 10⁻²..10 on a log scale.'''
    dim = int(rng.integers(1, MAX_DIM + 1))
    x = rng.normal(0.0, 2.0, dim)
    xi = 10.0 ** rng.uniform(-3.0, 3.0, dim)
    gamma = float(10.0 ** rng.uniform(-2.0, 1.0))
    return x, xi, gamma


def group_objective(y: np.ndarray, x: np.ndarray, xi: np.ndarray, gamma: float) -> np.ndarray:
    '''½‖y − x‖² + γ‖ξ ⊙ y‖₂ over the last axis (y ≥ 0 assumed).'''
    return 0.5 * np.sum((y - x) ** 2, axis=-1) + gamma * np.sqrt(np.sum((xi * y) ** 2, axis=-1))


def kkt_reduction_oracle(x: np.ndarray, xi: np.ndarray, gamma: float) -> np.ndarray:
    '''
    Minimizer of ½‖y − x‖² + γ‖ξ ⊙ y‖₂ over y ≥ 0 from the primal optimality
    conditions: with t = ‖ξ ⊙ y‖, y = x₊·t/(t + γξ²) and t solves
    ‖ξ x₊/(t + γξ²)‖ = 1, found with Brent's method.
    '''
    xp = positive_part(x)

    def h(t: float) -> float:
        return float(np.linalg.norm(xi * xp / (t + gamma * xi ** 2))) - 1.0

    if h(0.0) <= 0:
        return np.zeros_like(xp)
    upper = float(np.linalg.norm(xi * xp)) + 1.0
    t = brentq(h, 0.0, upper, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    return xp * t / (t + gamma * xi ** 2)


def moreau_battery(cases: int, rng: np.random.Generator,
                   prox: Callable = prox_nonneg_group_weighted,
                   conjugate: Callable = prox_conjugate) -> CheckResult:
    worst = 0.0
    for _ in range(cases):
        x, xi, gamma = random_case(rng)
        residual = prox(x, xi, gamma) + conjugate(x, xi, gamma) - x
        worst = max(worst, float(np.max(np.abs(residual))))
    return CheckResult('moreau identity', cases, worst, MOREAU_TOL)


def kkt_battery(cases: int, rng: np.random.Generator,
                project: Callable = project_ellipsoid) -> CheckResult:
    '''
    Dual feasibility, complementary slackness, primal feasibility and
    stationarity. Every other case uses badly scaled weights. Slackness is
    |λ*·(‖y/ξ‖² − γ²)|/γ², divided by λ* once λ* exceeds 1.
    '''
    worst = 0.0
    for i in range(cases):
        x, xi, gamma = badly_scaled_case(rng) if i % 2 else random_case(rng)
        y, lam = project(x, xi, gamma)
        slack = float(np.sum((y / xi) ** 2)) - gamma ** 2
        errors = (
            max(0.0, -lam),
            abs(lam * slack) / (gamma ** 2 * max(1.0, lam)),
            max(0.0, slack) / gamma ** 2,
            float(np.max(np.abs(y - x + 2.0 * lam * y / xi ** 2))) / max(1.0, float(np.max(np.abs(x)))),
        )
        worst = max(worst, *errors)
    return CheckResult('ellipsoid kkt', cases, worst, KKT_TOL)


def oracle_battery(cases: int, rng: np.random.Generator,
                   prox_ball: Callable = prox_nonneg_group_ball,
                   prox_weighted: Callable = prox_nonneg_group_weighted,
                   samples: int = CERTIFICATE_SAMPLES) -> Tuple[CheckResult, CheckResult]:
    '''
    Compares both prox flavours against the scalar-reduction oracle and checks
    that no random non-negative point near the answer has a lower objective.
    '''
    worst_oracle = 0.0
    worst_certificate = 0.0
    for _ in range(cases):
        x, xi, gamma = random_case(rng)
        ones = np.ones_like(xi)
        for weights, got in ((ones, prox_ball(x, gamma)), (xi, prox_weighted(x, xi, gamma))):
            expected = kkt_reduction_oracle(x, weights, gamma)
            worst_oracle = max(worst_oracle, float(np.max(np.abs(got - expected))))

            scale = 0.1 + float(np.max(np.abs(x)))
            z = positive_part(got + rng.normal(0.0, scale, (samples, x.size)))
            gap = group_objective(got, x, weights, gamma) - group_objective(z, x, weights, gamma)
            worst_certificate = max(worst_certificate, float(np.max(gap)))
    return (CheckResult('prox vs oracle', cases, worst_oracle, ORACLE_TOL),
            CheckResult('optimality certificate', cases, max(0.0, worst_certificate), 1e-10))


def run_prox_check(cases: int = DEFAULT_CASES, seed: int = 0, oracle_cases: int = None,
                   certificate_samples: int = CERTIFICATE_SAMPLES, **operators) -> List[CheckResult]:
    '''
    Runs every battery. `operators` may replace prox, conjugate, project,
    prox_ball or prox_weighted with alternative implementations.
    '''
    if cases < 0:
        raise ValueError(f'cases must be >= 0, got {cases}')
    if cases == 0:
        logging.warning('prox-check asked for 0 cases; nothing to verify')
    if oracle_cases is None:
        oracle_cases = max(1, cases // 10) if cases else 0

    rng = np.random.Generator(np.random.Philox(seed))
    results = [
        moreau_battery(cases, rng, operators.get('prox', prox_nonneg_group_weighted),
                       operators.get('conjugate', prox_conjugate)),
        kkt_battery(cases, rng, operators.get('project', project_ellipsoid)),
    ]
    results.extend(oracle_battery(oracle_cases, rng,
                                  operators.get('prox_ball', prox_nonneg_group_ball),
                                  operators.get('prox_weighted', prox_nonneg_group_weighted),
                                  samples=certificate_samples))
    for r in results:
        log = logging.info if r.passed else logging.error
        log('%-24s cases=%-6d max_error=%.3e tol=%.0e %s',
            r.name, r.cases, r.max_error, r.tolerance, 'PASS' if r.passed else 'FAIL')
    return results
