'''
Accelerated proximal gradient (FISTA) for

    min_a ‖Ãa − d‖²_D + λ·Σ_r ‖a_{r,aleph}‖₂   subject to a ≥ 0, supp(a) ⊆ μ,

with per-iteration cost, NSE and group-sparsity logging.
'''
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from data_processing.grid import (ImageGrid, NumericalError, PsdrStack,
                                  WeightMaps, check_same_shape)
from inversion.diffusion_operator import (DEFAULT_POWER_ITERS, KernelBank,
                                          adjoint_array, analytic_norm_bound,
                                          forward_array, op_norm_sq)
from inversion.prox import apply_prox_stack, regularizer_value

STEP_MODES = ('power_iteration', 'analytic_bound', 'fixed')
MOMENTUM_MODES = ('fista', 'none')
STEP_SAFETY = 1e-3
EARLY_STOP_WINDOW = 50
DEFAULT_LOG_EVERY = 10


@dataclass
class SolveConfig:
    lam: float = 0.5
    iters: int = 2000
    step_mode: str = 'power_iteration'
    eta: Optional[float] = None
    momentum: str = 'fista'
    rank: Optional[int] = 1
    log_every: int = DEFAULT_LOG_EVERY
    tol_rel_cost: Optional[float] = None
    power_iters: int = DEFAULT_POWER_ITERS
    power_seed: int = 0
    prox_mode: str = 'ball'
    xi: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f'lam must be >= 0, got {self.lam}')
        if self.iters < 1:
            raise ValueError(f'iters must be >= 1, got {self.iters}')
        if self.step_mode not in STEP_MODES:
            raise ValueError(f'step_mode must be one of {STEP_MODES}, got {self.step_mode!r}')
        if self.step_mode == 'fixed' and not (self.eta is not None and self.eta > 0):
            raise ValueError('fixed step mode needs a positive eta')
        if self.momentum not in MOMENTUM_MODES:
            raise ValueError(f'momentum must be one of {MOMENTUM_MODES}, got {self.momentum!r}')
        if self.log_every < 1:
            raise ValueError(f'log_every must be >= 1, got {self.log_every}')

    @property
    def approx(self) -> str:
        return 'full' if self.rank is None else 'rank'


@dataclass
class SolveLog:
    iters: List[int] = field(default_factory=list)
    costs: List[float] = field(default_factory=list)
    nses: List[float] = field(default_factory=list)
    gss: List[float] = field(default_factory=list)
    eta: float = float('nan')

    def append(self, it: int, cost_value: float, nse: float, gs: float):
        if self.iters and it <= self.iters[-1]:
            raise ValueError(f'log iterations must increase: {it} after {self.iters[-1]}')
        self.iters.append(it)
        self.costs.append(cost_value)
        self.nses.append(nse)
        self.gss.append(gs)

    def rows(self) -> List[Tuple[int, float, float, float]]:
        return list(zip(self.iters, self.costs, self.nses, self.gss))

    def __len__(self) -> int:
        return len(self.iters)


def fista_momentum(i: int, t_prev: float) -> Tuple[float, float]:
    '''t = (1 + √(1 + 4·t_prev²))/2 and α = (t_prev − 1)/t.'''
    if t_prev < 1:
        raise ValueError(f't_prev must be >= 1, got {t_prev}')
    t = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_prev * t_prev))
    return t, (t_prev - 1.0) / t


def _weighted_sq_norm(r: np.ndarray, weights: WeightMaps) -> float:
    return float(np.sum(weights.w2 * r * r))


def cost(a: PsdrStack, d_obs: ImageGrid, bank: KernelBank, weights: WeightMaps, lam: float,
         approx: str = 'rank', xi: Optional[Sequence[float]] = None) -> Tuple[float, float, float]:
    '''Returns (‖Ãa − d‖²_D + λ·GS, NSE, GS).'''
    check_same_shape(d_obs.shape, a.image_shape, 'cost: observation vs stack')
    residual = forward_array(bank, a.coeffs, approx) - d_obs.data
    data_term = _weighted_sq_norm(residual, weights)
    reference = _weighted_sq_norm(d_obs.data, weights)
    if reference > 0:
        nse = data_term / reference
    else:
        nse = 0.0 if data_term == 0 else float('inf')
    gs = regularizer_value(a, xi)
    if math.isinf(gs):
        return float('inf'), nse, gs
    return data_term + lam * gs, nse, gs


def step_size(bank: KernelBank, weights: WeightMaps, cfg: SolveConfig) -> float:
    '''η used in b − η·Ã*(Ãb − d); the prox threshold is then η·λ/2.'''
    if cfg.step_mode == 'fixed':
        return float(cfg.eta)
    if cfg.step_mode == 'analytic_bound':
        norm_sq = analytic_norm_bound(bank, weights, cfg.approx)
    else:
        norm_sq = op_norm_sq(bank, weights, cfg.approx, cfg.power_iters, cfg.power_seed) / (1.0 - STEP_SAFETY)
    if not norm_sq > 0 or not math.isfinite(norm_sq):
        raise NumericalError(f'operator norm estimate {norm_sq} gives no usable step size')
    return 1.0 / norm_sq


def _early_stop(log: SolveLog, tol: float) -> bool:
    current_it, current = log.iters[-1], log.costs[-1]
    for it, past in zip(reversed(log.iters), reversed(log.costs)):
        if it <= current_it - EARLY_STOP_WINDOW:
            return abs(past - current) <= tol * max(abs(past), np.finfo(float).tiny)
    return False


def solve(d_obs: ImageGrid, bank: KernelBank, weights: WeightMaps, cfg: SolveConfig,
          a0: Optional[PsdrStack] = None) -> Tuple[PsdrStack, SolveLog]:
    '''
    Runs cfg.iters proximal gradient iterations (with FISTA extrapolation
    unless momentum is 'none') starting from a0, or zero.
    '''
    check_same_shape(weights.shape, d_obs.shape, 'solve: weights vs observation')
    if a0 is None:
        a0 = PsdrStack.zeros(bank.sigma, d_obs.rows, d_obs.cols, d_obs.pixel_pitch)
    check_same_shape((bank.bins,) + d_obs.shape, a0.coeffs.shape, 'solve: initial stack')
    if not np.any(d_obs.data):
        logging.warning('Observation is identically zero; the solution is the zero stack')
    elif d_obs.data.max() > 1.0:
        logging.warning('Observation max %.3f exceeds 1; was it normalized from 8-bit?', d_obs.data.max())

    eta = step_size(bank, weights, cfg)
    gamma_lam = eta * cfg.lam / 2.0
    logging.info('--- Starting solve: %d iterations, lambda=%g, eta=%.6g, momentum=%s, approx=%s ---',
                 cfg.iters, cfg.lam, eta, cfg.momentum, cfg.approx)

    def prox(stack: PsdrStack, threshold: float) -> PsdrStack:
        return apply_prox_stack(stack, threshold, cfg.xi, cfg.prox_mode, weights.mu)

    log = SolveLog(eta=eta)

    def record(it: int, stack: PsdrStack):
        value, nse, gs = cost(stack, d_obs, bank, weights, cfg.lam, cfg.approx, cfg.xi)
        if not math.isfinite(value):
            raise NumericalError(f'cost became non-finite ({value}) at iteration {it}; the iteration diverged')
        log.append(it, value, nse, gs)
        logging.debug('iter %6d  cost %.12g  nse %.6g  gs %.6g', it, value, nse, gs)

    a = prox(a0, 0.0)
    a_prev = a.coeffs
    record(0, a)
    t = 1.0
    for i in range(1, cfg.iters + 1):
        if cfg.momentum == 'fista':
            t, alpha = fista_momentum(i, t)
        else:
            alpha = 0.0
        b = a.coeffs + alpha * (a.coeffs - a_prev) if alpha else a.coeffs
        residual = forward_array(bank, b, cfg.approx) - d_obs.data
        z = b - eta * adjoint_array(bank, residual, weights, cfg.approx)
        a_prev = a.coeffs
        a = prox(a.with_coeffs(z), gamma_lam)

        if i % cfg.log_every == 0 or i == cfg.iters:
            record(i, a)
            if cfg.tol_rel_cost is not None and _early_stop(log, cfg.tol_rel_cost):
                logging.info('Relative cost change below %g over %d iterations; stopping at %d',
                             cfg.tol_rel_cost, EARLY_STOP_WINDOW, i)
                break

    logging.info('Solve finished: cost %.6g, nse %.6g, gs %.6g', log.costs[-1], log.nses[-1], log.gss[-1])
    return a, log


def _format(value: float) -> str:
    return 'infeasible' if math.isinf(value) else f'{value:.12g}'


def write_log(log: SolveLog, path: Path) -> None:
    '''CSV with header iter,cost,nse,gs.'''
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['iter', 'cost', 'nse', 'gs'])
        for it, value, nse, gs in log.rows():
            writer.writerow([it, _format(value), _format(nse), _format(gs)])
