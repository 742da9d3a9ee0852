'''
Proximal and projection operators for the non-negative (weighted) group
sparsity regularizer γ·Σ_r ‖ξ ⊙ a_r‖₂ + ι_{a ≥ 0}.

Row-wise helpers work on (P, G) arrays, one group per row. The single-vector
functions are thin wrappers over them, so a stack processed pixel by pixel
gives the same numbers as the whole stack at once.
'''
import logging
from typing import Optional, Sequence, Tuple

import numpy as np

from data_processing.grid import PsdrStack, check_same_shape

ELLIPSOID_TOL = 1e-12
NEGATIVE_TOL = 1e-12
MAX_ROOT_ITERS = 200
PROX_MODES = ('ball', 'ellipsoid')


def positive_part(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, 0.0)


def negative_part(x: np.ndarray) -> np.ndarray:
    return np.where(x < 0, x, 0.0)


def _row_norms(rows: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(rows * rows, axis=1))


def _check_gamma(gamma: float):
    if not gamma > 0:
        raise ValueError(f'gamma must be positive, got {gamma}')


def check_weights(xi: Optional[Sequence[float]], size: int) -> np.ndarray:
    '''Returns ξ as a float vector of the given size (ones when None).'''
    if xi is None:
        return np.ones(size)
    xi = np.asarray(xi, dtype=np.float64).reshape(-1)
    if xi.size != size:
        raise ValueError(f'xi has {xi.size} entries, expected {size}')
    if not np.all(np.isfinite(xi)) or np.any(xi <= 0):
        raise ValueError('xi must be finite and strictly positive')
    return xi


def _as_vector(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise ValueError('input vector contains NaN or Inf')
    return x


def ellipsoid_multipliers(rows: np.ndarray, xi: np.ndarray, gamma: float,
                          tol: float = ELLIPSOID_TOL) -> np.ndarray:
    '''
    Lagrange multipliers λ* ≥ 0 of the projections of each row onto
    {y : ‖y/ξ‖ ≤ γ}; zero for rows already inside.

    Safeguarded Newton on 1/‖ξx/(ξ²+2λ)‖ − 1/γ inside the bracket
    [0, max(ξ)·‖x‖/(2γ)], falling back to bisection when a step leaves it.
    '''
    lam = np.zeros(rows.shape[0])
    outside = _row_norms(rows / xi) > gamma
    if not outside.any():
        return lam

    x = rows[outside]
    xi2 = xi * xi
    lo = np.zeros(x.shape[0])
    hi = xi.max() * _row_norms(x) / (2.0 * gamma)
    cur = lo.copy()
    active = np.ones(x.shape[0], dtype=bool)
    for _ in range(MAX_ROOT_ITERS):
        denom = xi2 + 2.0 * cur[:, None]
        s = xi * x / denom
        n = _row_norms(s)
        phi = n - gamma
        active &= np.abs(phi) > tol * gamma
        active &= (hi - lo) > np.finfo(float).eps * np.maximum(hi, 1.0)
        if not active.any():
            break
        lo = np.where(active & (phi > 0), cur, lo)
        hi = np.where(active & (phi < 0), cur, hi)
        slope = 2.0 * np.sum(s * s / denom, axis=1) / n ** 3
        step = cur - (1.0 / n - 1.0 / gamma) / slope
        step = np.where((step > lo) & (step < hi), step, 0.5 * (lo + hi))
        cur = np.where(active, step, cur)

    # the upper end of the bracket is always feasible
    denom = xi2 + 2.0 * cur[:, None]
    phi = _row_norms(xi * x / denom) - gamma
    cur = np.where(phi > tol * gamma, hi, cur)
    lam[outside] = cur
    return lam


def project_ellipsoid_rows(rows: np.ndarray, xi: np.ndarray, gamma: float,
                           tol: float = ELLIPSOID_TOL) -> Tuple[np.ndarray, np.ndarray]:
    lam = ellipsoid_multipliers(rows, xi, gamma, tol)
    xi2 = xi * xi
    y = xi2 * rows / (xi2 + 2.0 * lam[:, None])
    inside = lam == 0
    y[inside] = rows[inside]
    return y, lam


def shrink_rows(rows: np.ndarray, gamma: float) -> np.ndarray:
    '''Row-wise x₊·max(0, 1 − γ/‖x₊‖).'''
    xp = positive_part(rows)
    norms = _row_norms(xp)
    factor = np.where(norms > gamma, 1.0 - gamma / np.where(norms > 0, norms, 1.0), 0.0)
    return xp * factor[:, None]


def weighted_prox_rows(rows: np.ndarray, xi: np.ndarray, gamma: float,
                       tol: float = ELLIPSOID_TOL) -> np.ndarray:
    '''Row-wise x₊ − Proj_E(x₊).'''
    xp = positive_part(rows)
    y, _ = project_ellipsoid_rows(xp, xi, gamma, tol)
    return positive_part(xp - y)


def project_ball(x, gamma: float) -> np.ndarray:
    '''Euclidean projection onto the ball of radius γ.'''
    _check_gamma(gamma)
    x = _as_vector(x)
    norm = float(_row_norms(x[None, :])[0])
    if norm <= gamma:
        return x.copy()
    return (gamma / norm) * x


def project_ellipsoid(x, xi, gamma: float, tol: float = ELLIPSOID_TOL) -> Tuple[np.ndarray, float]:
    '''
    Projects x onto {y : ‖y/ξ‖₂ ≤ γ}. Returns (y, λ*) with
    y_i = ξ_i² x_i / (ξ_i² + 2λ*); λ* = 0 when x is already feasible.
    '''
    _check_gamma(gamma)
    if not tol > 0:
        raise ValueError(f'tol must be positive, got {tol}')
    x = _as_vector(x)
    xi = check_weights(xi, x.size)
    y, lam = project_ellipsoid_rows(x[None, :], xi, gamma, tol)
    return y[0], float(lam[0])


def prox_nonneg_group_ball(x, gamma: float) -> np.ndarray:
    '''prox of γ‖·‖₂ + ι_{≥0}: x₊·max(0, 1 − γ/‖x₊‖₂).'''
    _check_gamma(gamma)
    return shrink_rows(_as_vector(x)[None, :], gamma)[0]


def prox_nonneg_group_weighted(x, xi, gamma: float, tol: float = ELLIPSOID_TOL) -> np.ndarray:
    '''prox of γ‖ξ ⊙ ·‖₂ + ι_{≥0}: x₊ − Proj_E(x₊) with E = {‖y/ξ‖ ≤ γ}.'''
    _check_gamma(gamma)
    x = _as_vector(x)
    return weighted_prox_rows(x[None, :], check_weights(xi, x.size), gamma, tol)[0]


def prox_conjugate(x, xi, gamma: float, tol: float = ELLIPSOID_TOL) -> np.ndarray:
    '''prox of the Fenchel conjugate: x₋ + Proj_E(x₊).'''
    _check_gamma(gamma)
    x = _as_vector(x)
    xi = check_weights(xi, x.size)
    y, _ = project_ellipsoid_rows(positive_part(x)[None, :], xi, gamma, tol)
    return negative_part(x) + y[0]


def apply_prox_stack(a: PsdrStack, gamma_lam: float, xi: Optional[Sequence[float]] = None,
                     mode: str = 'ball', mask: Optional[np.ndarray] = None,
                     tol: float = ELLIPSOID_TOL) -> PsdrStack:
    '''
    Applies the regularizer's prox to a whole stack: positive part on bins
    outside aleph, per-pixel group prox on the aleph fiber, zero where the
    mask is 0.
    '''
    if gamma_lam < 0:
        raise ValueError(f'gamma_lam must be >= 0, got {gamma_lam}')
    if mode not in PROX_MODES:
        raise ValueError(f'mode must be one of {PROX_MODES}, got {mode!r}')
    aleph = a.sigma.aleph_index
    xi = check_weights(xi, aleph.size)
    if mode == 'ball' and np.any(xi != 1.0):
        raise ValueError('ball mode requires xi = 1; use mode="ellipsoid" for weighted groups')

    out = positive_part(a.coeffs)
    if gamma_lam > 0 and aleph.size:
        k, rows, cols = out.shape
        fibers = out[aleph].reshape(aleph.size, rows * cols).T
        if mode == 'ball':
            shrunk = shrink_rows(fibers, gamma_lam)
        else:
            shrunk = weighted_prox_rows(fibers, xi, gamma_lam, tol)
        out[aleph] = shrunk.T.reshape(aleph.size, rows, cols)
    if mask is not None:
        check_same_shape(a.image_shape, np.shape(mask), 'apply_prox_stack: mask')
        out = out * (np.asarray(mask) != 0)
    return a.with_coeffs(out)


def regularizer_value(a: PsdrStack, xi: Optional[Sequence[float]] = None) -> float:
    '''
    GS = Σ over pixels of ‖ξ ⊙ aleph fiber‖₂; +inf when any coefficient is
    below -1e-12 (the non-negativity indicator).
    '''
    if np.any(a.coeffs < -NEGATIVE_TOL):
        logging.debug('Regularizer is infinite: min coefficient %.3e', a.coeffs.min())
        return float('inf')
    aleph = a.sigma.aleph_index
    xi = check_weights(xi, aleph.size)
    fibers = a.coeffs[aleph] * xi[:, None, None]
    return float(np.sum(np.sqrt(np.sum(fibers * fibers, axis=0))))
