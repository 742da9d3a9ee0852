'''Grid metadata and the dense tensor types shared by every stage.'''
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np


class InvDiffError(Exception):
    '''Base class for all errors raised by this package.'''


class ShapeMismatchError(InvDiffError, ValueError):
    '''Raised when two arrays that must agree in shape do not.'''


class NumericalError(InvDiffError, ArithmeticError):
    '''Raised on divergence, undefined scalings or infeasible numerical input.'''


@dataclass(frozen=True)
class ImageGrid:
    '''
    M×N observation (or any per-pixel map) with its pixel pitch in micrometers.
    '''
    data: np.ndarray
    pixel_pitch: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ShapeMismatchError(f'ImageGrid needs a non-empty 2D array, got shape {data.shape}')
        if not self.pixel_pitch > 0:
            raise ValueError(f'pixel_pitch must be positive, got {self.pixel_pitch}')
        if not np.all(np.isfinite(data)):
            raise ValueError('ImageGrid data contains NaN or Inf')
        object.__setattr__(self, 'data', data)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class SigmaGrid:
    '''
    Bin edges σ_0 < … < σ_K (pixel units) and the 1-based set of bins
    subject to group-sparsity regularization (aleph).
    '''
    edges: Tuple[float, ...]
    aleph: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        if len(edges) < 2:
            raise ValueError('SigmaGrid needs at least two edges (K >= 1)')
        if any(b <= a for a, b in zip(edges[:-1], edges[1:])):
            raise ValueError(f'sigma edges must be strictly increasing: {edges}')
        k = len(edges) - 1
        aleph = tuple(range(1, k + 1)) if self.aleph is None else tuple(sorted(set(int(i) for i in self.aleph)))
        if any(i < 1 or i > k for i in aleph):
            raise ValueError(f'aleph {aleph} is not a subset of 1..{k}')
        object.__setattr__(self, 'edges', edges)
        object.__setattr__(self, 'aleph', aleph)

    @classmethod
    def uniform(cls, lo: float, hi: float, bins: int,
                aleph: Optional[Sequence[int]] = None) -> 'SigmaGrid':
        '''K uniform bins on [lo, hi].'''
        return cls(tuple(np.linspace(lo, hi, bins + 1).tolist()), None if aleph is None else tuple(aleph))

    @property
    def bins(self) -> int:
        return len(self.edges) - 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(np.asarray(self.edges))

    @property
    def aleph_index(self) -> np.ndarray:
        '''0-based indices of the regularized bins.'''
        return np.asarray(self.aleph, dtype=np.intp) - 1

    @property
    def complement_index(self) -> np.ndarray:
        '''0-based indices of the bins outside aleph.'''
        return np.setdiff1d(np.arange(self.bins), self.aleph_index)


@dataclass(frozen=True)
class PsdrStack:
    '''
    Discretized PSDR: coeffs[k] is the orthonormal box-basis coefficient of
    bin k, i.e. Δ_k^{-1/2} times the integral of a over that bin.
    '''
    coeffs: np.ndarray
    sigma: SigmaGrid
    pixel_pitch: float = 1.0

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if coeffs.ndim != 3:
            raise ShapeMismatchError(f'PsdrStack needs a K×M×N array, got shape {coeffs.shape}')
        if coeffs.shape[0] != self.sigma.bins:
            raise ShapeMismatchError(
                f'PsdrStack has {coeffs.shape[0]} planes but the sigma grid has {self.sigma.bins} bins')
        object.__setattr__(self, 'coeffs', coeffs)

    @classmethod
    def zeros(cls, sigma: SigmaGrid, rows: int, cols: int, pixel_pitch: float = 1.0) -> 'PsdrStack':
        return cls(np.zeros((sigma.bins, rows, cols)), sigma, pixel_pitch)

    @property
    def image_shape(self) -> Tuple[int, int]:
        return self.coeffs.shape[1:]

    def with_coeffs(self, coeffs: np.ndarray) -> 'PsdrStack':
        return PsdrStack(coeffs, self.sigma, self.pixel_pitch)

    def spatial_mass(self) -> np.ndarray:
        '''Per-pixel p = Σ_k √Δ_k·coeffs[k], the integral of a over σ.'''
        return np.tensordot(np.sqrt(self.sigma.widths), self.coeffs, axes=1)


@dataclass(frozen=True)
class WeightMaps:
    '''Data-fidelity weights w² and the binary support mask μ.'''
    w2: np.ndarray
    mu: np.ndarray = field(default=None)

    def __post_init__(self):
        w2 = np.asarray(self.w2, dtype=np.float64)
        mu = np.ones_like(w2) if self.mu is None else np.asarray(self.mu, dtype=np.float64)
        if w2.ndim != 2 or mu.shape != w2.shape:
            raise ShapeMismatchError(f'w2 {w2.shape} and mu {mu.shape} must be equal 2D shapes')
        if np.any(w2 < 0) or not np.all(np.isfinite(w2)):
            raise ValueError('w2 must be finite and non-negative')
        if not np.all((mu == 0) | (mu == 1)):
            raise ValueError('mu must be a 0/1 mask')
        object.__setattr__(self, 'w2', w2)
        object.__setattr__(self, 'mu', mu)

    @classmethod
    def uniform(cls, rows: int, cols: int) -> 'WeightMaps':
        return cls(np.ones((rows, cols)), np.ones((rows, cols)))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.w2.shape


def check_same_shape(expected: Tuple[int, ...], got: Tuple[int, ...], what: str):
    '''Raise ShapeMismatchError unless the two shapes agree.'''
    if tuple(expected) != tuple(got):
        raise ShapeMismatchError(f'{what}: expected shape {tuple(expected)}, got {tuple(got)}')
