'''
Discretized diffusion operator: a bank of per-bin Gaussian kernels, the
forward map a ↦ Σ_k √Δ_k (h_k ∗ a_k), its D-weighted adjoint, separable
low-rank approximations and operator-norm estimates.
'''
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.special import erf

from data_processing.grid import (ImageGrid, PsdrStack, SigmaGrid, WeightMaps,
                                  check_same_shape)
from data_processing.tensor_io import tensor_write

DEFAULT_QUADRATURE_NODES = 5
DEFAULT_TRUNC_FACTOR = 4.0
DEFAULT_POWER_ITERS = 50
APPROX_MODES = ('full', 'rank')

# planes with at most this fraction of non-zeros are convolved by stamping
_STAMP_DENSITY = 0.125

_threads = 1


def set_threads(threads: int) -> None:
    '''Caps the number of worker threads used per forward/adjoint call.'''
    global _threads
    if threads < 1:
        raise ValueError(f'threads must be >= 1, got {threads}')
    _threads = int(threads)


def sampled_gaussian_1d(sigma: float, radius: int) -> np.ndarray:
    '''(2πσ²)^{-1/2} exp(-m²/2σ²) at integer offsets -radius..radius.'''
    m = np.abs(np.arange(-radius, radius + 1, dtype=np.float64))
    return np.exp(-m ** 2 / (2.0 * sigma ** 2)) / math.sqrt(2.0 * math.pi * sigma ** 2)


def integrated_gaussian_1d(sigma: float, radius: int) -> np.ndarray:
    '''Gaussian mass over each pixel [m-1/2, m+1/2], m = -radius..radius.'''
    m = np.abs(np.arange(-radius, radius + 1, dtype=np.float64))
    scale = math.sqrt(2.0) * sigma
    return 0.5 * (erf((m + 0.5) / scale) - erf((m - 0.5) / scale))


GAUSSIAN_PROFILES: Dict[str, Callable[[float, int], np.ndarray]] = {
    'sampled': sampled_gaussian_1d,
    'integrated': integrated_gaussian_1d,
}


@dataclass(frozen=True)
class KernelBank:
    '''
    Per-bin kernels h_k with their full SVDs; `rank` singular triplets are
    used by the separable ('rank') path.
    '''
    sigma: SigmaGrid
    kernels: List[np.ndarray]
    singular_values: List[np.ndarray]
    left: List[np.ndarray]
    right: List[np.ndarray]
    rank: int

    @classmethod
    def from_kernels(cls, sigma: SigmaGrid, kernels: Sequence[np.ndarray],
                     rank: Optional[int] = None) -> 'KernelBank':
        '''
        Factorizes square, odd-sized kernels by SVD. rank=None keeps every
        singular triplet.
        '''
        if len(kernels) != sigma.bins:
            raise ValueError(f'{len(kernels)} kernels for {sigma.bins} sigma bins')
        svals, lefts, rights, kept = [], [], [], []
        for h in kernels:
            h = np.asarray(h, dtype=np.float64)
            if h.ndim != 2 or h.shape[0] != h.shape[1] or h.shape[0] % 2 != 1:
                raise ValueError(f'kernels must be square with odd size, got {h.shape}')
            u, s, vt = np.linalg.svd(h)
            # kernels are even in both axes; enforce it on the factors too
            u = 0.5 * (u + u[::-1, :])
            v = vt.T
            v = 0.5 * (v + v[::-1, :])
            kept.append(h)
            svals.append(s)
            lefts.append(u)
            rights.append(v)
        min_dim = min(h.shape[0] for h in kept)
        rank = min_dim if rank is None else int(rank)
        if rank < 1:
            raise ValueError(f'rank must be >= 1, got {rank}')
        if rank > min_dim:
            raise ValueError(f'rank {rank} exceeds the smallest kernel dimension {min_dim}')
        return cls(sigma, kept, svals, lefts, rights, rank)

    @property
    def bins(self) -> int:
        return self.sigma.bins

    @property
    def widths(self) -> np.ndarray:
        return self.sigma.widths

    def radius(self, k: int) -> int:
        return self.kernels[k].shape[0] // 2

    def low_rank_kernel(self, k: int, rank: Optional[int] = None) -> np.ndarray:
        '''h_k^{br r} = Σ_{j<r} s_j u_j v_jᵀ.'''
        r = self.rank if rank is None else rank
        u, s, v = self.left[k][:, :r], self.singular_values[k][:r], self.right[k][:, :r]
        return (u * s) @ v.T

    def effective_kernel(self, k: int, approx: str) -> np.ndarray:
        '''The kernel actually applied for bin k under the given approximation.'''
        _check_approx(approx)
        return self.kernels[k] if approx == 'full' else self.low_rank_kernel(k)


def _check_approx(approx: str):
    if approx not in APPROX_MODES:
        raise ValueError(f'approx must be one of {APPROX_MODES}, got {approx!r}')


def build_kernel_bank(sigma: SigmaGrid, rank: Optional[int] = 1,
                      quadrature_nodes: int = DEFAULT_QUADRATURE_NODES,
                      trunc_factor: float = DEFAULT_TRUNC_FACTOR,
                      profile: str = 'sampled') -> KernelBank:
    '''
    Bin kernel h_k = (1/q) Σ_i Gauss2D(σ_{k,i}) over the q midpoint nodes of
    [σ_{k-1}, σ_k], truncated at radius ⌈c·σ_k⌉. rank=None keeps the full SVD.
    '''
    if sigma.edges[0] <= 0:
        raise ValueError(f'sigma_0 must be positive (kernel undefined at sigma=0), got {sigma.edges[0]}')
    if quadrature_nodes < 1:
        raise ValueError(f'quadrature_nodes must be >= 1, got {quadrature_nodes}')
    if trunc_factor < 3:
        raise ValueError(f'trunc_factor must be >= 3, got {trunc_factor}')
    if profile not in GAUSSIAN_PROFILES:
        raise ValueError(f'unknown Gaussian profile {profile!r}')
    gaussian = GAUSSIAN_PROFILES[profile]

    kernels = []
    for k in range(sigma.bins):
        lo, hi = sigma.edges[k], sigma.edges[k + 1]
        radius = int(math.ceil(trunc_factor * hi))
        nodes = lo + (np.arange(quadrature_nodes) + 0.5) * (hi - lo) / quadrature_nodes
        h = np.zeros((2 * radius + 1, 2 * radius + 1))
        for s in nodes:
            g = gaussian(float(s), radius)
            h += np.outer(g, g)
        h /= quadrature_nodes
        logging.debug('Bin %d: sigma in [%.3f, %.3f], radius %d, mass %.6f', k + 1, lo, hi, radius, h.sum())
        kernels.append(h)

    bank = KernelBank.from_kernels(sigma, kernels, rank)
    logging.info('Built kernel bank: %d bins, rank %d, radii %s',
                 bank.bins, bank.rank, [bank.radius(k) for k in range(bank.bins)])
    return bank


def blur_taps(blur_sigma: float, trunc_factor: float = DEFAULT_TRUNC_FACTOR) -> np.ndarray:
    '''Pixel-integrated Gaussian taps on ±⌈c·σ_b⌉, rescaled to sum to 1.'''
    if not blur_sigma > 0:
        raise ValueError(f'blur_sigma must be positive, got {blur_sigma}')
    taps = integrated_gaussian_1d(blur_sigma, int(math.ceil(trunc_factor * blur_sigma)))
    return taps / taps.sum()


def build_blur_bank(blur_sigma: float, rank: Optional[int] = 1,
                    trunc_factor: float = DEFAULT_TRUNC_FACTOR) -> KernelBank:
    '''
    Single-bin bank (Δ = 1) holding the pixel-integrated Gaussian blur, for
    plain sparsity-based deconvolution.
    '''
    g = blur_taps(blur_sigma, trunc_factor)
    lo = max(blur_sigma - 0.5, blur_sigma / 2)
    return KernelBank.from_kernels(SigmaGrid((lo, lo + 1.0)), [np.outer(g, g)], rank)


def _stamp(h: np.ndarray, plane: np.ndarray) -> np.ndarray:
    '''Zero-padded convolution of a sparse plane by adding shifted kernels.'''
    rows, cols = plane.shape
    radius = h.shape[0] // 2
    out = np.zeros_like(plane)
    for m, n in zip(*np.nonzero(plane)):
        r0, r1 = max(0, m - radius), min(rows, m + radius + 1)
        c0, c1 = max(0, n - radius), min(cols, n + radius + 1)
        out[r0:r1, c0:c1] += plane[m, n] * h[r0 - m + radius:r1 - m + radius, c0 - n + radius:c1 - n + radius]
    return out


def _convolve_bin(bank: KernelBank, k: int, plane: np.ndarray, approx: str) -> np.ndarray:
    if approx == 'full':
        if np.count_nonzero(plane) <= _STAMP_DENSITY * plane.size:
            return _stamp(bank.kernels[k], plane)
        return ndimage.convolve(plane, bank.kernels[k], mode='constant', cval=0.0)
    out = np.zeros_like(plane)
    for j in range(bank.rank):
        rows_done = ndimage.convolve1d(plane, bank.right[k][:, j], axis=1, mode='constant', cval=0.0)
        out += bank.singular_values[k][j] * ndimage.convolve1d(
            rows_done, bank.left[k][:, j], axis=0, mode='constant', cval=0.0)
    return out


def _correlate_bin(bank: KernelBank, k: int, image: np.ndarray, approx: str) -> np.ndarray:
    if approx == 'full':
        return ndimage.correlate(image, bank.kernels[k], mode='constant', cval=0.0)
    out = np.zeros_like(image)
    for j in range(bank.rank):
        rows_done = ndimage.correlate1d(image, bank.right[k][:, j], axis=1, mode='constant', cval=0.0)
        out += bank.singular_values[k][j] * ndimage.correlate1d(
            rows_done, bank.left[k][:, j], axis=0, mode='constant', cval=0.0)
    return out


def _map_bins(fn: Callable[[int], np.ndarray], bins: int) -> List[np.ndarray]:
    if _threads == 1 or bins == 1:
        return [fn(k) for k in range(bins)]
    with ThreadPoolExecutor(max_workers=min(_threads, bins)) as pool:
        return list(pool.map(fn, range(bins)))


def forward_array(bank: KernelBank, coeffs: np.ndarray, approx: str = 'rank') -> np.ndarray:
    '''Σ_k √Δ_k (h_k ∗ coeffs[k]) on raw arrays.'''
    _check_approx(approx)
    check_same_shape((bank.bins,), coeffs.shape[:1], 'forward: number of bins')
    roots = np.sqrt(bank.widths)
    responses = _map_bins(lambda k: _convolve_bin(bank, k, coeffs[k], approx), bank.bins)
    out = np.zeros(coeffs.shape[1:])
    # fixed k order keeps the sum independent of the thread count
    for k in range(bank.bins):
        out += roots[k] * responses[k]
    return out


def adjoint_array(bank: KernelBank, image: np.ndarray, weights: WeightMaps,
                  approx: str = 'rank') -> np.ndarray:
    '''Plane k = μ ⊙ √Δ_k (h_k ⋆ (w² ⊙ image)) on raw arrays.'''
    _check_approx(approx)
    check_same_shape(weights.shape, image.shape, 'adjoint: weights vs image')
    weighted = weights.w2 * image
    roots = np.sqrt(bank.widths)
    planes = _map_bins(lambda k: _correlate_bin(bank, k, weighted, approx), bank.bins)
    return np.stack([weights.mu * (roots[k] * planes[k]) for k in range(bank.bins)])


def forward(bank: KernelBank, a: PsdrStack, approx: str = 'rank') -> ImageGrid:
    '''Applies the discretized diffusion operator to a PSDR stack.'''
    check_same_shape((bank.bins,), (a.sigma.bins,), 'forward: bank vs stack bins')
    return ImageGrid(forward_array(bank, a.coeffs, approx), a.pixel_pitch)


def adjoint(bank: KernelBank, d: ImageGrid, weights: WeightMaps, approx: str = 'rank') -> PsdrStack:
    '''Adjoint of forward with respect to the w²-weighted data inner product.'''
    return PsdrStack(adjoint_array(bank, d.data, weights, approx), bank.sigma, d.pixel_pitch)


def op_norm_sq(bank: KernelBank, weights: WeightMaps, approx: str = 'rank',
               iters: int = DEFAULT_POWER_ITERS, seed: int = 0) -> float:
    '''
    Power iteration on Ã*Ã from a seeded random start; returns the largest
    Rayleigh quotient seen.
    '''
    if iters < 10:
        raise ValueError(f'power iteration needs iters >= 10, got {iters}')
    rng = np.random.Generator(np.random.Philox(seed))
    shape = (bank.bins,) + weights.shape

    def random_start() -> np.ndarray:
        x = weights.mu * rng.standard_normal(shape)
        norm = np.linalg.norm(x)
        return x / norm if norm > 0 else x

    x = random_start()
    best = 0.0
    for i in range(iters):
        y = adjoint_array(bank, forward_array(bank, x, approx), weights, approx)
        best = max(best, float(np.vdot(x, y)))
        norm = np.linalg.norm(y)
        if norm == 0:
            logging.warning('Power iteration hit the zero vector at iteration %d; restarting', i)
            x = random_start()
            continue
        x = y / norm
    logging.info('Estimated ||A||^2 = %.6g after %d power iterations', best, iters)
    return best


def analytic_norm_bound(bank: KernelBank, weights: WeightMaps, approx: str = 'rank') -> float:
    '''Young's-inequality bound Σ_k Δ_k·‖w‖∞²·(Σ|h_k|)² on ‖Ã‖².'''
    w_inf_sq = float(weights.w2.max())
    sums = [np.abs(bank.effective_kernel(k, approx)).sum() for k in range(bank.bins)]
    return float(np.sum(bank.widths * w_inf_sq * np.square(sums)))


def kernel_report(bank: KernelBank, ranks: Sequence[int] = (1, 3)) -> List[Dict[str, float]]:
    '''Per-bin leading singular values and relative Frobenius rank-r errors.'''
    rows = []
    for k in range(bank.bins):
        s = bank.singular_values[k]
        total = math.sqrt(float(np.sum(s ** 2)))
        row = {
            'bin': k + 1,
            'sigma_lo': bank.sigma.edges[k],
            'sigma_hi': bank.sigma.edges[k + 1],
            'radius': bank.radius(k),
            'mass': float(bank.kernels[k].sum()),
        }
        for j in range(3):
            row[f's{j + 1}'] = float(s[j]) if j < len(s) else 0.0
        for r in ranks:
            row[f'rel_err_rank{r}'] = math.sqrt(float(np.sum(s[r:] ** 2))) / total
        rows.append(row)
    return rows


def export_bank(bank: KernelBank, directory: Path) -> List[Path]:
    '''One INVDIFF1 file per bin plus manifest.json of singular values.'''
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    manifest = {'rank': bank.rank, 'bins': []}
    for k in range(bank.bins):
        path = directory / f'kernel_{k + 1:02d}.invdiff'
        tensor_write(path, {'sigma_edges': [bank.sigma.edges[k], bank.sigma.edges[k + 1]]}, bank.kernels[k])
        written.append(path)
        manifest['bins'].append({
            'index': k + 1,
            'file': path.name,
            'sigma_lo': bank.sigma.edges[k],
            'sigma_hi': bank.sigma.edges[k + 1],
            'width': float(bank.widths[k]),
            'radius': bank.radius(k),
            'singular_values': [float(s) for s in bank.singular_values[k]],
        })
    with open(directory / 'manifest.json', 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2)
    logging.info('Exported %d kernels to %s', bank.bins, directory)
    return written
