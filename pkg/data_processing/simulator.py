'''
Synthetic scenes and observations: point sources with a σ-profile are
placed directly as a PSDR, pushed through the exact (full-rank) diffusion
operator, blurred by a pixel-integrated Gaussian, rescaled to [0, 1],
quantization-level noise is added and the result is stored on [0, 255].
'''
import json
import logging
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from data_processing.grid import ImageGrid, NumericalError, PsdrStack, SigmaGrid
from inversion.diffusion_operator import KernelBank, blur_taps, forward_array

PROFILE_KINDS = ('uniform', 'triangular_decay')
MAX_PLACEMENT_RESTARTS = 100
INTENSITY_SCALE = 255.0

ProfileSpec = Union[str, Sequence[float]]


def stage_seed(seed: int, stage: str) -> int:
    '''Sub-seed for one pipeline stage, derived from (seed, stage name).'''
    sequence = np.random.SeedSequence([int(seed), zlib.crc32(stage.encode('utf-8'))])
    return int(sequence.generate_state(1)[0])


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    '''Counter-based generator for one pipeline stage.'''
    return np.random.Generator(np.random.Philox(stage_seed(seed, stage)))


def box_muller(rng: np.random.Generator, size: int) -> np.ndarray:
    '''Standard normal samples from pairs of uniforms.'''
    pairs = (size + 1) // 2
    u1 = 1.0 - rng.random(pairs)
    u2 = rng.random(pairs)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    return np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:size]


@dataclass(frozen=True)
class NoiseModel:
    '''Additive Gaussian noise with the variance of b-bit quantization.'''
    bits: int
    seed: int = 0

    def __post_init__(self):
        if self.bits < 1:
            raise ValueError(f'bits must be >= 1, got {self.bits}')

    @property
    def variance(self) -> float:
        return 2.0 ** (-2 * self.bits) / 12.0


@dataclass(frozen=True)
class Cell:
    row: int
    col: int
    q: float
    profile: Tuple[float, ...]


@dataclass(frozen=True)
class Scene:
    cells: Tuple[Cell, ...]
    gen_sigma: SigmaGrid
    rows: int
    cols: int
    seed: int = 0

    def __post_init__(self):
        for cell in self.cells:
            if not (0 <= cell.row < self.rows and 0 <= cell.col < self.cols):
                raise ValueError(f'cell at ({cell.row}, {cell.col}) lies outside {self.rows}x{self.cols}')
            if not cell.q > 0:
                raise ValueError(f'cell total must be positive, got {cell.q}')
            if len(cell.profile) != self.gen_sigma.bins:
                raise ValueError(f'profile has {len(cell.profile)} entries for {self.gen_sigma.bins} bins')
            if min(cell.profile) < 0 or abs(sum(cell.profile) - 1.0) > 1e-12:
                raise ValueError('profile entries must be non-negative and sum to 1')

    @property
    def positions(self) -> np.ndarray:
        return np.array([(c.row, c.col) for c in self.cells], dtype=np.float64).reshape(-1, 2)

    @property
    def total(self) -> float:
        return float(sum(c.q for c in self.cells))


def make_profile(kind: ProfileSpec, bins: int) -> np.ndarray:
    '''Fraction of a cell's total per generation σ-bin.'''
    if isinstance(kind, str):
        if kind == 'uniform':
            weights = np.ones(bins)
        elif kind == 'triangular_decay':
            weights = np.arange(bins, 0, -1, dtype=np.float64)
        else:
            raise ValueError(f'unknown profile kind {kind!r}; expected one of {PROFILE_KINDS} or a vector')
    else:
        weights = np.asarray(kind, dtype=np.float64)
        if weights.shape != (bins,) or np.any(weights < 0) or weights.sum() <= 0:
            raise ValueError(f'custom profile must be {bins} non-negative values with a positive sum')
    return weights / weights.sum()


def _interior_pixels(rows: int, cols: int, margin: int, mask: Optional[np.ndarray]) -> np.ndarray:
    allowed = np.zeros((rows, cols), dtype=bool)
    allowed[margin:rows - margin, margin:cols - margin] = True
    if mask is not None:
        allowed &= np.asarray(mask) != 0
    return np.argwhere(allowed)


def _separated_locations(candidates: np.ndarray, n_cells: int, min_separation: float,
                         rng: np.random.Generator) -> np.ndarray:
    '''
    Sequential placement over a shuffled candidate list: each candidate is
    taken if it is still available, then every candidate closer than
    min_separation is struck off. A pass that runs out of candidates is
    restarted with a fresh shuffle.
    '''
    coords = candidates.astype(float)
    for restart in range(MAX_PLACEMENT_RESTARTS):
        available = np.ones(len(candidates), dtype=bool)
        picked: List[int] = []
        for index in rng.permutation(len(candidates)):
            if not available[index]:
                continue
            picked.append(int(index))
            if len(picked) == n_cells:
                if restart:
                    logging.debug('Placement succeeded after %d restarts', restart)
                return candidates[picked]
            gaps = np.hypot(coords[:, 0] - coords[index, 0], coords[:, 1] - coords[index, 1])
            available &= gaps >= min_separation
    raise ValueError(f'could not place {n_cells} cells at least {min_separation} px apart '
                     f'after {MAX_PLACEMENT_RESTARTS} shuffles')


def make_scene(n_cells: int, rows: int, cols: int, q_max: float, gen_sigma: SigmaGrid,
               profile_kind: ProfileSpec = 'uniform', seed: int = 0, margin: Optional[int] = None,
               min_separation: Optional[float] = None, mask: Optional[np.ndarray] = None) -> Scene:
    '''
    Draws n_cells distinct pixel-centred locations uniformly over the interior
    (at least `margin` pixels from the border, default ⌈σ_max⌉), totals
    Q ~ U[q_max/2, q_max], all sharing one σ-profile.
    '''
    if n_cells < 1:
        raise ValueError(f'n_cells must be >= 1, got {n_cells}')
    if not q_max > 0:
        raise ValueError(f'q_max must be positive, got {q_max}')
    margin = int(math.ceil(gen_sigma.edges[-1])) if margin is None else int(margin)
    candidates = _interior_pixels(rows, cols, margin, mask)
    if n_cells > len(candidates):
        raise ValueError(f'{n_cells} cells do not fit in {len(candidates)} interior pixels (margin {margin})')

    rng = stage_rng(seed, 'scene')
    if min_separation:
        locations = _separated_locations(candidates, n_cells, float(min_separation), rng)
    else:
        locations = candidates[rng.choice(len(candidates), size=n_cells, replace=False)]

    totals = rng.uniform(q_max / 2.0, q_max, n_cells)
    profile = tuple(float(v) for v in make_profile(profile_kind, gen_sigma.bins))
    cells = tuple(Cell(int(m), int(n), float(q), profile) for (m, n), q in zip(locations, totals))
    logging.info('Placed %d cells on a %dx%d grid (margin %d, seed %d)', n_cells, rows, cols, margin, seed)
    return Scene(cells, gen_sigma, rows, cols, seed)


def scene_to_psdr(scene: Scene, pixel_pitch: float = 1.0) -> PsdrStack:
    '''coeffs[k, m, n] = Σ over cells at (m, n) of Q·profile[k]/√Δ_k.'''
    coeffs = np.zeros((scene.gen_sigma.bins, scene.rows, scene.cols))
    roots = np.sqrt(scene.gen_sigma.widths)
    for cell in scene.cells:
        coeffs[:, cell.row, cell.col] += cell.q * np.asarray(cell.profile) / roots
    return PsdrStack(coeffs, scene.gen_sigma, pixel_pitch)


def blurred_forward(psdr: PsdrStack, gen_bank: KernelBank, blur_sigma: float) -> np.ndarray:
    '''Noise-free image: exact forward operator followed by the optical blur.'''
    clean = forward_array(gen_bank, psdr.coeffs, 'full')
    taps = blur_taps(blur_sigma)
    clean = ndimage.convolve1d(clean, taps, axis=1, mode='constant', cval=0.0)
    return ndimage.convolve1d(clean, taps, axis=0, mode='constant', cval=0.0)


def render(psdr: PsdrStack, gen_bank: KernelBank, blur_sigma: float,
           noise: Optional[NoiseModel]) -> Tuple[ImageGrid, float]:
    '''
    Returns the 8-bit-range observation and the gain 1/max applied before the
    noise. noise=None renders the noiseless image.
    '''
    clean = blurred_forward(psdr, gen_bank, blur_sigma)
    peak = float(clean.max())
    if not peak > 0:
        raise NumericalError('pre-noise image is identically zero; the gain is undefined')
    gain = 1.0 / peak
    image = clean / peak

    if noise is not None:
        rng = stage_rng(noise.seed, 'noise')
        image = image + math.sqrt(noise.variance) * box_muller(rng, image.size).reshape(image.shape)
        logging.info('Added noise for %d bits (variance %.6g)', noise.bits, noise.variance)
    image = np.clip(image, 0.0, 1.0) * INTENSITY_SCALE
    return ImageGrid(image, psdr.pixel_pitch), gain


def save_scene(path: Path, scene: Scene) -> None:
    '''Ground truth as {"dims", "cells": [{"m","n","q","profile"}], "seed", "gen_sigma_edges"}.'''
    payload = {
        'dims': [scene.rows, scene.cols],
        'cells': [{'m': c.row, 'n': c.col, 'q': c.q, 'profile': list(c.profile)} for c in scene.cells],
        'seed': scene.seed,
        'gen_sigma_edges': list(scene.gen_sigma.edges),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2)


def load_scene(path: Path, gen_sigma: Optional[SigmaGrid] = None) -> Scene:
    with open(path, 'r', encoding='utf-8') as f:
        payload = json.load(f)
    rows, cols = payload['dims']
    cells = tuple(Cell(int(c['m']), int(c['n']), float(c['q']), tuple(c['profile'])) for c in payload['cells'])
    if gen_sigma is None:
        if 'gen_sigma_edges' in payload:
            gen_sigma = SigmaGrid(tuple(payload['gen_sigma_edges']))
        else:
            bins = len(cells[0].profile) if cells else 1
            gen_sigma = SigmaGrid(tuple(float(k) for k in range(1, bins + 2)))
    return Scene(cells, gen_sigma, int(rows), int(cols), int(payload.get('seed', 0)))
