'''
Cell detection scoring: pseudo-likelihood maps, 8-connected local maxima,
greedy one-to-one matching against the true cell locations and the
threshold sweep that picks the best F1.
'''
import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from data_processing.grid import ImageGrid, PsdrStack

DEFAULT_TOLERANCE = 3.0

# 8-connectivity
_NEIGHBOUR_OFFSETS = [(dm, dn) for dm in (-1, 0, 1) for dn in (-1, 0, 1) if (dm, dn) != (0, 0)]


@dataclass(frozen=True)
class DetectionList:
    '''Candidate cell positions sorted by pseudo-likelihood p, descending.'''
    rows: np.ndarray
    cols: np.ndarray
    p: np.ndarray

    def __len__(self) -> int:
        return len(self.p)

    @property
    def positions(self) -> np.ndarray:
        return np.column_stack([self.rows, self.cols]).astype(np.float64).reshape(-1, 2)

    @classmethod
    def from_points(cls, points: Sequence[Tuple[int, int]], p: Sequence[float]) -> 'DetectionList':
        '''Builds a list from unsorted (row, col) points; ties in p keep row-major order.'''
        points = np.asarray(points, dtype=np.int64).reshape(-1, 2)
        p = np.asarray(p, dtype=np.float64)
        order = np.lexsort((points[:, 1], points[:, 0], -p))
        return cls(points[order, 0], points[order, 1], p[order])


@dataclass
class MatchReport:
    tp: int
    fp: int
    fn: int
    tolerance: float
    delta: float = 0.0

    @property
    def pre(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def rec(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        pre, rec = self.pre, self.rec
        return 2.0 * pre * rec / (pre + rec) if pre + rec else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(pre=self.pre, rec=self.rec, f1=self.f1)
        return d


def pseudo_likelihood(a: PsdrStack, aleph: Optional[Sequence[int]] = None) -> ImageGrid:
    '''Per-pixel Euclidean norm of the coefficients over the regularized bins.'''
    index = a.sigma.aleph_index if aleph is None else np.asarray(aleph, dtype=np.intp) - 1
    if index.size == 0:
        raise ValueError('aleph must not be empty')
    fibers = a.coeffs[index]
    return ImageGrid(np.sqrt(np.sum(fibers * fibers, axis=0)), a.pixel_pitch)


def observation_likelihood(image: ImageGrid) -> ImageGrid:
    '''Baseline: the observed intensities themselves act as the likelihood.'''
    return ImageGrid(image.data.copy(), image.pixel_pitch)


def sigma_profile(a: PsdrStack, row: int, col: int, normalize_to: Optional[float] = None) -> np.ndarray:
    '''Recovered mass per σ-bin at one pixel, optionally rescaled to a total.'''
    mass = np.sqrt(a.sigma.widths) * a.coeffs[:, row, col]
    if normalize_to is not None:
        total = mass.sum()
        if total > 0:
            mass = mass * (normalize_to / total)
    return mass


def local_maxima(p: ImageGrid, min_value: float = 0.0) -> DetectionList:
    '''
    Pixels with p > 0 that are >= all 8 neighbours (outside the image counts
    as -inf) and > at least one of them. Each 8-connected equal-valued plateau
    is reported once, at its smallest (row, col); entries with p <= min_value
    are dropped.
    '''
    data = p.data
    padded = np.pad(data, 1, mode='constant', constant_values=-np.inf)
    rows, cols = data.shape
    neighbours = np.stack([padded[1 + dm:1 + dm + rows, 1 + dn:1 + dn + cols] for dm, dn in _NEIGHBOUR_OFFSETS])
    candidate = (data > 0) & (data >= neighbours.max(axis=0)) & (data > neighbours.min(axis=0))

    labels, count = ndimage.label(candidate, structure=np.ones((3, 3), dtype=int))
    flat = np.flatnonzero(candidate)
    _, first = np.unique(labels.ravel()[flat], return_index=True)
    keep = flat[first]
    keep = keep[data.ravel()[keep] > min_value]
    m, n = np.unravel_index(keep, data.shape)
    logging.debug('Local maxima: %d plateaus, %d kept above %g', count, len(keep), min_value)
    return DetectionList.from_points(np.column_stack([m, n]), data[m, n])


def _greedy_flags(dets: DetectionList, truth: np.ndarray, radius: float) -> np.ndarray:
    '''True for each detection (in list order) that claims an unmatched truth.'''
    flags = np.zeros(len(dets), dtype=bool)
    if len(dets) == 0 or len(truth) == 0:
        return flags
    tree = cKDTree(truth)
    matched = np.zeros(len(truth), dtype=bool)
    for i, point in enumerate(dets.positions):
        near = [j for j in tree.query_ball_point(point, radius) if not matched[j]]
        if not near:
            continue
        near = np.array(sorted(near))
        dist = np.hypot(*(truth[near] - point).T)
        j = near[np.argmin(dist)]
        matched[j] = True
        flags[i] = True
    return flags


def match_radius(tolerance: float, strict_diameter: bool = False) -> float:
    if not tolerance > 0:
        raise ValueError(f'tolerance must be positive, got {tolerance}')
    return tolerance / 2.0 if strict_diameter else tolerance


def greedy_match(dets: DetectionList, truth: Sequence[Tuple[float, float]], tolerance: float = DEFAULT_TOLERANCE,
                 strict_diameter: bool = False, delta: float = 0.0) -> MatchReport:
    '''
    Walks detections by descending p; each claims the closest unmatched truth
    within the match radius (ties by truth order) or counts as a false positive.
    '''
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 2)
    flags = _greedy_flags(dets, truth, match_radius(tolerance, strict_diameter))
    tp = int(flags.sum())
    return MatchReport(tp, len(dets) - tp, len(truth) - tp, tolerance, delta)


def _prefix(dets: DetectionList, n: int) -> DetectionList:
    return DetectionList(dets.rows[:n], dets.cols[:n], dets.p[:n])


def sweep_threshold(dets: DetectionList, truth: Sequence[Tuple[float, float]], tolerance: float = DEFAULT_TOLERANCE,
                    strict_diameter: bool = False) -> Tuple[float, MatchReport, List[Tuple[float, float]]]:
    '''
    Scores every threshold δ in {0} ∪ {distinct p} (detections with p > δ are
    kept) and returns the δ with the best F1, ties going to the larger δ,
    along with its report and the whole (δ, F1) curve.
    '''
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 2)
    if len(dets) == 0:
        logging.warning('No detections to score')
        report = MatchReport(0, 0, len(truth), tolerance, 0.0)
        return 0.0, report, [(0.0, 0.0)]

    # the greedy pass over a prefix is the prefix of the full greedy pass
    flags = _greedy_flags(dets, truth, match_radius(tolerance, strict_diameter))
    tp_prefix = np.concatenate([[0], np.cumsum(flags)])
    thresholds = np.concatenate([[0.0], np.unique(dets.p)])

    curve = []
    best = None
    for delta in thresholds:
        kept = int(np.count_nonzero(dets.p > delta))
        tp = int(tp_prefix[kept])
        report = MatchReport(tp, kept - tp, len(truth) - tp, tolerance, float(delta))
        curve.append((float(delta), report.f1))
        if best is None or report.f1 >= best.f1:
            best = report
    logging.info('Best threshold %.6g: F1 %.4f (pre %.4f, rec %.4f)', best.delta, best.f1, best.pre, best.rec)
    return best.delta, best, curve


def evaluate_detections(p: ImageGrid, truth: Sequence[Tuple[float, float]], tolerance: float = DEFAULT_TOLERANCE,
                        strict_diameter: bool = False, min_value: float = 0.0
                        ) -> Tuple[DetectionList, float, MatchReport, List[Tuple[float, float]]]:
    '''local_maxima followed by sweep_threshold.'''
    dets = local_maxima(p, min_value)
    delta, report, curve = sweep_threshold(dets, truth, tolerance, strict_diameter)
    return dets, delta, report, curve


def write_detections(dets: DetectionList, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['rank', 'row', 'col', 'p'])
        for rank, (m, n, p) in enumerate(zip(dets.rows, dets.cols, dets.p), start=1):
            writer.writerow([rank, int(m), int(n), f'{p:.12g}'])


def write_report(report: MatchReport, path: Path, curve: Optional[List[Tuple[float, float]]] = None) -> None:
    payload = report.to_dict()
    if curve is not None:
        payload['curve'] = [{'delta': d, 'f1': f} for d, f in curve]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2)
