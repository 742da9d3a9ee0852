'''
Run configuration: one JSON document with grid, sigma, synth, solve, detect
and emd sections, parsed strictly (unknown keys are rejected).
'''
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import (BaseModel, ConfigDict, Field, ValidationError,
                      field_validator, model_validator)

from data_processing.grid import InvDiffError, SigmaGrid

project_root = Path(__file__).parent.parent
PRESETS_DIR = project_root / 'assets' / 'presets'
DEFAULT_PRESET = 'desk'


class ConfigError(InvDiffError, ValueError):
    '''Raised when a run configuration cannot be loaded or is invalid.'''


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid', strict=True, frozen=True)


class GridSection(_Section):
    rows: int = Field(128, ge=1)
    cols: int = Field(128, ge=1)
    pixel_pitch: float = Field(1.0, gt=0)


class SigmaSection(_Section):
    edges: List[float]
    aleph: Optional[List[int]] = None
    quadrature_nodes: int = Field(5, ge=1)
    trunc_factor: float = Field(4.0, ge=3)

    @model_validator(mode='after')
    def _valid_grid(self) -> 'SigmaSection':
        self.to_grid()
        if self.edges[0] <= 0:
            raise ValueError('sigma edges must start above 0')
        return self

    def to_grid(self) -> SigmaGrid:
        return SigmaGrid(tuple(self.edges), None if self.aleph is None else tuple(self.aleph))


class SynthSection(_Section):
    n_cells: int = Field(20, ge=1)
    q_max: float = Field(1000.0, gt=0)
    profile: Union[Literal['uniform', 'triangular_decay'], List[float]] = 'uniform'
    n_gen_bins: int = Field(30, ge=1)
    sigma_min: float = Field(0.5, gt=0)
    sigma_max: float = Field(16.1, gt=0)
    blur_sigma: float = Field(2.28, gt=0)
    bits: Optional[int] = Field(10, ge=1)
    min_separation: Optional[float] = Field(None, ge=0)
    margin: Optional[int] = Field(None, ge=0)
    seed: int = 0

    @field_validator('profile')
    @classmethod
    def _nonneg_profile(cls, value):
        if isinstance(value, list) and (any(v < 0 for v in value) or sum(value) <= 0):
            raise ValueError('custom profile needs non-negative entries with a positive sum')
        return value

    @model_validator(mode='after')
    def _consistent(self) -> 'SynthSection':
        if self.sigma_min >= self.sigma_max:
            raise ValueError(f'sigma_min {self.sigma_min} must be below sigma_max {self.sigma_max}')
        if isinstance(self.profile, list) and len(self.profile) != self.n_gen_bins:
            raise ValueError(f'custom profile has {len(self.profile)} entries for {self.n_gen_bins} bins')
        return self

    def gen_sigma(self) -> SigmaGrid:
        return SigmaGrid.uniform(self.sigma_min, self.sigma_max, self.n_gen_bins)


class SolveSection(_Section):
    lam: float = Field(0.5, ge=0)
    iters: int = Field(2000, ge=1)
    rank: Union[Literal['full'], int] = 1
    step_mode: Literal['power_iteration', 'analytic_bound', 'fixed'] = 'power_iteration'
    eta: Optional[float] = Field(None, gt=0)
    momentum: Literal['fista', 'none'] = 'fista'
    log_every: int = Field(10, ge=1)
    tol_rel_cost: Optional[float] = Field(None, gt=0)
    power_iters: int = Field(50, ge=10)
    prox_mode: Literal['ball', 'ellipsoid'] = 'ball'
    xi: Optional[List[float]] = None

    @model_validator(mode='after')
    def _consistent(self) -> 'SolveSection':
        if isinstance(self.rank, int) and self.rank < 1:
            raise ValueError(f'rank must be >= 1 or "full", got {self.rank}')
        if self.step_mode == 'fixed' and self.eta is None:
            raise ValueError('step_mode "fixed" needs eta')
        if self.xi is not None and any(not v > 0 for v in self.xi):
            raise ValueError('xi entries must be strictly positive')
        return self

    @property
    def bank_rank(self) -> Optional[int]:
        return None if self.rank == 'full' else self.rank


class DetectSection(_Section):
    tolerance: float = Field(3.0, gt=0)
    strict_diameter: bool = False


class EmdSection(_Section):
    prune_eps: float = Field(1e-8, ge=0)


class RunConfig(_Section):
    grid: GridSection = GridSection()
    sigma: SigmaSection
    synth: SynthSection = SynthSection()
    solve: SolveSection = SolveSection()
    detect: DetectSection = DetectSection()
    emd: EmdSection = EmdSection()

    @model_validator(mode='after')
    def _cross_checks(self) -> 'RunConfig':
        aleph_size = len(self.sigma.to_grid().aleph)
        if self.solve.xi is not None and len(self.solve.xi) != aleph_size:
            raise ValueError(f'solve.xi has {len(self.solve.xi)} entries for {aleph_size} regularized bins')
        return self


def available_presets() -> List[str]:
    return sorted(p.stem for p in PRESETS_DIR.glob('*.json'))


def parse_config(data: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f'invalid run configuration:\n{e}') from e


def load_config(path: Optional[Path] = None, preset: Optional[str] = None) -> RunConfig:
    '''
    Loads a RunConfig from a JSON file or a shipped preset (not both);
    falls back to the desk preset.
    '''
    if path is not None and preset is not None:
        raise ConfigError('give either a config file or a preset, not both')
    if path is None:
        preset = preset or DEFAULT_PRESET
        path = PRESETS_DIR / f'{preset}.json'
        if not path.exists():
            raise ConfigError(f'unknown preset {preset!r}; available: {", ".join(available_presets())}')

    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f'cannot read config {path}: {e}') from e

    config = parse_config(data)
    logging.info('Loaded run config from %s', path)
    return config


def with_overrides(config: RunConfig, **sections: Dict[str, Any]) -> RunConfig:
    '''
    Returns a re-validated copy with per-section overrides, e.g.
    with_overrides(cfg, synth={'seed': 3}). None values are ignored.
    '''
    data = config.model_dump()
    for section, updates in sections.items():
        if section not in data:
            raise ConfigError(f'unknown config section {section!r}')
        data[section].update({k: v for k, v in updates.items() if v is not None})
    return parse_config(data)
