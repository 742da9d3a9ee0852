'''Tests for scene generation, rendering and the ground-truth files.'''
import itertools
import math

import numpy as np
import pytest

from data_processing.grid import NumericalError, PsdrStack, SigmaGrid
from data_processing.run_config import load_config
from data_processing.simulator import (Cell, NoiseModel, Scene, blurred_forward,
                                       box_muller, load_scene, make_profile,
                                       make_scene, render, save_scene,
                                       scene_to_psdr, stage_rng, stage_seed)
from inversion.diffusion_operator import build_kernel_bank


@pytest.fixture
def gen_sigma():
    return SigmaGrid.uniform(0.5, 3.0, 5)


@pytest.fixture
def gen_bank(gen_sigma):
    '''Exact (full-rank) generation kernels.'''
    return build_kernel_bank(gen_sigma, rank=None)


@pytest.fixture
def scene(gen_sigma):
    '''Six cells on a 48x48 grid.'''
    return make_scene(6, 48, 48, 100.0, gen_sigma, seed=4, min_separation=8)


def test_scene_size_and_totals(gen_sigma):
    '''250 cells are placed on distinct pixels with totals in [q_max/2, q_max].'''
    scene = make_scene(250, 64, 64, 1000.0, gen_sigma, seed=1)
    assert len(scene.cells) == 250
    assert all(500.0 <= c.q <= 1000.0 for c in scene.cells)
    assert len({(c.row, c.col) for c in scene.cells}) == 250


def test_scene_is_deterministic(gen_sigma):
    '''The same seed gives the same scene; a new seed gives another.'''
    first = make_scene(10, 40, 40, 50.0, gen_sigma, seed=9)
    assert make_scene(10, 40, 40, 50.0, gen_sigma, seed=9) == first
    assert make_scene(10, 40, 40, 50.0, gen_sigma, seed=10) != first


def test_profiles():
    '''Uniform is flat, triangular decay falls off, custom vectors are normalized.'''
    uniform = make_profile('uniform', 30)
    assert np.allclose(uniform, 1.0 / 30, atol=1e-16)
    tri = make_profile('triangular_decay', 4)
    assert np.allclose(tri, [0.4, 0.3, 0.2, 0.1])
    assert np.allclose(make_profile([1.0, 0.0, 3.0], 3), [0.25, 0.0, 0.75])
    with pytest.raises(ValueError):
        make_profile('gamma', 4)
    with pytest.raises(ValueError):
        make_profile([1.0, -1.0], 2)


def test_margin_separation_and_mask(gen_sigma):
    '''Cells keep away from the border and from each other, and respect the mask.'''
    scene = make_scene(8, 60, 60, 10.0, gen_sigma, seed=2, margin=5, min_separation=10)
    for cell in scene.cells:
        assert 5 <= cell.row < 55 and 5 <= cell.col < 55
    for a, b in itertools.combinations(scene.positions, 2):
        assert math.hypot(*(a - b)) >= 10

    mask = np.zeros((60, 60))
    mask[30:40, 10:20] = 1
    masked = make_scene(5, 60, 60, 10.0, gen_sigma, seed=2, mask=mask)
    assert all(30 <= c.row < 40 and 10 <= c.col < 20 for c in masked.cells)


def test_default_margin_is_largest_sigma(gen_sigma):
    '''Without an explicit margin cells stay ⌈σ_max⌉ pixels inside.'''
    scene = make_scene(40, 20, 20, 10.0, gen_sigma, seed=0)
    assert all(3 <= c.row < 17 and 3 <= c.col < 17 for c in scene.cells)


def test_scene_errors(gen_sigma):
    '''Overfull grids, impossible spacing and bad totals are refused.'''
    with pytest.raises(ValueError):
        make_scene(70, 8, 8, 10.0, gen_sigma, margin=0)
    with pytest.raises(ValueError):
        make_scene(5, 20, 20, 10.0, gen_sigma, margin=0, min_separation=30)
    with pytest.raises(ValueError):
        make_scene(0, 20, 20, 10.0, gen_sigma)
    with pytest.raises(ValueError):
        make_scene(1, 20, 20, 0.0, gen_sigma)
    with pytest.raises(ValueError):
        Scene((Cell(9, 0, 1.0, (1.0,)),), SigmaGrid((1.0, 2.0)), 5, 5)
    with pytest.raises(ValueError):
        Scene((Cell(1, 1, 1.0, (0.5,)),), SigmaGrid((1.0, 2.0)), 5, 5)


def test_desk_spacing_places_every_cell():
    '''20 cells at least 20 px apart fit on the desk grid for every seed tried.'''
    synth = load_config(preset='desk').synth
    gen_sigma = synth.gen_sigma()
    for seed in range(8):
        scene = make_scene(synth.n_cells, 128, 128, synth.q_max, gen_sigma, seed=seed,
                           min_separation=synth.min_separation)
        assert len(scene.cells) == 20
        for a, b in itertools.combinations(scene.positions, 2):
            assert math.hypot(*(a - b)) >= 20


def test_tight_spacing_is_deterministic(gen_sigma):
    '''Separated placement on a crowded grid depends on the seed only.'''
    first = make_scene(9, 40, 40, 10.0, gen_sigma, seed=3, margin=0, min_separation=12)
    assert make_scene(9, 40, 40, 10.0, gen_sigma, seed=3, margin=0, min_separation=12) == first
    for a, b in itertools.combinations(first.positions, 2):
        assert math.hypot(*(a - b)) >= 12


def test_scene_to_psdr(gen_sigma):
    '''Empty scenes give zero stacks; one unit cell gives (1/K)/√Δ per bin.'''
    empty = Scene((), gen_sigma, 10, 10)
    assert not np.any(scene_to_psdr(empty).coeffs)

    profile = tuple(make_profile('uniform', 5))
    one = Scene((Cell(4, 6, 1.0, profile),), gen_sigma, 10, 10)
    psdr = scene_to_psdr(one, pixel_pitch=0.5)
    expected = 0.2 / math.sqrt(gen_sigma.widths[0])
    assert np.allclose(psdr.coeffs[:, 4, 6], expected, atol=1e-15)
    assert np.count_nonzero(psdr.coeffs) == 5
    assert psdr.pixel_pitch == 0.5


def test_spatial_mass_recovers_cell_totals(scene):
    '''Integrating the PSDR over σ gives each cell's total.'''
    mass = scene_to_psdr(scene).spatial_mass()
    for cell in scene.cells:
        assert mass[cell.row, cell.col] == pytest.approx(cell.q, rel=1e-12)
    assert mass.sum() == pytest.approx(scene.total, rel=1e-12)


def test_noise_variance():
    '''b bits give variance 2^(-2b)/12.'''
    assert NoiseModel(8).variance == pytest.approx(1.27157e-6, rel=1e-5)
    with pytest.raises(ValueError):
        NoiseModel(0)


def test_noiseless_render_inverts_exactly(scene, gen_bank):
    '''Without noise the 8-bit image rescales back to the blurred forward model.'''
    psdr = scene_to_psdr(scene)
    image, gain = render(psdr, gen_bank, 1.5, None)
    clean = blurred_forward(psdr, gen_bank, 1.5)
    assert image.data.max() == 255.0
    assert gain == pytest.approx(1.0 / clean.max(), rel=1e-15)
    assert np.allclose(image.data / 255.0 / gain, clean, rtol=1e-12, atol=1e-12 * clean.max())


def test_noisy_render_is_reproducible(scene, gen_bank):
    '''Fixed seeds give identical noisy images; other seeds change them.'''
    psdr = scene_to_psdr(scene)
    first, _ = render(psdr, gen_bank, 1.5, NoiseModel(6, seed=3))
    second, _ = render(psdr, gen_bank, 1.5, NoiseModel(6, seed=3))
    other, _ = render(psdr, gen_bank, 1.5, NoiseModel(6, seed=4))
    assert np.array_equal(first.data, second.data)
    assert not np.array_equal(first.data, other.data)
    assert first.data.min() >= 0.0 and first.data.max() <= 255.0


def test_empty_image_has_no_gain(gen_sigma, gen_bank):
    '''A zero stack renders to an all-zero image, which cannot be rescaled.'''
    with pytest.raises(NumericalError):
        render(PsdrStack.zeros(gen_sigma, 12, 12), gen_bank, 1.5, None)


def test_stage_seeds_and_normals():
    '''Stage sub-seeds are stable and distinct; Box-Muller draws are standard normal.'''
    assert stage_seed(7, 'scene') == stage_seed(7, 'scene')
    assert stage_seed(7, 'scene') != stage_seed(7, 'noise')
    assert stage_seed(7, 'scene') != stage_seed(8, 'scene')
    samples = box_muller(stage_rng(0, 'noise'), 200_001)
    assert samples.size == 200_001
    assert abs(samples.mean()) < 0.01
    assert abs(samples.var() - 1.0) < 0.02


def test_scene_file_round_trip(tmp_path, scene):
    '''The truth JSON restores the same scene, grid included.'''
    path = tmp_path / 'truth' / 'scene.json'
    save_scene(path, scene)
    assert load_scene(path) == scene
