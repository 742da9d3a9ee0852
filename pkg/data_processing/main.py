import logging
import sys
from pathlib import Path
from typing import Dict, Optional

project_root = Path(__file__).parent.parent
if str(project_root) not in sys.path:
    sys.path.insert(0, str(project_root))

from data_processing.grid import SigmaGrid
from data_processing.run_config import RunConfig, load_config
from data_processing.simulator import (NoiseModel, make_scene, render,
                                       save_scene, scene_to_psdr)
from data_processing.tensor_io import save_image, save_psdr, write_sidecar
from inversion.diffusion_operator import KernelBank, build_kernel_bank

RUNS_DIR = project_root / 'assets' / 'runs'


def build_generation_bank(config: RunConfig) -> KernelBank:
    '''Full-rank kernels on the uniform generation grid (never approximated).'''
    return build_kernel_bank(
        config.synth.gen_sigma(),
        rank=None,
        quadrature_nodes=config.sigma.quadrature_nodes,
        trunc_factor=config.sigma.trunc_factor,
    )


def simulate(config: RunConfig, out_image: Path, out_truth: Path,
             out_psdr: Optional[Path] = None) -> Dict[str, float]:
    '''
    1. Place cells (scene)
    2. Build the true PSDR
    3. Render the observation (exact forward, blur, gain, noise, 8-bit range)
    4. Write observation + sidecar, truth JSON and optionally the true PSDR
    '''
    synth = config.synth
    logging.info('--- Starting simulation: %dx%d, %d cells, bits=%s, seed=%d ---',
                 config.grid.rows, config.grid.cols, synth.n_cells, synth.bits, synth.seed)

    gen_sigma: SigmaGrid = synth.gen_sigma()
    scene = make_scene(
        synth.n_cells, config.grid.rows, config.grid.cols, synth.q_max, gen_sigma,
        profile_kind=synth.profile, seed=synth.seed, margin=synth.margin,
        min_separation=synth.min_separation,
    )
    psdr = scene_to_psdr(scene, config.grid.pixel_pitch)

    noise = None if synth.bits is None else NoiseModel(synth.bits, synth.seed)
    observation, gain = render(psdr, build_generation_bank(config), synth.blur_sigma, noise)

    save_image(out_image, observation)
    write_sidecar(sidecar_path(out_image), {'gain': gain, 'bits': synth.bits})
    save_scene(out_truth, scene)
    if out_psdr is not None:
        save_psdr(out_psdr, psdr)

    logging.info('--- Simulation finished: gain %.6g, total mass %.6g ---', gain, scene.total)
    return {'gain': gain, 'total_mass': scene.total, 'n_cells': len(scene.cells)}


def sidecar_path(image_path: Path) -> Path:
    image_path = Path(image_path)
    return image_path.with_name(image_path.name + '.json')


def main(preset: str = 'desk'):
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s'
    )
    config = load_config(preset=preset)
    out_dir = RUNS_DIR / preset
    try:
        simulate(config, out_dir / 'observation.invdiff', out_dir / 'truth.json', out_dir / 'truth_psdr.invdiff')
    except Exception as e:
        logging.error('Simulation failed: %s', e, exc_info=True)
        return
    print(f'Simulated data written to {out_dir}')


if __name__ == '__main__':
    main(sys.argv[1] if len(sys.argv) > 1 else 'desk')
