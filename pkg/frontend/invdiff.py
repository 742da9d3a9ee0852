'''
Command-line front end:

    python frontend/invdiff.py simulate|solve|detect|evaluate|emd|prox-check|kernels ...

Exit codes: 0 success, 1 numerical failure, 2 usage/config/format error.
'''
import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import List, Optional

project_root = Path(__file__).parent.parent
if str(project_root) not in sys.path:
    sys.path.insert(0, str(project_root))

from data_processing.grid import (ImageGrid, InvDiffError, NumericalError,
                                  WeightMaps)
from data_processing.main import simulate
from data_processing.run_config import RunConfig, load_config, with_overrides
from data_processing.simulator import INTENSITY_SCALE, load_scene, stage_seed
from data_processing.tensor_io import load_image, load_psdr, save_psdr
from evaluation.detection import (local_maxima, observation_likelihood,
                                  pseudo_likelihood, sigma_profile,
                                  sweep_threshold, write_detections,
                                  write_report)
from evaluation.transport import (distribution_from_points, emd,
                                  psdr_to_distribution, write_plan,
                                  write_result)
from inversion import diffusion_operator
from inversion.apg import SolveConfig, solve, write_log
from inversion.diffusion_operator import (build_blur_bank, build_kernel_bank,
                                          export_bank, kernel_report)
from inversion.prox_check import DEFAULT_CASES, run_prox_check

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_USAGE = 2


def _config(args) -> RunConfig:
    config = load_config(path=args.config, preset=args.preset)
    synth = {'seed': args.seed}
    if getattr(args, 'bits', None) is not None:
        synth['bits'] = args.bits
    return with_overrides(config, synth=synth)


def solve_config(config: RunConfig, seed: int, lam: Optional[float] = None,
                 iters: Optional[int] = None) -> SolveConfig:
    section = config.solve
    return SolveConfig(
        lam=section.lam if lam is None else lam,
        iters=section.iters if iters is None else iters,
        step_mode=section.step_mode,
        eta=section.eta,
        momentum=section.momentum,
        rank=section.bank_rank,
        log_every=section.log_every,
        tol_rel_cost=section.tol_rel_cost,
        power_iters=section.power_iters,
        power_seed=stage_seed(seed, 'power_iteration'),
        prox_mode=section.prox_mode,
        xi=section.xi,
    )


def cmd_simulate(args) -> int:
    config = _config(args)
    out_dir = Path(args.out_dir)
    result = simulate(
        config,
        Path(args.out_image) if args.out_image else out_dir / 'observation.invdiff',
        Path(args.out_truth) if args.out_truth else out_dir / 'truth.json',
        Path(args.out_psdr) if args.out_psdr else out_dir / 'truth_psdr.invdiff',
    )
    print(f"Simulated {result['n_cells']} cells, gain {result['gain']:.6g}")
    return EXIT_OK


def cmd_solve(args) -> int:
    config = _config(args)
    image = load_image(args.image)
    d_obs = ImageGrid(image.data / INTENSITY_SCALE, image.pixel_pitch)

    if args.deconvolution:
        bank = build_blur_bank(config.synth.blur_sigma, rank=config.solve.bank_rank,
                               trunc_factor=config.sigma.trunc_factor)
        lam = 0.0 if args.lam is None else args.lam
    else:
        bank = build_kernel_bank(config.sigma.to_grid(), rank=config.solve.bank_rank,
                                 quadrature_nodes=config.sigma.quadrature_nodes,
                                 trunc_factor=config.sigma.trunc_factor)
        lam = args.lam
    cfg = solve_config(config, config.synth.seed, lam, args.iters)
    if args.deconvolution:
        # the blur bank has a single regularized bin
        cfg.xi = None

    a_opt, log = solve(d_obs, bank, WeightMaps.uniform(d_obs.rows, d_obs.cols), cfg)
    save_psdr(args.out_psdr, a_opt)
    write_log(log, args.out_log)
    print(f'Final cost {log.costs[-1]:.6g}, NSE {log.nses[-1]:.6g}, GS {log.gss[-1]:.6g}')
    return EXIT_OK


def _likelihood(args):
    if args.source == 'observation':
        return observation_likelihood(load_image(args.input)), None
    psdr = load_psdr(args.input)
    return pseudo_likelihood(psdr), psdr


def cmd_detect(args) -> int:
    p_map, psdr = _likelihood(args)
    dets = local_maxima(p_map, args.min_value)
    write_detections(dets, args.out)
    print(f'{len(dets)} detections written to {args.out}')

    if args.profile:
        if psdr is None:
            raise ValueError('--profile needs a PSDR input (--source psdr)')
        row, col = (int(v) for v in args.profile.split(','))
        profile = sigma_profile(psdr, row, col, normalize_to=1.0)
        edges = psdr.sigma.edges
        for k, value in enumerate(profile):
            print(f'sigma [{edges[k]:.3f}, {edges[k + 1]:.3f}): {value:.6g}')
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _config(args)
    tolerance = config.detect.tolerance if args.tolerance is None else args.tolerance
    strict = config.detect.strict_diameter or args.strict_diameter
    p_map, _ = _likelihood(args)
    truth = load_scene(args.truth).positions

    dets = local_maxima(p_map, args.min_value)
    delta, report, curve = sweep_threshold(dets, truth, tolerance, strict)
    write_report(report, args.out, curve)
    print(f'F1 {report.f1:.4f} (pre {report.pre:.4f}, rec {report.rec:.4f}) at delta {delta:.6g}')
    return EXIT_OK


def cmd_emd(args) -> int:
    config = _config(args)
    prune_eps = config.emd.prune_eps if args.prune_eps is None else args.prune_eps
    scene = load_scene(args.truth)
    n_cells = len(scene.cells)
    if n_cells == 0:
        raise ValueError(f'{args.truth} holds no cells')

    p_hat = psdr_to_distribution(load_psdr(args.psdr), n_cells, prune_eps)
    p_true = distribution_from_points(scene.positions, [c.q for c in scene.cells], normalize_to=n_cells)
    value, plan = emd(p_hat, p_true)
    write_result(value, p_hat, p_true, args.out, prune_eps)
    if args.plan:
        write_plan(plan, p_hat, p_true, args.plan)
    print(f'EMD {value:.6f} px ({len(p_hat)} vs {len(p_true)} support points)')
    return EXIT_OK


def cmd_prox_check(args) -> int:
    results = run_prox_check(args.cases, args.seed, args.oracle_cases)
    for r in results:
        print(f"{r.name:<24} cases={r.cases:<6d} max_error={r.max_error:.3e} "
              f"tol={r.tolerance:.0e} {'PASS' if r.passed else 'FAIL'}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERICAL


def cmd_kernels(args) -> int:
    config = _config(args)
    sigma = config.synth.gen_sigma() if args.generation else config.sigma.to_grid()
    bank = build_kernel_bank(sigma, rank=None if args.generation else config.solve.bank_rank,
                             quadrature_nodes=config.sigma.quadrature_nodes,
                             trunc_factor=config.sigma.trunc_factor)
    if args.export:
        export_bank(bank, args.export)
    if args.report or not args.export:
        rows = kernel_report(bank)
        out = open(args.report, 'w', newline='', encoding='utf-8') if args.report and args.report != '-' else sys.stdout
        try:
            writer = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator='\n')
            writer.writeheader()
            for row in rows:
                writer.writerow({k: (f'{v:.12g}' if isinstance(v, float) else v) for k, v in row.items()})
        finally:
            if out is not sys.stdout:
                out.close()
    return EXIT_OK


def _add_config_args(parser: argparse.ArgumentParser):
    group = parser.add_mutually_exclusive_group()
    group.add_argument('--preset', help='shipped preset name (desk, paper-full)')
    group.add_argument('--config', type=Path, help='run configuration JSON')
    parser.add_argument('--seed', type=int, default=None, help='overrides synth.seed')


def _add_source_args(parser: argparse.ArgumentParser):
    parser.add_argument('input', type=Path, help='PSDR stack (or observation with --source observation)')
    parser.add_argument('--source', choices=('psdr', 'observation'), default='psdr')
    parser.add_argument('--min-value', type=float, default=0.0, help='drop maxima with p <= this')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='invdiff', description='Inverse diffusion source detection')
    parser.add_argument('--threads', type=int, default=1, help='worker threads for operator evaluation')
    parser.add_argument('--verbose', action='store_true', help='debug logging')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('simulate', help='synthesize a scene and its observation')
    _add_config_args(p)
    p.add_argument('--bits', type=int, help='noise level as quantization bits (10, 8, 6, 4)')
    p.add_argument('--out-dir', default='.', help='directory for default output names')
    p.add_argument('--out-image')
    p.add_argument('--out-truth')
    p.add_argument('--out-psdr')
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser('solve', help='recover the PSDR from an observation')
    _add_config_args(p)
    p.add_argument('image', type=Path)
    p.add_argument('--out-psdr', type=Path, required=True)
    p.add_argument('--out-log', type=Path, required=True)
    p.add_argument('--lam', type=float)
    p.add_argument('--iters', type=int)
    p.add_argument('--deconvolution', action='store_true',
                   help='single-bin blur kernel instead of the diffusion bank (lambda defaults to 0)')
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser('detect', help='local maxima of the pseudo-likelihood')
    _add_source_args(p)
    p.add_argument('--out', type=Path, required=True, help='detections CSV')
    p.add_argument('--profile', help='ROW,COL: print the recovered sigma profile at this pixel')
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser('evaluate', help='best-threshold precision/recall/F1 against the truth')
    _add_config_args(p)
    _add_source_args(p)
    p.add_argument('--truth', type=Path, required=True)
    p.add_argument('--tolerance', type=float)
    p.add_argument('--strict-diameter', action='store_true', help='match within tolerance/2')
    p.add_argument('--out', type=Path, required=True, help='report JSON')
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser('emd', help="earth mover's distance between recovered and true mass")
    _add_config_args(p)
    p.add_argument('psdr', type=Path)
    p.add_argument('--truth', type=Path, required=True)
    p.add_argument('--prune-eps', type=float)
    p.add_argument('--out', type=Path, required=True)
    p.add_argument('--plan', type=Path, help='optional flow CSV')
    p.set_defaults(func=cmd_emd)

    p = sub.add_parser('prox-check', help='run the proximal operator property batteries')
    p.add_argument('--cases', type=int, default=DEFAULT_CASES)
    p.add_argument('--oracle-cases', type=int)
    p.add_argument('--seed', type=int, default=0)
    p.set_defaults(func=cmd_prox_check)

    p = sub.add_parser('kernels', help='kernel bank report and export')
    _add_config_args(p)
    p.add_argument('--report', nargs='?', const='-', help='CSV path, or stdout when omitted')
    p.add_argument('--export', type=Path, help='directory for per-bin tensors and manifest.json')
    p.add_argument('--generation', action='store_true', help='use the synthesis grid instead of the analysis grid')
    p.set_defaults(func=cmd_kernels)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s'
    )
    try:
        diffusion_operator.set_threads(args.threads)
        return args.func(args)
    except NumericalError as e:
        logging.error('Numerical failure: %s', e, exc_info=True)
        return EXIT_NUMERICAL
    except (InvDiffError, ValueError, OSError) as e:
        logging.error('%s failed: %s', args.command, e, exc_info=True)
        return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())
