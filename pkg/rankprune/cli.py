"""
Command line entry point: `rankprune <command> ...`.

Every command reads its inputs from files and flags only. A YAML settings file passed with --settings supplies
defaults for the selected command; flags given on the command line win.
"""

import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional

from rankprune.calibrate import Calibrator, GridConfig, calibrate, export_curve, export_result, order_sensitivity
from rankprune.data_model import CalibrationResult
from rankprune.errors import ConfigurationError, RankPruneError
from rankprune.evaluate import TrialConfig, compare_methods, confidence_sweep, evaluate_test, run_trials, tradeoff
from rankprune.ingest import SystemFit, apply_system, build_dataset, fit_system, parse_qrels, parse_run
from rankprune.synthetic import SynthConfig, generate, load_config
from rankprune.util import check_keys, dumps, load_dataset, load_yaml, read_json, save_dataset, write_json, \
    write_jsonl

logger = logging.getLogger('rankprune')


def _alphas(text: str) -> List[float]:
    try:
        return [float(a) for a in text.split(',') if a.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected comma-separated numbers, got {text!r}')


def _seeds(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(',') if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected comma-separated integers, got {text!r}')


def _grid(args) -> GridConfig:
    return GridConfig(step=args.grid_step, exact=args.exact)


def _add_calibration_options(parser: argparse.ArgumentParser):
    parser.add_argument('--delta', type=float, default=0.1, help='Miscoverage level; confidence is 1 - delta')
    parser.add_argument('--mode', choices=['risk', 'confidence', 'both'], default='risk',
                        help='Correction applied when alpha cannot be met')
    parser.add_argument('--grid-step', type=float, default=1e-4, help='Threshold grid spacing')
    parser.add_argument('--exact', action='store_true', help='Use every loss breakpoint as the threshold grid')
    parser.add_argument('--metric', default='mrr@10', help='mrr@K or recall')
    parser.add_argument('--bound', choices=['wsr', 'hoeffding'], default='wsr')
    parser.add_argument('--compat-wsr', nargs='?', const='printed', default='predictable',
                        choices=['predictable', 'printed'], help='WSR betting-fraction variant')
    parser.add_argument('--order-seed', type=int, default=None, help='Seeded order of losses fed to the bound')
    parser.add_argument('--beta-step', type=float, default=0.01, help='Grid step of the fusion weight search')
    parser.add_argument('--scaling', choices=['platt', 'minmax'], default='platt')


def _add_trial_options(parser: argparse.ArgumentParser):
    parser.add_argument('--pool', help='Dataset snapshot with the query pool')
    parser.add_argument('--n', type=int, default=100, help='Number of trials')
    parser.add_argument('--calib-size', type=int, default=5000)
    parser.add_argument('--test-size', type=int, default=6980)
    parser.add_argument('--seed', type=int, default=0, help='Master seed for the trial splits')
    parser.add_argument('--workers', type=int, default=1)
    _add_calibration_options(parser)


def _trial_config(args) -> TrialConfig:
    return TrialConfig(
        n_trials=args.n,
        calib_size=args.calib_size,
        test_size=args.test_size,
        mode=args.mode,
        master_seed=args.seed,
        grid=_grid(args),
        bound=args.bound,
        wsr_variant=args.compat_wsr,
        metric=args.metric,
        beta_step=args.beta_step,
        scaling=args.scaling,
        order_seed=args.order_seed,
        workers=args.workers
    )


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        flags = ', '.join('--' + n.replace('_', '-') for n in missing)
        raise ConfigurationError(f'{args.command} needs {flags}')


def cmd_ingest(args) -> int:
    _require(args, 'retriever_run', 'reranker_run', 'qrels', 'out')
    with open(args.retriever_run, 'rb') as f:
        retriever = parse_run(f, args.retriever_run)
    with open(args.reranker_run, 'rb') as f:
        reranker = parse_run(f, args.reranker_run)
    with open(args.qrels, 'rb') as f:
        qrels = parse_qrels(f, args.qrels)
    sources = {'retriever_run': args.retriever_run, 'reranker_run': args.reranker_run, 'qrels': args.qrels}
    dataset = build_dataset(retriever, reranker, qrels, args.pool_size, sources)
    save_dataset(dataset, args.out)
    logger.info(f'Wrote {dataset.m} queries to {args.out}')
    return 0


def cmd_synth(args) -> int:
    _require(args, 'out')
    config = load_config(args.config) if args.config else SynthConfig()
    if args.synth_seed is not None:
        config = config._replace(seed=args.synth_seed)
    dataset = generate(config, verbose=args.verbose)
    save_dataset(dataset, args.out)
    return 0


def _fused(dataset, args, system: Optional[SystemFit] = None):
    if dataset.has_fused:
        return dataset, system
    if system is None:
        system = fit_system(dataset, beta_step=args.beta_step, scaling=args.scaling, verbose=args.verbose)
    return apply_system(dataset, system), system


def cmd_calibrate(args) -> int:
    _require(args, 'data', 'alpha', 'out')
    calib, system = _fused(load_dataset(args.data), args)
    calibrator = Calibrator(calib, _grid(args), args.metric, args.bound, args.compat_wsr, args.order_seed)
    result = calibrate(calibrator, args.alpha, args.delta, args.mode, verbose=args.verbose)
    order = None
    if args.order_sensitivity:
        order = order_sensitivity(calibrator, None, args.alpha, args.delta, args.order_sensitivity)
        logger.info(
            f'Order sensitivity: threshold spread {order.threshold_spread}, min UCB spread {order.min_ucb_spread}'
        )
    export_result(result, args.out, system.to_dict() if system is not None else None, order)
    curve_out = args.curve_out or os.path.splitext(args.out)[0] + '.csv'
    export_curve(calibrator.risk_curve(result.delta_requested), curve_out)
    print(dumps(result.to_dict()))
    return 0


def cmd_evaluate(args) -> int:
    _require(args, 'data', 'calibration', 'out')
    saved = read_json(args.calibration)
    if 'calibration' not in saved:
        raise ConfigurationError(f'{args.calibration} is not a calibration result')
    result = CalibrationResult.from_dict(saved['calibration'])
    test = load_dataset(args.data)
    if not test.has_fused:
        if not saved.get('system'):
            raise ConfigurationError('test data is not fused and the calibration result carries no fitted system')
        test = apply_system(test, SystemFit.from_dict(saved['system']))
    report = evaluate_test(test, result)
    write_json(report.to_dict(), args.out)
    print(dumps(report.to_dict()))
    return 0


def _write_summary(summary, out_dir: Optional[str], name: str):
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_jsonl([r.to_dict() for r in summary.reports], os.path.join(out_dir, f'{name}.jsonl'))
        write_json(dict(summary.to_dict(), table=summary.as_row()), os.path.join(out_dir, f'{name}_summary.json'))
    print(dumps(dict(summary.to_dict(), table=summary.as_row())))


def cmd_trials(args) -> int:
    _require(args, 'pool', 'alpha')
    pool = load_dataset(args.pool)
    summary = run_trials(pool, args.alpha, args.delta, _trial_config(args), verbose=args.verbose)
    _write_summary(summary, args.out_dir, 'trials')
    return 0


def cmd_baseline(args) -> int:
    _require(args, 'pool', 'required_mrr')
    pool = load_dataset(args.pool)
    methods = [args.method, 'cec'] if args.compare else [args.method]
    summaries = compare_methods(pool, 1.0 - args.required_mrr, args.delta, _trial_config(args), methods,
                                verbose=args.verbose)
    for method, summary in summaries.items():
        _write_summary(summary, args.out_dir, method)
    return 0


def cmd_tradeoff(args) -> int:
    _require(args, 'pool', 'alphas', 'out')
    table = tradeoff(load_dataset(args.pool), args.alphas, args.delta, _trial_config(args), verbose=args.verbose)
    table.to_csv(args.out, index=False)
    return 0


def cmd_sweep_confidence(args) -> int:
    _require(args, 'pool', 'alphas', 'out')
    table = confidence_sweep(
        load_dataset(args.pool), args.alphas, args.delta, _trial_config(args), verbose=args.verbose
    )
    table.to_csv(args.out, index=False)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='rankprune', description='Certified candidate-set pruning for reranking')
    parser.add_argument('-v', '--verbose', action='count', default=0, help='-v for progress, -vv for debug')
    parser.add_argument('--settings', help='YAML settings file (version: 1) with defaults for the command')
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    p = commands.add_parser('ingest', help='Join run files and qrels into a dataset snapshot')
    p.add_argument('--retriever-run')
    p.add_argument('--reranker-run')
    p.add_argument('--qrels')
    p.add_argument('--pool-size', type=int, default=1000)
    p.add_argument('--out')
    p.set_defaults(func=cmd_ingest)

    p = commands.add_parser('synth', help='Generate a synthetic dataset snapshot')
    p.add_argument('--config', help='YAML synthetic config (version: 1)')
    p.add_argument('--seed', dest='synth_seed', type=int, default=None)
    p.add_argument('--out')
    p.set_defaults(func=cmd_synth)

    p = commands.add_parser('calibrate', help='Select a pruning threshold on calibration data')
    p.add_argument('--data')
    p.add_argument('--alpha', type=float)
    p.add_argument('--out', help='Calibration result JSON')
    p.add_argument('--curve-out', help='Risk curve CSV; defaults next to --out')
    p.add_argument('--order-sensitivity', type=_seeds, metavar='SEEDS',
                   help='Comma-separated order seeds; reports the threshold and minimum bound under each ordering')
    _add_calibration_options(p)
    p.set_defaults(func=cmd_calibrate)

    p = commands.add_parser('evaluate', help='Apply a calibration result to test data')
    p.add_argument('--data')
    p.add_argument('--calibration')
    p.add_argument('--out')
    p.set_defaults(func=cmd_evaluate)

    p = commands.add_parser('trials', help='Repeated calibration/test trials')
    p.add_argument('--alpha', type=float)
    p.add_argument('--out-dir')
    _add_trial_options(p)
    p.set_defaults(func=cmd_trials)

    p = commands.add_parser('tradeoff', help='Size and MRR@10 across alphas')
    p.add_argument('--alphas', type=_alphas)
    p.add_argument('--out')
    _add_trial_options(p)
    p.set_defaults(func=cmd_tradeoff)

    p = commands.add_parser('sweep-confidence', help='Corrected confidence and coverage across alphas')
    p.add_argument('--alphas', type=_alphas)
    p.add_argument('--out')
    _add_trial_options(p)
    p.set_defaults(func=cmd_sweep_confidence)

    p = commands.add_parser('baseline', help='Empirical score or rank threshold trials')
    p.add_argument('--method', choices=['est', 'ert'], default='est')
    p.add_argument('--required-mrr', type=float)
    p.add_argument('--compare', action='store_true', help='Also run the certified method on the same splits')
    p.add_argument('--out-dir')
    _add_trial_options(p)
    p.set_defaults(func=cmd_baseline)

    parser.subcommands = commands.choices
    return parser


def _apply_settings(parser: argparse.ArgumentParser, args, argv: List[str]):
    settings = load_yaml(args.settings, 'settings')
    subparser = parser.subcommands[args.command]
    dests = {a.dest: a for a in subparser._actions if a.dest not in ('help', 'func')}
    if args.command == 'synth' and 'seed' in settings:
        settings['synth_seed'] = settings.pop('seed')
    check_keys(settings, dests, f'{args.command} settings')

    defaults: Dict = {}
    for key, value in settings.items():
        action = dests[key]
        if action.type is not None and isinstance(value, str):
            value = action.type(value)
        defaults[key] = value
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)

    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, stream=sys.stderr, format='%(asctime)s %(levelname)s %(name)s: %(message)s')

    try:
        if args.settings:
            args = _apply_settings(parser, args, argv)
        return args.func(args)
    except RankPruneError as e:
        print(f'error category={e.category} message={json.dumps(str(e))}', file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f'error category=io message={json.dumps(str(e))}', file=sys.stderr)
        return 3


if __name__ == '__main__':
    sys.exit(main())
