"""
Command line:

    python -m mltrain train --config desk.cfg --seed 0 --mode multilevel --out runs/ml0
    python -m mltrain aggregate --runs runs/ml0 runs/ml1 --out ml.csv
    python -m mltrain compare --baseline sl.csv --multilevel ml.csv --out report.md
    python -m mltrain gradcheck
    python -m mltrain flops --config desk.cfg
    python -m mltrain experiment --config desk.cfg --seeds 0,1,2,3,4,5 --out runs/desk

Every config key is also a flag: ``--total-fine-steps 10`` overrides the file.
"""

import argparse
import logging
import sys

from mltrain import config as cfg
from mltrain import gradcheck, harness
from mltrain.errors import MultilevelError
from mltrain.flops import cost_model
from mltrain.model import param_count

logger = logging.getLogger('mltrain')


def _add_config_flags(parser):
    parser.add_argument('--config', help='flat key = value config file')
    for key, (kind, _) in cfg.KEYS.items():
        if key in ('seed', 'mode', 'out'):
            continue
        parser.add_argument('--' + key.replace('_', '-'), dest=key, type=kind, default=None)


def _overrides(args, extra=()):
    keys = [k for k in cfg.KEYS if k not in ('seed', 'mode', 'out')] + list(extra)
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def cmd_train(args):
    config = cfg.load_run_config(args.config, _overrides(args, ('seed', 'mode', 'out')))
    path = harness.run(config, progress=not args.quiet)
    print(path)


def cmd_aggregate(args):
    print(harness.aggregate(args.runs, args.out))


def cmd_compare(args):
    result = harness.compare(args.baseline, args.multilevel, args.out, figures=not args.no_figures)
    print('FLOP savings: %s (reference at full scale: %s)'
          % (harness.format_percent(result['savings']), harness.format_percent(result['reference_savings'])))


def cmd_gradcheck(args):
    errors, passed = gradcheck.run_suite(progress=not args.quiet)
    for name, error in errors.items():
        print('%-28s %.3e' % (name, error))
    print('PASSED' if passed else 'FAILED')
    return 0 if passed else 1


def cmd_flops(args):
    config = cfg.load_run_config(args.config, _overrides(args))
    model = config.model
    tokens = config.data.micro_batch_size * config.data.sequence_length * config.optimizer.accumulation_factor
    costs = cost_model(model, tokens)
    rows = [('fine parameters', param_count(model)),
            ('coarse parameters', param_count(model.coarse())),
            ('tokens per step', tokens),
            ('forward FLOPs per token', costs.forward_per_token),
            ('fine step FLOPs', costs.fine_step),
            ('coarse step FLOPs', costs.coarse_step)]
    for name, value in rows:
        print('%-26s %d' % (name, value))
    print('%-26s %.4f' % ('coarse / fine step', costs.coarse_ratio))


def cmd_experiment(args):
    config = cfg.load_run_config(args.config, _overrides(args))
    seeds = [int(s) for s in args.seeds.split(',') if s.strip()]
    result = harness.experiment(config, seeds, args.out, workers=args.workers, progress=not args.quiet)
    print('FLOP savings: %s, seeds accelerated: %d of %d'
          % (harness.format_percent(result['savings']), result['accelerated_seeds'], len(result['per_seed'])))


def build_parser():
    parser = argparse.ArgumentParser(prog='mltrain', description='multilevel training of transformer decoders')
    parser.add_argument('--log-level', default='INFO')
    parser.add_argument('--quiet', action='store_true', help='no progress bars')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help='train one seed')
    _add_config_flags(p)
    p.add_argument('--seed', type=int)
    p.add_argument('--mode', choices=cfg.MODES)
    p.add_argument('--out')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('aggregate', help='mean and std over seeds')
    p.add_argument('--runs', nargs='+', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser('compare', help='single-level vs multilevel report')
    p.add_argument('--baseline', required=True)
    p.add_argument('--multilevel', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--no-figures', action='store_true')
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser('gradcheck', help='64-bit finite-difference gradient suite')
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser('flops', help='print the cost table')
    _add_config_flags(p)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser('experiment', help='both modes over several seeds, then compare')
    _add_config_flags(p)
    p.add_argument('--seeds', default='0,1,2,3,4,5')
    p.add_argument('--workers', type=int, default=1)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format='%(asctime)s %(name)s %(levelname)s %(message)s')
    try:
        return args.func(args) or 0
    except MultilevelError as exc:
        logger.error('%s', exc)
        return 2


if __name__ == '__main__':
    sys.exit(main())
