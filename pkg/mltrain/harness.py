"""
Run orchestration, metrics persistence, multi-seed aggregation and the
single-level vs multilevel comparison.

A run directory holds:
    run.manifest   the flat run config (key = value)
    metrics.jsonl  one record per optimization step, at every level
    model.ckpt     final (or last-good) checkpoint, plus its .manifest
    error.json     only when the run diverged
"""

import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from tqdm import tqdm, trange

from mltrain import config as cfg
from mltrain import tensor as T
from mltrain.checkpoint import save_checkpoint
from mltrain.data import BatchStream, load_corpus, load_token_file
from mltrain.errors import AggregationError, ConfigError, InputError, NumericError, TrainingDivergedError
from mltrain.figures import plot_comparison
from mltrain.flops import FlopCounter, cost_model
from mltrain.model import init_params
from mltrain.multilevel import run_coarse_cycle
from mltrain.optim import lr_at, train_step

logger = logging.getLogger(__name__)

METRICS_FILE = 'metrics.jsonl'
MANIFEST_FILE = 'run.manifest'
CHECKPOINT_FILE = 'model.ckpt'
ERROR_FILE = 'error.json'

# keys of a metrics line, in order
RECORD_KEYS = ('step', 'level', 'inner_step', 'loss', 'lr', 'cumulative_flops', 'tokens_seen', 'seed', 'wall_ms')

LEVEL_FINE = 'FINE'

# FLOP savings reported for the full-scale experiment, kept as reference metadata
FULL_SCALE_REFERENCE_SAVINGS = 0.44

# a seed counts as accelerated when it saves at least this fraction of FLOPs
SEED_SAVINGS_THRESHOLD = 0.10


class MetricsWriter:
    # @path: JSON Lines file, truncated on open
    def __init__(self, path):
        self.path = path
        self.file = None

    def __enter__(self):
        self.file = open(self.path, 'w')
        return self

    def __exit__(self, *exc_info):
        self.file.close()
        return False

    def write(self, record):
        self.file.write(json.dumps({key: record[key] for key in RECORD_KEYS}) + '\n')
        self.file.flush()


def read_metrics(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def read_manifest(run_dir):
    values = {}
    with open(os.path.join(run_dir, MANIFEST_FILE)) as f:
        for line in f:
            if '=' in line:
                key, value = line.split('=', 1)
                values[key.strip()] = value.strip()
    return values


def load_stream(data_config):
    if data_config.token_file:
        return load_token_file(data_config.token_file)
    if data_config.corpus:
        return load_corpus(data_config.corpus)
    raise InputError('a run needs a corpus or a token_file')


def run(config, progress=True):
    """ Train one seed, single-level or multilevel.
    In multilevel mode each of the first num_cycles fine steps is followed by
    a full coarse cycle; the remaining steps train the fine level only.
    Args:
        config (RunConfig): the run; config.out is created if missing
        progress (bool): show a tqdm bar over fine steps
    Returns:
        path of the metrics file
    """
    config.validate()
    os.makedirs(config.out, exist_ok=True)
    with open(os.path.join(config.out, MANIFEST_FILE), 'w') as f:
        f.write(cfg.format_flat(cfg.to_flat(config)))

    stream = load_stream(config.data)
    if stream.vocab_size > config.model.vocab_size:
        raise ConfigError('corpus vocabulary %d exceeds model vocab_size %d'
                          % (stream.vocab_size, config.model.vocab_size))

    with T.precision(config.precision):
        params = init_params(config.model, config.seed)
        data = BatchStream(stream, config.seed, config.data.micro_batch_size, config.data.sequence_length,
                           config.optimizer.accumulation_factor, config.data.coarse_data)
        flops = FlopCounter(cost_model(config.model, data.tokens_per_step))
        num_cycles = config.schedule.num_cycles if config.mode == cfg.MODE_MULTILEVEL else 0
        metrics_path = os.path.join(config.out, METRICS_FILE)
        checkpoint_path = os.path.join(config.out, CHECKPOINT_FILE)
        started = time.perf_counter()
        state = {'step': 0, 'tokens_seen': 0}

        with MetricsWriter(metrics_path) as writer:
            def emit(level, inner_step, loss, lr, cumulative_flops):
                state['tokens_seen'] += data.tokens_per_step
                writer.write({'step': state['step'], 'level': level, 'inner_step': inner_step,
                              'loss': loss, 'lr': lr, 'cumulative_flops': cumulative_flops,
                              'tokens_seen': state['tokens_seen'], 'seed': config.seed,
                              'wall_ms': round((time.perf_counter() - started) * 1000, 3)})

            def on_coarse_step(parity, inner_step, loss, lr, cumulative_flops):
                emit(parity.level, inner_step, loss, lr, cumulative_flops)

            desc = '%s seed %d' % (config.mode, config.seed)
            for step in trange(config.total_fine_steps, desc=desc, disable=not progress):
                state['step'] = step + 1
                lr = lr_at(config.optimizer.schedule, step)
                try:
                    loss = train_step(params, data.step_batches(LEVEL_FINE), lr)
                    if not math.isfinite(loss):
                        raise NumericError('non-finite loss %r at fine step %d' % (loss, step + 1))
                    emit(LEVEL_FINE, 0, loss, lr, flops.add_fine_step())
                    if step < num_cycles:
                        run_coarse_cycle(params, config.schedule, data, flops, on_step=on_coarse_step)
                except NumericError as exc:
                    _abort(params, config, checkpoint_path, step + 1, exc)

        save_checkpoint(params, checkpoint_path, seed=config.seed)
    logger.info('%s seed %d: %d fine steps, %d coarse steps, %d FLOPs', config.mode, config.seed,
                flops.fine_steps, flops.coarse_steps, flops.total)
    return metrics_path


def _abort(params, config, checkpoint_path, step, exc):
    # the failing update was never applied, so params are the last good ones
    save_checkpoint(params, checkpoint_path, seed=config.seed)
    with open(os.path.join(config.out, ERROR_FILE), 'w') as f:
        json.dump({'step': step, 'seed': config.seed, 'error': str(exc), 'checkpoint': checkpoint_path}, f)
    logger.error('run diverged at fine step %d: %s', step, exc)
    raise TrainingDivergedError(str(exc), step=step, checkpoint=checkpoint_path) from exc


def _run_quietly(config):
    return run(config, progress=False)


def run_seeds(config, seeds, out_dir, workers=1, progress=True):
    """ One run per seed under out_dir/seed_<n>; seeds share nothing, so they may run in parallel.
    Returns:
        list of run directories
    """
    configs = [cfg.replace_seed(config, seed, os.path.join(out_dir, 'seed_%d' % seed)) for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(tqdm(pool.map(_run_quietly, configs), total=len(configs), desc=config.mode, disable=not progress))
    else:
        for c in configs:
            run(c, progress=progress)
    return [c.out for c in configs]


def aggregate(run_dirs, out_file):
    """ Per fine step mean and sample std of the loss across seeds, plus FLOPs per run.
    Runs must share every config key except seed and out.
    Returns:
        path of the summary CSV
    """
    if not run_dirs:
        raise AggregationError('nothing to aggregate')
    reference = None
    seeds, losses, flops, steps = [], [], [], None
    for run_dir in run_dirs:
        manifest = read_manifest(run_dir)
        shared = {k: v for k, v in manifest.items() if k not in ('seed', 'out')}
        if reference is None:
            reference = shared
        elif shared != reference:
            diff = sorted(k for k in set(shared) | set(reference) if shared.get(k) != reference.get(k))
            raise AggregationError('%s: config differs in %s' % (run_dir, ', '.join(diff)))
        fine = [r for r in read_metrics(os.path.join(run_dir, METRICS_FILE)) if r['level'] == LEVEL_FINE]
        run_steps = [r['step'] for r in fine]
        if steps is None:
            steps = run_steps
        elif run_steps != steps:
            raise AggregationError('%s: fine steps differ from %s' % (run_dir, run_dirs[0]))
        seeds.append(int(manifest['seed']))
        losses.append([r['loss'] for r in fine])
        flops.append([r['cumulative_flops'] for r in fine])
    if len(set(seeds)) != len(seeds):
        raise AggregationError('duplicate seeds: %s' % seeds)

    losses = np.asarray(losses, dtype=np.float64).T
    mean = losses.mean(axis=1)
    std = losses.std(axis=1, ddof=1) if losses.shape[1] > 1 else np.zeros_like(mean)
    flops_mean = np.asarray(flops, dtype=np.float64).mean(axis=0)

    names = (['step'] + ['loss_seed%d' % s for s in seeds] + ['loss_mean', 'loss_std']
             + ['flops_seed%d' % s for s in seeds] + ['flops_mean'])
    rows = np.empty((len(steps), len(names)), dtype=object)
    rows[:, 0] = steps
    rows[:, 1:1 + len(seeds)] = losses
    rows[:, 1 + len(seeds)] = mean
    rows[:, 2 + len(seeds)] = std
    rows[:, 3 + len(seeds):3 + 2 * len(seeds)] = np.asarray(flops, dtype=object).T
    rows[:, -1] = np.round(flops_mean).astype(np.int64)
    fmt = ['%d'] + ['%.10g'] * (len(seeds) + 2) + ['%d'] * (len(seeds) + 1)
    np.savetxt(out_file, rows, fmt=fmt, delimiter=',', header=','.join(names), comments='')
    logger.info('aggregated %d runs into %s', len(run_dirs), out_file)
    return out_file


def read_summary(path):
    table = np.genfromtxt(path, delimiter=',', names=True, dtype=None, encoding='utf-8')
    table = np.atleast_1d(table)
    columns = {name: np.asarray(table[name]) for name in table.dtype.names}
    columns['seeds'] = [int(name[len('loss_seed'):]) for name in table.dtype.names if name.startswith('loss_seed')]
    return columns


def first_reach(losses, flops, target):
    """ FLOPs at the first step whose loss is <= target.
    Returns:
        (flops or None, closest loss, flops at the closest loss)
    """
    losses = np.asarray(losses, dtype=np.float64)
    hits = np.nonzero(losses <= target)[0]
    closest = int(np.argmin(losses))
    reached = int(flops[hits[0]]) if hits.size else None
    return reached, float(losses[closest]), int(flops[closest])


def _savings(baseline_flops, multilevel_flops):
    return 1 - multilevel_flops / baseline_flops


def compare(baseline_path, multilevel_path, out_path, figures=True):
    """ Compare two summaries: loss per step, loss per FLOP, and the FLOPs
    each method needs to first reach the baseline's final mean loss.
    Returns:
        dict with target loss, FLOPs to reach it, savings and per-seed results
    """
    baseline = read_summary(baseline_path)
    multilevel = read_summary(multilevel_path)
    target = float(baseline['loss_mean'][-1])
    sl_flops, _, _ = first_reach(baseline['loss_mean'], baseline['flops_mean'], target)
    ml_flops, ml_closest, ml_closest_flops = first_reach(multilevel['loss_mean'], multilevel['flops_mean'], target)
    result = {'target_loss': target,
              'baseline_flops': sl_flops,
              'multilevel_flops': ml_flops,
              'savings': None if ml_flops is None else _savings(sl_flops, ml_flops),
              'multilevel_closest_loss': ml_closest,
              'multilevel_closest_flops': ml_closest_flops,
              'reference_savings': FULL_SCALE_REFERENCE_SAVINGS,
              'per_seed': []}

    for sl_seed, ml_seed in zip(baseline['seeds'], multilevel['seeds']):
        sl_losses, sl_run_flops = baseline['loss_seed%d' % sl_seed], baseline['flops_seed%d' % sl_seed]
        reached, _, _ = first_reach(sl_losses, sl_run_flops, target)
        # a baseline seed that never gets there needed at least its whole budget
        sl_needed = reached if reached is not None else int(sl_run_flops[-1])
        ml_needed, _, _ = first_reach(multilevel['loss_seed%d' % ml_seed], multilevel['flops_seed%d' % ml_seed], target)
        result['per_seed'].append({'baseline_seed': sl_seed, 'multilevel_seed': ml_seed,
                                   'baseline_flops': sl_needed, 'multilevel_flops': ml_needed,
                                   'savings': None if ml_needed is None else _savings(sl_needed, ml_needed)})
    result['accelerated_seeds'] = sum(1 for s in result['per_seed']
                                      if s['savings'] is not None and s['savings'] >= SEED_SAVINGS_THRESHOLD)
    result['final_loss_gap'] = float(multilevel['loss_mean'][-1]) - target

    with open(out_path, 'w') as f:
        f.write(format_report(baseline, multilevel, result))
    if figures:
        plot_comparison(baseline, multilevel, os.path.dirname(os.path.abspath(out_path)))
    logger.info('wrote comparison report %s', out_path)
    return result


def format_percent(value):
    return 'not reached' if value is None else '%.1f%%' % (100 * value)


def format_report(baseline, multilevel, result):
    lines = ['# single-level vs multilevel', '',
             'target loss (single-level final mean): %.6f' % result['target_loss'],
             'single-level FLOPs to target: %d' % result['baseline_flops']]
    if result['multilevel_flops'] is None:
        lines.append('multilevel FLOPs to target: not reached (closest loss %.6f at %d FLOPs)'
                     % (result['multilevel_closest_loss'], result['multilevel_closest_flops']))
    else:
        lines.append('multilevel FLOPs to target: %d' % result['multilevel_flops'])
    lines.append('FLOP savings: %s' % format_percent(result['savings']))
    lines.append('reference savings at full scale (16000 steps, 1B tokens): %s'
                 % format_percent(result['reference_savings']))
    lines.append('final mean loss gap (multilevel - single-level): %+.6f' % result['final_loss_gap'])
    lines += ['', '## per seed', '', 'baseline_seed,multilevel_seed,baseline_flops,multilevel_flops,savings']
    for s in result['per_seed']:
        lines.append('%d,%d,%d,%s,%s' % (s['baseline_seed'], s['multilevel_seed'], s['baseline_flops'],
                                        'not reached' if s['multilevel_flops'] is None else s['multilevel_flops'],
                                        format_percent(s['savings'])))
    lines.append('seeds with savings >= %d%%: %d of %d' % (100 * SEED_SAVINGS_THRESHOLD, result['accelerated_seeds'],
                                                           len(result['per_seed'])))

    lines += ['', '## loss vs step', '', 'step,single_mean,single_std,multilevel_mean,multilevel_std']
    count = min(len(baseline['step']), len(multilevel['step']))
    for i in range(count):
        lines.append('%d,%.6f,%.6f,%.6f,%.6f' % (baseline['step'][i], baseline['loss_mean'][i], baseline['loss_std'][i],
                                                 multilevel['loss_mean'][i], multilevel['loss_std'][i]))
    for name, summary in (('single', baseline), ('multilevel', multilevel)):
        lines += ['', '## loss vs FLOPs (%s)' % name, '', 'flops,loss_mean,loss_std']
        for flops, mean, std in zip(summary['flops_mean'], summary['loss_mean'], summary['loss_std']):
            lines.append('%d,%.6f,%.6f' % (flops, mean, std))
    return '\n'.join(lines) + '\n'


def experiment(config, seeds, out_dir, workers=1, progress=True):
    """ Both modes over the same seeds, aggregated and compared.
    Returns:
        the compare() result
    """
    summaries = {}
    for mode in cfg.MODES:
        mode_config = config.with_overrides(mode=mode)
        run_dirs = run_seeds(mode_config, seeds, os.path.join(out_dir, mode), workers=workers, progress=progress)
        summaries[mode] = aggregate(run_dirs, os.path.join(out_dir, '%s_summary.csv' % mode))
    return compare(summaries[cfg.MODE_SINGLE], summaries[cfg.MODE_MULTILEVEL], os.path.join(out_dir, 'report.md'))
