"""
Run configuration.

A run is described by a flat set of keys; a config file holds them as
``key = value`` lines and every key can be overridden from the command line.
The defaults below are the desk-scale experiment: byte vocabulary and
laptop-sized widths, but the same structure as the full-scale setup
(12 blocks, two coarse models, a handful of multilevel cycles at the start).
"""

import logging
from dataclasses import dataclass, replace

from mltrain.errors import ConfigError
from mltrain.model import LN_EPS, ModelConfig
from mltrain.multilevel import MultilevelSchedule, Parity
from mltrain.optim import SgdConfig, WarmupCosine

logger = logging.getLogger(__name__)

MODE_SINGLE = 'single'
MODE_MULTILEVEL = 'multilevel'
MODES = (MODE_SINGLE, MODE_MULTILEVEL)

# every config key with its type and desk-scale default
# SGD needs much larger steps than 1.2e-3 to move a model this small in 600 steps;
# the ratios lr_min = lr_max / 10 and coarse_lr = lr_max are kept
KEYS = {
    'vocab_size': (int, 256),
    'context_length': (int, 128),
    'embed_dim': (int, 128),
    'num_blocks': (int, 12),
    'num_heads': (int, 8),
    'ln_eps': (float, LN_EPS),
    'mode': (str, MODE_SINGLE),
    'total_fine_steps': (int, 600),
    'warmup_steps': (int, 30),
    'lr_max': (float, 0.3),
    'lr_min': (float, 0.03),
    'accumulation_factor': (int, 4),
    'micro_batch_size': (int, 16),
    'sequence_length': (int, 128),
    'num_cycles': (int, 10),
    'coarse_steps_per_model': (int, 20),
    'delta': (float, 0.25),
    'coarse_lr': (float, 0.3),
    'coarse_data': (str, 'shared'),
    'coarse_parities': (str, 'even,odd'),
    'corpus': (str, ''),
    'token_file': (str, ''),
    'seed': (int, 0),
    'out': (str, 'runs/run'),
    'precision': (int, 32),
}

# values of the full-scale experiment (GPT-2 vocabulary, 22,368,512 parameters)
FULL_SCALE_OVERRIDES = {
    'vocab_size': 50257,
    'context_length': 256,
    'embed_dim': 256,
    'num_blocks': 12,
    'num_heads': 8,
    'total_fine_steps': 16000,
    'warmup_steps': 715,
    'lr_max': 1.2e-3,
    'lr_min': 1.2e-4,
    'accumulation_factor': 32,
    'micro_batch_size': 32,
    'sequence_length': 256,
    'num_cycles': 35,
    'coarse_steps_per_model': 100,
    'delta': 0.25,
    'coarse_lr': 1.2e-3,
}


@dataclass(frozen=True)
class DataConfig:
    corpus: str
    token_file: str
    micro_batch_size: int
    sequence_length: int
    coarse_data: str = 'shared'


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    mode: str
    total_fine_steps: int
    schedule: MultilevelSchedule
    optimizer: SgdConfig
    data: DataConfig
    seed: int
    out: str
    precision: int = 32

    def validate(self):
        self.model.validate()
        self.model.coarse()
        if self.mode not in MODES:
            raise ConfigError('mode must be one of %s, got %r' % (MODES, self.mode))
        if self.total_fine_steps < 1:
            raise ConfigError('total_fine_steps must be >= 1, got %d' % self.total_fine_steps)
        self.schedule.validate()
        if self.mode == MODE_MULTILEVEL and self.schedule.num_cycles > self.total_fine_steps:
            raise ConfigError('num_cycles (%d) exceeds total_fine_steps (%d)'
                              % (self.schedule.num_cycles, self.total_fine_steps))
        self.optimizer.validate()
        if self.optimizer.schedule.total_steps != self.total_fine_steps:
            raise ConfigError('learning-rate schedule length differs from total_fine_steps')
        if not 1 <= self.data.sequence_length <= self.model.context_length:
            raise ConfigError('sequence_length %d must lie in [1, context_length=%d]'
                              % (self.data.sequence_length, self.model.context_length))
        if self.data.micro_batch_size < 1:
            raise ConfigError('micro_batch_size must be >= 1')
        if self.data.coarse_data not in ('shared', 'replay'):
            raise ConfigError("coarse_data must be 'shared' or 'replay', got %r" % self.data.coarse_data)
        if self.precision not in (32, 64):
            raise ConfigError('precision must be 32 or 64, got %r' % self.precision)
        return self

    def with_overrides(self, **values):
        flat = to_flat(self)
        flat.update(values)
        return from_flat(flat)


def parse_value(key, raw):
    if key not in KEYS:
        raise ConfigError('unknown config key %r' % key)
    kind = KEYS[key][0]
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError('config key %r expects %s, got %r' % (key, kind.__name__, raw)) from None


def parse_parities(raw):
    try:
        return tuple(Parity(part.strip().lower()) for part in raw.split(',') if part.strip())
    except ValueError:
        raise ConfigError("coarse_parities must list 'even' and/or 'odd', got %r" % raw) from None


def read_config_file(path):
    """ Parse ``key = value`` lines; blank lines and ``#`` comments are skipped.
    Returns:
        dict of typed values for the keys present in the file
    """
    values = {}
    with open(path) as f:
        for number, line in enumerate(f, 1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError('%s:%d: expected key = value, got %r' % (path, number, line))
            key, raw = (part.strip() for part in line.split('=', 1))
            values[key] = parse_value(key, raw)
    return values


def from_flat(values):
    # build a RunConfig from flat keys, missing keys take the defaults
    unknown = set(values) - set(KEYS)
    if unknown:
        raise ConfigError('unknown config keys: %s' % ', '.join(sorted(unknown)))
    flat = {key: default for key, (_, default) in KEYS.items()}
    flat.update(values)
    model = ModelConfig(vocab_size=flat['vocab_size'],
                        context_length=flat['context_length'],
                        embed_dim=flat['embed_dim'],
                        num_blocks=flat['num_blocks'],
                        num_heads=flat['num_heads'],
                        ln_eps=flat['ln_eps'])
    schedule = MultilevelSchedule(num_cycles=flat['num_cycles'],
                                  coarse_steps_per_model=flat['coarse_steps_per_model'],
                                  delta=flat['delta'],
                                  coarse_lr=flat['coarse_lr'],
                                  parities=parse_parities(flat['coarse_parities']))
    optimizer = SgdConfig(WarmupCosine(warmup_steps=flat['warmup_steps'],
                                       total_steps=flat['total_fine_steps'],
                                       lr_max=flat['lr_max'],
                                       lr_min=flat['lr_min']),
                          accumulation_factor=flat['accumulation_factor'])
    data = DataConfig(corpus=flat['corpus'],
                      token_file=flat['token_file'],
                      micro_batch_size=flat['micro_batch_size'],
                      sequence_length=flat['sequence_length'],
                      coarse_data=flat['coarse_data'])
    return RunConfig(model=model,
                     mode=flat['mode'],
                     total_fine_steps=flat['total_fine_steps'],
                     schedule=schedule,
                     optimizer=optimizer,
                     data=data,
                     seed=flat['seed'],
                     out=flat['out'],
                     precision=flat['precision'])


def to_flat(config):
    lr = config.optimizer.schedule
    return {
        'vocab_size': config.model.vocab_size,
        'context_length': config.model.context_length,
        'embed_dim': config.model.embed_dim,
        'num_blocks': config.model.num_blocks,
        'num_heads': config.model.num_heads,
        'ln_eps': config.model.ln_eps,
        'mode': config.mode,
        'total_fine_steps': config.total_fine_steps,
        'warmup_steps': lr.warmup_steps,
        'lr_max': lr.lr_max,
        'lr_min': lr.lr_min,
        'accumulation_factor': config.optimizer.accumulation_factor,
        'micro_batch_size': config.data.micro_batch_size,
        'sequence_length': config.data.sequence_length,
        'num_cycles': config.schedule.num_cycles,
        'coarse_steps_per_model': config.schedule.coarse_steps_per_model,
        'delta': config.schedule.delta,
        'coarse_lr': config.schedule.coarse_lr,
        'coarse_data': config.data.coarse_data,
        'coarse_parities': ','.join(p.value for p in config.schedule.parities),
        'corpus': config.data.corpus,
        'token_file': config.data.token_file,
        'seed': config.seed,
        'out': config.out,
        'precision': config.precision,
    }


def format_flat(values):
    return ''.join('%s = %s\n' % (key, values[key]) for key in KEYS if key in values)


def default_run_config(**overrides):
    return from_flat(overrides)


def full_scale_run_config(**overrides):
    values = dict(FULL_SCALE_OVERRIDES)
    values.update(overrides)
    return from_flat(values)


def load_run_config(path=None, overrides=None):
    values = read_config_file(path) if path else {}
    values.update(overrides or {})
    config = from_flat(values)
    logger.debug('run config: %s', to_flat(config))
    return config


def replace_seed(config, seed, out):
    return replace(config, seed=seed, out=out)
