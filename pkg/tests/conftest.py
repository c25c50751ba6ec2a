import numpy as np
import pytest

from mltrain import config as cfg
from mltrain.model import ModelConfig

SENTENCES = [
    'the quick brown fox jumps over the lazy dog. ',
    'a stitch in time saves nine. ',
    'all that glitters is not gold. ',
    'the early bird catches the worm. ',
    'where there is smoke there is fire. ',
]


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=16, context_length=8, embed_dim=8, num_blocks=2, num_heads=2)


@pytest.fixture
def byte_config():
    # byte vocabulary, small enough for a few hundred steps in a test
    return ModelConfig(vocab_size=256, context_length=16, embed_dim=16, num_blocks=4, num_heads=2)


@pytest.fixture
def corpus_path(tmp_path):
    rng = np.random.default_rng(1234)
    text = ''.join(SENTENCES[i] for i in rng.integers(0, len(SENTENCES), size=400))
    path = tmp_path / 'corpus.txt'
    path.write_text(text)
    return str(path)


@pytest.fixture
def run_config(tmp_path, corpus_path):
    # tiny multilevel-capable run over the byte corpus
    def make(**overrides):
        values = {
            'vocab_size': 256,
            'context_length': 8,
            'embed_dim': 8,
            'num_blocks': 2,
            'num_heads': 2,
            'total_fine_steps': 3,
            'warmup_steps': 1,
            'accumulation_factor': 2,
            'micro_batch_size': 2,
            'sequence_length': 8,
            'num_cycles': 1,
            'coarse_steps_per_model': 2,
            'corpus': corpus_path,
            'out': str(tmp_path / 'run'),
        }
        values.update(overrides)
        return cfg.from_flat(values)
    return make
