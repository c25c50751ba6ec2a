"""
Closed-form FLOP cost model.

A forward pass costs 2 FLOPs per multiply-add of every weight matrix it
touches (the N blocks and the tied output projection) plus the causal
attention score and value products, counted at the full context length.
Embedding lookups are table reads and cost nothing. A training step costs
three forward passes. All results are exact Python integers.
"""

from dataclasses import dataclass

from mltrain.errors import ConfigError

# training step cost in units of forward passes
FORWARD_PASSES_PER_STEP = 3


def forward_flops(config, tokens):
    if tokens < 1:
        raise ConfigError('tokens must be >= 1, got %r' % (tokens,))
    n, d = config.num_blocks, config.embed_dim
    matrix_params = (4 + 2 * config.ff_multiplier) * n * d * d + config.vocab_size * d
    attention = 4 * n * config.context_length * d
    return tokens * (2 * matrix_params + attention)


def train_step_flops(config, tokens):
    return FORWARD_PASSES_PER_STEP * forward_flops(config, tokens)


@dataclass(frozen=True)
class CostModel:
    fine_step: int
    coarse_step: int
    tokens_per_step: int
    forward_per_token: int

    @property
    def coarse_ratio(self):
        return self.coarse_step / self.fine_step


def cost_model(config, tokens_per_step):
    # per-step costs of the fine model and of a coarse model with half the blocks
    return CostModel(fine_step=train_step_flops(config, tokens_per_step),
                     coarse_step=train_step_flops(config.coarse(), tokens_per_step),
                     tokens_per_step=tokens_per_step,
                     forward_per_token=forward_flops(config, 1))


class FlopCounter:
    # running total of FLOPs spent in a run
    def __init__(self, costs):
        self.costs = costs
        self.total = 0
        self.fine_steps = 0
        self.coarse_steps = 0

    def add_fine_step(self):
        self.fine_steps += 1
        self.total += self.costs.fine_step
        return self.total

    def add_coarse_step(self):
        self.coarse_steps += 1
        self.total += self.costs.coarse_step
        return self.total


def audit(records, costs):
    """ Recompute cumulative FLOPs from a record sequence.
    Returns:
        list of (logged, recomputed) pairs, one per record
    """
    running = 0
    pairs = []
    for record in records:
        running += costs.fine_step if record['level'] == 'FINE' else costs.coarse_step
        pairs.append((record['cumulative_flops'], running))
    return pairs
