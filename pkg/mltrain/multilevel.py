"""
Two-level training by depth coarsening.

A coarse model keeps every second block of the fine network: the EVEN
model owns fine blocks 2, 4, ..., N and the ODD model owns fine blocks
1, 3, ..., N-1 (1-based). A CoarseView aliases those blocks instead of
copying them, so training a coarse model trains the fine blocks it owns.
Both views share the fine embedding and position tables.

After a coarse model trains, each block it does not own is pulled towards
the block just before it:
    block[j] := (1 - delta) * block_before_training[j] + delta * block[j - 1]
which for the EVEN model is theta_{2i+1} := (1-delta) theta_{2i+1} + delta theta_i^H.
Fine block 1 has no predecessor and is left alone.

Indices in code are 0-based: EVEN owns 1, 3, 5, ... and ODD owns 0, 2, 4, ...
"""

import enum
import logging
import math
from dataclasses import dataclass

from mltrain.errors import ConfigError, ContractError, NumericError
from mltrain.optim import COARSE_LR, Constant, lr_at, train_step

logger = logging.getLogger(__name__)

# multilevel cycles run at the start of training
NUM_CYCLES = 35

# optimization steps per coarse model per cycle
COARSE_STEPS_PER_MODEL = 100

# averaging constant of the prolongation
DELTA = 0.25


class Parity(enum.Enum):
    EVEN = 'even'
    ODD = 'odd'

    @property
    def level(self):
        return 'COARSE_' + self.name

    def opposite(self):
        return Parity.ODD if self is Parity.EVEN else Parity.EVEN

    def fine_indices(self, num_blocks):
        # 0-based fine block indices owned by this parity
        start = 1 if self is Parity.EVEN else 0
        return list(range(start, num_blocks, 2))


@dataclass(frozen=True)
class ProlongationSpec:
    delta: float = DELTA

    def validate(self):
        if not 0 <= self.delta <= 1:
            raise ConfigError('delta must lie in [0, 1], got %r' % (self.delta,))
        return self


@dataclass(frozen=True)
class MultilevelSchedule:
    num_cycles: int = NUM_CYCLES
    coarse_steps_per_model: int = COARSE_STEPS_PER_MODEL
    delta: float = DELTA
    coarse_lr: float = COARSE_LR
    parities: tuple = (Parity.EVEN, Parity.ODD)

    def validate(self):
        if self.num_cycles < 0 or self.coarse_steps_per_model < 0:
            raise ConfigError('num_cycles and coarse_steps_per_model must be >= 0')
        if self.coarse_lr < 0:
            raise ConfigError('coarse_lr must be >= 0, got %r' % (self.coarse_lr,))
        if not self.parities or len(set(self.parities)) != len(self.parities):
            raise ConfigError('parities must be a non-empty list without repeats, got %r' % (self.parities,))
        ProlongationSpec(self.delta).validate()
        return self


class CoarseView:
    """
    Coarse model seen through the fine parameters. It owns no block storage:
    slot i is the fine BlockParams object itself.
    """
    def __init__(self, fine, parity):
        self.fine = fine
        self.parity = parity
        self.config = fine.config.coarse()
        self.indices = parity.fine_indices(fine.config.num_blocks)

    @property
    def token_embedding(self):
        return self.fine.token_embedding

    @property
    def position_embedding(self):
        return self.fine.position_embedding

    @property
    def blocks(self):
        return [self.fine.blocks[i] for i in self.indices]

    def named_parameters(self):
        named = [('token_embedding', self.token_embedding), ('position_embedding', self.position_embedding)]
        for i in self.indices:
            named.extend(('blocks.%d.%s' % (i, name), t) for name, t in self.fine.blocks[i].named_tensors())
        return named

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def count(self):
        return sum(t.size for t in self.parameters())

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()


def make_coarse_view(fine, parity):
    if fine.config.num_blocks % 2:
        raise ConfigError('coarse views need an even number of blocks, got %d' % fine.config.num_blocks)
    return CoarseView(fine, parity)


def snapshot_opposite_parity(fine, parity):
    # deep copies of the blocks the coarse model does NOT own, keyed by fine index
    indices = parity.opposite().fine_indices(fine.config.num_blocks)
    return {i: fine.blocks[i].copy() for i in indices}


def prolongate(fine, parity, snapshot, spec):
    """ Blend the coarse result into the blocks the coarse model does not own.
    Args:
        fine (ModelParams): fine parameters, mutated in place
        parity (Parity): the coarse model that was just trained
        snapshot (dict): snapshot_opposite_parity(fine, parity) taken before training
        spec (ProlongationSpec): averaging constant
    """
    spec.validate()
    delta = spec.delta
    for j in parity.opposite().fine_indices(fine.config.num_blocks):
        if j not in snapshot:
            raise ContractError('snapshot has no copy of fine block %d' % j)
        if j == 0:
            continue
        source = fine.blocks[j - 1]
        for name, target in fine.blocks[j].named_tensors():
            old = getattr(snapshot[j], name)
            if old.shape != target.shape:
                raise ContractError('snapshot of blocks.%d.%s has shape %s, expected %s'
                                    % (j, name, old.shape, target.shape))
            target.data[...] = (1 - delta) * old.data + delta * getattr(source, name).data


def run_coarse_cycle(fine, schedule, data, flops, on_step=None):
    """ Train each coarse model in turn and prolongate after each one.
    Args:
        fine (ModelParams): fine parameters, mutated in place
        schedule (MultilevelSchedule): steps per model, delta, coarse learning rate
        data: object with step_batches(level) -> list of micro-batches (data.BatchStream)
        flops (FlopCounter): charged one coarse step per coarse optimization step
        on_step: optional callback(parity, inner_step, loss, lr, cumulative_flops)
    """
    if schedule.coarse_steps_per_model == 0:
        return
    spec = ProlongationSpec(schedule.delta)
    coarse_schedule = Constant(schedule.coarse_lr).validate()
    # nothing computed at the fine level leaks into the coarse steps
    fine.zero_grad()
    for parity in schedule.parities:
        snapshot = snapshot_opposite_parity(fine, parity)
        view = make_coarse_view(fine, parity)
        for inner in range(1, schedule.coarse_steps_per_model + 1):
            lr = lr_at(coarse_schedule, inner - 1)
            loss = train_step(view, data.step_batches(parity.level), lr)
            if not math.isfinite(loss):
                raise NumericError('non-finite loss in %s step %d' % (parity.level, inner))
            total = flops.add_coarse_step()
            if on_step is not None:
                on_step(parity, inner, loss, lr, total)
        prolongate(fine, parity, snapshot, spec)
        logger.debug('%s: %d steps, prolongated with delta=%g', parity.level, schedule.coarse_steps_per_model, spec.delta)
