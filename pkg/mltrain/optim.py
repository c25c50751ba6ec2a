"""
Plain SGD with gradient accumulation, and the learning-rate schedules.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from mltrain import tensor as T
from mltrain.errors import ConfigError, NumericError, ScheduleExhaustedError
from mltrain.model import loss as model_loss

logger = logging.getLogger(__name__)

# fine-level schedule
WARMUP_STEPS = 715
LR_MAX = 1.2e-3
LR_MIN = 1.2e-4

# coarse models train at a constant rate
COARSE_LR = 1.2e-3


@dataclass(frozen=True)
class WarmupCosine:
    warmup_steps: int
    total_steps: int
    lr_max: float = LR_MAX
    lr_min: float = LR_MIN

    def validate(self):
        # lr_min == 0 gives the literal "decay to zero" reading
        if not 0 <= self.lr_min <= self.lr_max or self.lr_max <= 0:
            raise ConfigError('need 0 <= lr_min <= lr_max and lr_max > 0, got %r, %r' % (self.lr_min, self.lr_max))
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError('need 0 <= warmup_steps < total_steps, got %d, %d'
                              % (self.warmup_steps, self.total_steps))
        return self


@dataclass(frozen=True)
class Constant:
    lr: float = COARSE_LR

    def validate(self):
        if self.lr < 0:
            raise ConfigError('learning rate must be >= 0, got %r' % (self.lr,))
        return self


@dataclass(frozen=True)
class SgdConfig:
    schedule: object
    accumulation_factor: int = 1

    def validate(self):
        if self.accumulation_factor < 1:
            raise ConfigError('accumulation_factor must be >= 1, got %r' % (self.accumulation_factor,))
        self.schedule.validate()
        return self


def _cosine(schedule, step):
    progress = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (1 + math.cos(math.pi * progress))


def lr_at(schedule, step):
    """ Learning rate for 0-based optimization step ``step``.
    Warmup ramps linearly from 0 at step 0 to lr_max at step warmup_steps,
    then a cosine decays towards lr_min, reached in the limit step == total_steps.
    """
    if isinstance(schedule, Constant):
        return schedule.lr
    if step < 0:
        raise ConfigError('step must be >= 0, got %d' % step)
    if step >= schedule.total_steps:
        raise ScheduleExhaustedError('step %d is past the %d-step schedule' % (step, schedule.total_steps))
    if step <= schedule.warmup_steps:
        if schedule.warmup_steps == 0:
            return schedule.lr_max
        return schedule.lr_max * (step / schedule.warmup_steps)
    return _cosine(schedule, step)


def final_lr(schedule):
    # the value the cosine reaches at total_steps
    if isinstance(schedule, Constant):
        return schedule.lr
    return _cosine(schedule, schedule.total_steps)


def sgd_step(named_params, lr):
    """ theta -= lr * grad for every parameter, then zero the gradients.
    Args:
        named_params: list of (path, Tensor), e.g. ModelParams.named_parameters()
        lr (float): step size
    """
    named_params = list(named_params)
    for path, t in named_params:
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise NumericError('non-finite gradient in %s' % path)
    for _, t in named_params:
        if t.grad is None:
            continue
        t.data -= t.dtype.type(lr) * t.grad
        t.grad.fill(0)


def accumulate_gradients(params, micro_batches):
    """ Backpropagate every micro-batch and average the summed gradients.
    Args:
        params: ModelParams or CoarseView
        micro_batches: list of (inputs, targets) arrays
    Returns:
        mean micro-batch loss (float)
    """
    losses = []
    for inputs, targets in micro_batches:
        with T.Tape():
            loss = model_loss(params, inputs, targets)
        T.backward(loss)
        losses.append(loss.item())
    count = len(micro_batches)
    if count > 1:
        for t in params.parameters():
            if t.grad is not None:
                t.grad /= t.dtype.type(count)
    return float(np.mean(losses))


def train_step(params, micro_batches, lr):
    # one optimization step; returns the loss measured before the update
    loss = accumulate_gradients(params, micro_batches)
    if not math.isfinite(loss):
        params.zero_grad()
        return loss
    sgd_step(params.named_parameters(), lr)
    return loss
