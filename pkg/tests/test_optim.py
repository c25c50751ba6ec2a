import math

import numpy as np
import pytest

from mltrain import tensor as T
from mltrain.errors import ConfigError, NumericError, ScheduleExhaustedError
from mltrain.model import init_params, loss
from mltrain.optim import (LR_MAX, LR_MIN, WARMUP_STEPS, Constant, SgdConfig, WarmupCosine, accumulate_gradients,
                           final_lr, lr_at, sgd_step, train_step)


@pytest.fixture
def full_schedule():
    return WarmupCosine(WARMUP_STEPS, 16000, LR_MAX, LR_MIN)


class TestSchedule:
    def test_starts_at_zero(self, full_schedule):
        assert lr_at(full_schedule, 0) == 0.0

    def test_peak_at_end_of_warmup(self, full_schedule):
        assert lr_at(full_schedule, 715) == 1.2e-3

    def test_linear_ramp(self, full_schedule):
        assert lr_at(full_schedule, 357) == pytest.approx(1.2e-3 * 357 / 715)

    def test_decays_to_min(self, full_schedule):
        assert final_lr(full_schedule) == pytest.approx(1.2e-4, rel=1e-12)
        assert lr_at(full_schedule, 15999) == pytest.approx(1.2e-4, rel=1e-6)

    def test_past_the_end(self, full_schedule):
        with pytest.raises(ScheduleExhaustedError):
            lr_at(full_schedule, 16000)

    def test_negative_step(self, full_schedule):
        with pytest.raises(ConfigError):
            lr_at(full_schedule, -1)

    def test_shape(self, full_schedule):
        rates = np.array([lr_at(full_schedule, s) for s in range(16000)])
        assert rates.max() == 1.2e-3
        assert int(np.argmax(rates)) == 715
        assert np.all(np.diff(rates[:716]) > 0)
        assert np.all(np.diff(rates[715:]) <= 0)
        # no jumps: bounded by the steeper of the warmup ramp and the cosine slope
        bound = LR_MAX * max(1 / WARMUP_STEPS, math.pi / (16000 - WARMUP_STEPS))
        assert np.abs(np.diff(rates)).max() <= bound * (1 + 1e-9)
        assert rates.min() >= 0 and rates[716:].min() >= 1.2e-4

    def test_no_warmup(self):
        assert lr_at(WarmupCosine(0, 10, 1.0, 0.0), 0) == 1.0

    def test_constant(self):
        schedule = Constant(1.2e-3)
        assert lr_at(schedule, 0) == lr_at(schedule, 10 ** 6) == 1.2e-3

    @pytest.mark.parametrize('schedule', [WarmupCosine(10, 10), WarmupCosine(1, 10, 1e-3, 1e-2), Constant(-1.0)])
    def test_invalid(self, schedule):
        with pytest.raises(ConfigError):
            schedule.validate()

    def test_accumulation_factor(self):
        with pytest.raises(ConfigError):
            SgdConfig(Constant(0.1), accumulation_factor=0).validate()


class TestSgd:
    def test_single_update(self):
        t = T.Tensor([1.0], requires_grad=True)
        t.grad = np.array([0.5], dtype=np.float32)
        sgd_step([('theta', t)], 0.1)
        assert t.data[0] == pytest.approx(0.95)
        assert t.grad[0] == 0

    def test_zero_learning_rate(self, tiny_config):
        params = init_params(tiny_config, 0)
        before = params.clone()
        tokens = np.random.default_rng(0).integers(0, 16, size=(2, 9))
        train_step(params, [(tokens[:, :-1], tokens[:, 1:])], 0.0)
        for (_, x), (_, y) in zip(params.named_parameters(), before.named_parameters()):
            assert x.data.tobytes() == y.data.tobytes()

    def test_zero_gradient_steps_leave_parameters_fixed(self, tiny_config):
        params = init_params(tiny_config, 0)
        before = params.clone()
        for _ in range(5):
            for _, t in params.named_parameters():
                t.grad = np.zeros_like(t.data)
            sgd_step(params.named_parameters(), 0.5)
        for (_, x), (_, y) in zip(params.named_parameters(), before.named_parameters()):
            assert x.data.tobytes() == y.data.tobytes()

    def test_non_finite_gradient_names_path(self, tiny_config):
        params = init_params(tiny_config, 0)
        for _, t in params.named_parameters():
            t.grad = np.zeros_like(t.data)
        params.blocks[1].w_ff2.grad[0, 0] = np.inf
        before = params.clone()
        with pytest.raises(NumericError) as info:
            sgd_step(params.named_parameters(), 0.1)
        assert 'blocks.1.w_ff2' in str(info.value)
        # nothing moved
        for (_, x), (_, y) in zip(params.named_parameters(), before.named_parameters()):
            assert x.data.tobytes() == y.data.tobytes()

    def test_loss_decreases(self, tiny_config):
        params = init_params(tiny_config, 0)
        tokens = np.random.default_rng(0).integers(0, 16, size=(4, 9))
        batch = [(tokens[:, :-1], tokens[:, 1:])]
        first = train_step(params, batch, 0.5)
        for _ in range(20):
            last = train_step(params, batch, 0.5)
        assert last < first


class TestAccumulation:
    def test_mean_of_micro_batch_gradients(self, tiny_config):
        with T.precision(64):
            params = init_params(tiny_config, 0)
            tokens = np.random.default_rng(3).integers(0, 16, size=(4, 9))
            halves = [(tokens[:2, :-1], tokens[:2, 1:]), (tokens[2:, :-1], tokens[2:, 1:])]

            singles = []
            for inputs, targets in halves:
                params.zero_grad()
                with T.Tape():
                    value = loss(params, inputs, targets)
                T.backward(value)
                singles.append([t.grad.copy() for t in params.parameters()])

            params.zero_grad()
            mean_loss = accumulate_gradients(params, halves)
            accumulated = [t.grad.copy() for t in params.parameters()]

            params.zero_grad()
            full_loss = accumulate_gradients(params, [(tokens[:, :-1], tokens[:, 1:])])
            full = [t.grad.copy() for t in params.parameters()]

        for g, g1, g2 in zip(accumulated, singles[0], singles[1]):
            np.testing.assert_array_equal(g, (g1 + g2) / 2)
        # equal micro-batches: the mean equals the full-batch gradient up to summation order
        for g, f in zip(accumulated, full):
            np.testing.assert_allclose(g, f, rtol=1e-10, atol=1e-14)
        assert mean_loss == pytest.approx(full_loss, rel=1e-12)

    def test_non_finite_loss_skips_update(self, tiny_config, monkeypatch):
        from mltrain import optim
        params = init_params(tiny_config, 0)
        before = params.clone()
        monkeypatch.setattr(optim, 'accumulate_gradients', lambda p, b: math.nan)
        assert math.isnan(optim.train_step(params, [], 0.1))
        for (_, x), (_, y) in zip(params.named_parameters(), before.named_parameters()):
            assert x.data.tobytes() == y.data.tobytes()
