import numpy as np
import pytest

from mltrain import tensor as T
from mltrain.data import BatchStream, load_corpus
from mltrain.errors import ConfigError, ContractError
from mltrain.flops import FlopCounter, cost_model
from mltrain.model import ModelConfig, forward, init_params
from mltrain.multilevel import (CoarseView, MultilevelSchedule, Parity, ProlongationSpec, make_coarse_view,
                                prolongate, run_coarse_cycle, snapshot_opposite_parity)
from mltrain.optim import Constant


def fill_blocks(params, values):
    # block i becomes the constant values[i] in every entry
    for block, value in zip(params.blocks, values):
        for t in block.tensors():
            t.data[...] = value


def block_values(params):
    return [float(block.w_q.data.flat[0]) for block in params.blocks]


@pytest.fixture
def four_block_config():
    return ModelConfig(vocab_size=256, context_length=8, embed_dim=8, num_blocks=4, num_heads=2)


@pytest.fixture
def batches(corpus_path):
    def make(seed=0, coarse_data='shared'):
        return BatchStream(load_corpus(corpus_path), seed, micro_batch_size=2, sequence_length=8,
                           accumulation_factor=2, coarse_data=coarse_data)
    return make


class TestParity:
    def test_fine_indices(self):
        assert Parity.EVEN.fine_indices(6) == [1, 3, 5]
        assert Parity.ODD.fine_indices(6) == [0, 2, 4]

    def test_indices_cover_all_blocks_once(self):
        assert sorted(Parity.EVEN.fine_indices(12) + Parity.ODD.fine_indices(12)) == list(range(12))

    def test_level_names(self):
        assert Parity.EVEN.level == 'COARSE_EVEN'
        assert Parity.ODD.opposite() is Parity.EVEN


class TestCoarseView:
    def test_blocks_alias_fine_blocks(self, four_block_config):
        fine = init_params(four_block_config, 0)
        view = make_coarse_view(fine, Parity.EVEN)
        assert view.blocks[0] is fine.blocks[1]
        assert view.blocks[1] is fine.blocks[3]
        assert view.token_embedding is fine.token_embedding
        assert np.shares_memory(view.blocks[0].w_q.data, fine.blocks[1].w_q.data)

    def test_writes_through_view_reach_fine(self, four_block_config):
        fine = init_params(four_block_config, 0)
        view = make_coarse_view(fine, Parity.ODD)
        view.blocks[1].w_ff1.data[0, 0] = 42.0
        assert fine.blocks[2].w_ff1.data[0, 0] == 42.0

    def test_coarse_config(self, four_block_config):
        view = make_coarse_view(init_params(four_block_config, 0), Parity.EVEN)
        assert view.config.num_blocks == 2
        assert view.count() == init_params(four_block_config.coarse(), 0).count()

    def test_named_parameters_use_fine_paths(self, four_block_config):
        view = make_coarse_view(init_params(four_block_config, 0), Parity.EVEN)
        names = [name for name, _ in view.named_parameters()]
        assert 'blocks.1.w_q' in names and 'blocks.3.w_ff2' in names and 'blocks.0.w_q' not in names

    def test_forward_runs_half_the_blocks(self, four_block_config):
        fine = init_params(four_block_config, 0)
        view = make_coarse_view(fine, Parity.EVEN)
        assert forward(view, np.arange(8)).shape == (8, 256)

    def test_odd_depth(self):
        fine = init_params(ModelConfig(16, 8, 8, 3, 2), 0)
        with pytest.raises(ConfigError):
            make_coarse_view(fine, Parity.EVEN)

    def test_views_of_both_parities_are_disjoint(self, four_block_config):
        fine = init_params(four_block_config, 0)
        even, odd = CoarseView(fine, Parity.EVEN), CoarseView(fine, Parity.ODD)
        even_ids = {id(b) for b in even.blocks}
        assert not even_ids & {id(b) for b in odd.blocks}
        assert len(even_ids | {id(b) for b in odd.blocks}) == 4


class TestSnapshot:
    def test_copies_opposite_parity(self, four_block_config):
        fine = init_params(four_block_config, 0)
        snapshot = snapshot_opposite_parity(fine, Parity.EVEN)
        assert sorted(snapshot) == [0, 2]
        fine.blocks[2].w_q.data[...] = 7.0
        assert not np.any(snapshot[2].w_q.data == 7.0)


class TestProlongate:
    def test_hand_evaluated_example(self, four_block_config):
        with T.precision(64):
            fine = init_params(four_block_config, 0)
        fill_blocks(fine, [1, 2, 3, 4])
        snapshot = snapshot_opposite_parity(fine, Parity.EVEN)
        # coarse training moved slots 2 and 4 to 10 and 20
        fill_blocks(fine, [1, 10, 3, 20])
        prolongate(fine, Parity.EVEN, snapshot, ProlongationSpec(0.25))
        assert block_values(fine) == [1, 10, 4.75, 20]

    @pytest.mark.parametrize('parity', [Parity.EVEN, Parity.ODD])
    def test_delta_zero_restores_snapshot(self, four_block_config, parity):
        fine = init_params(four_block_config, 0)
        snapshot = snapshot_opposite_parity(fine, parity)
        for block in make_coarse_view(fine, parity).blocks:
            block.w_v.data += 1
        for j in snapshot:
            if j:
                fine.blocks[j].w_v.data += 5
        prolongate(fine, parity, snapshot, ProlongationSpec(0.0))
        for j, copy in snapshot.items():
            for name, t in fine.blocks[j].named_tensors():
                assert t.data.tobytes() == getattr(copy, name).data.tobytes()

    @pytest.mark.parametrize('parity', [Parity.EVEN, Parity.ODD])
    def test_delta_one_copies_predecessor(self, four_block_config, parity):
        fine = init_params(four_block_config, 0)
        snapshot = snapshot_opposite_parity(fine, parity)
        prolongate(fine, parity, snapshot, ProlongationSpec(1.0))
        for j in snapshot:
            if j == 0:
                continue
            for name, t in fine.blocks[j].named_tensors():
                np.testing.assert_array_equal(t.data, getattr(fine.blocks[j - 1], name).data)

    @pytest.mark.parametrize('parity', [Parity.EVEN, Parity.ODD])
    def test_quarter_blend(self, four_block_config, parity):
        fine = init_params(four_block_config, 0)
        snapshot = snapshot_opposite_parity(fine, parity)
        for block in make_coarse_view(fine, parity).blocks:
            block.w_k.data *= 3
        prolongate(fine, parity, snapshot, ProlongationSpec(0.25))
        for j in snapshot:
            if j == 0:
                continue
            expected = 0.75 * snapshot[j].w_k.data + 0.25 * fine.blocks[j - 1].w_k.data
            np.testing.assert_array_max_ulp(fine.blocks[j].w_k.data, expected.astype(np.float32), maxulp=1)

    def test_odd_model_leaves_first_block(self, four_block_config):
        with T.precision(64):
            fine = init_params(four_block_config, 0)
        fill_blocks(fine, [1, 2, 3, 4])
        snapshot = snapshot_opposite_parity(fine, Parity.ODD)
        fill_blocks(fine, [10, 2, 30, 4])
        prolongate(fine, Parity.ODD, snapshot, ProlongationSpec(0.25))
        # block 2 blends with block 1, block 4 with block 3, block 1 stays
        assert block_values(fine) == [10, 0.75 * 2 + 0.25 * 10, 30, 0.75 * 4 + 0.25 * 30]

    def test_missing_snapshot_entry(self, four_block_config):
        fine = init_params(four_block_config, 0)
        snapshot = snapshot_opposite_parity(fine, Parity.EVEN)
        del snapshot[2]
        with pytest.raises(ContractError):
            prolongate(fine, Parity.EVEN, snapshot, ProlongationSpec(0.25))

    def test_shape_mismatch(self, four_block_config):
        fine = init_params(four_block_config, 0)
        snapshot = snapshot_opposite_parity(fine, Parity.EVEN)
        snapshot[2].w_q = T.Tensor(np.zeros((3, 3)))
        with pytest.raises(ContractError):
            prolongate(fine, Parity.EVEN, snapshot, ProlongationSpec(0.25))

    def test_delta_out_of_range(self, four_block_config):
        fine = init_params(four_block_config, 0)
        with pytest.raises(ConfigError):
            prolongate(fine, Parity.EVEN, snapshot_opposite_parity(fine, Parity.EVEN), ProlongationSpec(1.5))


class TestCoarseCycle:
    def test_empty_cycle_changes_nothing(self, four_block_config, batches):
        fine = init_params(four_block_config, 0)
        before = fine.clone()
        flops = FlopCounter(cost_model(four_block_config, 32))
        run_coarse_cycle(fine, MultilevelSchedule(coarse_steps_per_model=0, coarse_lr=0.1), batches(), flops)
        for (_, x), (_, y) in zip(fine.named_parameters(), before.named_parameters()):
            assert x.data.tobytes() == y.data.tobytes()
        assert flops.total == 0

    def test_single_parity_with_zero_delta_touches_owned_blocks_only(self, four_block_config, batches):
        fine = init_params(four_block_config, 0)
        before = fine.clone()
        schedule = MultilevelSchedule(coarse_steps_per_model=2, delta=0.0, coarse_lr=0.1, parities=(Parity.EVEN,))
        run_coarse_cycle(fine, schedule, batches(), FlopCounter(cost_model(four_block_config, 32)))
        for j in (0, 2):
            for (_, x), (_, y) in zip(fine.blocks[j].named_tensors(), before.blocks[j].named_tensors()):
                assert x.data.tobytes() == y.data.tobytes()
        assert not np.array_equal(fine.blocks[1].w_q.data, before.blocks[1].w_q.data)
        assert not np.array_equal(fine.token_embedding.data, before.token_embedding.data)

    def test_flops_and_callbacks(self, four_block_config, batches):
        fine = init_params(four_block_config, 0)
        costs = cost_model(four_block_config, 32)
        flops = FlopCounter(costs)
        calls = []
        schedule = MultilevelSchedule(coarse_steps_per_model=3, coarse_lr=0.1)
        run_coarse_cycle(fine, schedule, batches(), flops, on_step=lambda *args: calls.append(args))
        assert flops.total == 2 * 3 * costs.coarse_step
        assert [(p, i) for p, i, *_ in calls] == [(Parity.EVEN, 1), (Parity.EVEN, 2), (Parity.EVEN, 3),
                                                  (Parity.ODD, 1), (Parity.ODD, 2), (Parity.ODD, 3)]
        assert [c[-1] for c in calls] == [costs.coarse_step * n for n in range(1, 7)]
        assert all(np.isfinite(c[2]) for c in calls)

    def test_coarse_rate_comes_from_constant_schedule(self, four_block_config, batches, monkeypatch):
        from mltrain import multilevel
        asked = []
        real_lr_at = multilevel.lr_at

        def recording_lr_at(schedule, step):
            asked.append((schedule, step))
            return real_lr_at(schedule, step)

        monkeypatch.setattr(multilevel, 'lr_at', recording_lr_at)
        rates = []
        schedule = MultilevelSchedule(coarse_steps_per_model=2, coarse_lr=0.1)
        run_coarse_cycle(init_params(four_block_config, 0), schedule, batches(),
                         FlopCounter(cost_model(four_block_config, 32)), on_step=lambda *args: rates.append(args[3]))
        assert asked == [(Constant(0.1), 0), (Constant(0.1), 1)] * 2
        assert rates == [0.1] * 4

    def test_every_fine_block_trained_by_a_full_cycle(self, four_block_config, batches):
        fine = init_params(four_block_config, 0)
        before = fine.clone()
        schedule = MultilevelSchedule(coarse_steps_per_model=1, delta=0.0, coarse_lr=0.1)
        run_coarse_cycle(fine, schedule, batches(), FlopCounter(cost_model(four_block_config, 32)))
        # with delta 0 each block keeps exactly what its own coarse model did to it
        for j in range(4):
            assert not np.array_equal(fine.blocks[j].w_ff1.data, before.blocks[j].w_ff1.data), j

    def test_deterministic(self, four_block_config, batches):
        results = []
        for _ in range(2):
            fine = init_params(four_block_config, 0)
            run_coarse_cycle(fine, MultilevelSchedule(coarse_steps_per_model=2, coarse_lr=0.1), batches(),
                             FlopCounter(cost_model(four_block_config, 32)))
            results.append(fine)
        for (_, x), (_, y) in zip(results[0].named_parameters(), results[1].named_parameters()):
            assert x.data.tobytes() == y.data.tobytes()


def test_schedule_validation():
    with pytest.raises(ConfigError):
        MultilevelSchedule(parities=(Parity.EVEN, Parity.EVEN)).validate()
    with pytest.raises(ConfigError):
        MultilevelSchedule(num_cycles=-1).validate()
