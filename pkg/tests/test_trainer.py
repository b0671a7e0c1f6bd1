import numpy as np
import pytest
from pydantic import ValidationError

from app import trainer as trainer_module
from app.diffcore import Tensor
from app.exceptions import ContractViolation
from app.models import init_network
from app.trainer import OptimizerState, Trainer, TrainSchedule, cosine_lr, run, sgd_step
from app.utils import seed_streams


def _trainer(config, dataset, seed=0, variant="protofair", regularize=True):
    streams = seed_streams(seed)
    network = init_network(config.encoder_config(), streams.init, dtype=np.dtype(config.dtype))
    return Trainer(
        config.for_variant(variant, seed),
        network,
        dataset.train,
        streams,
        augment_spec=config.augment_spec(),
        variant=variant,
        regularize=regularize,
    )


def _param_values(trainer):
    return [p.values.copy() for p in trainer.network.parameters()]


class TestCosineSchedule:
    def test_endpoints(self):
        assert cosine_lr(0.1, 0, 10) == pytest.approx(0.1)
        assert cosine_lr(0.1, 5, 10) == pytest.approx(0.05)
        assert cosine_lr(0.1, 10, 10) == pytest.approx(0.0, abs=1e-15)

    def test_non_increasing(self):
        rates = [cosine_lr(0.2, e, 30) for e in range(31)]
        assert all(b <= a for a, b in zip(rates, rates[1:]))

    def test_rejects_zero_epochs(self):
        with pytest.raises(ContractViolation):
            cosine_lr(0.1, 0, 0)


class TestSgdStep:
    def test_momentum_arithmetic(self):
        p = Tensor([[1.0]], requires_grad=True)
        state = OptimizerState.for_parameters([p], total_epochs=10, base_lr=0.1, momentum=0.9, weight_decay=0.0)
        grad = np.array([[0.5]])
        assert sgd_step([p], [grad], state, epoch=0) == pytest.approx(0.1)
        assert p.values[0, 0] == pytest.approx(0.95)
        sgd_step([p], [grad], state, epoch=0)
        assert p.values[0, 0] == pytest.approx(0.855)
        assert state.steps == 2

    def test_weight_decay_enters_velocity(self):
        p = Tensor([[2.0]], requires_grad=True)
        state = OptimizerState.for_parameters([p], total_epochs=1, base_lr=1.0, momentum=0.0, weight_decay=0.5)
        sgd_step([p], [np.zeros((1, 1))], state, epoch=0)
        assert p.values[0, 0] == pytest.approx(1.0)

    def test_zero_grad_without_decay_is_noop(self):
        p = Tensor([[3.0, -1.0]], requires_grad=True)
        state = OptimizerState.for_parameters([p], total_epochs=5, weight_decay=0.0)
        sgd_step([p], [np.zeros((1, 2))], state, epoch=1)
        np.testing.assert_array_equal(p.values, [[3.0, -1.0]])

    def test_none_grad_skips_parameter(self):
        a, b = Tensor([[1.0]], requires_grad=True), Tensor([[1.0]], requires_grad=True)
        state = OptimizerState.for_parameters([a, b], total_epochs=5, weight_decay=0.1)
        sgd_step([a, b], [np.ones((1, 1)), None], state, epoch=0)
        assert a.values[0, 0] < 1.0
        assert b.values[0, 0] == 1.0
        assert state.velocity[1][0, 0] == 0.0

    def test_length_mismatch(self):
        p = Tensor([[1.0]], requires_grad=True)
        state = OptimizerState.for_parameters([p], total_epochs=5)
        with pytest.raises(ContractViolation):
            sgd_step([p], [], state, epoch=0)


def test_schedule_rejects_warmup_beyond_total():
    with pytest.raises(ValidationError):
        TrainSchedule(warmup_epochs=5, total_epochs=4)


class TestTrainer:
    def test_phases_and_reinit_schedule(self, micro_config, micro_dataset):
        history = _trainer(micro_config, micro_dataset).fit()
        assert [e.phase for e in history] == ["warmup", "warmup", "fair", "fair", "fair"]
        assert [e.reinitialized for e in history] == [False, False, True, False, True]
        assert all(e.fair_loss == 0.0 for e in history[:2])
        assert history[2].clusters["mixed_clusters"] >= 0
        assert all(np.isfinite(e.total_loss) for e in history)

    def test_batches_cover_the_split(self, micro_config, micro_dataset):
        batches = _trainer(micro_config, micro_dataset).batches()
        covered = np.concatenate(batches)
        assert len(covered) == len(set(covered.tolist())) == len(micro_dataset.train)
        assert all(len(b) <= micro_config.batch_size for b in batches)

    def test_lambda_zero_matches_disabled_regularizer_bitwise(self, micro_config, micro_dataset):
        with_branch = _trainer(micro_config, micro_dataset, variant="baseline", regularize=True)
        without = _trainer(micro_config, micro_dataset, variant="baseline", regularize=False)
        with_branch.fit()
        without.fit()
        assert with_branch.bank.initialized
        assert not without.bank.initialized
        for a, b in zip(_param_values(with_branch), _param_values(without)):
            np.testing.assert_array_equal(a, b)

    def test_same_seed_replays_exactly(self, micro_config, micro_dataset):
        first = _trainer(micro_config, micro_dataset, seed=3)
        second = _trainer(micro_config, micro_dataset, seed=3)
        h1, h2 = first.fit(), second.fit()
        assert [e.total_loss for e in h1] == [e.total_loss for e in h2]
        for a, b in zip(_param_values(first), _param_values(second)):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(first.bank.protos, second.bank.protos)

    def test_fairness_changes_training(self, micro_config, micro_dataset):
        fair = _trainer(micro_config, micro_dataset, variant="protofair")
        base = _trainer(micro_config, micro_dataset, variant="baseline")
        fair.fit()
        base.fit()
        assert any(not np.array_equal(a, b) for a, b in zip(_param_values(fair), _param_values(base)))

    def test_cluster_head_is_never_updated(self, micro_config, micro_dataset):
        trainer = _trainer(micro_config, micro_dataset)
        before = [p.values.copy() for p in trainer.network.cluster_head.parameters()]
        trainer.fit()
        for a, p in zip(before, trainer.network.cluster_head.parameters()):
            np.testing.assert_array_equal(a, p.values)

    def test_first_fair_batch_sees_empty_queue(self, micro_config, micro_dataset, mocker):
        spy = mocker.spy(trainer_module, "protofair_terms")
        _trainer(micro_config, micro_dataset).fit()
        snapshots = [call.args[2] for call in spy.call_args_list]
        assert len(snapshots[0]) == 0
        assert len(snapshots[1]) == 2 * micro_config.batch_size

    def test_reinit_keeps_queued_entries(self, micro_config, micro_dataset):
        trainer = _trainer(micro_config, micro_dataset)
        for epoch in range(3):
            trainer.train_epoch(epoch)
        before = trainer.queue.snapshot()
        assert len(before) == trainer.queue.capacity

        assert trainer.needs_kmeans(4)
        trainer.reinitialize_prototypes(4)
        after = trainer.queue.snapshot()
        # stale cluster ids stay until FIFO eviction pushes them out
        np.testing.assert_array_equal(after.z, before.z)
        np.testing.assert_array_equal(after.cluster_ids, before.cluster_ids)
        np.testing.assert_array_equal(after.sensitive, before.sensitive)

    def test_queue_disabled(self, micro_config, micro_dataset, mocker):
        config = micro_config.model_copy(update={"use_queue": False})
        spy = mocker.spy(trainer_module, "protofair_terms")
        trainer = _trainer(config, micro_dataset)
        trainer.fit()
        assert trainer.queue is None
        assert all(call.args[2] is None for call in spy.call_args_list)
        assert all(e.cross_loss == 0.0 for e in trainer.history)

    def test_warmup_covering_all_epochs(self, micro_config, micro_dataset, mocker):
        config = micro_config.model_copy(update={"warmup_epochs": micro_config.total_epochs})
        spy = mocker.spy(trainer_module, "protofair_terms")
        trainer = _trainer(config, micro_dataset)
        history = trainer.fit()
        assert spy.call_count == 0
        assert not trainer.bank.initialized
        assert {e.phase for e in history} == {"warmup"}

    def test_prototypes_stay_unit_norm(self, micro_config, micro_dataset):
        config = micro_config.model_copy(update={"total_epochs": 10})
        trainer = _trainer(config, micro_dataset)
        trainer.fit()
        np.testing.assert_allclose(np.linalg.norm(trainer.bank.protos, axis=1), 1.0, atol=1e-10)
        queued = trainer.queue.snapshot().z
        np.testing.assert_allclose(np.linalg.norm(queued, axis=1), 1.0, atol=1e-6)

    def test_supcon_base_loss(self, micro_config, micro_dataset):
        config = micro_config.model_copy(update={"base_loss": "supcon"})
        history = _trainer(config, micro_dataset).fit()
        assert all(np.isfinite(e.base_loss) and e.base_loss > 0 for e in history)

    def test_float32_run(self, micro_config, micro_dataset):
        config = micro_config.model_copy(update={"dtype": "float32"})
        trainer = _trainer(config, micro_dataset)
        history = trainer.fit()
        assert all(p.dtype == np.float32 for p in trainer.network.parameters())
        assert all(np.isfinite(e.total_loss) for e in history)


def test_run_produces_probe_and_metadata(micro_config, micro_dataset):
    result = run(micro_config, seed=0, variant="protofair", dataset=micro_dataset)
    assert 0.0 <= result.probe.accuracy <= 100.0
    assert 0.0 <= result.probe.eo <= 100.0
    assert result.test_embeddings.shape == (len(micro_dataset.test), micro_config.encoder_out_dim)
    assert result.metadata["schedule"]["lambda_fair"] == micro_config.lambda_fair
    assert len(result.epochs) == micro_config.total_epochs

    baseline = run(micro_config, seed=0, variant="baseline", dataset=micro_dataset)
    assert baseline.schedule.lambda_fair == 0.0
