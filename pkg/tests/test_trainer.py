import json
import os

import numpy as np
import pytest

from fmtnet import networks as N
from fmtnet import tensor as T
from fmtnet import trainer
from fmtnet.errors import InvalidArgument
from fmtnet.filter import init_model
from fmtnet.models import MetricsLogLine, Stage, TrainConfig
from fmtnet.networks import ParameterStore
from fmtnet.synthdata import SequenceDataset
from fmtnet.tensor import Tensor


def train_config(tiny_net, **overrides) -> TrainConfig:
    values = dict(net=tiny_net, epochs=1, accumulation=2, sequence_length=3, seed=0)
    values.update(overrides)
    return TrainConfig(**values)


def small_store(tiny_net) -> ParameterStore:
    store = ParameterStore(tiny_net)
    store.add("encoder/layer/weight", np.full((2, 2), 2.0))
    store.add("encoder/layer/bias", np.full(2, 3.0))
    store.add("encoder/layer/bn/gamma", np.ones(2))
    return store


def group_snapshot(store: ParameterStore, groups) -> dict[str, np.ndarray]:
    return {name: values for name, values in store.snapshot().items() if N.group_of(name) in groups}


class TestAdam:
    def test_zero_gradient_only_decays_weights(self, tiny_net):
        store = small_store(tiny_net)
        config = train_config(tiny_net, learning_rate=0.01, weight_decay=0.1)
        trainer.adam_step(store, {}, trainer.OptimizerState(), config)
        np.testing.assert_allclose(store["encoder/layer/weight"].data, 2.0 * (1.0 - 0.01 * 0.1))
        np.testing.assert_array_equal(store["encoder/layer/bias"].data, 3.0)
        np.testing.assert_array_equal(store["encoder/layer/bn/gamma"].data, 1.0)

    def test_step_counter(self, tiny_net):
        store, state = small_store(tiny_net), trainer.OptimizerState()
        for expected in range(1, 4):
            trainer.adam_step(store, {}, state, train_config(tiny_net))
            assert state.step == expected

    def test_constant_gradient_moves_by_learning_rate(self, tiny_net):
        store, state = small_store(tiny_net), trainer.OptimizerState()
        config = train_config(tiny_net, learning_rate=0.01, weight_decay=0.0)
        grads = {"encoder/layer/bias": np.array([0.5, -4.0])}
        for _ in range(10):
            before = store["encoder/layer/bias"].data.copy()
            trainer.adam_step(store, grads, state, config)
            np.testing.assert_allclose(store["encoder/layer/bias"].data - before, [-0.01, 0.01], rtol=1e-6)

    def test_decay_rule(self):
        assert trainer.decays("encoder/stem/weight")
        assert trainer.decays("motion_filter/o/hidden_weight")
        assert not trainer.decays("encoder/stem/bias")
        assert not trainer.decays("encoder/stem/bn/gamma")
        assert not trainer.decays("weights/s_seg")


class TestStageTraining:
    def test_motion_pretrain_keeps_encoder(self, tiny_dataset, tiny_store, tiny_net):
        frozen = [g for g in N.GROUPS if g not in trainer.STAGE_GROUPS[Stage.MOTION_PRETRAIN]]
        before = group_snapshot(tiny_store, frozen)
        moving = tiny_store["motion_out/project/weight"].data.copy()
        dataset = SequenceDataset(os.path.join(tiny_dataset, "train"))
        trainer.train_stage(Stage.MOTION_PRETRAIN, dataset, tiny_store, train_config(tiny_net))
        for name, values in group_snapshot(tiny_store, frozen).items():
            np.testing.assert_array_equal(values, before[name], err_msg=name)
        assert not np.array_equal(tiny_store["motion_out/project/weight"].data, moving)

    def test_update_pretrain_keeps_decoders(self, static_dataset, tiny_store, tiny_net):
        decoders = (N.SEMANTIC, N.DEPTH, N.MOTION_DECODER, N.MOTION_OUT, N.MOTION_FILTER, N.FUSION)
        before = group_snapshot(tiny_store, decoders)
        gate = tiny_store["gate/input/weight"].data.copy()
        dataset = SequenceDataset(os.path.join(static_dataset, "train"))
        trainer.train_stage(Stage.UPDATE_PRETRAIN, dataset, tiny_store, train_config(tiny_net))
        for name, values in group_snapshot(tiny_store, decoders).items():
            np.testing.assert_array_equal(values, before[name], err_msg=name)
        assert not np.array_equal(tiny_store["gate/input/weight"].data, gate)

    def test_update_pretrain_needs_static_data(self, tiny_dataset, tiny_store, tiny_net):
        with pytest.raises(InvalidArgument):
            trainer.train_stage(
                Stage.UPDATE_PRETRAIN, SequenceDataset(os.path.join(tiny_dataset, "train")), tiny_store, train_config(tiny_net),
            )

    def test_motion_pretrain_needs_motion(self, static_dataset, tiny_store, tiny_net):
        with pytest.raises(InvalidArgument):
            trainer.train_stage(
                Stage.MOTION_PRETRAIN, SequenceDataset(os.path.join(static_dataset, "train")), tiny_store, train_config(tiny_net),
            )

    @pytest.mark.parametrize("stage", [Stage.FINETUNE, Stage.BASELINE])
    def test_zero_learning_rate_changes_nothing(self, stage, tiny_dataset, tiny_store, tiny_net):
        before = {name: p.data.copy() for name, p in tiny_store.items()}
        dataset = SequenceDataset(os.path.join(tiny_dataset, "train"))
        trainer.train_stage(stage, dataset, tiny_store, train_config(tiny_net, learning_rate=0.0))
        for name, param in tiny_store.items():
            np.testing.assert_array_equal(param.data, before[name], err_msg=name)

    def test_reproducible(self, tiny_dataset, tiny_net):
        dataset = SequenceDataset(os.path.join(tiny_dataset, "train"))
        runs = []
        for _ in range(2):
            store = init_model(tiny_net, seed=4)
            trainer.train_stage(Stage.FINETUNE, dataset, store, train_config(tiny_net))
            runs.append(store.snapshot())
        for name, values in runs[0].items():
            np.testing.assert_array_equal(runs[1][name], values, err_msg=name)

    def test_metrics_log(self, tiny_dataset, tiny_store, tiny_net, tmp_path):
        log_path = str(tmp_path / "logs" / "metrics.jsonl")
        dataset = SequenceDataset(os.path.join(tiny_dataset, "train"))
        result = trainer.train_stage(Stage.FINETUNE, dataset, tiny_store, train_config(tiny_net, epochs=2), log_path)
        with open(log_path) as handle:
            lines = [MetricsLogLine.model_validate(json.loads(line)) for line in handle]
        assert [line.epoch for line in lines] == [1, 2]
        assert lines == result.log
        assert sorted(lines[0].losses) == sorted(["seg", "depth_l1", "depth_sig", "trans", "rot"])
        assert sorted(lines[0].weights) == sorted(lines[0].losses)
        assert all(np.isfinite(v) for v in lines[-1].losses.values())

    def test_all_groups_trainable_afterwards(self, tiny_dataset, tiny_store, tiny_net):
        dataset = SequenceDataset(os.path.join(tiny_dataset, "train"))
        trainer.train_stage(Stage.MOTION_PRETRAIN, dataset, tiny_store, train_config(tiny_net))
        assert all(param.requires_grad for _, param in tiny_store.items())

    @pytest.mark.slow
    def test_static_toy_task_halves_the_loss(self, static_dataset, tiny_net):
        net = tiny_net.model_copy(update={"dropout": 0.0})
        dataset = SequenceDataset(os.path.join(static_dataset, "train"))
        config = train_config(net, epochs=40, accumulation=1, learning_rate=5e-3)
        log = trainer.train_stage(Stage.FINETUNE, dataset, init_model(net, seed=0), config).log
        first, last = sum(log[0].losses.values()), sum(log[-1].losses.values())
        assert np.isfinite(last)
        assert last <= 0.5 * first


class TestObjectives:
    def test_stage_losses(self, tiny_dataset, tiny_store):
        sample = SequenceDataset(os.path.join(tiny_dataset, "train"))[0]
        for stage, names in trainer.STAGE_LOSSES.items():
            components = trainer.sequence_losses(stage, sample, tiny_store, N.EVAL)
            assert sorted(components) == sorted(names)
            assert all(value.is_finite() for value in components.values())

    def test_motion_pretrain_objective_is_plain_sum(self, tiny_store):
        components = {"trans": Tensor(1.5), "rot": Tensor(0.25)}
        assert trainer.stage_objective(Stage.MOTION_PRETRAIN, components, tiny_store).item() == 1.75

    def test_inverse_depth_target(self):
        depth = np.array([[[1.0, 2.0], [4.0, 0.5]]])
        np.testing.assert_allclose(trainer.inverse_depth_target(depth, 2), [[[(1.0 + 0.5 + 0.25 + 2.0) / 4]]])


class TestGradCheck:
    def test_linear_model_is_exact(self, rng):
        weight = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        x = Tensor(rng.normal(size=4))
        params = {"w": weight}
        report = trainer.grad_check(lambda: T.sum_(T.matmul(weight, x)), params, trainer.sample_entries(params, 6, rng))
        assert report.max_relative_error < 1e-9
        assert report.passed

    def test_detects_wrong_backward_rule(self, rng):
        x = Tensor(rng.uniform(0.5, 1.5, size=4), requires_grad=True)

        def closure():
            # d(x^2)/dx should be 2x
            square = Tensor.from_op(x.data ** 2, (x,), lambda g: (g * x.data,), "square")
            return T.sum_(square)

        report = trainer.grad_check(closure, {"x": x}, [("x", (i,)) for i in range(4)])
        assert report.max_relative_error > 0.4
        assert not report.passed

    def test_sample_entries(self, rng):
        params = {"a": Tensor(np.zeros((2, 3))), "b": Tensor(np.zeros(4))}
        entries = trainer.sample_entries(params, 10, rng)
        assert len(entries) == 10
        for name, index in entries:
            assert name in params
            assert len(index) == params[name].ndim
