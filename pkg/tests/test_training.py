import dataclasses

import numpy as np
import pytest

from spottune.checkpoint import digest_parameters
from spottune.data import LabeledSet, TaskSpec, generate_source
from spottune.model import Backbone, PolicyNetwork
from spottune.tensor import Tensor
from spottune.training import (OptimizerState, RunMode, Schedule, TrainingDiverged, TrainSettings,
                               TransferModel, configure_mode, evaluate, prepare_transfer, sgd_step, train)


def param(value, grad):
    p = Tensor(np.array([value], dtype=np.float64), requires_grad=True)
    p.grad = np.array([grad], dtype=np.float64)
    return p


def test_vanilla_sgd_step():
    p = param(1.0, 1.0)
    sgd_step([p], OptimizerState(0.1, momentum=0.0))
    assert p.data[0] == pytest.approx(0.9, abs=1e-15)
    assert p.grad is None


def test_zero_grad_leaves_param():
    p = param(1.5, 0.0)
    sgd_step([p], OptimizerState(0.1))
    assert p.data[0] == 1.5


def test_two_momentum_steps():
    eta, g = 0.05, 2.0
    p = param(0.0, g)
    state = OptimizerState(eta, momentum=0.9)
    sgd_step([p], state)
    p.grad = np.array([g])
    sgd_step([p], state)
    assert -p.data[0] == pytest.approx(eta * g * (1 + 1.9), rel=1e-14)


def test_missing_grad_is_an_error():
    with pytest.raises(ValueError):
        sgd_step([Tensor(np.zeros(1), requires_grad=True)], OptimizerState(0.1))


def test_schedule_decays():
    s = Schedule(0.1, (40, 60, 80))
    assert [s.lr_at(e) for e in (0, 39, 40, 59, 60, 80, 109)] == pytest.approx(
        [0.1, 0.1, 0.01, 0.01, 1e-3, 1e-4, 1e-4], rel=1e-12)


def test_schedule_rejects_unsorted_decays():
    with pytest.raises(ValueError):
        Schedule(0.1, (30, 20))


def test_run_mode_arguments():
    with pytest.raises(ValueError):
        RunMode("last-k-ft")
    with pytest.raises(ValueError):
        RunMode("standard-ft", k=2)
    with pytest.raises(ValueError):
        RunMode("nope")


def big_backbone(rng, blocks=16):
    return Backbone.init(rng, 6, 8, 8, blocks, 3)


def trainable_blocks(bb):
    return [i for i, pair in enumerate(bb.blocks) if pair.tuned.w1.requires_grad]


def test_feature_extractor_trains_only_head(rng):
    bb = big_backbone(rng)
    plan = configure_mode(bb, None, RunMode.make("feature-extractor"), rng)
    assert {p.node_id for p in plan.all} == {p.node_id for p in bb.head.parameters()}


def test_last_k_trains_final_blocks(rng):
    bb = big_backbone(rng)
    plan = configure_mode(bb, None, RunMode.make("last-k-ft", k=3), rng)
    assert trainable_blocks(bb) == [13, 14, 15] and plan.tuned_blocks == (13, 14, 15)
    assert not any(p.requires_grad for pair in bb.blocks for p in pair.frozen.parameters())


def test_stochastic_picks_half_reproducibly(rng):
    picks = []
    for _ in range(2):
        bb = big_backbone(np.random.default_rng(0))
        configure_mode(bb, None, RunMode.make("stochastic-ft"), np.random.default_rng(42))
        picks.append(trainable_blocks(bb))
    assert len(picks[0]) == 8 and picks[0] == picks[1]


def test_standard_ft_trains_stem_and_all_tuned(rng):
    bb = big_backbone(rng, 4)
    plan = configure_mode(bb, None, RunMode.make("standard-ft"), rng)
    assert trainable_blocks(bb) == [0, 1, 2, 3] and bb.stem.w.requires_grad and len(plan.policy) == 0


@pytest.mark.parametrize("mode", ["last-k-ft", "stochastic-ft", "spottune"])
def test_stem_trains_outside_feature_extraction(mode, rng):
    bb = big_backbone(rng, 4)
    pol = PolicyNetwork.init(rng, 6, 4)
    plan = configure_mode(bb, pol, RunMode.make(mode, k=2), rng)
    assert bb.stem.w.requires_grad and bb.stem.b.requires_grad
    assert not any(p.requires_grad for pair in bb.blocks for p in pair.frozen.parameters())
    assert (len(plan.policy) > 0) == (mode == "spottune")


def test_k_out_of_range(rng):
    bb = big_backbone(rng, 4)
    with pytest.raises(ValueError):
        configure_mode(bb, None, RunMode.make("last-k-ft", k=5), rng)
    pol = PolicyNetwork.init(rng, 6, 4)
    with pytest.raises(ValueError):
        configure_mode(bb, pol, RunMode.make("spottune-global-k", k=5), rng)


@pytest.fixture(scope="module")
def toy_task():
    spec = TaskSpec(input_dim=6, num_classes=3, num_train=192, num_eval=96, seed=3)
    return generate_source(spec, "train"), generate_source(spec, "eval")


def settings(epochs=3, lr=1e-2, policy_lr=0.1, **kw):
    return TrainSettings(epochs=epochs, main=Schedule(lr), policy=Schedule(policy_lr), **kw)


def fresh(mode, seed=0):
    bb = Backbone.init(np.random.default_rng(seed), 6, 8, 8, 4, 3)
    return prepare_transfer(bb, RunMode.make(mode), np.random.default_rng([seed, 1]))


def snapshot(model):
    return {i: p.data.copy() for i, p in enumerate(model.parameters())}


@pytest.mark.parametrize("mode", ["spottune", "standard-ft", "last-k-ft"])
def test_zero_learning_rate_changes_nothing(mode, toy_task):
    model = fresh(mode)
    before = snapshot(model)
    train(model, RunMode.make(mode), *toy_task, settings(lr=0.0, policy_lr=0.0))
    after = snapshot(model)
    assert all(np.array_equal(before[i], after[i]) for i in before)


def test_standard_ft_fits_separable_toy():
    rng = np.random.default_rng(9)
    labels = np.arange(64) % 2
    x = rng.standard_normal((64, 4)) * 0.3
    x[:, 0] += np.where(labels == 1, 3.0, -3.0)
    data = LabeledSet(x, labels, 2)
    bb = Backbone.init(np.random.default_rng(1), 4, 8, 8, 2, 2)
    model = prepare_transfer(bb, RunMode.make("standard-ft"), np.random.default_rng(2))
    result = train(model, RunMode.make("standard-ft"), data, None, settings(epochs=40, batch_size=16))
    assert result.log.last("train")["accuracy"] == 1.0


def test_zero_policy_routes_by_fair_coin(toy_task):
    model = fresh("spottune")
    result = train(model, RunMode.make("spottune"), toy_task[0], None, settings(epochs=1, lr=0.0, policy_lr=0.0))
    v = result.log.last("train")["sum_v"] / model.backbone.num_routable
    assert abs(v - 0.5) < 0.03
    res = evaluate(model, toy_task[1], eval_seed=1)
    assert np.all(np.abs(res.decisions.mean(axis=0) - 0.5) < 0.15)


def test_untrained_head_is_near_chance(toy_task):
    accs = [evaluate(fresh("feature-extractor", s), toy_task[1]).accuracy for s in range(5)]
    assert abs(np.mean(accs) - 1 / 3) < 0.1


def test_argmax_routing_ignores_eval_seed(toy_task):
    model = fresh("spottune")
    model.policy.out.w.data[:] = np.random.default_rng(0).standard_normal(model.policy.out.w.shape)
    a = evaluate(model, toy_task[1], routing="argmax", eval_seed=1)
    b = evaluate(model, toy_task[1], routing="argmax", eval_seed=2)
    assert a.accuracy == b.accuracy and np.array_equal(a.decisions, b.decisions)


def test_sampled_routing_repeats_with_same_seed(toy_task):
    model = fresh("spottune")
    a, b = (evaluate(model, toy_task[1], eval_seed=5) for _ in range(2))
    assert a.accuracy == b.accuracy and np.array_equal(a.decisions, b.decisions)
    c = evaluate(model, toy_task[1], eval_seed=6)
    assert not np.array_equal(a.decisions, c.decisions)


def frozen_hash(model):
    return digest_parameters((n, p) for n, p in model.backbone.named_parameters() if ".frozen." in n)


def untouched_hash(model, tuned, stem_trains):
    skip = ("head.",) + (("stem.",) if stem_trains else ()) + tuple(f"blocks.{i}.tuned." for i in tuned)
    return digest_parameters((n, p) for n, p in model.backbone.named_parameters() if not n.startswith(skip))


@pytest.mark.parametrize("mode", ["feature-extractor", "last-k-ft", "stochastic-ft", "spottune",
                                  "spottune-global-k"])
def test_mode_touches_only_its_partition(mode, toy_task):
    model = fresh(mode)
    frozen_before = frozen_hash(model)
    result = train(model, RunMode.make(mode), toy_task[0], None, settings())
    tuned = result.plan.tuned_blocks
    reference = fresh(mode)
    assert frozen_hash(model) == frozen_before
    stem_trains = mode != "feature-extractor"
    assert untouched_hash(model, tuned, stem_trains) == untouched_hash(reference, tuned, stem_trains)
    assert np.array_equal(model.backbone.stem.w.data, reference.backbone.stem.w.data) != stem_trains
    for i in tuned:
        assert not np.array_equal(model.backbone.blocks[i].tuned.w1.data,
                                  reference.backbone.blocks[i].tuned.w1.data) or mode == "feature-extractor"


def test_same_settings_same_log(toy_task):
    logs = [train(fresh("spottune"), RunMode.make("spottune"), *toy_task, settings()).log.to_csv()
            for _ in range(2)]
    assert logs[0] == logs[1]


def test_log_has_train_and_eval_rows(toy_task):
    log = train(fresh("spottune-global-k"), RunMode.make("spottune-global-k"), *toy_task, settings()).log
    assert [r["split"] for r in log.rows] == ["train", "eval"] * 3
    assert log.to_csv().splitlines()[0] == "epoch,split,accuracy,l_c,l_k,l_e,sum_v,lr_main,lr_policy"


def test_divergence_reports_epoch_and_step(toy_task):
    model = fresh("standard-ft")
    bad = dataclasses.replace(toy_task[0], inputs=toy_task[0].inputs * 1e300)
    with pytest.raises(TrainingDiverged) as err:
        train(model, RunMode.make("standard-ft"), bad, None, settings(epochs=1))
    assert err.value.epoch == 0 and err.value.step <= 1
    assert f"epoch 0, step {err.value.step}" in str(err.value)


def test_decay_beyond_run_is_rejected():
    with pytest.raises(ValueError):
        TrainSettings(epochs=5, main=Schedule(0.1, (10,)))


def test_unrouted_model_forward_uses_mask(rng):
    bb = big_backbone(rng, 2)
    bb.blocks[1].tuned.w2.data += 1.0
    x = rng.standard_normal((3, 6))
    plain, _ = TransferModel(bb).forward(x)
    masked, _ = TransferModel(bb, use_tuned=(False, True)).forward(x)
    assert not np.allclose(plain.data, masked.data)
