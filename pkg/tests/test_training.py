"""Losses, alternating update order, gradient isolation, rollback, samplers."""

import numpy as np
import pytest

from valence_gan import errors, models, training
from valence_gan.tensor import Tensor, backward


def build_bundle(kind, seed=0, **overrides):
    base = dict(kind=kind, crop_width=64, filter_size=2, num_filters=32,
                batch_size=64, learning_rate=1e-3)
    base.update(overrides)
    config = models.ModelConfig(**base).validate()
    return models.build(config, np.random.default_rng(seed))


def make_batch(rng, batch=8, multitask=True, gan=True, crop_width=64):
    one_hot = np.eye(5, dtype=np.float32)
    return training.Batch(
        labeled_crops=rng.uniform(-1, 1, (batch, 1, 128, crop_width)).astype(np.float32),
        valence_targets=one_hot[rng.integers(0, 5, batch)],
        activation_targets=one_hot[rng.integers(0, 5, batch)],
        unlabeled_crops=(rng.uniform(-1, 1, (batch, 1, 128, crop_width))
                         .astype(np.float32) if gan else None),
        z=rng.standard_normal((batch, 100)).astype(np.float32) if gan else None,
        z2=rng.standard_normal((batch, 100)).astype(np.float32) if gan else None,
    )


class TestCrossEntropy:
    def test_perfect_prediction_is_near_zero(self):
        y = np.array([[0, 0, 0, 0, 1.0]], dtype=np.float32)
        loss = training.cross_entropy(y, Tensor(y))
        assert float(loss.data) == pytest.approx(0.0, abs=1e-6)

    def test_split_target_value(self):
        y = np.array([[0, 0, 0, 0.5, 0.5]], dtype=np.float32)
        p = Tensor(np.array([[0.1, 0.1, 0.1, 0.35, 0.35]], dtype=np.float32))
        assert float(training.cross_entropy(y, p).data) == pytest.approx(
            -np.log(0.35), abs=1e-5)

    def test_uniform_prediction_is_ln5(self):
        y = np.array([[1.0, 0, 0, 0, 0]], dtype=np.float32)
        p = Tensor(np.full((1, 5), 0.2, dtype=np.float32))
        assert float(training.cross_entropy(y, p).data) == pytest.approx(
            np.log(5.0), abs=1e-5)

    def test_unnormalized_target_rejected(self):
        y = np.array([[0.5, 0.5, 0.5, 0, 0]], dtype=np.float32)
        with pytest.raises(errors.ValidationError):
            training.cross_entropy(y, Tensor(np.full((1, 5), 0.2)))

    def test_batch_mean(self):
        y = np.eye(5, dtype=np.float32)[:2]
        p = Tensor(np.full((2, 5), 0.2, dtype=np.float32))
        assert float(training.cross_entropy(y, p).data) == pytest.approx(
            np.log(5.0), abs=1e-5)


class TestGanLosses:
    def test_decomposition_identity_is_exact(self):
        rng = np.random.default_rng(0)
        r = Tensor(rng.uniform(0.01, 0.99, (16, 1)))
        f = Tensor(rng.uniform(0.01, 0.99, (16, 1)))
        l_r, l_f, l_d, l_g = training.gan_losses(r, f)
        assert float(l_d.data) == float(l_r.data) + float(l_f.data)

    def test_equilibrium_scores_give_ln2(self):
        half = Tensor(np.full((4, 1), 0.5))
        l_r, l_f, _, l_g = training.gan_losses(half, half)
        for loss in (l_r, l_f, l_g):
            assert float(loss.data) == pytest.approx(np.log(2.0), abs=1e-6)

    def test_empty_batch_rejected(self):
        empty = Tensor(np.zeros((0, 1)))
        with pytest.raises(errors.ContractError):
            training.gan_losses(empty, empty)

    def test_clamp_prevents_divergence(self):
        r = Tensor(np.array([[1e-12]]))
        l_r, _, _, _ = training.gan_losses(r, Tensor(np.array([[0.5]])))
        assert np.isfinite(l_r.data)
        assert float(l_r.data) == pytest.approx(-np.log(1e-7), rel=1e-6)


class TestTrainStep:
    def test_cnn_step_records_task_losses_only(self, rng):
        state = training.init_train_state(build_bundle("BasicCNN"))
        training.train_step(state, make_batch(rng, gan=False))
        rec = state.history[0]
        assert rec["l_val"] is not None
        assert rec["l_d"] is None and rec["l_g"] is None and rec["l_act"] is None

    def test_multitask_step_adds_activation(self, rng):
        state = training.init_train_state(build_bundle("MultitaskCNN"))
        training.train_step(state, make_batch(rng, gan=False))
        assert state.history[0]["l_act"] is not None

    def test_gan_step_records_all_adversarial_losses(self, rng):
        state = training.init_train_state(build_bundle("BasicDCGAN"))
        training.train_step(state, make_batch(rng))
        rec = state.history[0]
        assert rec["l_d"] is not None and rec["l_g"] is not None
        assert rec["l_act"] is None

    def test_gan_step_requires_unlabeled_data(self, rng):
        state = training.init_train_state(build_bundle("BasicDCGAN"))
        with pytest.raises(errors.ContractError):
            training.train_step(state, make_batch(rng, gan=False))

    def test_discriminator_loss_leaves_generator_untouched(self, rng):
        bundle = build_bundle("BasicDCGAN")
        batch = make_batch(rng)
        real = Tensor(np.concatenate([batch.labeled_crops, batch.unlabeled_crops]))
        fake = bundle.generator.forward(Tensor(batch.z), train=True)
        fake_const = Tensor(fake.data.copy())
        _, _, l_d, _ = training.gan_losses(
            bundle.discriminator.real_score(real),
            bundle.discriminator.real_score(fake_const))
        backward(l_d)
        for name, p in bundle.generator.named_parameters():
            assert p.grad is None, f"L_d leaked into generator parameter {name}"
        for name, p in bundle.named_groups()["disc"]:
            assert p.grad is not None, f"L_d missed discriminator parameter {name}"

    def test_generator_update_leaves_discriminator_params_unchanged(self, rng):
        # Parameter-diff audit: run one full step, then replay it with the
        # generator update disabled; discriminator parameters must agree.
        batch = make_batch(rng)

        def run(skip_gen_update):
            bundle = build_bundle("BasicDCGAN", seed=3)
            state = training.init_train_state(bundle)
            if skip_gen_update:
                state.optimizers["gen"].step = lambda: None
            training.train_step(state, batch)
            return {n: p.data.copy() for n, p in bundle.all_parameters()}

        full = run(skip_gen_update=False)
        no_gen = run(skip_gen_update=True)
        for name in full:
            if name.startswith("gen."):
                continue
            np.testing.assert_array_equal(full[name], no_gen[name], err_msg=name)
        assert any(not np.array_equal(full[n], no_gen[n])
                   for n in full if n.startswith("gen."))

    def test_numeric_fault_rolls_back_all_updates(self, rng):
        bundle = build_bundle("BasicDCGAN")
        # Poison the shared dense weights: the adversarial updates bypass that
        # layer and succeed first, then the valence forward hits the NaN and
        # every parameter must revert.
        bundle.discriminator.shared.weights.data[0, 0] = np.nan
        state = training.init_train_state(bundle)
        pre = {n: p.data.copy() for n, p in bundle.all_parameters()}
        with pytest.raises(errors.NumericFault):
            training.train_step(state, make_batch(rng))
        assert state.step == 0
        assert not state.history
        for name, p in bundle.all_parameters():
            np.testing.assert_array_equal(p.data, pre[name], err_msg=name)

    def test_step_counter_and_loss_rows(self, rng):
        state = training.init_train_state(build_bundle("BasicCNN"))
        training.train_step(state, make_batch(rng, gan=False))
        training.train_step(state, make_batch(rng, gan=False))
        rows = state.loss_rows()
        assert len(rows) == 2
        step, l_d, l_g, l_val, l_act = rows[0].split(",")
        assert step == "0" and l_d == "" and l_g == "" and l_act == ""
        float(l_val)


class TestWrapSampler:
    def test_no_repeats_within_a_wrap(self):
        sampler = training.WrapSampler(10, np.random.default_rng(0))
        drawn = sampler.draw(10)
        assert sorted(drawn) == list(range(10))

    def test_wraps_reshuffle(self):
        sampler = training.WrapSampler(5, np.random.default_rng(0))
        first, second = sampler.draw(5), sampler.draw(5)
        assert sorted(first) == sorted(second) == list(range(5))

    def test_draw_across_wrap_boundary(self):
        sampler = training.WrapSampler(4, np.random.default_rng(0))
        drawn = sampler.draw(6)
        assert sorted(drawn[:4]) == list(range(4))
        assert len(set(drawn[4:])) == 2


class FixedProvider:
    """Minimal labeled provider over pre-built crops."""

    def __init__(self, n, rng, crop_width=64):
        self.rng = rng
        self.n = n
        self.crop_width = crop_width

    @property
    def size(self):
        return self.n

    def make_batch(self, indices):
        return make_batch(self.rng, batch=len(indices), gan=False,
                          crop_width=self.crop_width)


class TestRunEpoch:
    def test_step_count_from_labeled_set(self, rng):
        state = training.init_train_state(build_bundle("BasicCNN"))
        summary = training.run_epoch(state, FixedProvider(128, rng), None,
                                     np.random.default_rng(1))
        assert summary["steps"] == 2
        assert summary["l_val"] is not None

    def test_partial_final_batch(self, rng):
        state = training.init_train_state(build_bundle("BasicCNN"))
        summary = training.run_epoch(state, FixedProvider(100, rng), None,
                                     np.random.default_rng(1))
        assert summary["steps"] == 2
