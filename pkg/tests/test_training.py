import math

import numpy as np
import pytest

import tgvseg.training as training
from tgvseg import ops
from tgvseg.data import AugmentSpec, synth_blobs
from tgvseg.errors import ConfigError, ShapeError, TrainingError
from tgvseg.gradcheck import grad_check
from tgvseg.network import UNetPPConfig, build_network
from tgvseg.tensor import Param, Tensor
from tgvseg.tgv import TGVParams, tgv_loss_term
from tgvseg.training import (
    ScheduleState,
    TrainConfig,
    adam_step,
    bce_loss,
    evaluate,
    fit,
    kfold_split,
    schedule_update,
    sgd_step,
    total_loss,
)


class TestBce:
    def test_perfect_prediction_near_zero(self):
        pred = Tensor(np.ones((1, 1, 4, 4)))
        target = Tensor(np.ones((1, 1, 4, 4)))
        assert bce_loss(pred, target).item() < 1e-6

    def test_maximum_entropy_value(self):
        pred = Tensor(np.full((1, 1, 4, 4), 0.5))
        target = Tensor((np.arange(16).reshape(1, 1, 4, 4) % 2).astype(float))
        assert bce_loss(pred, target).item() == pytest.approx(math.log(2.0), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            bce_loss(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 3))))

    def test_gradcheck(self, rng):
        pred = Param(rng.uniform(0.1, 0.9, (1, 1, 5, 5)))
        target = Tensor((rng.random((1, 1, 5, 5)) < 0.4).astype(float))
        rep = grad_check(lambda: bce_loss(pred.value, target), {"pred": pred},
                         tolerance=1e-6, step=1e-6)
        assert rep.passed, rep.format_table()


class TestTotalLoss:
    def test_disabled_regularizer_bit_equal(self, rng):
        pred = Tensor(rng.uniform(0.1, 0.9, (1, 1, 4, 4)))
        target = Tensor((rng.random((1, 1, 4, 4)) < 0.5).astype(float))
        maps = [Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)))]
        tgv = TGVParams.create(gamma=0.0, lam=0.0)
        assert total_loss(pred, target, maps, tgv).item() == bce_loss(pred, target).item()

    def test_constant_maps_equal_bce(self, rng):
        pred = Tensor(rng.uniform(0.1, 0.9, (1, 1, 4, 4)))
        target = Tensor((rng.random((1, 1, 4, 4)) < 0.5).astype(float))
        maps = [Tensor(np.full((1, 2, 4, 4), 0.7))]
        tgv = TGVParams.create(gamma=0.5, lam=0.0)
        got = total_loss(pred, target, maps, tgv).item()
        assert got == pytest.approx(bce_loss(pred, target).item(), abs=1e-12)

    def test_nonconstant_map_strictly_larger(self, rng):
        pred = Tensor(rng.uniform(0.1, 0.9, (1, 1, 4, 4)))
        target = Tensor((rng.random((1, 1, 4, 4)) < 0.5).astype(float))
        step_map = Tensor(np.array([[0.0, 0.0, 1.0, 1.0]] * 4).reshape(1, 1, 4, 4))
        tgv = TGVParams.create(gamma=1.0, lam=0.0)
        assert total_loss(pred, target, [step_map], tgv).item() > bce_loss(pred, target).item()


class TestOptimizers:
    def test_adam_first_step_formula(self):
        p = Param(np.zeros((1, 1, 1, 1)))
        p.value.grad = np.full((1, 1, 1, 1), 0.5)
        cfg = TrainConfig()
        adam_step([p], 1e-4, cfg)
        g = 0.5
        expected = -1e-4 * g / (abs(g) + cfg.adam_eps)
        assert p.data[0, 0, 0, 0] == pytest.approx(expected, rel=1e-9)
        assert p.data[0, 0, 0, 0] == pytest.approx(-1e-4, rel=1e-6)
        assert p.step_count == 1

    def test_adam_zero_grad_no_motion(self):
        p = Param(np.full((1, 1, 1, 1), 0.3))
        p.zero_grad()
        adam_step([p], 1e-2, TrainConfig())
        assert p.data[0, 0, 0, 0] == 0.3
        assert np.all(p.m == 0.0) and np.all(p.v == 0.0)

    def test_adam_deterministic_trajectories(self, rng):
        grads = rng.uniform(-1, 1, (5, 1, 1, 1, 1))

        def run():
            p = Param(np.full((1, 1, 1, 1), 0.1))
            for g in grads:
                p.value.grad = np.array(g)
                adam_step([p], 1e-3, TrainConfig())
            return p.data.copy()

        np.testing.assert_array_equal(run(), run())

    def test_adam_requires_grads(self):
        p = Param(np.zeros((1, 1, 1, 1)))
        with pytest.raises(TrainingError):
            adam_step([p], 1e-3, TrainConfig())

    def test_sgd_definition(self):
        p = Param(np.full((1, 1, 1, 1), 1.0))
        p.value.grad = np.full((1, 1, 1, 1), 2.0)
        sgd_step([p], 0.1)
        assert p.data[0, 0, 0, 0] == pytest.approx(0.8, rel=1e-15)

    def test_sgd_zero_rate(self):
        p = Param(np.full((1, 1, 1, 1), 1.0))
        p.value.grad = np.full((1, 1, 1, 1), 2.0)
        sgd_step([p], 0.0)
        assert p.data[0, 0, 0, 0] == 1.0


class TestBackpropRecipeOracle:
    def test_single_neuron_step_matches_hand_update(self, rng):
        # two-input sigmoid neuron with squared-error loss: one machinery
        # step must reproduce the classical update
        #   X = sum_k p_k A_k + bias, A = sigma(X),
        #   e = A (1 - A) (A - B), p_k <- p_k - eta e A_k, bias <- bias - eta e
        for trial in range(20):
            a = rng.uniform(-1, 1, 2)
            b_target = float(rng.random() < 0.5)
            w0 = rng.uniform(-1, 1, 2)
            t0 = rng.uniform(-0.5, 0.5)
            eta = 0.37

            weights = Param(w0.reshape(1, 2, 1, 1))
            bias = Param(np.full((1, 1, 1, 1), t0))
            x = Tensor(a.reshape(1, 2, 1, 1))

            pre = ops.conv2d(x, weights, bias, padding=0)
            act = ops.sigmoid(pre)
            diff = act - Tensor.scalar(b_target)
            loss = 0.5 * (diff * diff).sum()
            weights.zero_grad()
            bias.zero_grad()
            loss.backward()
            sgd_step([weights, bias], eta)

            x_hand = float(w0 @ a + t0)
            a_hand = 1.0 / (1.0 + math.exp(-x_hand))
            e_hand = a_hand * (1.0 - a_hand) * (a_hand - b_target)
            w_hand = w0 - eta * e_hand * a
            t_hand = t0 - eta * e_hand

            np.testing.assert_allclose(weights.data.reshape(-1), w_hand, rtol=0, atol=1e-12)
            assert bias.data[0, 0, 0, 0] == pytest.approx(t_hand, abs=1e-12)


class TestSchedule:
    CFG = TrainConfig(learning_rate=1e-4)

    def run_losses(self, losses):
        state = ScheduleState(current_lr=1e-4)
        history = []
        for v in losses:
            state = schedule_update(state, v, self.CFG)
            history.append(state)
        return history

    def test_decreasing_never_halts(self):
        history = self.run_losses([1.0 - 0.01 * k for k in range(30)])
        assert history[-1].current_lr == 1e-4
        assert not history[-1].stopped

    def test_flat_ten_halves(self):
        history = self.run_losses([1.0] * 11)  # first call records the best
        assert history[9].current_lr == 1e-4
        assert history[10].current_lr == 5e-5
        assert not history[10].stopped

    def test_flat_twenty_stops(self):
        history = self.run_losses([1.0] * 21)
        assert history[19].stopped is False
        assert history[20].stopped is True

    def test_halving_cadence(self):
        # lr after e non-improving epochs is lr0 * 2^(-floor(e / patience))
        history = self.run_losses([1.0] + [1.0] * 25)
        for e, state in enumerate(history[1:], 1):
            assert state.current_lr == pytest.approx(1e-4 * 2.0 ** (-(e // 10)))

    def test_improvement_resets_counter(self):
        history = self.run_losses([1.0] * 10 + [0.5] + [0.5] * 9)
        assert history[10].epochs_since_improvement == 0
        # after the reset, nine flat epochs do not halve again
        assert history[19].current_lr == history[10].current_lr

    def test_tie_is_non_improvement(self):
        state = ScheduleState(current_lr=1e-4)
        state = schedule_update(state, 1.0, self.CFG)
        state = schedule_update(state, 1.0, self.CFG)
        assert state.epochs_since_improvement == 1

    def test_nonfinite_loss_rejected(self):
        with pytest.raises(TrainingError):
            schedule_update(ScheduleState(), float("nan"), self.CFG)


class TestKFold:
    def test_even_split(self):
        folds = kfold_split(20, 10, seed=1)
        assert len(folds) == 10
        union = np.sort(np.concatenate([v for _, v in folds]))
        np.testing.assert_array_equal(union, np.arange(20))
        assert all(len(v) == 2 for _, v in folds)

    def test_remainder_distribution(self):
        folds = kfold_split(23, 10, seed=2)
        sizes = sorted(len(v) for _, v in folds)
        assert sizes.count(3) == 3 and sizes.count(2) == 7

    def test_deterministic(self):
        a = kfold_split(17, 5, seed=9)
        b = kfold_split(17, 5, seed=9)
        for (ta, va), (tb, vb) in zip(a, b):
            np.testing.assert_array_equal(ta, tb)
            np.testing.assert_array_equal(va, vb)

    def test_too_few_samples(self):
        with pytest.raises(ConfigError):
            kfold_split(5, 10)

    def test_randomized_partition_property(self, rng):
        for _ in range(25):
            n = int(rng.integers(10, 200))
            k = int(rng.integers(2, min(n, 12)))
            seed = int(rng.integers(0, 10_000))
            folds = kfold_split(n, k, seed)
            union = np.sort(np.concatenate([v for _, v in folds]))
            np.testing.assert_array_equal(union, np.arange(n))
            sizes = [len(v) for _, v in folds]
            assert max(sizes) - min(sizes) <= 1
            for train, val in folds:
                assert np.intersect1d(train, val).size == 0
                assert len(train) + len(val) == n


def tiny_net(seed=0, **kw):
    return build_network(
        UNetPPConfig(depth=2, base_channels=2, seed=seed, dropout_rate=0.1,
                     tgv=TGVParams.create(gamma=1e-3), **kw)
    )


class TestFit:
    def test_zero_epochs(self):
        samples = synth_blobs(4, 8, seed=0)
        net = tiny_net()
        before = {k: p.data.copy() for k, p in net.params.items()}
        report = fit(net, samples, TrainConfig(epochs=0, batch_size=2), val_samples=samples)
        assert report.epochs == []
        for k, p in net.params.items():
            np.testing.assert_array_equal(before[k], p.data)

    def test_batch_larger_than_train_errors(self):
        samples = synth_blobs(4, 8, seed=0)
        with pytest.raises(ConfigError, match="batch_size"):
            fit(tiny_net(), samples, TrainConfig(epochs=1, batch_size=8), val_samples=samples)

    def test_empty_dataset_errors(self):
        with pytest.raises(ConfigError):
            fit(tiny_net(), [], TrainConfig(epochs=1, batch_size=1))

    def test_loss_decreases_over_short_run(self):
        samples = synth_blobs(6, 16, seed=1)
        net = tiny_net(seed=1)
        cfg = TrainConfig(epochs=25, batch_size=2, learning_rate=5e-3, seed=1,
                          plateau_patience=20, early_stop_patience=25)
        report = fit(net, samples, cfg, val_samples=samples)
        first = np.mean([e.train_loss for e in report.epochs[:5]])
        last = np.mean([e.train_loss for e in report.epochs[-5:]])
        assert last < first

    def test_honors_stopped_flag(self):
        samples = synth_blobs(4, 8, seed=2)
        net = tiny_net(seed=2)
        # zero learning rate: no improvement, early stop after the patience
        cfg = TrainConfig(epochs=50, batch_size=4, learning_rate=0.0,
                          plateau_patience=3, early_stop_patience=6, seed=2)
        with pytest.raises(ConfigError):
            cfg.validate()  # learning_rate must be positive
        cfg = TrainConfig(epochs=50, batch_size=4, learning_rate=1e-12,
                          plateau_patience=3, early_stop_patience=6, seed=2)
        report = fit(net, samples, cfg, val_samples=samples)
        assert report.schedule.stopped
        assert len(report.epochs) <= 8

    def test_augmentation_only_touches_train(self, monkeypatch):
        samples = synth_blobs(6, 8, seed=3)
        calls = []
        real_augment = training.augment

        def spy(sample, spec, rng):
            calls.append(sample)
            return real_augment(sample, spec, rng)

        monkeypatch.setattr(training, "augment", spy)
        net = tiny_net(seed=3)
        spec = AugmentSpec(hflip=1.0, vflip=1.0)
        cfg = TrainConfig(epochs=2, batch_size=2, seed=3)
        fit(net, samples[:4], cfg, val_samples=samples[4:], augment_spec=spec)
        # exactly train_size * epochs augment calls, none from evaluation
        assert len(calls) == 4 * 2
        calls.clear()
        evaluate(net, samples[4:])
        assert calls == []

    def test_val_split_stratified_default(self):
        samples = synth_blobs(10, 8, seed=4)
        net = tiny_net(seed=4)
        report = fit(net, samples, TrainConfig(epochs=1, batch_size=2, seed=4))
        assert len(report.epochs) == 1

    def test_deterministic_reports(self):
        samples = synth_blobs(5, 8, seed=5)

        def run():
            net = tiny_net(seed=5)
            cfg = TrainConfig(epochs=3, batch_size=2, learning_rate=1e-3, seed=5)
            return fit(net, samples, cfg, val_samples=samples).to_csv()

        assert run() == run()
