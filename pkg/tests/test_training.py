import math

import numpy as np
import pytest

from wsimil.pooling import AttentionMIL, InstancePoolMIL
from wsimil.synth import SynthSpec, generate_bags
from wsimil.training import (
    BCE_EPS,
    NonFiniteGradientError,
    Split,
    TrainConfig,
    bce_loss,
    rerun,
    sgd_step,
    train,
)


class TestBce:
    @pytest.mark.parametrize("y", [0, 1])
    def test_half(self, y):
        assert bce_loss(0.5, y) == pytest.approx(math.log(2), abs=1e-15)
        assert bce_loss(0.5, y) == pytest.approx(0.693147, abs=1e-6)

    def test_confident_correct(self):
        assert bce_loss(1 - BCE_EPS, 1) == pytest.approx(BCE_EPS, rel=1e-6)
        assert bce_loss(1.0, 1) == pytest.approx(BCE_EPS, rel=1e-6)

    def test_confident_wrong(self):
        assert bce_loss(BCE_EPS, 1) == pytest.approx(-math.log(1e-7), abs=1e-12)
        assert bce_loss(0.0, 1) == pytest.approx(16.118, abs=1e-3)


class TestSgdStep:
    def test_vanilla(self, rng):
        p = {"w": rng.normal(size=4)}
        g = {"w": rng.normal(size=4)}
        cfg = TrainConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.0)
        out = sgd_step(p, g, cfg, {})
        np.testing.assert_array_equal(out["w"], p["w"] - 0.1 * g["w"])

    def test_zero_gradient(self, rng):
        p = {"w": rng.normal(size=3)}
        cfg = TrainConfig(momentum=0.9, weight_decay=0.0)
        vel = {}
        out = p
        for _ in range(3):
            out = sgd_step(out, {"w": np.zeros(3)}, cfg, vel)
        np.testing.assert_array_equal(out["w"], p["w"])

    def test_two_steps_with_momentum(self):
        lr, g = 0.05, np.array([1.5, -2.0])
        cfg = TrainConfig(learning_rate=lr, momentum=0.9, weight_decay=0.0)
        p0 = {"w": np.array([0.0, 1.0])}
        vel = {}
        p1 = sgd_step(p0, {"w": g}, cfg, vel)
        p2 = sgd_step(p1, {"w": g}, cfg, vel)
        np.testing.assert_allclose(p0["w"] - p2["w"], lr * g * 2.9, rtol=1e-14)

    def test_weight_decay(self):
        cfg = TrainConfig(learning_rate=1.0, momentum=0.0, weight_decay=0.5)
        out = sgd_step({"w": np.array([2.0])}, {"w": np.array([0.0])}, cfg, {})
        assert out["w"][0] == 1.0

    @pytest.mark.parametrize("bad", [np.nan, np.inf])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(NonFiniteGradientError, match="'w'"):
            sgd_step({"w": np.zeros(2)}, {"w": np.array([0.0, bad])}, TrainConfig(), {})


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.learning_rate, cfg.momentum, cfg.epochs, cfg.weight_decay) == (0.01, 0.9, 50, 1e-4)
        assert cfg.effective_batch_size == 1
        assert TrainConfig(variant="baseline").effective_batch_size == 8

    @pytest.mark.parametrize("kw", [{"momentum": 1.0}, {"epochs": 0}, {"learning_rate": -1},
                                    {"weight_decay": -0.1}, {"variant": "gated"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def _separable_pair():
    pos = np.array([[0.0, 0.0], [3.0, 1.0]])
    neg = np.array([[0.0, 0.0], [-3.0, -1.0]])
    return Split([pos, neg], [1, 0], ["p", "n"])


def _small_synth(n_bags=30, sf=0.1, seed=0):
    bags, _ = generate_bags(SynthSpec(n_bags=n_bags, K=10, M=8, signal_fraction=sf, seed=seed))
    return Split.from_bags(bags[:20]), Split.from_bags(bags[20:])


class TestTrain:
    def test_zero_lr_keeps_init(self):
        tr, va = _small_synth()
        model = AttentionMIL(8, 4)
        h = train(model, tr, va, TrainConfig(learning_rate=0.0, epochs=3, weight_decay=0.0))
        init = model.init_params(np.random.default_rng(np.random.SeedSequence(0).spawn(2)[0]))
        for k in init:
            np.testing.assert_array_equal(h.params[k], init[k])

    @pytest.mark.parametrize("model", [AttentionMIL(2, 3), InstancePoolMIL(2, "max")],
                             ids=["attention", "max"])
    def test_separable_pair_converges(self, model):
        split = _separable_pair()
        h = train(model, split, split, TrainConfig(epochs=200, weight_decay=0.0, learning_rate=0.05))
        assert h.train_loss[-1] < 0.01
        # guard against divergence over the second half
        tail = np.array(h.train_loss[100:]).reshape(-1, 5).mean(axis=1)
        assert np.all(np.diff(tail) <= 1e-12)

    def test_mean_pooling_is_diluted_by_shared_instance(self):
        # both bags contain the same neutral instance, so p_pos - p_neg <= 1/2 and loss stays high
        split = _separable_pair()
        h = train(InstancePoolMIL(2, "mean"), split, split,
                  TrainConfig(epochs=200, weight_decay=0.0, learning_rate=0.05))
        assert h.train_loss[-1] > 0.2

    def test_mean_pooling_converges_when_every_instance_separates(self):
        split = Split([np.array([[3.0, 1.0], [2.0, 2.0]]), np.array([[-3.0, -1.0], [-2.0, -2.0]])],
                      [1, 0])
        h = train(InstancePoolMIL(2, "mean"), split, split,
                  TrainConfig(epochs=200, weight_decay=0.0, learning_rate=0.05))
        assert h.train_loss[-1] < 0.01

    def test_history_lengths(self):
        tr, va = _small_synth()
        h = train(AttentionMIL(8, 4), tr, va, TrainConfig(epochs=4))
        assert len(h.train_loss) == len(h.val_loss) == len(h.val_auc) == 4
        assert 0 <= h.best_epoch < 4
        assert set(h.to_dict()) == {"seed", "train_loss", "val_loss", "val_auc", "best_epoch"}

    def test_deterministic(self):
        tr, va = _small_synth()
        cfg = TrainConfig(epochs=5, seed=7)
        a = train(AttentionMIL(8, 4), tr, va, cfg)
        b = train(AttentionMIL(8, 4), tr, va, cfg)
        assert a.train_loss == b.train_loss and a.val_loss == b.val_loss and a.val_auc == b.val_auc
        for k in a.params:
            assert a.params[k].tobytes() == b.params[k].tobytes()

    def test_seeds_differ(self):
        tr, va = _small_synth()
        a = train(AttentionMIL(8, 4), tr, va, TrainConfig(epochs=2, seed=1))
        b = train(AttentionMIL(8, 4), tr, va, TrainConfig(epochs=2, seed=2))
        assert a.train_loss != b.train_loss

    def test_empty_split_rejected(self):
        tr, _ = _small_synth()
        with pytest.raises(ValueError):
            train(AttentionMIL(8, 4), tr, Split([], []), TrainConfig(epochs=1))

    def test_every_step_moves_params(self):
        tr, _ = _small_synth()
        model = AttentionMIL(8, 4)
        params = model.init_params(np.random.default_rng(0))
        cfg = TrainConfig(weight_decay=0.0)
        vel = {}
        for x, y in zip(tr.inputs, tr.labels):
            _, grads = model.loss_and_grad(params, [x], [y])
            new = sgd_step(params, grads, cfg, vel)
            assert any(not np.array_equal(new[k], params[k]) for k in params)
            params = new

    def test_non_finite_aborts_with_diagnostics(self):
        tr, va = _small_synth()
        bad = Split([x.copy() for x in tr.inputs], tr.labels, tr.ids)
        bad.inputs[3][0, 0] = np.nan
        with pytest.raises(NonFiniteGradientError, match="examples"):
            train(AttentionMIL(8, 4), bad, va, TrainConfig(epochs=1))


class TestRerun:
    def test_single(self):
        tr, va = _small_synth()
        runs = rerun(InstancePoolMIL(8, "max"), tr, va, TrainConfig(epochs=1, seed=3), 1)
        assert len(runs) == 1 and runs[0].seed == 3

    def test_hundred_runs(self):
        tr, va = _small_synth(n_bags=24)
        runs = rerun(InstancePoolMIL(8, "mean"), tr, va, TrainConfig(epochs=1, seed=10), 100)
        assert len(runs) == 100
        assert [r.seed for r in runs] == list(range(10, 110))

    def test_repeatable(self):
        tr, va = _small_synth()
        cfg = TrainConfig(epochs=2)
        a = rerun(InstancePoolMIL(8, "max"), tr, va, cfg, 3)
        b = rerun(InstancePoolMIL(8, "max"), tr, va, cfg, 3)
        assert [r.val_auc for r in a] == [r.val_auc for r in b]

    def test_parallel_matches_sequential(self):
        tr, va = _small_synth()
        cfg = TrainConfig(epochs=2)
        seq = rerun(InstancePoolMIL(8, "max"), tr, va, cfg, 2)
        par = rerun(InstancePoolMIL(8, "max"), tr, va, cfg, 2, workers=2)
        assert [r.train_loss for r in seq] == [r.train_loss for r in par]

    def test_zero_runs_rejected(self):
        tr, va = _small_synth()
        with pytest.raises(ValueError):
            rerun(InstancePoolMIL(8, "max"), tr, va, TrainConfig(), 0)
