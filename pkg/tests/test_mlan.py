import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from a2a.errors import ConfigError, DataError
from a2a.mlan import (
    MlanConfig,
    MlanStack,
    domain_gap,
    gen_bottleneck1,
    level2_input,
    mlan_features,
    train_level1,
    train_level2,
    train_mlan,
)
from a2a.neuralnet import MlpModel, TrainConfig, extract_bottleneck, forward
from a2a.features import Standardizer


def _kl_oracle(a, b):
    """KL(N_a || N_b) for diagonal Gaussians, accumulated dimension by dimension."""
    total = 0.0
    for d in range(a.shape[1]):
        ma, mb = a[:, d].mean(), b[:, d].mean()
        va, vb = max(a[:, d].var(), 1e-8), max(b[:, d].var(), 1e-8)
        total += 0.5 * (math.log(vb / va) + va / vb + (ma - mb) ** 2 / vb - 1.0)
    return total


class TestDomainGap:
    def test_identical_sets(self):
        x = np.random.default_rng(0).normal(size=(50, 4))
        assert domain_gap(x, x) == 0.0

    def test_unit_variance_mean_shift(self):
        a = np.array([[-1.0], [1.0]])
        assert domain_gap(a, a + 1.0) == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=30)
    @given(seed=st.integers(0, 10_000))
    def test_symmetric_sum_of_directed_kl(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(30, 3)) * rng.uniform(0.5, 2, 3)
        b = rng.normal(size=(40, 3)) * rng.uniform(0.5, 2, 3) + rng.normal(size=3)
        assert abs(domain_gap(a, b) - domain_gap(b, a)) <= 1e-12
        assert domain_gap(a, b) == pytest.approx(_kl_oracle(a, b) + _kl_oracle(b, a), rel=1e-10)
        assert domain_gap(a, b) >= 0

    def test_constant_columns_use_floor(self):
        a = np.zeros((5, 1))
        assert np.isfinite(domain_gap(a, a + 1e-3))

    def test_width_mismatch(self):
        with pytest.raises(DataError):
            domain_gap(np.zeros((3, 2)), np.zeros((3, 3)))


def _toy_domain(rng, n_utts, shift=None, K=4):
    feats, labels = [], []
    centers = np.random.default_rng(99).normal(size=(K, 6)) * 3
    for _ in range(n_utts):
        lab = rng.integers(0, K, 60)
        x = centers[lab] + 0.3 * rng.normal(size=(60, 6))
        if shift is not None:
            x = x @ shift[0].T + shift[1]
        feats.append(x)
        labels.append(lab)
    return feats, labels


def _small_cfg(epochs=10):
    return MlanConfig(hidden=(32,), bottleneck_dim=5, n_classes=4,
                      train=TrainConfig(learning_rate=3e-3, batch_size=64, epochs=epochs, batch_unit="frame"))


@pytest.fixture(scope="module")
def stack():
    rng = np.random.default_rng(0)
    shift = (np.eye(6) + 0.5 * rng.normal(size=(6, 6)), rng.normal(size=6))
    a = _toy_domain(rng, 6)
    b = _toy_domain(rng, 6, shift)
    return train_mlan(a, b, _small_cfg()), a, b


class TestCascade:
    def test_level1_separable_low_ce(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(200, 2))
        lab = (x[:, 0] > 0).astype(int)
        x[:, 0] += np.where(lab == 1, 2.0, -2.0)
        cfg = MlanConfig(hidden=(16,), bottleneck_dim=3, n_classes=2, splice_left=0, splice_right=0,
                         train=TrainConfig(learning_rate=1e-2, batch_size=32, epochs=40))
        m = train_level1([x], [lab], cfg)
        assert m.meta["train_losses"][-1] < 0.1

    def test_default_bottleneck_width(self):
        assert MlanConfig().bottleneck_dim == 39
        cfg = MlanConfig(hidden=(8,), n_classes=4, train=TrainConfig(epochs=0))
        rng = np.random.default_rng(0)
        feats, labels = _toy_domain(rng, 1)
        m = train_level1(feats, labels, cfg)
        assert gen_bottleneck1(m, feats[0]).shape == (60, 39)

    def test_zero_epochs_equals_initialization(self):
        rng = np.random.default_rng(0)
        feats, labels = _toy_domain(rng, 1)
        cfg = _small_cfg(epochs=0)
        m = train_level1(feats, labels, cfg)
        fresh = MlpModel.build(18, [32, 5], {"ce": 4}, activations=["relu", "linear"], bottleneck_tap=1,
                               seed=cfg.train.seed)
        for a, b in zip(m.params(), fresh.params()):
            np.testing.assert_array_equal(a, b)

    def test_training_accuracy_above_chance(self, stack):
        st_, a, _ = stack
        left, right = st_.dnn1.meta["splice"]
        from a2a.mlan import _spliced
        x = Standardizer.from_json(st_.dnn1.meta["input_norm"]).apply(_spliced(a[0][0], left, right))
        acc = np.mean(np.argmax(forward(st_.dnn1, x)[0]["ce"], axis=1) == a[1][0])
        assert acc > 2 * 0.25

    def test_level2_loss_decreases_first_epochs(self, stack):
        losses = stack[0].dnn2.meta["train_losses"]
        assert losses[0] > losses[1] > losses[2]

    def test_label_length_mismatch(self):
        with pytest.raises(DataError):
            train_level1([np.zeros((5, 6))], [np.zeros(4, dtype=int)], _small_cfg())

    def test_level2_width_checked(self, stack):
        st_, _, b = stack
        bad_bn = [np.zeros((x.shape[0], 3)) for x in b[0]]
        with pytest.raises(ConfigError):
            train_level2(b[0], bad_bn, b[1], _small_cfg(), st_.dnn1)

    def test_level2_input_order(self):
        feats = np.arange(6.0).reshape(3, 2)
        bn = np.full((3, 1), -1.0)
        out = level2_input(feats, bn, 0, 0)
        np.testing.assert_array_equal(out[:, :2], feats)
        np.testing.assert_array_equal(out[:, 2:], bn)
        with pytest.raises(DataError):
            level2_input(feats, bn[:2], 0, 0)


class TestFeatures:
    def test_manual_composition(self, stack):
        st_, a, _ = stack
        x = a[0][0]
        bn1 = gen_bottleneck1(st_.dnn1, x)
        left, right = st_.dnn2.meta["splice"]
        z = Standardizer.from_json(st_.dnn2.meta["input_norm"]).apply(level2_input(x, bn1, left, right))
        np.testing.assert_allclose(mlan_features(st_, x), extract_bottleneck(st_.dnn2, z), atol=1e-12)

    def test_shape_purity_and_determinism(self, stack):
        st_, a, _ = stack
        sid = st_.stack_id
        one = mlan_features(st_, a[0][1])
        two = mlan_features(st_, a[0][1])
        assert one.shape == (60, st_.bottleneck_dim)
        np.testing.assert_array_equal(one, two)
        assert st_.stack_id == sid

    def test_rows_are_independent_without_context(self):
        rng = np.random.default_rng(3)
        cfg = MlanConfig(hidden=(8,), bottleneck_dim=3, n_classes=4, splice_left=0, splice_right=0,
                         train=TrainConfig(epochs=1))
        a, b = _toy_domain(rng, 2), _toy_domain(rng, 2)
        st_ = train_mlan(a, b, cfg)
        x = a[0][0]
        perm = rng.permutation(x.shape[0])
        np.testing.assert_allclose(mlan_features(st_, x[perm]), mlan_features(st_, x)[perm], atol=1e-12)

    def test_wrong_width(self, stack):
        with pytest.raises(DataError):
            mlan_features(stack[0], np.zeros((4, 7)))

    def test_gap_reduced_on_toy_shift(self, stack):
        st_, a, b = stack
        raw = domain_gap(np.concatenate(a[0]), np.concatenate(b[0]))
        adapted = domain_gap(np.concatenate([mlan_features(st_, x) for x in a[0]]),
                             np.concatenate([mlan_features(st_, x) for x in b[0]]))
        assert adapted < 0.7 * raw


class TestStackIo:
    def test_save_load_round_trip(self, stack, tmp_path):
        st_ = stack[0]
        st_.save(tmp_path / "s")
        back = MlanStack.load(tmp_path / "s")
        assert back.stack_id == st_.stack_id
        x = stack[1][0][0]
        np.testing.assert_array_equal(mlan_features(back, x), mlan_features(st_, x))

    def test_tampered_model_detected(self, stack, tmp_path):
        from a2a.dataio import save_model
        st_ = stack[0]
        st_.save(tmp_path / "s")
        other = st_.dnn1.copy()
        other.biases[0][0] += 1.0
        save_model(tmp_path / "s" / "dnn1.a2am", other)
        with pytest.raises(ConfigError, match="does not match"):
            MlanStack.load(tmp_path / "s")

    def test_not_a_stack(self, tmp_path):
        with pytest.raises(ConfigError):
            MlanStack.load(tmp_path)

    def test_untrained_stack_rejected(self):
        d1 = MlpModel.build(6, [4, 3], {"ce": 2}, bottleneck_tap=1)
        d2 = MlpModel.build(9, [4, 3], {"ce": 2}, bottleneck_tap=1)
        with pytest.raises(ConfigError, match="untrained"):
            MlanStack(d1, d2)
