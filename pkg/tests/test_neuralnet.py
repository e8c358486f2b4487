import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from a2a.errors import AdaptationError, ConfigError, DataError, NumericError
from a2a.mdn import ce_loss, mse_loss
from a2a.neuralnet import (
    LayerSpec,
    MlpModel,
    Sample,
    TrainConfig,
    backward,
    ce_pseudo_targets,
    evaluate_loss,
    extract_bottleneck,
    fit,
    forward,
    lhuc_adapt,
)

from .helpers import central_diff, rel_err


def _mse(outputs, batch):
    loss, g = mse_loss(outputs["y"], batch.targets["y"])
    return loss, {"y": g}


def _ce(outputs, batch):
    loss, g = ce_loss(outputs["ce"], batch.targets["labels"])
    return loss, {"ce": g}


def _checksum(model):
    h = hashlib.sha256()
    for a in model.params():
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def _model(**kw):
    args = dict(input_dim=4, widths=[6, 5], heads={"y": 3, "ce": 4}, seed=1)
    args.update(kw)
    return MlpModel.build(args.pop("input_dim"), args.pop("widths"), args.pop("heads"), **args)


class TestForward:
    def test_shapes(self):
        m = _model()
        out, _ = forward(m, np.zeros((7, 4)))
        assert out["y"].shape == (7, 3) and out["ce"].shape == (7, 4)

    def test_input_width_checked(self):
        with pytest.raises(DataError):
            forward(_model(), np.zeros((2, 5)))

    def test_zero_alpha_is_identity(self):
        m = _model(lhuc=True)
        x = np.random.default_rng(0).normal(size=(5, 4))
        base, _ = forward(m, x)
        m.init_lhuc("s1")
        adapted, _ = forward(m, x, speaker="s1")
        np.testing.assert_array_equal(base["y"], adapted["y"])

    def test_unknown_speaker(self):
        m = _model(lhuc=True)
        with pytest.raises(AdaptationError):
            forward(m, np.zeros((1, 4)), speaker="nobody")

    def test_lhuc_scales_within_zero_two(self):
        m = _model(lhuc=True, widths=[6])
        alphas = m.init_lhuc("s")
        alphas[0][:] = 50.0
        x = np.random.default_rng(0).normal(size=(3, 4))
        _, plain = forward(m, x, stop_at=0)
        out, _ = forward(m, x, speaker="s", stop_at=0)
        np.testing.assert_allclose(out["tap"], 2.0 * plain.act[0], rtol=1e-12)

    def test_dropout_eval_noop_and_train_mean(self):
        m = _model(dropout=0.5, widths=[200])
        x = np.ones((1, 4))
        a, _ = forward(m, x)
        b, _ = forward(m, x)
        np.testing.assert_array_equal(a["y"], b["y"])
        taps = [forward(m, np.ones((400, 4)), "train", rng=np.random.default_rng(i), stop_at=0)[0]["tap"]
                for i in range(3)]
        plain = forward(m, np.ones((1, 4)), stop_at=0)[0]["tap"]
        mean = np.mean([t.mean(axis=0) for t in taps], axis=0)
        active = plain[0] > 0
        np.testing.assert_allclose(mean[active], plain[0, active], rtol=0.15)

    def test_bad_layer_spec(self):
        with pytest.raises(ConfigError):
            LayerSpec(3, 4, activation="tanh")
        with pytest.raises(ConfigError):
            LayerSpec(3, 4, activation="linear", lhuc=True)


class TestBackward:
    @pytest.mark.parametrize("lhuc", [False, True])
    def test_finite_differences(self, lhuc):
        m = _model(lhuc=lhuc, activations=["relu", "linear"], aux_dim=2, aux_layer=1)
        rng = np.random.default_rng(3)
        x, aux = rng.normal(size=(6, 4)), rng.normal(size=(6, 2))
        y, labels = rng.normal(size=(6, 3)), rng.integers(0, 4, 6)
        spk = None
        if lhuc:
            alphas = m.init_lhuc("s")
            for a in alphas.values():
                a[:] = rng.normal(size=a.shape)
            spk = "s"

        def total(outputs):
            l1, g1 = mse_loss(outputs["y"], y)
            l2, g2 = ce_loss(outputs["ce"], labels)
            return l1 + l2, {"y": g1, "ce": g2}

        out, cache = forward(m, x, speaker=spk, aux=aux)
        grads = backward(m, cache, total(out)[1], want_lhuc=lhuc)
        arrays = m.params() + ([m.lhuc["s"][i] for i in sorted(m.lhuc["s"])] if lhuc else [])
        analytic = grads.params + ([grads.lhuc[i] for i in sorted(grads.lhuc)] if lhuc else [])
        for arr, g in zip(arrays, analytic):
            def f(v, arr=arr):
                saved = arr.copy()
                arr[...] = v
                val = total(forward(m, x, speaker=spk, aux=aux)[0])[0]
                arr[...] = saved
                return val
            assert rel_err(g, central_diff(f, arr)) < 1e-5

    def test_unused_head_gets_zero_grad(self):
        m = _model()
        out, cache = forward(m, np.ones((2, 4)))
        grads = backward(m, cache, {"y": np.ones((2, 3))})
        assert not np.any(grads.params[-2]) and not np.any(grads.params[-1])


class TestFit:
    def test_linear_regression_recovers_weights(self):
        rng = np.random.default_rng(0)
        W = rng.normal(size=(3, 2))
        data = []
        for _ in range(4):
            x = rng.normal(size=(50, 3))
            data.append(Sample(x, {"y": x @ W + 0.5}))
        m = MlpModel(3, [], {"y": 2}, seed=0)
        cfg = TrainConfig(learning_rate=0.05, batch_size=20, epochs=300, gradient_clip_norm=None)
        fit(m, data, _mse, cfg)
        np.testing.assert_allclose(m.head_weights["y"], W, atol=1e-3)
        np.testing.assert_allclose(m.head_biases["y"], 0.5, atol=1e-3)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(1)
        data = [Sample(rng.normal(size=(30, 4)), {"y": rng.normal(size=(30, 3))}) for _ in range(3)]
        cfg = TrainConfig(epochs=3, batch_size=16)
        a, b = _model(dropout=0.2), _model(dropout=0.2)
        fit(a, data, _mse, cfg)
        fit(b, data, _mse, cfg)
        assert _checksum(a) == _checksum(b)

    def test_zero_learning_rate_keeps_weights(self):
        rng = np.random.default_rng(2)
        data = [Sample(rng.normal(size=(10, 4)), {"y": rng.normal(size=(10, 3))})]
        m = _model()
        before = _checksum(m)
        fit(m, data, _mse, TrainConfig(learning_rate=0.0, epochs=2))
        assert _checksum(m) == before

    def test_zero_epochs_is_noop(self):
        m = _model()
        before = _checksum(m)
        report = fit(m, [Sample(np.ones((2, 4)), {"y": np.ones((2, 3))})], _mse, TrainConfig(epochs=0))
        assert report.epoch_losses == [] and _checksum(m) == before

    def test_loss_decreases(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(200, 4))
        labels = (x[:, 0] > 0).astype(int) + 2 * (x[:, 1] > 0).astype(int)
        m = _model()
        report = fit(m, [Sample(x, {"labels": labels})], _ce, TrainConfig(epochs=30, batch_size=32, learning_rate=0.01))
        assert report.epoch_losses[-1] < 0.5 * report.epoch_losses[0]

    def test_utterance_batches_carry_bounds(self):
        seen = []

        def loss_fn(outputs, batch):
            seen.append(batch.bounds)
            return _mse(outputs, batch)

        data = [Sample(np.ones((n, 4)), {"y": np.zeros((n, 3))}) for n in (3, 5, 2)]
        fit(_model(), data, loss_fn, TrainConfig(epochs=1, batch_size=2, batch_unit="utterance"))
        assert len(seen) == 2
        assert sum(e - s for b in seen for s, e in b) == 10

    def test_nonfinite_loss_raises(self):
        def bad(outputs, batch):
            return float("nan"), {"y": np.zeros_like(outputs["y"])}

        with pytest.raises(NumericError, match="epoch 0, batch 0"):
            fit(_model(), [Sample(np.ones((2, 4)), {"y": np.ones((2, 3))})], bad, TrainConfig(epochs=1))

    def test_empty_data(self):
        with pytest.raises(DataError):
            fit(_model(), [], _mse, TrainConfig())

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            TrainConfig(optimizer="rmsprop")
        with pytest.raises(ConfigError):
            TrainConfig(batch_unit="minute")


class TestLhuc:
    def _speaker_data(self, rng, scale):
        x = rng.normal(size=(80, 4))
        return [Sample(x, {"y": scale * np.maximum(x[:, :3], 0)})]

    def test_adapt_freezes_weights_and_helps(self):
        rng = np.random.default_rng(0)
        m = MlpModel.build(4, [16], {"y": 3}, lhuc=True, seed=0)
        fit(m, self._speaker_data(rng, 1.0), _mse, TrainConfig(epochs=200, batch_size=40, learning_rate=0.01))
        target = self._speaker_data(rng, 1.6)
        before = _checksum(m)
        si_loss = evaluate_loss(m, target, _mse)
        lhuc_adapt(m, "spk", target, _mse, TrainConfig(learning_rate=0.05, epochs=100, batch_size=1,
                                                      batch_unit="utterance", gradient_clip_norm=None))
        assert _checksum(m) == before
        assert evaluate_loss(m, target, _mse, speaker="spk") < 0.5 * si_loss
        r = 2.0 / (1.0 + np.exp(-m.lhuc["spk"][0]))
        assert np.all((r > 0) & (r < 2))

    def test_unsupervised_with_pseudo_labels(self):
        rng = np.random.default_rng(1)
        m = MlpModel.build(4, [8], {"ce": 4}, lhuc=True, seed=0)
        x = rng.normal(size=(40, 4))
        fit(m, [Sample(x, {"labels": rng.integers(0, 4, 40)})], _ce, TrainConfig(epochs=5))
        before = _checksum(m)
        lhuc_adapt(m, "u", [Sample(x, {})], _ce, pseudo_targets=ce_pseudo_targets)
        assert _checksum(m) == before
        assert "u" in m.lhuc

    def test_requires_lhuc_layers(self):
        m = _model()
        with pytest.raises(ConfigError):
            m.init_lhuc("s")


def test_bottleneck_tap():
    m = _model(bottleneck_tap=1, activations=["relu", "linear"])
    x = np.random.default_rng(0).normal(size=(4, 4))
    bn = extract_bottleneck(m, x)
    _, cache = forward(m, x)
    np.testing.assert_array_equal(bn, cache.act[1])
    with pytest.raises(ConfigError):
        extract_bottleneck(_model(), x)


def test_topology_round_trip():
    m = _model(lhuc=True, bottleneck_tap=0, aux_dim=2, aux_layer=1)
    m.init_lhuc("b")
    clone = m.copy()
    assert clone.topology() == m.topology()
    for a, b in zip(clone.all_arrays(), m.all_arrays()):
        np.testing.assert_array_equal(a, b)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 1000), n=st.integers(1, 12))
def test_batch_rows_are_independent_in_eval(seed, n):
    m = _model()
    x = np.random.default_rng(seed).normal(size=(n, 4))
    full = forward(m, x)[0]["y"]
    rows = np.concatenate([forward(m, x[i:i + 1])[0]["y"] for i in range(n)])
    np.testing.assert_allclose(full, rows, atol=1e-13)
