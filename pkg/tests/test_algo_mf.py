import numpy as np
import pytest

from algo_mf import (
    MFLayer,
    build_mf_model,
    mf_goodness,
    mf_local_gradients,
    mf_local_step,
    mf_predict,
    train_mf,
    train_mf_layer,
)
from conftest import numerical_gradient, relative_error
from errors import ConfigError, ShapeError
from model_specs import MLPSpec
from nn import DenseLayer, MLPModel
from numerics import RngStream, make_streams, softmax_crossentropy
from optim import Optimizer

SPEC = MLPSpec(64, (32, 32), 3, final_head=False)


@pytest.fixture
def mf_config(experiment_factory):
    def _make(precision='float32', **hp):
        params = {'lr': 0.01, 'epochs_per_layer': 4, **hp}
        return experiment_factory('mf', hyperparameters=params, batch_size=32, precision=precision)
    return _make


def _layer(use_bias=True, seed=0):
    rng = np.random.default_rng(seed)
    return MFLayer(rng.normal(size=(4, 5)), rng.normal(size=4), rng.normal(size=(3, 4)), use_bias)


class TestLocalRule:
    def test_gradients_match_finite_differences(self):
        layer = _layer()
        rng = np.random.default_rng(1)
        x, labels = rng.normal(size=(6, 5)), rng.integers(0, 3, 6)
        _, grads = mf_local_gradients(layer, x, labels)
        loss = lambda: mf_local_gradients(layer, x, labels)[0]
        for name in ('W', 'b', 'M'):
            assert relative_error(grads[name], numerical_gradient(loss, getattr(layer, name))) < 1e-6

    def test_bias_free_layer(self):
        layer = _layer(use_bias=False)
        _, grads = mf_local_gradients(layer, np.ones((2, 5)), np.array([0, 1]))
        assert set(grads) == {'W', 'M'}
        assert list(layer.parameters()) == ['W', 'M']

    def test_goodness_shapes(self):
        assert mf_goodness(np.ones((2, 4)), np.ones((3, 4))).tolist() == [[4.0] * 3] * 2
        with pytest.raises(ShapeError):
            mf_goodness(np.ones((2, 4)), np.ones((3, 5)))
        with pytest.raises(ShapeError):
            MFLayer(np.ones((4, 5)), np.ones(3), np.ones((3, 4)))

    def test_step_matches_reference_adam(self):
        layer = _layer(seed=2)
        reference = {k: v.copy() for k, v in layer.parameters().items()}
        rng = np.random.default_rng(3)
        batches = [(rng.normal(size=(8, 5)), rng.integers(0, 3, 8)) for _ in range(3)]
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8

        opt = Optimizer(layer.parameters(), 'adam', lr)
        for x, y in batches:
            mf_local_step(layer, x, y, opt)

        shadow = MFLayer(reference['W'], reference['b'], reference['M'])
        m = {k: np.zeros_like(v) for k, v in reference.items()}
        v = {k: np.zeros_like(v) for k, v in reference.items()}
        for t, (x, y) in enumerate(batches, start=1):
            _, grads = mf_local_gradients(shadow, x, y)
            for k, g in grads.items():
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                getattr(shadow, k)[...] -= lr * (m[k] / (1 - b1 ** t)) / (np.sqrt(v[k] / (1 - b2 ** t)) + eps)
        for name in ('W', 'b', 'M'):
            np.testing.assert_allclose(getattr(layer, name), getattr(shadow, name), rtol=1e-10, atol=1e-12)

    def test_single_layer_equals_softmax_regression_on_projection(self):
        layer = _layer(seed=4)
        rng = np.random.default_rng(5)
        x, labels = rng.normal(size=(10, 5)), rng.integers(0, 3, 10)
        twin = MLPModel(MLPSpec(5, (4,), 3), [DenseLayer(layer.W.copy(), layer.b.copy(), 'relu')],
                        DenseLayer(layer.M.copy(), np.zeros(3), 'none'))
        twin_params = {k: v for k, v in twin.named_parameters().items() if k != 'head.b'}
        mf_opt = Optimizer(layer.parameters(), 'adam', 0.01)
        twin_opt = Optimizer(twin_params, 'adam', 0.01)
        for _ in range(5):
            loss, grads = mf_local_gradients(layer, x, labels)
            logits, caches = twin.forward(x)
            twin_loss, grad_logits = softmax_crossentropy(logits, labels)
            twin_grads = twin.backward(caches, grad_logits)
            assert loss == pytest.approx(twin_loss, rel=1e-10)
            np.testing.assert_allclose(grads['M'], twin_grads['head.W'], rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(grads['W'], twin_grads['layer0.W'], rtol=1e-10, atol=1e-12)
            mf_opt.step(grads)
            twin_opt.step({k: twin_grads[k] for k in twin_params})
        np.testing.assert_allclose(layer.M, twin.head.W, rtol=1e-10, atol=1e-12)
        np.testing.assert_array_equal(twin.head.b, 0.0)

    def test_frozen_layer_rejects_steps(self):
        layer = _layer()
        layer.frozen = True
        with pytest.raises(ConfigError):
            mf_local_step(layer, np.ones((2, 5)), np.array([0, 1]), Optimizer(layer.parameters(), 'adam', 0.01))


class TestModel:
    def test_build(self):
        model = build_mf_model(SPEC, RngStream('weight-init', 0))
        assert [l.W.shape for l in model.layers] == [(32, 64), (32, 32)]
        assert [l.M.shape for l in model.layers] == [(3, 32), (3, 32)]
        assert model.parameter_count() == (64 * 32 + 32 + 96) + (32 * 32 + 32 + 96)
        assert np.abs(model.layers[0].M).max() <= np.sqrt(6.0 / 32)
        assert np.abs(model.layers[0].b).max() <= 1.0 / np.sqrt(64)
        assert np.abs(model.layers[1].b).max() <= 1.0 / np.sqrt(32)

    def test_final_head_rejected(self):
        with pytest.raises(ConfigError):
            build_mf_model(MLPSpec(64, (32,), 3, final_head=True), RngStream('weight-init', 0))

    def test_prediction_uses_last_layer_or_sum(self):
        model = build_mf_model(SPEC, RngStream('weight-init', 1), np.float64)
        x = np.random.default_rng(0).normal(size=(20, 64))
        scores = model.goodness_scores(x)
        np.testing.assert_array_equal(mf_predict(model, x), scores[-1].argmax(axis=1))
        np.testing.assert_array_equal(mf_predict(model, x, aggregate=True), (scores[0] + scores[1]).argmax(axis=1))


class TestLayerTraining:
    def test_layers_train_bottom_up(self, toy_bundle, mf_config):
        model = build_mf_model(SPEC, RngStream('weight-init', 0))
        with pytest.raises(ConfigError):
            train_mf_layer(model, 1, toy_bundle, mf_config().hyperparameters, make_streams(0), 32)

    def test_lower_layers_untouched(self, toy_bundle, mf_config):
        hp = mf_config().hyperparameters
        model = build_mf_model(SPEC, RngStream('weight-init', 0))
        streams = make_streams(0)
        first = train_mf_layer(model, 0, toy_bundle, hp, streams, 32)
        assert model.layers[0].frozen
        assert [r.phase for r in first.trace] == ['layer1'] * first.epochs
        frozen = model.layers[0].snapshot()
        train_mf_layer(model, 1, toy_bundle, hp, streams, 32)
        for name, value in frozen.items():
            np.testing.assert_array_equal(getattr(model.layers[0], name), value)

    def test_cached_inputs_match_streaming(self, toy_bundle64, mf_config):
        hp = mf_config(precision='float64').hyperparameters
        runs = []
        for cache in (True, False):
            model = build_mf_model(SPEC, RngStream('weight-init', 0), np.float64)
            streams = make_streams(0)
            train_mf_layer(model, 0, toy_bundle64, hp, streams, 16, cache)
            result = train_mf_layer(model, 1, toy_bundle64, hp, streams, 16, cache)
            runs.append((model, result))
        (cached, a), (streamed, b) = runs
        assert a.epochs == b.epochs
        np.testing.assert_allclose(cached.layers[1].W, streamed.layers[1].W, rtol=1e-7, atol=1e-10)
        assert a.best_val_loss == pytest.approx(b.best_val_loss, rel=1e-9)


class TestTraining:
    def test_run(self, toy_bundle, mf_config):
        result = train_mf(mf_config(epochs_per_layer=10), toy_bundle, seed=0, spec=SPEC)
        assert result.algo == 'mf' and result.arch == 'mlp_2x32'
        assert len(result.extras['layer_epochs']) == 2
        assert result.effective_epochs == sum(result.extras['layer_epochs'])
        assert {r.phase for r in result.trace} == {'layer1', 'layer2'}
        assert result.test_acc >= 80.0

    def test_same_seed_same_run(self, toy_bundle, mf_config):
        a = train_mf(mf_config(epochs_per_layer=2), toy_bundle, seed=5, spec=SPEC)
        b = train_mf(mf_config(epochs_per_layer=2), toy_bundle, seed=5, spec=SPEC)
        assert [r.train_loss for r in a.trace] == [r.train_loss for r in b.trace]
        assert a.test_acc == b.test_acc

    def test_bias_free_and_aggregate_options(self, toy_bundle, mf_config):
        config = mf_config(epochs_per_layer=1, use_bias=False, aggregate_inference=True)
        result = train_mf(config, toy_bundle, seed=0, spec=SPEC)
        assert result.extras['aggregate_inference'] is True
        assert result.effective_epochs == 2

    def test_architecture_outside_catalog(self, toy_bundle, mf_config, experiment_factory):
        config = experiment_factory('mf', architecture='mlp_4x2000',
                                    hyperparameters={'lr': 0.01, 'epochs_per_layer': 1})
        with pytest.raises(ConfigError):
            train_mf(config, toy_bundle, seed=0)
