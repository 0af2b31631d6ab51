import numpy as np
import pytest

from conftest import numerical_gradient, relative_error
from datasets import get_meta
from errors import ShapeError
from model_specs import CNNSpec, MLPSpec, expected_parameter_count, parse_architecture
from nn import (
    BN_EPS,
    BatchNormState,
    CNNModel,
    ConvBlock,
    DenseLayer,
    MLPModel,
    batchnorm_backward,
    batchnorm_forward,
    block_backward,
    block_forward,
    build_model,
    dense_backward,
    dense_forward,
    init_conv_blocks,
    init_dense,
    init_predictor,
    length_normalize,
    load_checkpoint,
    predictor_backward,
    predictor_forward,
    save_checkpoint,
)
from numerics import RngStream, softmax_crossentropy
from optim import Optimizer

TRIALS = 100


def _rng_stream(seed=0):
    return RngStream('weight-init', seed)


class TestDense:
    @pytest.mark.parametrize('activation', ['relu', 'none'])
    def test_backward_matches_finite_differences(self, activation):
        rng = np.random.default_rng(0)
        for t in range(TRIALS):
            n_in, n_out, batch = rng.integers(1, 6), rng.integers(1, 6), rng.integers(1, 6)
            layer = init_dense(n_in, n_out, _rng_stream(t), activation, np.float64)
            x = rng.normal(size=(batch, n_in))
            r = rng.normal(size=(batch, n_out))
            z, _ = dense_forward(layer, x)
            gW, gb, gx = dense_backward(layer, x, z, r)
            loss = lambda: float(np.sum(dense_forward(layer, x)[1] * r))
            assert relative_error(gW, numerical_gradient(loss, layer.W)) < 1e-6
            assert relative_error(gb, numerical_gradient(loss, layer.b)) < 1e-6
            assert relative_error(gx, numerical_gradient(loss, x)) < 1e-6

    def test_input_mismatch(self):
        layer = init_dense(4, 3, _rng_stream())
        with pytest.raises(ShapeError):
            dense_forward(layer, np.zeros((2, 5), np.float32))

    def test_backward_needs_cache(self):
        layer = init_dense(4, 3, _rng_stream())
        with pytest.raises(ShapeError):
            dense_backward(layer, None, None, np.zeros((1, 3)))

    def test_bad_activation(self):
        with pytest.raises(ShapeError):
            DenseLayer(np.zeros((2, 2)), np.zeros(2), 'tanh')

    def test_init_bounds(self):
        layer = init_dense(24, 10, _rng_stream())
        assert np.abs(layer.W).max() <= np.sqrt(6.0 / 24)
        assert np.abs(layer.b).max() <= 1.0 / np.sqrt(24)

    def test_cnn_biases_use_layer_default_bound(self):
        spec = CNNSpec((3, 8, 8), 4, channels=(6, 6, 6))
        rng = _rng_stream(3)
        blocks = init_conv_blocks(spec, rng, np.float64)
        head = init_predictor(6, 4, rng, np.float64)
        for block, fan_in in zip(blocks, (3 * 9, 6 * 9, 6 * 9)):
            assert np.abs(block.kernels).max() <= np.sqrt(6.0 / fan_in)
            assert np.abs(block.bias).max() <= 1.0 / np.sqrt(fan_in)
        assert np.abs(head.b).max() <= 1.0 / np.sqrt(6)


class TestBatchNorm:
    def test_train_backward_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        for _ in range(TRIALS):
            n, c, h, w = rng.integers(2, 4), rng.integers(1, 4), rng.integers(2, 4), rng.integers(2, 4)
            bn = BatchNormState.create(c, np.float64)
            bn.gamma[...] = rng.normal(1.0, 0.3, size=c)
            bn.beta[...] = rng.normal(size=c)
            x = rng.normal(size=(n, c, h, w))
            r = rng.normal(size=x.shape)
            _, cache = batchnorm_forward(bn, x, update_running=False)
            g_gamma, g_beta, gx = batchnorm_backward(bn, cache, r)
            loss = lambda: float(np.sum(batchnorm_forward(bn, x, update_running=False)[0] * r))
            assert relative_error(gx, numerical_gradient(loss, x)) < 1e-6
            assert relative_error(g_gamma, numerical_gradient(loss, bn.gamma)) < 1e-6
            assert relative_error(g_beta, numerical_gradient(loss, bn.beta)) < 1e-6

    def test_train_output_is_standardized_per_channel(self):
        rng = np.random.default_rng(21)
        scale = np.array([0.5, 3.0, 10.0]).reshape(1, 3, 1, 1)
        shift = np.array([-4.0, 0.0, 7.0]).reshape(1, 3, 1, 1)
        x = rng.normal(size=(16, 3, 5, 5)) * scale + shift
        y, _ = batchnorm_forward(BatchNormState.create(3, np.float64), x)
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_running_statistics_use_unbiased_variance(self):
        bn = BatchNormState.create(1, np.float64)
        x = np.arange(8, dtype=np.float64).reshape(2, 1, 2, 2)
        batchnorm_forward(bn, x)
        assert bn.running_mean[0] == pytest.approx(0.1 * x.mean())
        assert bn.running_var[0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))

    def test_eval_mode_uses_running_statistics(self):
        bn = BatchNormState.create(2, np.float64)
        bn.running_mean[...] = [1.0, -1.0]
        bn.running_var[...] = [4.0, 0.25]
        bn.mode = 'eval'
        x = np.random.default_rng(2).normal(size=(3, 2, 2, 2))
        y, cache = batchnorm_forward(bn, x)
        expected = (x - bn.running_mean.reshape(1, -1, 1, 1)) / np.sqrt(bn.running_var.reshape(1, -1, 1, 1) + BN_EPS)
        np.testing.assert_allclose(y, expected)
        # eval mode leaves the running statistics alone
        np.testing.assert_array_equal(bn.running_mean, [1.0, -1.0])
        r = np.ones_like(x)
        _, _, gx = batchnorm_backward(bn, cache, r)
        np.testing.assert_allclose(gx, r / np.sqrt(bn.running_var.reshape(1, -1, 1, 1) + BN_EPS))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            batchnorm_forward(BatchNormState.create(3), np.zeros((1, 2, 2, 2), np.float32))


class TestConvBlock:
    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        for t in range(TRIALS):
            c_in, c_out = rng.integers(1, 3), rng.integers(1, 3)
            h, w = rng.integers(4, 6), rng.integers(4, 6)
            block = ConvBlock(rng.normal(size=(c_out, c_in, 3, 3)), rng.normal(size=c_out),
                              BatchNormState.create(c_out, np.float64))
            block.bn.gamma[...] = rng.normal(1.0, 0.2, size=c_out)
            x = rng.normal(size=(4, c_in, h, w))
            y, cache = block_forward(block, x, update_running=False)
            r = rng.normal(size=y.shape)
            grads, gx = block_backward(block, cache, r)
            loss = lambda: float(np.sum(block_forward(block, x, update_running=False)[0] * r))
            assert relative_error(gx, numerical_gradient(loss, x)) < 1e-5
            assert relative_error(grads['kernels'], numerical_gradient(loss, block.kernels)) < 1e-5
            assert relative_error(grads['bias'], numerical_gradient(loss, block.bias)) < 1e-5
            assert relative_error(grads['gamma'], numerical_gradient(loss, block.bn.gamma)) < 1e-5
            assert relative_error(grads['beta'], numerical_gradient(loss, block.bn.beta)) < 1e-5

    def test_output_shape_floors(self):
        spec = CNNSpec((1, 7, 7), 3, channels=(2,))
        block = init_conv_blocks(spec, _rng_stream())[0]
        y, _ = block_forward(block, np.zeros((2, 1, 7, 7), np.float32))
        assert y.shape == (2, 2, 3, 3)

    def test_rejects_tiny_input(self):
        block = init_conv_blocks(CNNSpec((1, 8, 8), 3, channels=(2,)), _rng_stream())[0]
        with pytest.raises(ShapeError):
            block_forward(block, np.zeros((1, 1, 1, 1), np.float32))


class TestPredictor:
    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        for t in range(TRIALS):
            c, s, m = rng.integers(1, 4), rng.integers(1, 3), rng.integers(2, 5)
            pred = init_predictor(c * s * s, m, _rng_stream(t), np.float64)
            feats = rng.normal(size=(3, c, s, s))
            labels = rng.integers(0, m, size=3)
            _, grad_logits = softmax_crossentropy(predictor_forward(pred, feats), labels)
            gW, gb, gx = predictor_backward(pred, feats, grad_logits)
            loss = lambda: softmax_crossentropy(predictor_forward(pred, feats), labels)[0]
            assert relative_error(gW, numerical_gradient(loss, pred.W)) < 1e-6
            assert relative_error(gb, numerical_gradient(loss, pred.b)) < 1e-6
            assert relative_error(gx, numerical_gradient(loss, feats)) < 1e-6
            assert gx.shape == feats.shape

    def test_feature_mismatch(self):
        pred = init_predictor(8, 3, _rng_stream())
        with pytest.raises(ShapeError):
            predictor_forward(pred, np.zeros((1, 2, 3, 3), np.float32))


class TestModels:
    def _toy_mlp(self):
        rng = _rng_stream(5)
        layers = [init_dense(4, 3, rng, 'relu', np.float64)]
        head = init_dense(3, 2, rng, 'none', np.float64)
        return MLPModel(MLPSpec(4, (3,), 2), layers, head)

    def test_mlp_gradient_matches_finite_differences(self):
        model = self._toy_mlp()
        rng = np.random.default_rng(6)
        x = rng.normal(size=(5, 4))
        y = rng.integers(0, 2, size=5)
        logits, caches = model.forward(x)
        _, grad_logits = softmax_crossentropy(logits, y)
        grads = model.backward(caches, grad_logits)
        loss = lambda: softmax_crossentropy(model.forward(x)[0], y)[0]
        for name, param in model.named_parameters().items():
            assert relative_error(grads[name], numerical_gradient(loss, param)) < 1e-6, name

    def test_cnn_gradient_matches_finite_differences(self):
        spec = CNNSpec((1, 8, 8), 3, channels=(2, 2, 2))
        rng = _rng_stream(7)
        model = CNNModel(spec, init_conv_blocks(spec, rng, np.float64), init_predictor(2, 3, rng, np.float64))
        data = np.random.default_rng(8)
        x = data.normal(size=(8, 1, 8, 8))
        y = data.integers(0, 3, size=8)
        logits, caches = model.forward(x)
        _, grad_logits = softmax_crossentropy(logits, y)
        grads = model.backward(caches, grad_logits)
        loss = lambda: softmax_crossentropy(model.forward(x)[0], y)[0]
        for name in ('block0.kernels', 'block1.gamma', 'block2.bias', 'head.W'):
            param = model.named_parameters()[name]
            assert relative_error(grads[name], numerical_gradient(loss, param)) < 1e-5, name

    def test_separable_toy_converges(self):
        rng = np.random.default_rng(9)
        n = 64
        side = rng.choice([-1.0, 1.0], size=n)
        x = np.stack([side * rng.uniform(0.5, 2.0, size=n), rng.normal(size=n)], axis=1)
        y = (side > 0).astype(np.int64)
        stream = _rng_stream(10)
        model = MLPModel(MLPSpec(2, (8,), 2), [init_dense(2, 8, stream, 'relu', np.float64)],
                         init_dense(8, 2, stream, 'none', np.float64))
        opt = Optimizer(model.named_parameters(), 'adam', 0.05)
        losses = []
        for _ in range(200):
            logits, caches = model.forward(x)
            loss, grad_logits = softmax_crossentropy(logits, y)
            opt.step(model.backward(caches, grad_logits))
            losses.append(loss)
        assert min(losses) < 0.01

    def test_parameter_counts_match_catalog(self):
        mnist = get_meta('mnist')
        mlp = build_model(parse_architecture('mlp_2x1000', mnist), _rng_stream())
        assert mlp.parameter_count() == 1_796_010 == expected_parameter_count(mlp.spec)
        cnn_spec = parse_architecture('cnn_3block', get_meta('cifar10'))
        assert build_model(cnn_spec, _rng_stream()).parameter_count() == expected_parameter_count(cnn_spec)

    def test_build_model_is_deterministic(self):
        spec = parse_architecture('mlp_2x1000', get_meta('mnist'))
        a = build_model(spec, _rng_stream(3)).state_dict()
        b = build_model(spec, _rng_stream(3)).state_dict()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_state_dict_round_trip(self):
        model = self._toy_mlp()
        saved = model.state_dict()
        model.layers[0].W += 1.0
        model.load_state_dict(saved)
        np.testing.assert_array_equal(model.layers[0].W, saved['layer0.W'])
        with pytest.raises(ShapeError):
            model.load_state_dict({'layer0.W': saved['layer0.W']})

    def test_checkpoint_restores_predictions(self, tmp_path):
        spec = parse_architecture('mlp_2x1000', get_meta('mnist'))
        model = build_model(spec, _rng_stream(11))
        path = tmp_path / 'ckpt' / 'model.llbc'
        save_checkpoint(path, model, {'layer0.W.m': np.ones(3, np.float32)}, extra={'epoch': 4})
        restored, optim, extra = load_checkpoint(path)
        x = np.random.default_rng(12).normal(size=(3, 784)).astype(np.float32)
        np.testing.assert_array_equal(restored.predict_logits(x), model.predict_logits(x))
        assert extra == {'epoch': 4}
        np.testing.assert_array_equal(optim['layer0.W.m'], np.ones(3, np.float32))

    def test_length_normalize(self):
        x = np.random.default_rng(13).normal(size=(4, 6))
        np.testing.assert_allclose(np.linalg.norm(length_normalize(x), axis=1), 1.0, rtol=1e-6)
