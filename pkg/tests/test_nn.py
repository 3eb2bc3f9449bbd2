import math

import numpy as np
import pytest

from elastosel.errors import FormatError
from elastosel.nn import (
    AdamState,
    BatchNormLayer,
    ConvLayer,
    adam_step,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    global_avg_pool,
    global_avg_pool_backward,
    relu_backward,
    relu_forward,
    softmax_cross_entropy,
)
from elastosel.nn.model import load_model, model_from_bytes, model_to_bytes, save_model
from elastosel.classifier import ArchitectureSpec, build_model

from gradcheck import conv_loops, numeric_grad, rel_error


def _conv(rng, n, c, o, h, w, k, stride, padding):
    x = rng.standard_normal((n, c, h, w))
    layer = ConvLayer(rng.standard_normal((o, c, k, k)), rng.standard_normal(o), stride, padding)
    return x, layer


# -- convolution -----------------------------------------------------------------

def test_conv_sum_of_ones():
    layer = ConvLayer(np.ones((1, 1, 3, 3)), np.zeros(1))
    out = conv2d_forward(np.ones((1, 1, 3, 3)), layer)
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 9.0


@pytest.mark.parametrize("k", [3, 5])
def test_conv_delta_kernel_is_identity(k):
    w = np.zeros((1, 1, k, k))
    w[0, 0, k // 2, k // 2] = 1.0
    x = np.random.default_rng(0).standard_normal((2, 1, 7, 6))
    out = conv2d_forward(x, ConvLayer(w, np.zeros(1), 1, k // 2))
    np.testing.assert_array_equal(out, x)


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x, layer = _conv(rng, 2, 3, 4, 8, 8, 3, 1, 1)
    assert np.max(np.abs(conv2d_forward(x, layer) - conv_loops(x, layer.weights, layer.bias, 1, 1))) < 1e-6


def test_conv_rejects_channel_mismatch():
    layer = ConvLayer(np.ones((1, 2, 3, 3)), np.zeros(1))
    with pytest.raises(ValueError):
        conv2d_forward(np.ones((1, 3, 5, 5)), layer)


def test_conv_rejects_degenerate_output():
    with pytest.raises(ValueError):
        conv2d_forward(np.ones((1, 1, 2, 2)), ConvLayer(np.ones((1, 1, 3, 3)), np.zeros(1)))


def test_conv_linear_in_input_and_weights():
    rng = np.random.default_rng(2)
    x, layer = _conv(rng, 2, 2, 3, 9, 7, 3, 2, 1)
    layer.bias[:] = 0
    x2 = rng.standard_normal(x.shape)
    lhs = conv2d_forward(2.5 * x + x2, layer)
    rhs = 2.5 * conv2d_forward(x, layer) + conv2d_forward(x2, layer)
    assert rel_error(lhs, rhs) < 1e-9
    w2 = rng.standard_normal(layer.weights.shape)
    sum_layer = ConvLayer(layer.weights + w2, layer.bias, 2, 1)
    rhs = conv2d_forward(x, layer) + conv2d_forward(x, ConvLayer(w2, layer.bias, 2, 1))
    assert rel_error(conv2d_forward(x, sum_layer), rhs) < 1e-9


def test_conv_backward_zero_grad():
    rng = np.random.default_rng(3)
    x, layer = _conv(rng, 1, 2, 2, 6, 6, 3, 1, 1)
    gx, gw, gb = conv2d_backward(x, layer, np.zeros((1, 2, 6, 6)))
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_scalar_case():
    x = np.array([[[[3.0]]]])
    layer = ConvLayer(np.array([[[[2.0]]]]), np.array([0.5]))
    assert conv2d_forward(x, layer)[0, 0, 0, 0] == 2.0 * 3.0 + 0.5
    gx, gw, gb = conv2d_backward(x, layer, np.array([[[[4.0]]]]))
    assert (gx.item(), gw.item(), gb.item()) == (8.0, 12.0, 4.0)


@pytest.mark.parametrize("seed,stride,padding,k", [(0, 1, 0, 3), (1, 2, 1, 3), (2, 1, 2, 5), (3, 2, 2, 5), (4, 3, 1, 3)])
def test_conv_backward_finite_differences(seed, stride, padding, k):
    rng = np.random.default_rng(seed)
    x, layer = _conv(rng, 2, 2, 3, 7, 6, k, stride, padding)
    g = rng.standard_normal(conv2d_forward(x, layer).shape)
    f = lambda: float(np.sum(conv2d_forward(x, layer) * g))
    gx, gw, gb = conv2d_backward(x, layer, g)
    assert rel_error(gx, numeric_grad(f, x)) < 1e-4
    assert rel_error(gw, numeric_grad(f, layer.weights)) < 1e-4
    assert rel_error(gb, numeric_grad(f, layer.bias)) < 1e-4


# -- batch norm ------------------------------------------------------------------

def test_batchnorm_constant_channels_give_zero():
    x = np.ones((4, 2, 3, 3)) * np.array([1.0, -7.0]).reshape(1, 2, 1, 1)
    out, _ = batchnorm_forward(x, BatchNormLayer(2, dtype=np.float64))
    assert np.all(out == 0)


def test_batchnorm_train_statistics():
    x = np.random.default_rng(0).normal(3.0, 2.0, (8, 3, 5, 5))
    out, _ = batchnorm_forward(x, BatchNormLayer(3, dtype=np.float64))
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-6)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1) < 1e-3)


def test_batchnorm_infer_affine():
    layer = BatchNormLayer(2, dtype=np.float64)
    layer.gamma[:] = 2.0
    layer.beta[:] = 1.0
    layer.mode = "infer"
    x = np.random.default_rng(1).standard_normal((3, 2, 4, 4))
    out, _ = batchnorm_forward(x, layer)
    np.testing.assert_allclose(out, 2 * x / math.sqrt(1 + layer.eps) + 1, rtol=1e-12)


def test_batchnorm_infer_identity_is_idempotent():
    layer = BatchNormLayer(2, eps=1e-5, dtype=np.float64)
    layer.mode = "infer"
    x = np.random.default_rng(2).standard_normal((2, 2, 3, 3))
    once, _ = batchnorm_forward(x, layer)
    twice, _ = batchnorm_forward(once, layer)
    # identity stats scale by 1/sqrt(1+eps) per application
    np.testing.assert_allclose(twice, once / math.sqrt(1 + 1e-5), rtol=1e-12)


def test_batchnorm_updates_running_stats():
    layer = BatchNormLayer(1, momentum=0.9, dtype=np.float64)
    x = np.full((2, 1, 2, 2), 5.0)
    x[0] = 3.0
    batchnorm_forward(x, layer)
    assert layer.running_mean[0] == pytest.approx(0.1 * 4.0)
    assert layer.running_var[0] == pytest.approx(0.9 + 0.1 * 1.0)


def test_batchnorm_needs_two_values():
    with pytest.raises(ValueError):
        batchnorm_forward(np.ones((1, 1, 1, 1)), BatchNormLayer(1))


@pytest.mark.parametrize("seed", range(5))
def test_batchnorm_backward_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 2, 4, 3))
    layer = BatchNormLayer(2, dtype=np.float64)
    layer.gamma[:] = rng.uniform(0.5, 2, 2)
    layer.beta[:] = rng.standard_normal(2)
    g = rng.standard_normal(x.shape)

    def f():
        saved = layer.running_mean.copy(), layer.running_var.copy()
        out, _ = batchnorm_forward(x, layer)
        layer.running_mean, layer.running_var = saved
        return float(np.sum(out * g))

    _, cache = batchnorm_forward(x, layer)
    gx, gg, gb = batchnorm_backward(g, cache, layer)
    assert rel_error(gx, numeric_grad(f, x)) < 1e-4
    assert rel_error(gg, numeric_grad(f, layer.gamma)) < 1e-4
    assert rel_error(gb, numeric_grad(f, layer.beta)) < 1e-4


# -- relu, pooling, dense --------------------------------------------------------

def test_relu():
    np.testing.assert_array_equal(relu_forward(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    np.testing.assert_array_equal(relu_backward(np.array([-1.0, 2.0]), np.array([5.0, 7.0])), [0, 7])


@pytest.mark.parametrize("seed", range(5))
def test_relu_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5
    g = rng.standard_normal(x.shape)
    f = lambda: float(np.sum(relu_forward(x) * g))
    assert rel_error(relu_backward(x, g), numeric_grad(f, x)) < 1e-4


def test_global_avg_pool_values():
    assert global_avg_pool(np.array([[[[1.0, 3.0], [5.0, 7.0]]]])).item() == 4.0
    assert global_avg_pool(np.full((1, 1, 3, 5), 2.5)).item() == 2.5


@pytest.mark.parametrize("seed", range(5))
def test_global_avg_pool_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 1 + seed, 4))
    g = rng.standard_normal((2, 3, 1, 1))
    f = lambda: float(np.sum(global_avg_pool(x) * g))
    assert rel_error(global_avg_pool_backward(x.shape, g), numeric_grad(f, x)) < 1e-4


def test_dense_values():
    x = np.random.default_rng(0).standard_normal((3, 4))
    np.testing.assert_array_equal(dense_forward(x, np.eye(4), np.zeros(4)), x)
    assert dense_forward(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]]), np.array([5.0])).tolist() == [[16.0]]
    with pytest.raises(ValueError):
        dense_forward(np.ones((1, 3)), np.ones((2, 4)), np.zeros(2))


@pytest.mark.parametrize("seed", range(5))
def test_dense_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 5))
    w = rng.standard_normal((2, 5))
    b = rng.standard_normal(2)
    g = rng.standard_normal((3, 2))
    f = lambda: float(np.sum(dense_forward(x, w, b) * g))
    gx, gw, gb = dense_backward(x, w, g)
    assert rel_error(gx, numeric_grad(f, x)) < 1e-4
    assert rel_error(gw, numeric_grad(f, w)) < 1e-4
    assert rel_error(gb, numeric_grad(f, b)) < 1e-4


# -- softmax cross entropy -------------------------------------------------------

def test_softmax_ce_uniform():
    loss, probs, _ = softmax_cross_entropy(np.zeros((1, 2)), [0])
    np.testing.assert_allclose(probs, [[0.5, 0.5]])
    assert loss == pytest.approx(math.log(2), abs=1e-6)


def test_softmax_ce_is_stable():
    loss, probs, grad = softmax_cross_entropy(np.array([[1000.0, 0.0]]), [0])
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(probs)) and np.all(np.isfinite(grad))


@pytest.mark.parametrize("seed", range(5))
def test_softmax_ce_finite_differences(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((4, 2)) * 3
    labels = rng.integers(0, 2, 4)
    loss, probs, grad = softmax_cross_entropy(logits, labels)
    assert np.all(np.abs(probs.sum(axis=1) - 1) < 1e-9) and np.all(probs > 0)
    f = lambda: softmax_cross_entropy(logits, labels)[0]
    assert rel_error(grad, numeric_grad(f, logits)) < 1e-4


# -- adam ------------------------------------------------------------------------

def test_adam_zero_grad_keeps_params():
    p = [np.array([1.0, -2.0])]
    adam_step(p, [np.zeros(2)], AdamState())
    np.testing.assert_array_equal(p[0], [1.0, -2.0])


def test_adam_first_step():
    p = [np.array([0.0])]
    adam_step(p, [np.array([0.5])], AdamState(lr=1e-3))
    assert abs(p[0][0] + 0.001) < 1e-8


def test_adam_two_steps_match_scalar_recurrence():
    g, lr, b1, b2, eps = 0.3, 1e-2, 0.9, 0.999, 1e-8
    p_ref, m, v = 1.0, 0.0, 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p_ref -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    p = [np.array([1.0])]
    state = AdamState(lr=lr)
    for _ in range(2):
        adam_step(p, [np.array([g])], state)
    assert state.t == 2
    assert abs(p[0][0] - p_ref) < 1e-12


def test_adam_zero_lr_is_identity():
    rng = np.random.default_rng(0)
    p = [rng.standard_normal((3, 3))]
    before = p[0].copy()
    state = AdamState(lr=0.0)
    for _ in range(3):
        adam_step(p, [rng.standard_normal((3, 3))], state)
    np.testing.assert_array_equal(p[0], before)
    assert np.all(state.v[0] >= 0)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step([np.zeros(2)], [np.zeros(3)], AdamState())


# -- serialization ---------------------------------------------------------------

def _small_model():
    return build_model(ArchitectureSpec(input_dims=(2, 32, 16), stages=((4, 3, 2), (8, 3, 2))), seed=3)


def test_model_roundtrip_bit_identical(tmp_path):
    model = _small_model()
    x = np.random.default_rng(0).standard_normal((6, 2, 32, 16)).astype(np.float32)
    model.forward(x, train=True)  # moves running stats off their defaults
    save_model(model, tmp_path / "m.elsm")
    loaded = load_model(tmp_path / "m.elsm")
    np.testing.assert_array_equal(model.forward(x), loaded.forward(x))
    assert loaded.describe() == model.describe()
    assert loaded.arch == model.arch


def test_model_truncated_file_fails_checksum():
    blob = model_to_bytes(_small_model())
    with pytest.raises(FormatError, match="checksum"):
        model_from_bytes(blob[:-1])


def test_model_old_version_rejected():
    blob = bytearray(model_to_bytes(_small_model()))
    blob[4:8] = (0).to_bytes(4, "little")
    with pytest.raises(FormatError, match="unsupported version"):
        model_from_bytes(bytes(blob))
