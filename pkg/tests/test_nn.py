import math

import numpy as np
import pytest

from conftest import numeric_grad
from core import nn
from core.arch import build, tiny_cnn_bn, tiny_mlp
from core.errors import DataError, EngineStateError, NonFiniteError, ShapeError
from core.models import DType, ModelParams


def check_layer_gradients(layer: nn.Layer, x: np.ndarray, training: bool = True, tol: float = 1e-5):
    rng = np.random.default_rng(0)
    upstream = rng.standard_normal(layer.forward(x, training).shape)

    def objective() -> float:
        return float(np.sum(layer.forward(x, training) * upstream))

    numeric_dx = numeric_grad(objective, x)
    numeric_dp = [numeric_grad(objective, p) for p in layer.params]

    layer.forward(x, training)
    dx = layer.backward(upstream)
    np.testing.assert_allclose(dx, numeric_dx, rtol=tol, atol=tol)
    for analytic, numeric in zip(layer.grads, numeric_dp):
        np.testing.assert_allclose(analytic, numeric, rtol=tol, atol=tol)


def test_dense_gradients():
    rng = np.random.default_rng(1)
    check_layer_gradients(nn.Dense(5, 3, rng=rng), rng.standard_normal((4, 5)))


def test_dense_without_bias_gradients():
    rng = np.random.default_rng(2)
    layer = nn.Dense(3, 2, bias=False, rng=rng)
    assert len(layer.params) == 1
    check_layer_gradients(layer, rng.standard_normal((2, 3)))


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradients(stride, padding):
    rng = np.random.default_rng(3)
    layer = nn.Conv2d(2, 3, kernel_size=3, stride=stride, padding=padding, rng=rng)
    check_layer_gradients(layer, rng.standard_normal((2, 2, 5, 5)))


def test_maxpool_gradients():
    rng = np.random.default_rng(4)
    check_layer_gradients(nn.MaxPool2d(2), rng.standard_normal((2, 3, 4, 4)))


def test_maxpool_with_padding_gradients():
    rng = np.random.default_rng(5)
    check_layer_gradients(nn.MaxPool2d(3, stride=2, padding=1), rng.standard_normal((1, 2, 5, 5)))


def test_relu_and_flatten_gradients():
    rng = np.random.default_rng(6)
    check_layer_gradients(nn.ReLU(), rng.standard_normal((3, 7)))
    check_layer_gradients(nn.Flatten(), rng.standard_normal((2, 2, 3, 3)))


def test_batchnorm_training_gradients():
    rng = np.random.default_rng(7)
    layer = nn.BatchNorm2d(3)
    layer.gamma[...] = rng.uniform(0.5, 1.5, 3)
    layer.beta[...] = rng.standard_normal(3)
    check_layer_gradients(layer, rng.standard_normal((4, 3, 3, 3)))


def test_batchnorm_inference_gradients():
    rng = np.random.default_rng(8)
    layer = nn.BatchNorm2d(2)
    layer.running_mean[...] = [0.3, -0.2]
    layer.running_var[...] = [1.5, 0.7]
    check_layer_gradients(layer, rng.standard_normal((3, 2, 2, 2)), training=False)


def test_batchnorm_running_statistics_update():
    layer = nn.BatchNorm2d(1, momentum=0.1)
    x = np.arange(8, dtype=np.float64).reshape(2, 1, 2, 2)
    layer.forward(x, training=True)
    # mean 3.5, unbiased variance 6.0
    assert layer.running_mean[0] == pytest.approx(0.35)
    assert layer.running_var[0] == pytest.approx(0.9 * 1.0 + 0.1 * 6.0)


def test_batchnorm_inference_leaves_running_statistics():
    layer = nn.BatchNorm2d(2)
    layer.forward(np.ones((2, 2, 2, 2)), training=False)
    np.testing.assert_array_equal(layer.running_mean, [0.0, 0.0])
    np.testing.assert_array_equal(layer.running_var, [1.0, 1.0])


def test_frozen_batchnorm_statistics_still_normalise_with_the_batch():
    model = build(tiny_cnn_bn(num_classes=3, input_shape=(1, 4, 4)), seed=2)
    before = model.get_params().values.copy()
    model.set_track_running_stats(False)
    x = np.arange(32, dtype=np.float64).reshape(2, 1, 4, 4)
    frozen_logits = model.forward(x, training=True)
    np.testing.assert_array_equal(model.get_params().values, before)

    model.set_track_running_stats(True)
    tracked_logits = model.forward(x, training=True)
    np.testing.assert_array_equal(frozen_logits, tracked_logits)
    assert not np.array_equal(model.get_params().values, before)


def test_model_gradients_against_finite_differences():
    model = build(tiny_cnn_bn(num_classes=3, input_shape=(1, 4, 4)), seed=11)
    rng = np.random.default_rng(12)
    x = rng.standard_normal((5, 1, 4, 4))
    labels = np.array([0, 1, 2, 1, 0])

    def objective() -> float:
        return nn.cross_entropy(model.forward(x, training=True), labels)

    numeric = [numeric_grad(objective, p) for p in model.parameters()]
    model.forward(x, training=True)
    analytic = model.backward(labels)
    for a, n in zip(analytic, numeric):
        np.testing.assert_allclose(a, n, rtol=1e-5, atol=1e-6)


def test_cross_entropy_of_uniform_logits():
    logits = np.zeros((3, 4))
    assert nn.cross_entropy(logits, [0, 1, 3]) == pytest.approx(math.log(4))


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    logits = np.array([[2.0, 0.0], [0.0, 0.0]])
    grad = nn.cross_entropy_grad(logits, [0, 1])
    p = 1.0 / (1.0 + math.exp(-2.0))
    expected = np.array([[p - 1.0, 1.0 - p], [0.5, -0.5]]) / 2
    np.testing.assert_allclose(grad, expected)


def test_cross_entropy_is_stable_for_large_logits():
    loss = nn.cross_entropy(np.array([[1000.0, 0.0]]), [0])
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(DataError):
        nn.cross_entropy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ShapeError):
        nn.cross_entropy(np.zeros((2, 3)), [0])


def _scalar_model(weight: float, grad: float) -> nn.Sequential:
    model = nn.Sequential([nn.Dense(1, 1, bias=False)], input_shape=(1,))
    model.parameters()[0][...] = weight
    model.gradients()[0][...] = grad
    return model


def test_sgd_momentum_two_steps():
    model = _scalar_model(1.0, 0.5)
    opt = nn.SgdMomentum(learning_rate=0.1, momentum=0.9)
    opt.step(model)
    assert model.parameters()[0][0, 0] == pytest.approx(0.95)
    opt.step(model)
    # v = 0.9 * 0.5 + 0.5 = 0.95
    assert model.parameters()[0][0, 0] == pytest.approx(0.855)


def test_sgd_zero_learning_rate_is_identity():
    model = _scalar_model(1.25, 3.0)
    nn.SgdMomentum(learning_rate=0.0, momentum=0.9).step(model)
    assert model.parameters()[0][0, 0] == 1.25


def test_sgd_reset_drops_velocity():
    model = _scalar_model(1.0, 1.0)
    opt = nn.SgdMomentum(learning_rate=0.1, momentum=0.5)
    opt.step(model)
    opt.reset()
    opt.step(model)
    assert model.parameters()[0][0, 0] == pytest.approx(0.8)


@pytest.mark.parametrize("lr,mu", [(-0.1, 0.0), (0.1, 1.0), (0.1, -0.2)])
def test_sgd_rejects_invalid_hyperparameters(lr, mu):
    with pytest.raises(ValueError):
        nn.SgdMomentum(lr, mu)


def test_backward_before_forward_raises():
    model = build(tiny_mlp(), seed=0)
    with pytest.raises(EngineStateError):
        model.backward([0])
    with pytest.raises(EngineStateError):
        nn.Dense(2, 2).backward(np.zeros((1, 2)))


def test_forward_checks_input_shape():
    model = build(tiny_mlp(input_shape=(16,)), seed=0)
    with pytest.raises(ShapeError):
        model.forward(np.zeros((2, 15)))


def test_non_finite_input_raises():
    model = build(tiny_mlp(), seed=0)
    x = np.zeros((1, 16))
    x[0, 0] = np.inf
    with pytest.raises(NonFiniteError):
        model.forward(x)


def test_same_seed_builds_identical_weights():
    a = build(tiny_cnn_bn(), seed=5).get_params()
    b = build(tiny_cnn_bn(), seed=5).get_params()
    c = build(tiny_cnn_bn(), seed=6).get_params()
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_initialisation_bounds():
    layer = nn.Dense(25, 10, rng=np.random.default_rng(0))
    assert np.all(np.abs(layer.weight) <= 0.2)
    assert np.all(np.abs(layer.bias) <= 0.2)


def test_get_and_set_params_carry_batchnorm_buffers():
    model = build(tiny_cnn_bn(), seed=0)
    params = model.get_params()
    assert params.param_count == 2156
    assert model.trainable_count == 2140

    shifted = ModelParams(arch_name=params.arch_name, dtype=DType.FLOAT64, values=params.values + 1.0)
    model.set_params(shifted)
    np.testing.assert_array_equal(model.get_params().values, params.values + 1.0)


def test_set_params_rejects_wrong_count():
    model = build(tiny_mlp(), seed=0)
    with pytest.raises(ShapeError):
        model.set_params(ModelParams(arch_name="tiny_mlp", dtype=DType.FLOAT64, values=np.zeros(10)))


def test_float32_model_keeps_float32():
    model = build(tiny_mlp(), seed=0, dtype=DType.FLOAT32)
    out = model.forward(np.ones((2, 16)))
    assert out.dtype == np.float32
    assert model.get_params().dtype == DType.FLOAT32


def test_small_forward_examples():
    dense = nn.Dense(2, 2)
    dense.weight[...] = np.eye(2)
    dense.bias[...] = 0.0
    np.testing.assert_array_equal(dense.forward(np.array([[3.0, 4.0]])), [[3.0, 4.0]])
    np.testing.assert_array_equal(nn.ReLU().forward(np.array([[-1.0, 2.0]])), [[0.0, 2.0]])
    plane = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    assert nn.MaxPool2d(2).forward(plane).reshape(-1).tolist() == [4.0]


def test_cross_entropy_of_confident_prediction():
    assert nn.cross_entropy(np.array([[10.0, -10.0]]), [0]) == pytest.approx(2.06e-9, rel=1e-2)
    one = nn.cross_entropy(np.array([[0.3, -1.2]]), [1])
    two = nn.cross_entropy(np.array([[0.3, -1.2], [0.3, -1.2]]), [1, 1])
    assert one == pytest.approx(two)


def test_zero_upstream_gradient_gives_zero_parameter_gradients():
    layer = nn.Dense(3, 2, rng=np.random.default_rng(0))
    layer.forward(np.ones((2, 3)))
    layer.backward(np.zeros((2, 2)))
    assert all(not np.any(g) for g in layer.grads)


def test_plain_sgd_step():
    model = _scalar_model(1.0, 2.0)
    nn.SgdMomentum(learning_rate=0.5, momentum=0.0).step(model)
    assert model.parameters()[0][0, 0] == 0.0


def test_momentum_with_unit_gradient():
    model = _scalar_model(1.0, 1.0)
    opt = nn.SgdMomentum(learning_rate=0.1, momentum=0.9)
    opt.step(model)
    assert model.parameters()[0][0, 0] == pytest.approx(0.9)
    opt.step(model)
    assert model.parameters()[0][0, 0] == pytest.approx(0.71)


def test_zero_gradient_leaves_weights_and_decays_velocity():
    model = _scalar_model(1.0, 1.0)
    opt = nn.SgdMomentum(learning_rate=0.1, momentum=0.9)
    opt.step(model)
    model.gradients()[0][...] = 0.0
    before = model.parameters()[0].copy()
    opt.step(model)
    assert opt.velocity[0][0, 0] == pytest.approx(0.9)
    assert model.parameters()[0][0, 0] == pytest.approx(before[0, 0] - 0.09)
    frozen = _scalar_model(2.0, 0.0)
    nn.SgdMomentum(learning_rate=0.1, momentum=0.9).step(frozen)
    assert frozen.parameters()[0][0, 0] == 2.0


def test_loss_decreases_on_separable_toy_set():
    rng = np.random.default_rng(3)
    x = np.concatenate([rng.normal(-2.0, 0.5, (20, 2)), rng.normal(2.0, 0.5, (20, 2))])
    y = np.array([0] * 20 + [1] * 20)
    model = nn.Sequential([nn.Dense(2, 2, rng=rng)], input_shape=(2,))
    opt = nn.SgdMomentum(learning_rate=0.1, momentum=0.9)
    start = nn.cross_entropy(model.forward(x), y)
    for _ in range(100):
        model.forward(x)
        model.backward(y)
        opt.step(model)
    assert nn.cross_entropy(model.forward(x), y) < start
