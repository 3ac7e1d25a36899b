import numpy as np
import pytest

from errors import ShapeError, StaleCacheError
from nn import Adam, Conv2d, GlobalAvgPool, Linear, Parameter, SiLU, Upsample2x

def _numeric_input_gradient(layer, x, projection, h=1e-6):
    grad = np.zeros_like(x)
    flat, out = x.reshape(-1), grad.reshape(-1)
    for index in range(flat.size):
        original = flat[index]
        flat[index] = original + h
        plus = np.sum(projection * layer.forward(x))
        flat[index] = original - h
        minus = np.sum(projection * layer.forward(x))
        flat[index] = original
        out[index] = (plus - minus) / (2.0 * h)
    return grad

@pytest.mark.parametrize("layer, shape", [
    (Conv2d(2, 3, rng=np.random.default_rng(0), dtype=np.float64), (2, 2, 5, 5)),
    (Conv2d(2, 3, stride=2, rng=np.random.default_rng(1), dtype=np.float64), (1, 2, 5, 6)),
    (Conv2d(3, 2, kernel_size=1, rng=np.random.default_rng(2), dtype=np.float64), (2, 3, 4, 4)),
    (SiLU(), (2, 3, 4, 4)),
    (Upsample2x(), (1, 2, 3, 3)),
    (GlobalAvgPool(), (2, 3, 4, 5)),
    (Linear(4, 3, rng=np.random.default_rng(3), dtype=np.float64), (5, 4)),
])
def test_input_gradients_match_finite_differences(layer, shape):
    rng = np.random.default_rng(4)
    x = rng.standard_normal(shape)
    projection = rng.standard_normal(layer.forward(x).shape)
    analytic = layer.backward(projection)
    np.testing.assert_allclose(analytic, _numeric_input_gradient(layer, x.copy(), projection), rtol=1e-5, atol=1e-7)

def test_conv_parameter_gradients():
    rng = np.random.default_rng(5)
    conv = Conv2d(2, 3, stride=2, rng=rng, dtype=np.float64)
    x = rng.standard_normal((2, 2, 6, 5))
    projection = rng.standard_normal(conv.forward(x).shape)
    conv.backward(projection)
    for parameter in (conv.weight, conv.bias):
        flat = parameter.value.reshape(-1)
        for index in range(flat.size):
            original = flat[index]
            flat[index] = original + 1e-6
            plus = np.sum(projection * conv.forward(x))
            flat[index] = original - 1e-6
            minus = np.sum(projection * conv.forward(x))
            flat[index] = original
            np.testing.assert_allclose(parameter.grad.reshape(-1)[index], (plus - minus) / 2e-6, rtol=1e-5, atol=1e-7)

def test_conv_matches_direct_loop():
    rng = np.random.default_rng(6)
    conv = Conv2d(2, 1, rng=rng, dtype=np.float64)
    x = rng.standard_normal((1, 2, 4, 4))
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            expected[i, j] = np.sum(padded[0, :, i:i + 3, j:j + 3] * conv.weight.value[0]) + conv.bias.value[0]
    np.testing.assert_allclose(conv.forward(x)[0, 0], expected, atol=1e-12)

def test_conv_stride_two_rounds_up():
    conv = Conv2d(1, 1, stride=2)
    assert conv.forward(np.zeros((1, 1, 5, 7), dtype=np.float32)).shape == (1, 1, 3, 4)
    assert conv.output_size(5, 7) == (3, 4)
    assert conv.flops(5, 7) == 2 * 9 * 12

def test_zero_gradient_gives_zero_parameter_gradients():
    conv = Conv2d(2, 3, dtype=np.float64)
    out = conv.forward(np.ones((1, 2, 4, 4)))
    conv.backward(np.zeros_like(out))
    assert not conv.weight.grad.any() and not conv.bias.grad.any()

def test_backward_without_forward():
    with pytest.raises(StaleCacheError):
        SiLU().backward(np.zeros(3))
    conv = Conv2d(1, 1)
    conv.forward(np.zeros((1, 1, 3, 3), dtype=np.float32))
    conv.backward(np.zeros((1, 1, 3, 3), dtype=np.float32))
    with pytest.raises(StaleCacheError):
        conv.backward(np.zeros((1, 1, 3, 3), dtype=np.float32))

def test_conv_rejects_wrong_channels():
    with pytest.raises(ShapeError):
        Conv2d(3, 4).forward(np.zeros((1, 2, 4, 4), dtype=np.float32))

def test_adam_first_step_moves_by_learning_rate():
    parameter = Parameter(np.array([1.0, -2.0, 0.5]))
    parameter.grad = np.array([0.3, -4.0, 0.0])
    optimizer = Adam(dict(p=parameter), lr=0.1)
    optimizer.step()
    np.testing.assert_allclose(parameter.value, [0.9, -1.9, 0.5], atol=1e-6)
    assert optimizer.step_count == 1

def test_adam_state_round_trip():
    rng = np.random.default_rng(7)
    first = Parameter(rng.standard_normal(4))
    optimizer = Adam(dict(p=first), lr=0.01)
    for _ in range(3):
        first.grad = rng.standard_normal(4)
        optimizer.step()

    second = Parameter(first.value.copy())
    restored = Adam(dict(p=second), lr=0.01)
    restored.load_state_dict(optimizer.state_dict(), optimizer.step_count)
    grad = rng.standard_normal(4)
    first.grad, second.grad = grad, grad.copy()
    optimizer.step()
    restored.step()
    np.testing.assert_array_equal(first.value, second.value)
