import numpy as np
import pytest

from src import tensorcore as tc
from src.errors import ContractError
from src.tensorcore import Tensor


def _weighted(op, shape, seed=0):
    weights = np.random.default_rng(seed).standard_normal(shape)
    return lambda x: tc.sum_all(tc.mul(op(x), Tensor(weights)))


@pytest.mark.parametrize("name, op, shape", [
    ("tanh", tc.tanh, (2, 3)),
    ("sigmoid", tc.sigmoid, (2, 3)),
    ("silu", tc.silu, (2, 3)),
    ("softplus", tc.softplus, (2, 3)),
    ("gelu", tc.gelu, (2, 3)),
    ("exp", tc.exp, (2, 3)),
    ("softmax", tc.softmax_lastdim, (2, 4)),
    ("layer_norm", tc.layer_norm, (3, 5)),
    ("transpose", tc.transpose, (2, 3, 4)),
    ("flip_time", tc.flip_time, (1, 4, 2)),
    ("mean_over_time", lambda x: tc.expand_time(tc.mean_over_time(x), 4), (2, 4, 3)),
    ("replicate_pad", lambda x: tc.pad_time(x, 2, 1, mode="replicate"), (1, 4, 2)),
    ("slice", lambda x: tc.slice_lastdim(x, 1, 3), (2, 4)),
])
def test_primitive_gradients(name, op, shape):
    x = np.random.default_rng(7).standard_normal(shape)
    probe = op(Tensor(x))
    report = tc.grad_check(_weighted(op, probe.shape), Tensor(x))
    assert report.passed, f"{name}: {report.max_rel_error:.2e}"


def test_matmul_gradient_both_sides():
    rng = np.random.default_rng(3)
    b = tc.parameter(rng.standard_normal((4, 3)))
    report = tc.grad_check(_weighted(lambda x: tc.matmul(x, b), (2, 5, 3)), Tensor(rng.standard_normal((2, 5, 4))))
    assert report.passed


@pytest.mark.parametrize("groups, stride", [(1, 1), (1, 2), (3, 1)])
def test_conv1d_gradient(groups, stride):
    rng = np.random.default_rng(5)
    weight = Tensor(rng.standard_normal((3, 3 // groups, 3)))
    bias = Tensor(rng.standard_normal(3))
    op = lambda x: tc.conv1d(x, weight, bias, stride=stride, groups=groups)  # noqa: E731
    x = rng.standard_normal((2, 8, 3))
    report = tc.grad_check(_weighted(op, op(Tensor(x)).shape), Tensor(x))
    assert report.passed


def test_layer_norm_parameter_gradients():
    rng = np.random.default_rng(11)
    x = Tensor(rng.standard_normal((2, 3, 5)))
    shift = Tensor(rng.standard_normal(5))
    report = tc.grad_check(_weighted(lambda s: tc.layer_norm(x, s, shift), (2, 3, 5)),
                           Tensor(rng.standard_normal(5)))
    assert report.passed


def test_masked_cross_entropy_gradient():
    rng = np.random.default_rng(2)
    targets = rng.integers(6, size=(2, 5))
    mask = rng.random((2, 5)) < 0.5
    mask[0, 0] = True
    report = tc.grad_check(lambda x: tc.masked_cross_entropy(x, targets, mask), Tensor(rng.standard_normal((2, 5, 6))))
    assert report.passed


def test_perturbed_analytic_gradient_is_caught():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3)))
    report = tc.grad_check(_weighted(tc.tanh, (2, 3)), x, analytic_hook=lambda g: g * 1.01)
    assert not report.passed
    assert report.max_rel_error > 1e-3


def test_grad_check_requires_scalar_function():
    with pytest.raises(ContractError):
        tc.grad_check(tc.tanh, Tensor(np.ones((2, 2))))
