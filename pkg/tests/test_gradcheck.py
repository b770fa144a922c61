"""The finite-difference checker on functions with known gradients."""

import numpy as np
import pytest

from seralign import autodiff as ad
from seralign.autodiff import Tensor
from seralign.errors import InputError, NumericError
from seralign.gradcheck import finite_difference_gradient, grad_check


def test_quadratic_at_three():
    # f(x) = x^2 at x = 3: analytic 6, central difference 6 exactly
    x = Tensor(np.array([3.0]))

    def f(params):
        return ad.reduce_sum(ad.mul(params[0], params[0]))

    assert grad_check(f, [x]) < 1e-9
    numeric = finite_difference_gradient(f, [x])[0]
    np.testing.assert_allclose(numeric, [6.0], atol=1e-6)


def test_constant_function_zero_error_under_floor():
    x = Tensor(np.array([1.0, -2.0]))

    def f(params):
        return Tensor(np.zeros(())) + ad.reduce_sum(ad.mul(params[0], 0.0))

    assert grad_check(f, [x]) == 0.0


def test_parameters_restored_after_check():
    x = Tensor(np.array([1.5, -0.5]))
    before = x.data.copy()

    def f(params):
        return ad.reduce_sum(ad.tanh(params[0]))

    grad_check(f, [x])
    np.testing.assert_array_equal(x.data, before)


def test_dict_parameter_container():
    params = {"a": Tensor(np.array([2.0])), "b": Tensor(np.array([5.0]))}

    def f(p):
        return ad.reduce_sum(ad.mul(p["a"], p["b"]))

    assert grad_check(f, params) < 1e-9


def test_non_finite_objective_raises():
    x = Tensor(np.array([1.0]))

    def f(params):
        return Tensor(np.array(np.inf))

    with pytest.raises(NumericError):
        grad_check(f, [x])


def test_non_tensor_objective_rejected():
    with pytest.raises(InputError):
        grad_check(lambda p: 3.0, [Tensor(np.zeros(2))])
