"""Forward values, error contracts, and gradient checks for every op."""

import numpy as np
import pytest

from seralign import autodiff as ad
from seralign.autodiff import Tensor
from seralign.errors import DimensionError, InputError, LabelError, NumericError
from seralign.gradcheck import grad_check


class TestForwardValues:
    def test_softmax_uniform_logits(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_tanh_origin_value_and_gradient(self):
        x = Tensor(np.zeros(()), requires_grad=True)
        y = ad.tanh(x)
        y.backward()
        assert y.data == 0.0
        assert x.grad == 1.0

    def test_cross_entropy_uniform_two_class(self):
        # uniform logits over 2 classes -> ln 2 regardless of the label
        for label in (0, 1):
            loss = ad.cross_entropy(Tensor([[0.0, 0.0]]), np.array([label]))
            np.testing.assert_allclose(loss.data, [np.log(2.0)], atol=1e-12)

    def test_softmax_rows_sum_to_one_double(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(0, 5, size=(40, 17)))
        out = ad.softmax(x, axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_softmax_rows_sum_to_one_single(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(0, 5, size=(40, 17)).astype(np.float32))
        out = ad.softmax(x, axis=-1)
        assert out.data.dtype == np.float32
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_matmul_matches_numpy(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
        np.testing.assert_array_equal(ad.matmul(Tensor(a), Tensor(b)).data, a @ b)

    def test_where_selects_elementwise(self):
        mask = np.array([True, False, True])
        out = ad.where(mask, Tensor([1.0, 1.0, 1.0]), Tensor([2.0, 2.0, 2.0]))
        np.testing.assert_array_equal(out.data, [1.0, 2.0, 1.0])

    def test_embedding_looks_up_rows(self):
        table = Tensor(np.arange(12.0).reshape(4, 3))
        out = ad.embedding(table, np.array([2, 0]))
        np.testing.assert_array_equal(out.data, [[6.0, 7.0, 8.0], [0.0, 1.0, 2.0]])

    def test_conv1d_stride_arithmetic(self):
        # length 10, kernel 3, stride 2 -> (10 - 3) // 2 + 1 = 4 frames
        x = Tensor(np.ones((1, 1, 10)))
        w = Tensor(np.ones((2, 1, 3)))
        b = Tensor(np.zeros(2))
        out = ad.conv1d(x, w, b, stride=2)
        assert out.shape == (1, 2, 4)
        np.testing.assert_allclose(out.data, 3.0)

    def test_layer_norm_zero_mean_unit_variance(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(2.0, 3.0, size=(6, 16)))
        out = ad.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-4)


class TestErrorContracts:
    def test_matmul_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError) as err:
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)

    def test_add_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError) as err:
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
        assert "(2, 3)" in str(err.value) and "(4,)" in str(err.value)

    def test_non_finite_output_names_the_op(self):
        with np.errstate(over="ignore"):
            with pytest.raises(NumericError) as err:
                ad.mul(Tensor([1e308]), Tensor([1e308]))
        assert "mul" in str(err.value)

    def test_cross_entropy_label_out_of_range(self):
        with pytest.raises(LabelError):
            ad.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_cross_entropy_length_mismatch(self):
        with pytest.raises(DimensionError):
            ad.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 1, 2]))

    def test_embedding_index_out_of_range(self):
        with pytest.raises(InputError):
            ad.embedding(Tensor(np.zeros((4, 2))), np.array([4]))

    def test_conv1d_input_shorter_than_kernel(self):
        with pytest.raises(DimensionError) as err:
            ad.conv1d(Tensor(np.zeros((1, 1, 2))), Tensor(np.zeros((1, 1, 5))), Tensor(np.zeros(1)))
        assert "shorter" in str(err.value)

    def test_backward_requires_scalar(self):
        with pytest.raises(InputError):
            ad.tanh(Tensor(np.zeros(3), requires_grad=True)).backward()

    def test_finite_checks_can_be_toggled(self):
        previous = ad.set_finite_checks(False)
        try:
            with np.errstate(over="ignore"):
                out = ad.mul(Tensor([1e308]), Tensor([1e308]))
            assert np.isinf(out.data[0])
        finally:
            ad.set_finite_checks(previous)


def _make_projection(seed):
    """Scalar objective: projection coefficients frozen on first use so the
    objective is the same deterministic function at every evaluation."""
    store = {}

    def project(op_output):
        if "coeff" not in store:
            store["coeff"] = np.random.default_rng(seed).normal(size=op_output.shape)
        return ad.reduce_sum(ad.mul(op_output, Tensor(store["coeff"])))

    return project


GRAD_TRIALS = 20
GRAD_TOL = 1e-4


class TestGradients:
    """Every differentiable op against the central-difference oracle."""

    def test_add_mul_broadcast(self):
        rng = np.random.default_rng(10)
        for _ in range(GRAD_TRIALS):
            a = Tensor(rng.normal(size=(3, 4)))
            b = Tensor(rng.normal(size=(4,)))

            project = _make_projection(0)

            def f(params):
                return project(ad.mul(ad.add(params[0], params[1]), params[0]))

            assert grad_check(f, [a, b]) < GRAD_TOL

    def test_matmul(self):
        rng = np.random.default_rng(11)
        for _ in range(GRAD_TRIALS):
            a = Tensor(rng.normal(size=(2, 3, 4)))
            b = Tensor(rng.normal(size=(4, 5)))

            project = _make_projection(1)

            def f(params):
                return project(ad.matmul(params[0], params[1]))

            assert grad_check(f, [a, b]) < GRAD_TOL

    def test_tanh(self):
        rng = np.random.default_rng(12)
        for _ in range(GRAD_TRIALS):
            x = Tensor(rng.normal(size=(5, 3)))

            project = _make_projection(2)

            def f(params):
                return project(ad.tanh(params[0]))

            assert grad_check(f, [x]) < GRAD_TOL

    def test_softmax(self):
        rng = np.random.default_rng(13)
        for _ in range(GRAD_TRIALS):
            x = Tensor(rng.normal(size=(4, 6)))

            project = _make_projection(3)

            def f(params):
                return project(ad.softmax(params[0], axis=-1))

            assert grad_check(f, [x]) < GRAD_TOL

    def test_layer_norm(self):
        rng = np.random.default_rng(14)
        for _ in range(GRAD_TRIALS):
            x = Tensor(rng.normal(size=(3, 8)))
            gain = Tensor(rng.normal(size=8))
            bias = Tensor(rng.normal(size=8))

            project = _make_projection(4)

            def f(params):
                return project(ad.layer_norm(params[0], params[1], params[2]))

            assert grad_check(f, [x, gain, bias]) < GRAD_TOL

    def test_conv1d(self):
        rng = np.random.default_rng(15)
        for trial in range(GRAD_TRIALS):
            stride = 1 + trial % 3
            x = Tensor(rng.normal(size=(2, 2, 11)))
            w = Tensor(rng.normal(size=(3, 2, 4)))
            b = Tensor(rng.normal(size=3))

            project = _make_projection(5)

            def f(params, stride=stride):
                return project(ad.conv1d(params[0], params[1], params[2], stride))

            assert grad_check(f, [x, w, b]) < GRAD_TOL

    def test_embedding(self):
        rng = np.random.default_rng(16)
        for _ in range(GRAD_TRIALS):
            table = Tensor(rng.normal(size=(6, 4)))
            ids = rng.integers(0, 6, size=9)

            project = _make_projection(6)

            def f(params, ids=ids):
                return project(ad.embedding(params[0], ids))

            assert grad_check(f, [table]) < GRAD_TOL

    def test_cross_entropy(self):
        rng = np.random.default_rng(17)
        for _ in range(GRAD_TRIALS):
            logits = Tensor(rng.normal(size=(7, 5)))
            labels = rng.integers(0, 5, size=7)

            def f(params, labels=labels):
                return ad.mean(ad.cross_entropy(params[0], labels))

            assert grad_check(f, [logits]) < GRAD_TOL

    def test_where(self):
        rng = np.random.default_rng(18)
        for _ in range(GRAD_TRIALS):
            mask = rng.random((4, 5)) < 0.5
            a = Tensor(rng.normal(size=(4, 5)))
            b = Tensor(rng.normal(size=(5,)))

            project = _make_projection(7)

            def f(params, mask=mask):
                return project(ad.where(mask, params[0], params[1]))

            assert grad_check(f, [a, b]) < GRAD_TOL

    def test_mean_and_sum(self):
        rng = np.random.default_rng(19)
        for axis in (None, 0, 1, (0, 1)):
            for _ in range(GRAD_TRIALS // 4):
                x = Tensor(rng.normal(size=(3, 4)))

                project = _make_projection(8)

                def f(params, axis=axis):
                    reduced = ad.mean(params[0], axis=axis)
                    summed = ad.reduce_sum(params[0], axis=axis)
                    return ad.reduce_sum(project(reduced) + ad.reduce_sum(summed))

                assert grad_check(f, [x]) < GRAD_TOL

    def test_reshape_transpose(self):
        rng = np.random.default_rng(20)
        for _ in range(GRAD_TRIALS):
            x = Tensor(rng.normal(size=(2, 3, 4)))

            project = _make_projection(9)

            def f(params):
                y = ad.transpose(ad.reshape(params[0], (6, 4)), (1, 0))
                return project(y)

            assert grad_check(f, [x]) < GRAD_TOL

    def test_gradient_accumulates_across_reuse(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = ad.reduce_sum(ad.add(ad.mul(x, x), x))  # x^2 + x -> grad 2x + 1 = 5
        y.backward()
        np.testing.assert_allclose(x.grad, [5.0])
