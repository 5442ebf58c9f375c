import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsereid.numerics import (
    ContractError,
    ShapeError,
    Tensor,
    concat,
    gelu,
    gradcheck,
    layer_norm,
    log_softmax_rows,
    matmul,
    no_grad,
    softmax_rows,
    tape,
    take_tokens,
    where,
)


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        out = matmul(Tensor(np.eye(2)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_hand_product(self):
        out = matmul(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])), Tensor(np.array([[5.0], [6.0]])))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient(self, rng):
        a, b = param(rng, 3, 4), param(rng, 4, 2)
        assert gradcheck(lambda: matmul(a, b).sum(), [a, b], n_coords=20) <= 1e-6

    def test_batched_gradient(self, rng):
        a, b = param(rng, 2, 3, 4), param(rng, 4, 5)
        assert gradcheck(lambda: (matmul(a, b) ** 2).sum(), [a, b], n_coords=40) <= 1e-6


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(softmax_rows(Tensor(np.array([1.0, 1.0]))).data, [0.5, 0.5])

    def test_ln3(self):
        out = softmax_rows(Tensor(np.array([0.0, math.log(3.0)]), dtype=np.float64))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-15)

    def test_large_inputs_stable(self):
        out = softmax_rows(Tensor(np.array([1000.0, 1000.0, -1000.0])))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [0.5, 0.5, 0.0])

    def test_gradient(self, rng):
        x = param(rng, 2, 5)
        w = rng.normal(size=(2, 5))
        assert gradcheck(lambda: (softmax_rows(x) * Tensor(w)).sum(), [x], n_coords=10) <= 1e-6

    def test_log_softmax_matches_log_of_softmax(self, rng):
        x = rng.normal(size=(4, 7))
        np.testing.assert_allclose(log_softmax_rows(Tensor(x)).data,
                                   np.log(softmax_rows(Tensor(x)).data), atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    def test_positive_and_normalised(self, values):
        out = softmax_rows(Tensor(np.array(values), dtype=np.float64)).data
        assert np.all(out > 0)
        assert abs(out.sum() - 1.0) <= 1e-6


class TestLayerNorm:
    def test_constant_slice_collapses_to_bias(self):
        out = layer_norm(Tensor(np.array([5.0, 5.0, 5.0])), Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-6)
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 0.0])

    def test_zero_gain_gives_bias(self, rng):
        bias = rng.normal(size=4)
        out = layer_norm(Tensor(rng.normal(size=(3, 4))), Tensor(np.zeros(4)), Tensor(bias), 1e-6)
        np.testing.assert_array_equal(out.data, np.broadcast_to(bias, (3, 4)))

    def test_standardises(self, rng):
        out = layer_norm(Tensor(rng.normal(3.0, 2.0, (5, 16))), Tensor(np.ones(16)),
                         Tensor(np.zeros(16)), 1e-12).data
        np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(-1), 1.0, atol=1e-9)

    def test_eps_must_be_positive(self):
        with pytest.raises(ContractError):
            layer_norm(Tensor(np.ones(2)), Tensor(np.ones(2)), Tensor(np.zeros(2)), 0.0)

    def test_gradient(self, rng):
        x, g, b = param(rng, 3, 6), param(rng, 6), param(rng, 6)
        w = Tensor(rng.normal(size=(3, 6)))
        assert gradcheck(lambda: (layer_norm(x, g, b, 1e-6) * w).sum(), [x, g, b],
                         n_coords=30) <= 1e-5


class TestBackward:
    def test_sum(self):
        w = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        w.sum().backward()
        np.testing.assert_array_equal(w.grad, [1.0, 1.0, 1.0])

    def test_square(self):
        w = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        (w * w).sum().backward()
        np.testing.assert_array_equal(w.grad, 2 * w.data)

    def test_non_scalar_root(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (w * 2.0).backward()

    def test_repeated_calls_accumulate(self):
        w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        loss = (w * w).sum()
        loss.backward()
        loss.backward()
        np.testing.assert_array_equal(w.grad, 4 * w.data)

    def test_unused_leaf_stays_zero(self):
        used = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones((2, 2)), requires_grad=True)
        (used * 3.0).sum().backward()
        np.testing.assert_array_equal(unused.grad, np.zeros((2, 2)))

    def test_shared_node_visited_once(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x
        z = (y + y).sum()
        order = tape(z)
        assert len(order) == len({id(n) for n in order})
        z.backward()
        np.testing.assert_array_equal(x.grad, [8.0])

    def test_tape_is_topological(self, rng):
        a, b = param(rng, 2, 2), param(rng, 2, 2)
        root = (matmul(a, b) + a).sum()
        order = tape(root)
        pos = {id(n): i for i, n in enumerate(order)}
        for node in order:
            for parent in node._parents:
                if id(parent) in pos:
                    assert pos[id(parent)] < pos[id(node)]

    def test_no_grad_records_nothing(self):
        w = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            out = (w * 2.0).sum()
        assert not out.requires_grad


class TestPrimitiveGradients:
    """Every differentiable primitive against central differences."""

    def test_elementwise(self, rng):
        a = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
        b = param(rng, 4)

        def fn():
            return ((a * b - b / a + a ** 3).exp().log() + a.sqrt() + (a - 1.0).tanh()
                    + (-b).relu() + 2.0 / a - 1.0 - a).sum()

        assert gradcheck(fn, [a, b], n_coords=16) <= 1e-4

    def test_reductions_and_views(self, rng):
        a = param(rng, 2, 3, 4)
        w = Tensor(rng.normal(size=(4, 3)))

        def fn():
            x = a.transpose(0, 2, 1).reshape(2, 4, 3) * w
            return (x.max(axis=-1).sum() + x.min(axis=1).sum() + x.mean(axis=0).sum()
                    + x[:, 1:].swapaxes(1, 2).sum(axis=(1, 2), keepdims=True).sum())

        assert gradcheck(fn, [a], n_coords=24) <= 1e-4

    def test_gelu_concat_where_take(self, rng):
        a, b = param(rng, 2, 3, 4), param(rng, 2, 2, 4)
        cond = rng.random((2, 5, 4)) < 0.5
        idx = np.array([[0, 2, 4], [1, 3, 0]])

        def fn():
            x = concat([gelu(a), b], axis=1)
            y = where(cond, x, x * x)
            return (take_tokens(y, idx) ** 2).sum()

        assert gradcheck(fn, [a, b], n_coords=40) <= 1e-4


class TestGelu:
    def test_tanh_approximation_values(self):
        out = gelu(Tensor(np.array([-1.0, 0.0, 1.0]), dtype=np.float64)).data
        k = math.sqrt(2.0 / math.pi)
        expected = [0.5 * v * (1 + math.tanh(k * (v + 0.044715 * v ** 3))) for v in (-1.0, 0.0, 1.0)]
        np.testing.assert_allclose(out, expected, rtol=1e-14)
        assert abs(out[2] - 0.8411920) < 1e-6
