"""Unit tests for the autodiff tensor core.

Gradient assertions use the central finite-difference oracle from
fewgraph.gradcheck; it evaluates forward passes only, so it is independent
of the tape under test.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewgraph import tensor as T
from fewgraph.gradcheck import check_grads


def fd_grad(loss_fn, arr, step=1e-5):
    """Dense central-difference gradient of a scalar loss wrt one array."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        up = loss_fn()
        flat[i] = saved - step
        down = loss_fn()
        flat[i] = saved
        gf[i] = (up - down) / (2 * step)
    return g


class TestMatmul:
    def test_identity(self):
        out = T.matmul(T.Tensor(np.eye(2)), T.Tensor([[3.0, 4.0], [5.0, 6.0]]))
        assert np.array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])

    def test_row_times_column(self):
        out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[11.0]])

    def test_grad_of_sum_against_ones(self):
        # frozen from the finite-difference oracle (step 1e-5): [[2,2],[2,2]]
        a = T.Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        b = T.Tensor(np.ones((2, 2)))
        with T.Trace():
            loss = T.matmul(a, b).sum()
        T.backward(loss)
        assert np.allclose(a.grad, [[2.0, 2.0], [2.0, 2.0]], atol=1e-12)
        num = fd_grad(lambda: float((a.data @ b.data).sum()), a.data)
        assert np.allclose(num, [[2.0, 2.0], [2.0, 2.0]], atol=1e-6)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))


class TestConv2d:
    def test_zero_input(self):
        x = T.Tensor(np.zeros((1, 2, 4, 4)))
        k = T.Tensor(np.random.default_rng(0).normal(size=(3, 2, 3, 3)))
        assert np.all(T.conv2d(x, k).data == 0.0)

    def test_padding_counts(self):
        x = T.Tensor(np.ones((1, 1, 3, 3)))
        k = T.Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, k).data[0, 0]
        assert out[1, 1] == 9.0
        assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0

    def test_kernel_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        x = T.Tensor(rng.normal(size=(1, 1, 4, 4)))
        k = T.Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)
        err = check_grads(lambda: T.conv2d(x, k).sum(), [k], step=1e-5)
        assert err < 1e-5

    def test_channel_mismatch(self):
        with pytest.raises(T.ShapeError, match="channel"):
            T.conv2d(T.Tensor(np.zeros((1, 2, 4, 4))), T.Tensor(np.zeros((1, 3, 3, 3))))

    def test_non_3x3_kernel_rejected(self):
        with pytest.raises(T.ShapeError, match="3x3"):
            T.conv2d(T.Tensor(np.zeros((1, 1, 4, 4))), T.Tensor(np.zeros((1, 1, 5, 5))))


class TestBatchnorm:
    def test_constant_channel_yields_beta(self):
        x = T.Tensor(np.full((4, 2, 3, 3), 7.0))
        gamma = T.Tensor(np.ones(2))
        beta = T.Tensor(np.array([0.5, -1.5]))
        out = T.batchnorm(x, gamma, beta, T.RunningMoments(2), train=True)
        assert np.allclose(out.data[:, 0], 0.5, atol=1e-12)
        assert np.allclose(out.data[:, 1], -1.5, atol=1e-12)

    def test_standardized_input_passthrough(self):
        rng = np.random.default_rng(2)
        raw = rng.normal(size=(64, 3, 4, 4))
        mu = raw.mean(axis=(0, 2, 3), keepdims=True)
        sd = raw.std(axis=(0, 2, 3), keepdims=True)
        std = (raw - mu) / sd
        out = T.batchnorm(
            T.Tensor(std), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)), T.RunningMoments(3), True
        )
        assert np.abs(out.data - std).max() < 1e-3

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        x = T.Tensor(rng.normal(size=(4, 2, 2, 2)), requires_grad=True)
        gamma = T.Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
        beta = T.Tensor(rng.normal(size=2), requires_grad=True)
        w = T.Tensor(rng.normal(size=(4, 2, 2, 2)))

        def loss():
            return (T.batchnorm(x, gamma, beta, T.RunningMoments(2), True) * w).sum()

        assert check_grads(loss, [x, gamma, beta]) < 1e-4

    def test_batch_of_one_rejected(self):
        with pytest.raises(T.DegenerateBatchError):
            T.batchnorm(
                T.Tensor(np.zeros((1, 2, 3, 3))),
                T.Tensor(np.ones(2)),
                T.Tensor(np.zeros(2)),
                T.RunningMoments(2),
                train=True,
            )

    def test_eval_uses_frozen_moments(self):
        state = T.RunningMoments(1)
        state.mean[:] = 2.0
        state.var[:] = 4.0
        x = T.Tensor(np.full((2, 1), 4.0))
        out = T.batchnorm(x, T.Tensor(np.ones(1)), T.Tensor(np.zeros(1)), state, train=False)
        assert np.allclose(out.data, (4.0 - 2.0) / np.sqrt(4.0 + 1e-5))


class TestMaxpool2:
    def test_basic_window(self):
        x = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        assert T.maxpool2(x).data.reshape(()) == 4.0

    def test_tie_routes_to_first_rowmajor(self):
        x = T.Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with T.Trace():
            loss = T.maxpool2(x).sum()
        T.backward(loss)
        assert np.array_equal(x.grad.reshape(2, 2), [[1.0, 0.0], [0.0, 0.0]])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        x = T.Tensor(rng.permutation(16).astype(float).reshape(1, 1, 4, 4), requires_grad=True)
        w = T.Tensor(rng.normal(size=(1, 1, 2, 2)))
        err = check_grads(lambda: (T.maxpool2(x) * w).sum(), [x], step=1e-4)
        assert err < 1e-6

    def test_odd_extent_drops_tail(self):
        x = T.Tensor(np.arange(25.0).reshape(1, 1, 5, 5))
        assert T.maxpool2(x).shape == (1, 1, 2, 2)

    def test_too_small_rejected(self):
        with pytest.raises(T.ShapeError):
            T.maxpool2(T.Tensor(np.zeros((1, 1, 1, 4))))


class TestLeakyRelu:
    def test_values(self):
        x = T.Tensor([3.0, -2.0])
        out = T.leaky_relu(x, 0.2)
        assert np.allclose(out.data, [3.0, -0.4])

    def test_gradient_on_negative_branch(self):
        x = T.Tensor([-1.0], requires_grad=True)
        with T.Trace():
            loss = T.leaky_relu(x, 0.2).sum()
        T.backward(loss)
        assert np.allclose(x.grad, [0.2])

    def test_slope_validation(self):
        with pytest.raises(ValueError):
            T.leaky_relu(T.Tensor([1.0]), 1.5)


class TestSoftmaxRows:
    def test_uniform_row(self):
        out = T.softmax_rows(T.Tensor([[0.0, 0.0, 0.0]]))
        assert np.allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    def test_stabilised_saturation(self):
        out = T.softmax_rows(T.Tensor([[1000.0, 0.0, 0.0]]))
        assert np.allclose(out.data, [[1.0, 0.0, 0.0]], atol=1e-12)

    def test_jvp_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        v = T.Tensor(rng.normal(size=(3, 4)))
        err = check_grads(lambda: (T.softmax_rows(x) * v).sum(), [x], step=1e-5)
        assert err < 1e-6

    def test_nan_rejected(self):
        with pytest.raises(T.NumericError):
            T.softmax_rows(T.Tensor([[np.nan, 0.0]]))

    @given(
        st.lists(
            st.lists(st.floats(min_value=-50, max_value=50), min_size=2, max_size=6),
            min_size=1,
            max_size=4,
        ).filter(lambda rows: len({len(r) for r in rows}) == 1)
    )
    @settings(max_examples=60, deadline=None)
    def test_rows_sum_to_one(self, rows):
        out = T.softmax_rows(T.Tensor(np.array(rows)))
        assert np.abs(out.data.sum(axis=1) - 1.0).max() < 1e-9


class TestBackwardContract:
    def test_sum_gives_ones(self):
        p = T.Tensor(np.zeros((2, 3)), requires_grad=True)
        with T.Trace():
            loss = p.sum()
        T.backward(loss)
        assert np.array_equal(p.grad, np.ones((2, 3)))

    def test_unreachable_parameter_stays_zero(self):
        p = T.Tensor(np.ones(3), requires_grad=True)
        q = T.Tensor(np.ones(3), requires_grad=True)
        with T.Trace():
            loss = (p * 2.0).sum()
            _ = q * 3.0  # on the trace, but not feeding the loss
        T.backward(loss)
        assert np.array_equal(q.grad, np.zeros(3))
        assert np.array_equal(p.grad, np.full(3, 2.0))

    def test_never_used_parameter_stays_zero(self):
        p = T.Tensor(np.ones(3), requires_grad=True)
        q = T.Tensor(np.ones(3), requires_grad=True)
        with T.Trace():
            loss = (p * 2.0).sum()
        T.backward(loss)
        assert np.array_equal(q.grad, np.zeros(3))

    def test_non_scalar_loss_rejected(self):
        p = T.Tensor(np.ones(3), requires_grad=True)
        with T.Trace():
            out = p * 2.0
        with pytest.raises(T.TraceError):
            T.backward(out)

    def test_detached_loss_rejected(self):
        p = T.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(T.TraceError):
            T.backward(p.sum())  # no active trace: nothing recorded

    def test_trace_reuse_rejected(self):
        p = T.Tensor(np.ones(3), requires_grad=True)
        with T.Trace():
            loss = p.sum()
        T.backward(loss)
        with pytest.raises(T.TraceError):
            T.backward(loss)

    def test_detached_tensor_never_receives_gradient(self):
        p = T.Tensor(np.ones(3), requires_grad=True)
        d = p.detach()
        with T.Trace():
            loss = ((d * 4.0) + p).sum()
        T.backward(loss)
        assert d.grad is None
        assert np.array_equal(p.grad, np.ones(3))

    def test_grad_accumulates_across_backwards(self):
        p = T.Tensor(np.ones(3), requires_grad=True)
        for _ in range(2):
            with T.Trace():
                loss = p.sum()
            T.backward(loss)
        assert np.array_equal(p.grad, np.full(3, 2.0))
        p.zero_grad()
        assert np.array_equal(p.grad, np.zeros(3))

    def test_gradient_through_shared_subexpression(self):
        p = T.Tensor([2.0], requires_grad=True)
        with T.Trace():
            y = p * 3.0
            loss = (y * y).sum()  # d/dp (9 p^2) = 18 p
        T.backward(loss)
        assert np.allclose(p.grad, [36.0])


class TestAbsConvention:
    def test_subgradient_zero_at_zero(self):
        x = T.Tensor([0.0, -2.0, 3.0], requires_grad=True)
        with T.Trace():
            loss = x.abs().sum()
        T.backward(loss)
        assert np.array_equal(x.grad, [0.0, -1.0, 1.0])

    def test_sqrt_subgradient_zero_at_zero(self):
        x = T.Tensor([0.0, 4.0], requires_grad=True)
        with T.Trace():
            loss = x.sqrt().sum()
        T.backward(loss)
        assert np.array_equal(x.grad, [0.0, 0.25])


class TestDropout:
    def test_eval_is_identity(self):
        x = T.Tensor(np.arange(12.0).reshape(3, 4))
        out = T.dropout(x, 0.5, train=False)
        assert out.data is x.data

    def test_inverted_scaling_preserves_expectation(self):
        rng = np.random.default_rng(6)
        x = T.Tensor(np.ones((2000, 10)))
        out = T.dropout(x, 0.3, train=True, rng=rng)
        kept = out.data[out.data != 0]
        assert np.allclose(kept, 1.0 / 0.7)
        assert abs(out.data.mean() - 1.0) < 0.05

    def test_seeded_masks_reproducible(self):
        x = T.Tensor(np.ones((8, 8)))
        a = T.dropout(x, 0.5, True, np.random.default_rng(42)).data
        b = T.dropout(x, 0.5, True, np.random.default_rng(42)).data
        assert np.array_equal(a, b)


class TestDeterminism:
    def test_same_seed_bit_identical(self):
        def run():
            rng = np.random.default_rng(123)
            x = T.Tensor(rng.normal(size=(3, 2, 6, 6)), requires_grad=True)
            k = T.Tensor(rng.normal(size=(4, 2, 3, 3)), requires_grad=True)
            with T.Trace():
                h = T.leaky_relu(T.maxpool2(T.conv2d(x, k)))
                h = T.dropout(h.reshape(3, 36), 0.25, True, np.random.default_rng(9))
                loss = T.softmax_rows(h).log().sum()
            T.backward(loss)
            return loss.item(), x.grad.copy(), k.grad.copy()

        l1, gx1, gk1 = run()
        l2, gx2, gk2 = run()
        assert l1 == l2
        assert np.array_equal(gx1, gx2)
        assert np.array_equal(gk1, gk2)


@pytest.mark.parametrize(
    "shape_a,shape_b",
    [((2, 3), (2, 3)), ((4, 1), (4, 5)), ((1,), (3, 4))],
)
def test_broadcast_grads_match_oracle(shape_a, shape_b):
    rng = np.random.default_rng(7)
    a = T.Tensor(rng.normal(size=shape_a), requires_grad=True)
    b = T.Tensor(rng.normal(size=shape_b), requires_grad=True)
    assert check_grads(lambda: ((a * b) + (a - b)).sum(), [a, b]) < 1e-8


@pytest.mark.parametrize("shape", [(1, 1, 4, 4), (2, 3, 5, 5), (3, 2, 6, 4)])
def test_conv2d_grad_three_shapes(shape):
    rng = np.random.default_rng(sum(shape))
    x = T.Tensor(rng.normal(size=shape), requires_grad=True)
    k = T.Tensor(rng.normal(size=(2, shape[1], 3, 3)), requires_grad=True)
    w = T.Tensor(rng.normal(size=(shape[0], 2, shape[2], shape[3])))
    err = check_grads(
        lambda: (T.conv2d(x, k) * w).sum(), [x, k], probes_per_param=12, rng=rng
    )
    assert err < 1e-4


@pytest.mark.parametrize("shape", [(2, 4), (3, 7), (5, 2)])
def test_softmax_grad_three_shapes(shape):
    rng = np.random.default_rng(shape[0] * 11 + shape[1])
    x = T.Tensor(rng.normal(size=shape), requires_grad=True)
    v = T.Tensor(rng.normal(size=shape))
    assert check_grads(lambda: (T.softmax_rows(x) * v).sum(), [x], step=1e-5) < 1e-6


@pytest.mark.parametrize("shape", [(4, 2, 2, 2), (2, 3, 4, 4), (6, 1, 2, 3)])
def test_batchnorm_grad_three_shapes(shape):
    rng = np.random.default_rng(shape[1] * 17 + shape[2])
    c = shape[1]
    x = T.Tensor(rng.normal(size=shape), requires_grad=True)
    gamma = T.Tensor(rng.uniform(0.5, 1.5, c), requires_grad=True)
    beta = T.Tensor(rng.normal(size=c), requires_grad=True)
    w = T.Tensor(rng.normal(size=shape))

    def loss():
        return (T.batchnorm(x, gamma, beta, T.RunningMoments(c), True) * w).sum()

    assert check_grads(loss, [x, gamma, beta], probes_per_param=10, rng=rng) < 1e-4


def test_one_hot_constant():
    out = T.one_hot([0, 2], 3)
    assert np.array_equal(out.data, [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert out.requires_grad is False
    with pytest.raises(T.ShapeError):
        T.one_hot([3], 3)


def test_scatter_add_accumulates_duplicates():
    v = T.Tensor(np.array([1.0, 2.0, 4.0]))
    out = T.scatter_add_2d(v, [0, 0, 1], [1, 1, 0], (2, 2))
    assert np.array_equal(out.data, [[0.0, 3.0], [4.0, 0.0]])
