import numpy as np
import pytest
import scipy.special
import scipy.stats

from moelab.errors import NumericalError
from moelab.gradcheck import grad_check
from moelab.tensor import (
    MASK_SENTINEL,
    Tensor,
    concat,
    entropy_lastdim,
    gather_lastdim,
    log_softmax_lastdim,
    masked_fill,
    matmul,
    matmul_t,
    narrow,
    no_grad,
    repeat_axis,
    scatter_rows,
    softmax_lastdim,
    take_rows,
)

from conftest import make_rng


def check(loss_fn, params, names=None):
    report = grad_check(loss_fn, params, names=names)
    assert report.ok, str(report)


class TestArithmetic:
    def test_add_forward(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4))
        out = Tensor(a) + Tensor(b)
        np.testing.assert_array_equal(out.data, a + b)

    def test_scalar_ops_forward(self, rng):
        a = rng.normal(size=(2, 3))
        t = Tensor(a)
        np.testing.assert_array_equal((t + 2.0).data, a + 2.0)
        np.testing.assert_array_equal((3.0 - t).data, 3.0 - a)
        np.testing.assert_array_equal((t * -1.5).data, a * -1.5)
        np.testing.assert_array_equal((t / 4.0).data, a / 4.0)
        np.testing.assert_array_equal((2.0 / (t + 10.0)).data, 2.0 / (a + 10.0))

    def test_arithmetic_gradients(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 4)) + 3.0, requires_grad=True)

        def loss():
            return ((a * b + a / b - b + 2.0) ** 2.0).sum()

        check(loss, [a, b], ["a", "b"])

    def test_broadcast_gradients(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        row = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
        scalar = Tensor(rng.normal(size=()), requires_grad=True)

        def loss():
            return ((a + row) * scalar).sum()

        check(loss, [a, row, scalar], ["a", "row", "scalar"])

    def test_pow_gradient(self, rng):
        a = Tensor(np.abs(rng.normal(size=(5,))) + 0.5, requires_grad=True)

        def loss():
            return (a**3.0).sum()

        check(loss, [a])


class TestMatmul:
    def test_identity_case(self):
        eye = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        b = np.array([[3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_array_equal(matmul(eye, Tensor(b)).data, b)

    def test_row_by_column(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, np.array([[11.0]]))

    def test_forward_2d(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 5))
        np.testing.assert_array_equal(matmul(Tensor(a), Tensor(b)).data, a @ b)

    def test_forward_batched_by_2d(self, rng):
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(4, 5))
        np.testing.assert_array_equal(matmul(Tensor(a), Tensor(b)).data, a @ b)

    def test_forward_batched_by_batched(self, rng):
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(2, 4, 5))
        np.testing.assert_array_equal(
            matmul(Tensor(a), Tensor(b)).data, np.matmul(a, b)
        )

    def test_shape_mismatch_raises(self, rng):
        a = Tensor(rng.normal(size=(3, 4)))
        b = Tensor(rng.normal(size=(3, 5)))
        with pytest.raises(ValueError, match="inner dimensions"):
            matmul(a, b)

    def test_gradients_2d(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)

        def loss():
            return (matmul(a, b) ** 2.0).sum()

        check(loss, [a, b], ["a", "b"])

    def test_gradients_batched_operand(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)

        def loss():
            return (matmul(a, b) ** 2.0).sum()

        check(loss, [a, b], ["a", "b"])

    def test_gradients_fully_batched(self, rng):
        a = Tensor(rng.normal(size=(2, 2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 3, 2)), requires_grad=True)

        def loss():
            return (matmul(a, b) ** 2.0).sum()

        check(loss, [a, b], ["a", "b"])

    def test_matmul_t_forward(self, rng):
        x = rng.normal(size=(2, 5, 4))
        w = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(matmul_t(Tensor(x), Tensor(w)).data, x @ w.T)

    def test_matmul_t_shape_errors(self, rng):
        with pytest.raises(ValueError, match="matmul_t"):
            matmul_t(Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(3, 5))))

    def test_matmul_t_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(5, 4)), requires_grad=True)

        def loss():
            return (matmul_t(x, w) ** 2.0).sum()

        check(loss, [x, w], ["x", "w"])


class TestReductionsAndShapes:
    def test_sum_axes_forward(self, rng):
        a = rng.normal(size=(2, 3, 4))
        t = Tensor(a)
        np.testing.assert_array_equal(t.sum().data, a.sum())
        np.testing.assert_array_equal(t.sum(axis=1).data, a.sum(axis=1))
        np.testing.assert_array_equal(
            t.sum(axis=-1, keepdims=True).data, a.sum(axis=-1, keepdims=True)
        )
        np.testing.assert_array_equal(t.mean(axis=(0, 2)).data, a.mean(axis=(0, 2)))

    def test_sum_mean_gradients(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)

        def loss():
            return (a.sum(axis=1) ** 2.0).mean() + a.mean(axis=(0, 2)).sum()

        check(loss, [a])

    def test_reshape_transpose_gradients(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)

        def loss():
            return (a.reshape(6, 4).transpose((1, 0)) ** 2.0).sum()

        check(loss, [a])

    def test_narrow(self, rng):
        a = rng.normal(size=(4, 6))
        t = Tensor(a, requires_grad=True)
        np.testing.assert_array_equal(narrow(t, 1, 2, 3).data, a[:, 2:5])
        with pytest.raises(ValueError, match="narrow range"):
            narrow(t, 1, 4, 3)

        def loss():
            return (narrow(t, 0, 1, 2) ** 2.0).sum()

        check(loss, [t])

    def test_concat(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        np.testing.assert_array_equal(
            concat([a, b], axis=1).data, np.concatenate([a.data, b.data], axis=1)
        )

        def loss():
            return (concat([a, b], axis=1) ** 2.0).sum()

        check(loss, [a, b], ["a", "b"])

    def test_repeat_axis(self, rng):
        a = rng.normal(size=(2, 3, 4))
        t = Tensor(a, requires_grad=True)
        np.testing.assert_array_equal(
            repeat_axis(t, 2, axis=1).data, np.repeat(a, 2, axis=1)
        )

        def loss():
            return (repeat_axis(t, 3, axis=1) ** 2.0).sum()

        check(loss, [t])


class TestElementwise:
    def test_exp_log_forward(self, rng):
        a = np.abs(rng.normal(size=(3, 3))) + 0.1
        np.testing.assert_array_equal(Tensor(a).exp().data, np.exp(a))
        np.testing.assert_array_equal(Tensor(a).log().data, np.log(a))

    def test_silu_matches_scipy(self, rng):
        a = rng.normal(size=(100,)) * 5.0
        expected = a * scipy.special.expit(a)
        np.testing.assert_allclose(Tensor(a).silu().data, expected, rtol=1e-14)

    def test_silu_extreme_inputs_finite(self):
        a = np.array([-800.0, -50.0, 0.0, 50.0, 800.0])
        out = Tensor(a).silu().data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out[3:], a[3:], rtol=1e-12)
        np.testing.assert_allclose(out[:2], 0.0, atol=1e-12)

    def test_elementwise_gradients(self, rng):
        a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        b = Tensor(np.abs(rng.normal(size=(4, 3))) + 0.5, requires_grad=True)

        def loss():
            return (a.silu() * b.log() + (a * 0.1).exp()).sum()

        check(loss, [a, b], ["a", "b"])


class TestGatherScatter:
    def test_take_rows_forward(self, rng):
        x = rng.normal(size=(5, 3))
        idx = np.array([[0, 2], [4, 0]])
        np.testing.assert_array_equal(take_rows(Tensor(x), idx).data, x[idx])

    def test_take_rows_out_of_range(self, rng):
        with pytest.raises(IndexError):
            take_rows(Tensor(rng.normal(size=(5, 3))), np.array([5]))

    def test_take_rows_duplicate_indices_accumulate(self):
        x = Tensor(np.eye(3), requires_grad=True)
        out = take_rows(x, np.array([1, 1, 1]))
        out.sum().backward()
        np.testing.assert_array_equal(x.grad[1], np.full(3, 3.0))
        np.testing.assert_array_equal(x.grad[0], np.zeros(3))

    def test_take_rows_gradients(self, rng):
        x = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        idx = np.array([0, 3, 3, 5, 1])

        def loss():
            return (take_rows(x, idx) ** 2.0).sum()

        check(loss, [x])

    def test_scatter_rows_round_trip(self, rng):
        v = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        idx = np.array([5, 0, 2])
        out = scatter_rows(v, idx, 6)
        np.testing.assert_array_equal(out.data[idx], v.data)
        np.testing.assert_array_equal(out.data[[1, 3, 4]], np.zeros((3, 4)))

        def loss():
            return (scatter_rows(v, idx, 6) ** 2.0).sum()

        check(loss, [v])

    def test_gather_lastdim(self, rng):
        x = rng.normal(size=(2, 3, 5))
        idx = rng.integers(0, 5, size=(2, 3))
        out = gather_lastdim(Tensor(x), idx)
        expected = np.take_along_axis(x, idx[..., None], axis=-1)[..., 0]
        np.testing.assert_array_equal(out.data, expected)

        t = Tensor(x, requires_grad=True)

        def loss():
            return (gather_lastdim(t, idx) ** 2.0).sum()

        check(loss, [t])

    def test_gather_lastdim_shape_mismatch(self, rng):
        with pytest.raises(ValueError, match="gather_lastdim"):
            gather_lastdim(Tensor(rng.normal(size=(2, 3))), np.zeros((3,), dtype=int))


class TestMaskedSoftmax:
    def test_uniform_logits(self):
        p = softmax_lastdim(Tensor(np.zeros(4))).data
        np.testing.assert_array_equal(p, np.full(4, 0.25))

    def test_log_ratio_logits(self):
        logits = np.log(np.array([4.0, 2.0, 1.0, 1.0]))
        p = softmax_lastdim(Tensor(logits)).data
        np.testing.assert_allclose(p, [0.5, 0.25, 0.125, 0.125], rtol=1e-14)

    def test_masked_entries_exactly_zero(self, rng):
        logits = rng.normal(size=(4, 6))
        logits[:, 2] = MASK_SENTINEL
        logits[0, 4] = MASK_SENTINEL - 1.0
        p = softmax_lastdim(Tensor(logits)).data
        assert np.all(p[:, 2] == 0.0)
        assert p[0, 4] == 0.0
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=1e-15)

    def test_matches_scipy_on_unmasked(self, rng):
        logits = rng.normal(size=(3, 5))
        p = softmax_lastdim(Tensor(logits)).data
        np.testing.assert_allclose(p, scipy.special.softmax(logits, axis=-1), rtol=1e-14)

    def test_masked_matches_softmax_of_subset(self, rng):
        logits = rng.normal(size=(7,))
        masked = logits.copy()
        masked[[1, 4]] = MASK_SENTINEL
        p = softmax_lastdim(Tensor(masked)).data
        keep = [0, 2, 3, 5, 6]
        np.testing.assert_allclose(p[keep], scipy.special.softmax(logits[keep]), rtol=1e-14)

    def test_large_logits_no_overflow(self):
        p = softmax_lastdim(Tensor(np.array([1000.0, 0.0]))).data
        np.testing.assert_array_equal(p, np.array([1.0, 0.0]))

    def test_all_masked_raises(self):
        logits = np.full((2, 3), 0.0)
        logits[1, :] = MASK_SENTINEL
        with pytest.raises(NumericalError, match="degenerate softmax"):
            softmax_lastdim(Tensor(logits))

    def test_gradients_with_mask(self, rng):
        base = rng.normal(size=(3, 6))
        mask = np.zeros((3, 6), dtype=bool)
        mask[:, 5] = True
        mask[1, 2] = True
        t = Tensor(base, requires_grad=True)
        w = rng.normal(size=(3, 6))

        def loss():
            return (softmax_lastdim(masked_fill(t, mask, MASK_SENTINEL)) * w).sum()

        check(loss, [t])

    def test_masked_positions_get_no_gradient(self, rng):
        base = rng.normal(size=(2, 4))
        mask = np.zeros((2, 4), dtype=bool)
        mask[:, 3] = True
        t = Tensor(base, requires_grad=True)
        loss = (softmax_lastdim(masked_fill(t, mask, MASK_SENTINEL)) ** 2.0).sum()
        loss.backward()
        np.testing.assert_array_equal(t.grad[:, 3], np.zeros(2))


class TestLogSoftmaxEntropy:
    def test_log_softmax_matches_scipy(self, rng):
        logits = rng.normal(size=(4, 9)) * 3.0
        out = log_softmax_lastdim(Tensor(logits)).data
        np.testing.assert_allclose(out, scipy.special.log_softmax(logits, axis=-1), rtol=1e-13, atol=1e-13)

    def test_log_softmax_gradients(self, rng):
        t = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        idx = rng.integers(0, 5, size=(3,))

        def loss():
            return -gather_lastdim(log_softmax_lastdim(t), idx).mean()

        check(loss, [t])

    def test_entropy_uniform_and_peaked(self):
        np.testing.assert_allclose(entropy_lastdim(np.zeros(8)), np.log(8.0), rtol=1e-14)
        peaked = np.array([200.0, 0.0, 0.0])
        assert entropy_lastdim(peaked) < 1e-80

    def test_entropy_matches_scipy(self, rng):
        logits = rng.normal(size=(5, 7))
        p = scipy.special.softmax(logits, axis=-1)
        np.testing.assert_allclose(
            entropy_lastdim(logits), scipy.stats.entropy(p, axis=-1), rtol=1e-12
        )

    def test_entropy_ignores_masked(self, rng):
        logits = rng.normal(size=(6,))
        masked = logits.copy()
        masked[[0, 3]] = MASK_SENTINEL
        keep = [1, 2, 4, 5]
        p = scipy.special.softmax(logits[keep])
        np.testing.assert_allclose(entropy_lastdim(masked), scipy.stats.entropy(p), rtol=1e-12)


class TestTapeMechanics:
    def test_no_grad_suppresses_tape(self, rng):
        t = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with no_grad():
            out = (t * 2.0).sum()
        assert not out.requires_grad
        assert out._backward is None

    def test_backward_requires_scalar(self, rng):
        t = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (t * 2.0).backward()

    def test_detach_breaks_graph_and_copies(self, rng):
        t = Tensor(rng.normal(size=(3,)), requires_grad=True)
        d = (t * 2.0).detach()
        assert not d.requires_grad
        before = d.data.copy()
        t.data[:] = 0.0
        np.testing.assert_array_equal(d.data, before)

    def test_grad_accumulates_across_uses(self, rng):
        t = Tensor(np.array([2.0]), requires_grad=True)
        loss = (t * 3.0 + t * t).sum()
        loss.backward()
        np.testing.assert_allclose(t.grad, np.array([3.0 + 2.0 * 2.0]))

    def test_gradients_bitwise_deterministic(self, rng):
        def run():
            g = make_rng(77)
            x = Tensor(g.normal(size=(4, 5)), requires_grad=True)
            w = Tensor(g.normal(size=(5, 5)), requires_grad=True)
            loss = (softmax_lastdim(matmul(x, w)).silu() ** 2.0).sum()
            loss.backward()
            return x.grad.tobytes(), w.grad.tobytes()

        assert run() == run()

    def test_float64_everywhere(self):
        t = Tensor(np.ones((2, 2), dtype=np.float32))
        assert t.data.dtype == np.float64
        assert (t + 1).data.dtype == np.float64
