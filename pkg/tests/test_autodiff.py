"""Tape engine: analytic gradients, finite differences, determinism."""

import numpy as np
import pytest

from unlearn_lab.autodiff import (
    ShapeError,
    Tape,
    Tensor,
    constant,
    finite_difference_check,
    forward,
    leaf,
)


class TestPrimitiveForward:
    def test_softmax_symmetry(self):
        tape = Tape()
        out = tape.softmax(constant([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 3))
        tape = Tape()
        out = tape.matmul(constant(np.eye(3)), constant(a))
        np.testing.assert_array_equal(out.data, a)

    def test_log_exp_inverse(self):
        x = np.linspace(-5, 5, 101)
        tape = Tape()
        out = tape.log(tape.exp(constant(x)))
        assert np.max(np.abs(out.data - x)) < 1e-12

    def test_matmul_shape_error_names_primitive(self):
        tape = Tape()
        with pytest.raises(ShapeError, match="matmul"):
            tape.matmul(constant(np.zeros((2, 3))), constant(np.zeros((2, 3))))

    def test_add_rejects_tracked_broadcast(self):
        tape = Tape()
        a = leaf(np.zeros((2, 3, 4)))
        b = leaf(np.zeros((3, 4)))
        with pytest.raises(ShapeError, match="add"):
            tape.add(a, b)

    def test_add_bias_row(self):
        tape = Tape()
        a = leaf(np.ones((2, 3)))
        b = leaf(np.array([1.0, 2.0, 3.0]))
        out = tape.add(a, b)
        tape.backward(out, np.ones((2, 3)))
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])


class TestBackward:
    def test_square(self):
        x = leaf(3.0)
        tape = Tape()
        y = tape.mul(x, x)
        tape.backward(y)
        assert x.grad == pytest.approx(6.0, abs=1e-15)

    def test_product(self):
        x, y = leaf(2.0), leaf(5.0)
        tape = Tape()
        z = tape.mul(x, y)
        tape.backward(z)
        assert x.grad == pytest.approx(5.0)
        assert y.grad == pytest.approx(2.0)

    def test_seed_shape_mismatch(self):
        x = leaf(np.zeros(3))
        tape = Tape()
        y = tape.scale(x, 2.0)
        with pytest.raises(ShapeError, match="seed"):
            tape.backward(y, np.zeros(4))

    def test_fanout_accumulates(self):
        x = leaf(1.5)
        tape = Tape()
        y = tape.add(tape.scale(x, 2.0), tape.scale(x, 3.0))
        tape.backward(y)
        assert x.grad == pytest.approx(5.0)

    def test_grad_accumulates_across_backward_calls(self):
        x = leaf(2.0)
        tape = Tape()
        y = tape.mul(x, x)
        tape.backward(y)
        tape.backward(y)
        assert x.grad == pytest.approx(8.0)

    def test_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        sizes = [(4, 8), (8, 8), (8, 3)]
        theta0 = np.concatenate([rng.normal(size=m * n) for m, n in sizes])
        x_in = rng.normal(size=(5, 4))
        target = rng.normal(size=(5, 3))

        def loss_and_grad(theta):
            mats, offset = [], 0
            for m, n in sizes:
                mats.append(leaf(theta[offset:offset + m * n].reshape(m, n)))
                offset += m * n
            tape = Tape()
            h = constant(x_in)
            for w in mats[:-1]:
                h = tape.gelu(tape.matmul(h, w))
            out = tape.matmul(h, mats[-1])
            diff = tape.sub(out, constant(target))
            loss = tape.mean_all(tape.mul(diff, diff))
            tape.backward(loss)
            grad = np.concatenate([w.grad.reshape(-1) for w in mats])
            return loss.value, grad

        err = finite_difference_check(loss_and_grad, theta0, step=1e-5)
        assert err < 1e-4

    def test_backward_deterministic(self):
        rng = np.random.default_rng(3)
        w0 = rng.normal(size=(6, 6))
        x0 = rng.normal(size=(4, 6))

        def run():
            w = leaf(w0.copy())
            tape = Tape()
            out = tape.mean_all(tape.softmax(tape.matmul(constant(x0), w)))
            tape.backward(out)
            return out.value, w.grad.copy()

        v1, g1 = run()
        v2, g2 = run()
        assert v1 == v2
        np.testing.assert_array_equal(g1, g2)


class TestFusedOps:
    def test_softmax_xent_closed_form(self):
        """Backward through fused softmax+cross-entropy equals
        (probs - onehot) / count."""
        rng = np.random.default_rng(7)
        logits0 = rng.normal(size=(6, 10))
        targets = rng.integers(0, 10, size=6)
        mask = np.ones(6)
        x = leaf(logits0.copy())
        tape = Tape()
        loss = tape.token_xent(x, targets, mask)
        tape.backward(loss)
        shift = logits0 - logits0.max(axis=1, keepdims=True)
        probs = np.exp(shift) / np.exp(shift).sum(axis=1, keepdims=True)
        expected = probs.copy()
        expected[np.arange(6), targets] -= 1.0
        expected /= 6.0
        assert np.max(np.abs(x.grad - expected)) < 1e-12

    def test_token_xent_empty_mask(self):
        x = leaf(np.zeros((3, 5)))
        tape = Tape()
        with pytest.raises(ValueError, match="no supervised positions"):
            tape.token_xent(x, np.zeros(3, dtype=int), np.zeros(3))

    def test_kl_from_ref_zero_when_identical(self):
        rng = np.random.default_rng(1)
        logits0 = rng.normal(size=(4, 7))
        shift = logits0 - logits0.max(axis=1, keepdims=True)
        probs = np.exp(shift) / np.exp(shift).sum(axis=1, keepdims=True)
        x = leaf(logits0)
        tape = Tape()
        kl = tape.kl_from_ref(x, probs, np.ones(4))
        assert abs(kl.value) < 1e-12

    def test_gather_rows_scatter_backward(self):
        table = leaf(np.arange(12.0).reshape(4, 3))
        tape = Tape()
        out = tape.sum_all(tape.gather_rows(table, np.array([1, 1, 3])))
        tape.backward(out)
        expected = np.zeros((4, 3))
        expected[1] = 2.0
        expected[3] = 1.0
        np.testing.assert_array_equal(table.grad, expected)


class TestGradientLinearity:
    def test_gradient_of_sum_is_sum_of_gradients(self):
        rng = np.random.default_rng(11)
        x0 = rng.normal(size=(5, 5))

        def grad_of(scale_a, scale_b):
            x = leaf(x0.copy())
            tape = Tape()
            la = tape.mean_all(tape.mul(x, x))
            lb = tape.mean_all(tape.exp(tape.scale(x, 0.1)))
            total = tape.add(tape.scale(la, scale_a), tape.scale(lb, scale_b))
            tape.backward(total)
            return x.grad.copy()

        combined = grad_of(1.0, 1.0)
        parts = grad_of(1.0, 0.0) + grad_of(0.0, 1.0)
        assert np.max(np.abs(combined - parts)) < 1e-14


class TestFiniteDifferenceCheck:
    def test_quadratic_is_nearly_exact(self):
        rng = np.random.default_rng(0)
        x0 = rng.normal(size=20)

        def loss_and_grad(theta):
            return 0.5 * float(theta @ theta), theta.copy()

        assert finite_difference_check(loss_and_grad, x0, step=1e-5) < 1e-9

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(5)
        logits0 = rng.normal(size=12)
        target = 3

        def loss_and_grad(theta):
            x = leaf(theta.reshape(1, 12).copy())
            tape = Tape()
            loss = tape.token_xent(x, np.array([target]), np.ones(1))
            tape.backward(loss)
            return loss.value, x.grad.reshape(-1)

        assert finite_difference_check(loss_and_grad, logits0, step=1e-5) < 1e-4

    def test_constant_loss_zero_error(self):
        def loss_and_grad(theta):
            return 1.25, np.zeros_like(theta)

        assert finite_difference_check(loss_and_grad, np.ones(4)) == 0.0

    def test_nonfinite_loss_rejected(self):
        def loss_and_grad(theta):
            return float("nan"), np.zeros_like(theta)

        with pytest.raises(ValueError, match="non-finite"):
            finite_difference_check(loss_and_grad, np.ones(3))

    def test_nonpositive_step_rejected(self):
        with pytest.raises(ValueError, match="step"):
            finite_difference_check(lambda t: (0.0, t), np.ones(2), step=0.0)


def test_forward_helper_returns_tape():
    out, tape = forward(lambda tp, x: tp.scale(x, 3.0), leaf(2.0))
    assert out.value == pytest.approx(6.0)
    assert len(tape.nodes) == 1
    tape.backward(out)
