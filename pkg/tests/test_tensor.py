"""Autodiff core: forward values, backward passes vs finite differences,
and the tape's usage contracts."""

import numpy as np
import pytest

from lorac.errors import DegenerateInputError, ShapeError, TapeError
from lorac.tensor import (
    Tape,
    Tensor,
    concat_cols,
    concat_rows,
    l2_normalize_rows,
    logsumexp_rows,
    matmul,
    mean_all,
    nuclear_norm,
    relu,
    rows,
    sum_all,
    take_rows,
    transpose,
)

from conftest import fd_grad, rel_err, unit_rows


def autodiff_grad(build, x):
    tape = Tape()
    leaf = Tensor.param(np.array(x, dtype=np.float64), tape)
    tape.backward(build(leaf))
    return leaf.grad


class TestForwardValues:
    def test_matmul_identity(self, rng):
        a = rng.normal(size=(2, 3))
        out = matmul(Tensor(np.eye(2)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_matmul_hand_case(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_matmul_shape_errors(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        with pytest.raises(ShapeError):
            matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))

    def test_l2_normalize_row(self):
        out = l2_normalize_rows(Tensor([[3.0, 4.0]]))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-15)

    def test_l2_normalize_idempotent(self, rng):
        u = unit_rows(rng, 5, 8)
        out = l2_normalize_rows(Tensor(u))
        assert np.abs(out.data - u).max() < 1e-12

    def test_l2_normalize_degenerate_row(self):
        with pytest.raises(DegenerateInputError):
            l2_normalize_rows(Tensor(np.zeros((2, 3))))

    def test_logsumexp_matches_naive(self, rng):
        a = rng.normal(size=(4, 7)) * 3
        out = logsumexp_rows(Tensor(a))
        naive = np.log(np.exp(a).sum(axis=1, keepdims=True))
        np.testing.assert_allclose(out.data, naive, rtol=1e-12)

    def test_logsumexp_overflow_safe(self):
        out = logsumexp_rows(Tensor([[1000.0, 1000.0]]))
        np.testing.assert_allclose(out.data, [[1000.0 + np.log(2.0)]])

    def test_concat_and_slices_roundtrip(self, rng):
        a, b = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
        cat = concat_rows([Tensor(a), Tensor(b)])
        np.testing.assert_array_equal(rows(cat, 2, 5).data, b)
        np.testing.assert_array_equal(take_rows(cat, [0, 1]).data, a)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        g = autodiff_grad(sum_all, rng.normal(size=(3, 4)))
        np.testing.assert_array_equal(g, np.ones((3, 4)))

    def test_zero_times_x_gives_zero_grad(self, rng):
        g = autodiff_grad(lambda t: sum_all(t * 0.0), rng.normal(size=(2, 5)))
        np.testing.assert_array_equal(g, np.zeros((2, 5)))

    def test_unreached_leaf_gets_zero_grad(self, rng):
        tape = Tape()
        x = Tensor.param(rng.normal(size=(2, 2)), tape)
        y = Tensor.param(rng.normal(size=(2, 2)), tape)
        tape.backward(sum_all(x))
        np.testing.assert_array_equal(y.grad, np.zeros((2, 2)))

    def test_fanout_accumulates(self, rng):
        x0 = rng.normal(size=(3, 3))
        g = autodiff_grad(lambda t: sum_all(t + t), x0)
        np.testing.assert_allclose(g, 2 * np.ones((3, 3)))

    def test_matmul_vs_fd(self, rng):
        b = rng.normal(size=(4, 2))
        w = rng.normal(size=(3, 2))
        build = lambda t: sum_all(matmul(t, Tensor(b)) * Tensor(w))
        x = rng.normal(size=(3, 4))
        got = autodiff_grad(build, x)
        want = fd_grad(lambda a: float((a @ b * w).sum()), x)
        assert rel_err(got, want) < 1e-6

    def test_l2_normalize_vs_fd(self, rng):
        w = rng.normal(size=(5, 8))
        build = lambda t: sum_all(l2_normalize_rows(t) * Tensor(w))
        x = rng.normal(size=(5, 8))
        got = autodiff_grad(build, x)
        want = fd_grad(
            lambda a: float((a / np.linalg.norm(a, axis=1, keepdims=True) * w).sum()), x)
        assert rel_err(got, want) < 1e-5

    @pytest.mark.parametrize("op", [relu, logsumexp_rows, transpose, mean_all,
                                    l2_normalize_rows])
    def test_elementwise_chains_vs_fd(self, rng, op):
        w = rng.normal(size=(4, 6))

        def build(t):
            out = op(t)
            if out.data.shape != (4, 6):
                return sum_all(out)
            return sum_all(out * Tensor(w))

        x = rng.normal(size=(4, 6)) + 0.3  # keep relu away from its kink
        got = autodiff_grad(build, x)

        def scalar(a):
            tape_free = build(Tensor(a))
            return tape_free.item()

        want = fd_grad(scalar, x)
        assert rel_err(got, want) < 1e-5

    def test_concat_and_row_ops_vs_fd(self, rng):
        w = rng.normal(size=(5, 8))

        def build(t):
            top = rows(t, 0, 2)
            gathered = take_rows(t, [2, 2, 0])
            both = concat_rows([top, gathered])
            wide = concat_cols([both, both])
            return sum_all(wide * Tensor(w))

        x = rng.normal(size=(3, 4))
        got = autodiff_grad(build, x)
        want = fd_grad(lambda a: build(Tensor(a)).item(), x)
        assert rel_err(got, want) < 1e-6

    def test_broadcast_bias_vs_fd(self, rng):
        x = rng.normal(size=(5, 3))

        def build(b):
            return sum_all(relu(Tensor(x) + b) * Tensor(x))

        b0 = rng.normal(size=(1, 3))
        got = autodiff_grad(build, b0)
        want = fd_grad(lambda b: build(Tensor(b)).item(), b0)
        assert rel_err(got, want) < 1e-5

    def test_gradients_over_twenty_seeds(self):
        """Composite op chain matches central differences on repeated draws."""
        for seed in range(20):
            r = np.random.default_rng(seed)
            w = r.normal(size=(3, 5))
            x = r.normal(size=(4, 3))

            def build(t):
                h = relu(matmul(t, Tensor(w)))
                return sum_all(logsumexp_rows(h + 0.1))

            got = autodiff_grad(build, x)
            want = fd_grad(lambda a: build(Tensor(a)).item(), x)
            assert rel_err(got, want) < 1e-4


class TestNuclearNormOp:
    def test_identical_rows_anchor(self, rng):
        v = unit_rows(rng, 1, 16)[0]
        out = nuclear_norm(Tensor(np.tile(v, (4, 1))))
        assert abs(out.item() - 2.0) < 1e-8

    def test_orthonormal_rows(self, rng):
        q, _ = np.linalg.qr(rng.normal(size=(8, 3)))
        assert abs(nuclear_norm(Tensor(q.T)).item() - 3.0) < 1e-10

    def test_gradient_vs_fd_distinct_singulars(self, rng):
        from lorac.linalg import nuclear_norm_value

        u, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        v, _ = np.linalg.qr(rng.normal(size=(8, 4)))
        a = (u * np.array([4.0, 2.9, 1.7, 0.8])) @ v.T
        got = autodiff_grad(nuclear_norm, a)
        want = fd_grad(nuclear_norm_value, a)
        assert rel_err(got, want) < 1e-4

    def test_subgradient_matches_uvt(self, rng):
        a = rng.normal(size=(3, 7))
        res = np.linalg.svd(a, full_matrices=False)
        got = autodiff_grad(nuclear_norm, a)
        np.testing.assert_allclose(got, res[0] @ res[2], atol=1e-9)


class TestTapeContracts:
    def test_backward_requires_scalar(self, rng):
        tape = Tape()
        x = Tensor.param(rng.normal(size=(2, 2)), tape)
        with pytest.raises(ShapeError):
            tape.backward(x + 1.0)

    def test_double_backward_rejected(self, rng):
        tape = Tape()
        x = Tensor.param(rng.normal(size=(2, 2)), tape)
        loss = sum_all(x)
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)

    def test_cross_tape_mixing_rejected(self, rng):
        x = Tensor.param(rng.normal(size=(2, 2)), Tape())
        y = Tensor.param(rng.normal(size=(2, 2)), Tape())
        with pytest.raises(TapeError):
            x + y

    def test_leaf_needs_tape(self, rng):
        with pytest.raises(TapeError):
            Tensor(rng.normal(size=(2, 2)), requires_grad=True)

    def test_detached_ops_record_nothing(self, rng):
        tape = Tape()
        Tensor.param(rng.normal(size=(2, 2)), tape)
        before = len(tape)
        out = sum_all(Tensor(rng.normal(size=(3, 3))) * 2.0)
        assert out.tape is None and len(tape) == before

    def test_backward_returns_leaf_gradient_map(self, rng):
        tape = Tape()
        x = Tensor.param(rng.normal(size=(2, 3)), tape)
        grads = tape.backward(sum_all(x * 3.0))
        assert set(grads) == {x.node_id}
        np.testing.assert_allclose(grads[x.node_id], np.full((2, 3), 3.0))
