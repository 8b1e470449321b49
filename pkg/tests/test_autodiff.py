"""Tensor engine tests: forward oracles, gradient checks, invariants."""

import numpy as np
import pytest

import zscr.autodiff as ad
from zscr.autodiff import Tape, Tensor, backward, grad_check, tensor
from zscr.errors import (
    DomainError,
    EmptyTensor,
    NonFiniteError,
    NonScalarLoss,
    ShapeMismatch,
    ZeroVector,
)


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Brute-force triple loop, float64 accumulation."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += float(a[i, p]) * float(b[p, j])
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = tensor([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(a, tensor(np.eye(2)))
        np.testing.assert_array_equal(out.data, a.data)

    def test_unit_selector_row(self):
        out = ad.matmul(tensor([[1.0, 0.0]]), tensor([[2.0], [5.0]]))
        np.testing.assert_array_equal(out.data, [[2.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(3, 4)).astype(np.float32)
        b = rng.normal(size=(4, 2)).astype(np.float32)
        got = ad.matmul(tensor(a), tensor(b)).data
        want = matmul_oracle(a, b)
        np.testing.assert_allclose(got, want, rtol=1e-4)

    def test_triple_loop_exact_at_float64(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(5, 7))
        b = rng.normal(size=(7, 3))
        got = ad.matmul(tensor(a, np.float64), tensor(b, np.float64)).data
        np.testing.assert_allclose(got, matmul_oracle(a, b), rtol=1e-13)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(ad.add(tensor([1.0, 2.0]), tensor([3.0, 4.0])).data, [4.0, 6.0])

    def test_exp_at_zero(self):
        np.testing.assert_array_equal(ad.exp(tensor([0.0, 0.0])).data, [1.0, 1.0])

    def test_abs(self):
        np.testing.assert_array_equal(ad.absolute(tensor([-2.0, 3.0])).data, [2.0, 3.0])

    def test_scalar_broadcast(self):
        np.testing.assert_array_equal(ad.mul(tensor([1.0, 2.0]), 3.0).data, [3.0, 6.0])
        np.testing.assert_array_equal(ad.sub(tensor([1.0, 2.0]), 1.0).data, [0.0, 1.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.add(tensor([1.0, 2.0]), tensor([1.0, 2.0, 3.0]))

    def test_log_domain(self):
        with pytest.raises(DomainError):
            ad.log(tensor([1.0, 0.0]))

    def test_nonfinite_is_an_error(self):
        with pytest.raises(NonFiniteError):
            ad.exp(tensor([1000.0]))  # overflows float32


class TestActivations:
    def test_relu(self):
        np.testing.assert_array_equal(ad.relu(tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_leaky_relu(self):
        np.testing.assert_allclose(ad.leaky_relu(tensor([-10.0]), 0.2).data, [-2.0], rtol=1e-6)

    def test_leaky_slope_domain(self):
        with pytest.raises(DomainError):
            ad.leaky_relu(tensor([1.0]), 1.5)

    def test_softplus_at_zero(self):
        assert ad.softplus(tensor(0.0)).item() == pytest.approx(np.log(2.0), abs=1e-6)

    def test_relu_nonnegative_and_leaky_monotone(self):
        rng = np.random.default_rng(0)
        x = rng.normal(scale=5, size=256).astype(np.float32)
        assert (ad.relu(tensor(x)).data >= 0).all()
        xs = np.sort(x)
        ys = ad.leaky_relu(tensor(xs), 0.2).data
        assert (np.diff(ys) >= 0).all()

    def test_softplus_identities(self):
        rng = np.random.default_rng(1)
        x = rng.normal(scale=10, size=512).astype(np.float32)
        sp = ad.softplus(tensor(x)).data
        assert (sp >= np.maximum(x, 0) - 1e-6).all()
        sp_neg = ad.softplus(tensor(-x)).data
        np.testing.assert_allclose(sp_neg, sp - x, atol=1e-5)


class TestSimilarity:
    def test_self_similarity(self):
        assert ad.cosine_sim(tensor([3.0, 4.0]), tensor([3.0, 4.0])).item() == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal(self):
        assert ad.cosine_sim(tensor([1.0, 0.0]), tensor([0.0, 1.0])).item() == 0.0

    def test_formula(self):
        got = ad.cosine_sim(tensor([1.0, 1.0]), tensor([1.0, 0.0])).item()
        assert got == pytest.approx(0.7071, abs=1e-4)

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            ad.cosine_sim(tensor([0.0, 0.0]), tensor([1.0, 0.0]))

    def test_l1_dist(self):
        assert ad.l1_dist(tensor([1.0, 2.0]), tensor([1.0, 2.0])).item() == 0.0
        assert ad.l1_dist(tensor([1.0, 2.0]), tensor([0.0, 0.0])).item() == 3.0

    def test_l1_against_loop(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            a = rng.normal(size=9).astype(np.float32)
            b = rng.normal(size=9).astype(np.float32)
            want = sum(abs(float(x) - float(y)) for x, y in zip(a, b))
            assert ad.l1_dist(tensor(a), tensor(b)).item() == pytest.approx(want, rel=1e-6)

    def test_row_variants_match_vector_ops(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(4, 6)).astype(np.float32)
        b = rng.normal(size=(4, 6)).astype(np.float32)
        rc = ad.row_cosine(tensor(a), tensor(b)).data
        rl = ad.row_l1(tensor(a), tensor(b)).data
        for r in range(4):
            assert rc[r] == pytest.approx(ad.cosine_sim(tensor(a[r]), tensor(b[r])).item(), abs=1e-6)
            assert rl[r] == pytest.approx(ad.l1_dist(tensor(a[r]), tensor(b[r])).item(), rel=1e-6)


class TestReduce:
    def test_mean(self):
        assert ad.reduce_mean(tensor([2.0, 4.0])).item() == 3.0

    def test_empty_sum(self):
        with pytest.raises(EmptyTensor):
            ad.reduce_sum(tensor(np.zeros(0, np.float32)))

    def test_mean_of_constant(self):
        assert ad.reduce_mean(tensor(np.full(17, 2.5, np.float32))).item() == pytest.approx(2.5, rel=1e-7)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        t = Tape()
        w = t.watch(tensor([1.0, 2.0, 3.0]))
        backward(ad.reduce_sum(w))
        np.testing.assert_array_equal(t.grad(w).data, [1.0, 1.0, 1.0])

    def test_constant_function_gradient_is_zero(self):
        t = Tape()
        w = t.watch(tensor([3.0, 4.0]))
        loss = ad.cosine_sim(w, w)
        backward(loss)
        np.testing.assert_allclose(t.grad(w).data, [0.0, 0.0], atol=1e-7)

    def test_unused_leaf_gets_zero(self):
        t = Tape()
        w = t.watch(tensor([1.0, 2.0]))
        unused = t.watch(tensor([5.0]))
        backward(ad.reduce_sum(w))
        np.testing.assert_array_equal(t.grad(unused).data, [0.0])

    def test_non_scalar_loss(self):
        t = Tape()
        w = t.watch(tensor([1.0, 2.0]))
        with pytest.raises(NonScalarLoss):
            backward(ad.mul(w, w))

    def test_grad_slots_match_value_shapes(self):
        t = Tape()
        w = t.watch(tensor(np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)))
        b = t.watch(tensor(np.random.default_rng(1).normal(size=4).astype(np.float32)))
        loss = ad.reduce_mean(ad.relu(ad.add_bias(ad.matmul(tensor(np.ones((2, 3), np.float32)), w), b)))
        grads = backward(loss)
        for node_id, g in grads.items():
            assert g.shape == t._nodes[node_id].value.shape

    def test_tape_topological_order(self):
        t = Tape()
        w = t.watch(tensor([1.0, 2.0]))
        loss = ad.reduce_sum(ad.mul(ad.add(w, 1.0), w))
        assert loss.tape is t
        for nid, node in enumerate(t._nodes):
            assert all(i < nid for i in node.inputs)

    def test_mixing_tapes_rejected(self):
        t1, t2 = Tape(), Tape()
        a = t1.watch(tensor([1.0]))
        b = t2.watch(tensor([2.0]))
        with pytest.raises(ValueError):
            ad.add(a, b)


class TestGradCheck:
    def test_sum_of_squares(self):
        f = lambda ps: ad.reduce_sum(ad.mul(ps[0], ps[0]))
        w = tensor([1.0, 2.0])
        t = Tape()
        tw = t.watch(w)
        backward(f([tw]))
        np.testing.assert_allclose(t.grad(tw).data, [2.0, 4.0], rtol=1e-6)
        assert grad_check(f, [w]) < 1e-3

    def test_constant_function(self):
        f = lambda ps: ad.cosine_sim(ps[0], ps[0])
        assert grad_check(f, [tensor([1.0, 2.0, 3.0])]) < 1e-6

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_composite_expression(self, seed):
        rng = np.random.default_rng(seed)
        w = tensor(rng.normal(size=(4, 5)).astype(np.float32))
        b = tensor(rng.normal(size=5).astype(np.float32))
        x = tensor(rng.normal(size=(3, 4)).astype(np.float32))
        tgt = tensor(np.abs(rng.normal(size=(3, 5))).astype(np.float32))

        def f(ps):
            h = ad.leaky_relu(ad.add_bias(ad.matmul(x, ps[0]), ps[1]), 0.2)
            return ad.reduce_mean(ad.softplus(ad.sub(ad.row_l1(h, tgt), 1.0)))

        assert grad_check(f, [w, b]) < 1e-2

    def test_float64_mode_is_tighter(self):
        rng = np.random.default_rng(7)
        w64 = tensor(rng.normal(size=(3, 3)), np.float64)
        x = tensor(rng.normal(size=(2, 3)), np.float64)

        def f(ps):
            return ad.reduce_mean(ad.exp(ad.scale(ad.rowsum(ad.matmul(x, ps[0])), 0.1)))

        assert grad_check(f, [w64]) < 1e-3


class TestTensorBasics:
    def test_immutable(self):
        t = tensor([1.0])
        with pytest.raises(AttributeError):
            t.data = np.zeros(1)
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_data_matches_shape(self):
        t = tensor(np.zeros((3, 4), np.float32))
        assert t.data.size == 12 and t.shape == (3, 4)

    def test_detach_drops_tape(self):
        tp = Tape()
        w = tp.watch(tensor([1.0]))
        y = ad.mul(w, 2.0)
        assert y.tracked and not y.detach().tracked
