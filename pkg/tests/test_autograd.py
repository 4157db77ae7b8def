"""Reverse-mode engine: op gradients against central differences, plus edge cases."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from banded_attn import autograd as ag
from banded_attn.autograd import Tape, Tensor, finite_difference_check
from banded_attn.errors import NumericError, ShapeError

FD_TOL = 1e-6


def fd(f, x, **kw):
    return finite_difference_check(f, Tensor(np.array(x, dtype=np.float64)), **kw)


def weighted(out_fn, shape, seed=0):
    """Scalar test function ``sum(w * out_fn(x))`` with a fixed random weight."""
    w = np.random.default_rng(seed).standard_normal(shape)
    return lambda x: ag.sum_all(ag.mul(out_fn(x), w))


class TestTensor:
    def test_integer_data_becomes_float64(self):
        assert Tensor([1, 2]).dtype == np.float64

    def test_float32_kept(self):
        assert Tensor(np.zeros(2, dtype=np.float32)).dtype == np.float32

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            ag.mul(x, 2.0).backward()

    def test_grad_accumulates_over_uses(self):
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        y = ag.add(ag.mul(x, x), x)
        ag.sum_all(y).backward()
        np.testing.assert_allclose(x.grad, 2 * x.data + 1)

    def test_no_grad_for_constants(self):
        x = Tensor(np.ones(2), requires_grad=True)
        c = Tensor(np.full(2, 3.0))
        ag.sum_all(ag.mul(x, c)).backward()
        assert c.grad is None
        np.testing.assert_array_equal(x.grad, [3.0, 3.0])

    def test_operators(self):
        a = Tensor(np.eye(2), requires_grad=True)
        b = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        (a @ b + 1.0 * a).sum().backward()
        np.testing.assert_allclose(a.grad, b.data.sum(axis=1)[None, :].repeat(2, 0) + 1)


class TestTape:
    def test_topological_order(self):
        x = Tensor(np.ones(2), requires_grad=True)
        a = ag.mul(x, 2.0)
        b = ag.add(a, x)
        c = ag.sum_all(ag.mul(a, b))
        nodes = Tape.from_root(c).nodes
        pos = {id(n): k for k, n in enumerate(nodes)}
        for n in nodes:
            for p in n._parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(n)]
        assert nodes[-1] is c

    def test_deep_chain_no_recursion_limit(self):
        x = Tensor(np.array(1.0), requires_grad=True)
        y = x
        for _ in range(5000):
            y = ag.add(y, 0.0)
        y.backward()
        assert float(x.grad) == 1.0

    def test_interior_grads_freed(self):
        x = Tensor(np.ones(3), requires_grad=True)
        mid = ag.mul(x, 2.0)
        ag.sum_all(mid).backward()
        assert mid.grad is None
        np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])


class TestOpGradients:
    @given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
           arrays(np.float64, (4, 2), elements=st.floats(-3, 3)))
    def test_matmul(self, a, b):
        assert fd(weighted(lambda x: ag.matmul(x, b), (3, 2)), a) < FD_TOL
        assert fd(weighted(lambda x: ag.matmul(a, x), (3, 2)), b) < FD_TOL

    def test_batched_matmul_shared_weight(self, rng):
        a = rng.standard_normal((2, 3, 4))
        w = rng.standard_normal((4, 5))
        assert fd(weighted(lambda x: ag.matmul(a, x), (2, 3, 5)), w) < FD_TOL
        assert fd(weighted(lambda x: ag.matmul(x, w), (2, 3, 5)), a) < FD_TOL

    def test_add_broadcast(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal(4)
        assert fd(weighted(lambda x: ag.add(a, x), (3, 4)), b) < FD_TOL

    def test_scale_transpose_reshape(self, rng):
        a = rng.standard_normal((2, 3, 4))
        f = weighted(lambda x: ag.reshape(ag.transpose(ag.scale(x, 0.7)), (2, 12)), (2, 12))
        assert fd(f, a) < FD_TOL
        g = weighted(lambda x: ag.transpose(x, (2, 0, 1)), (4, 2, 3))
        assert fd(g, a) < FD_TOL

    def test_embedding_lookup_repeated_ids(self, rng):
        table = rng.standard_normal((5, 3))
        ids = np.array([[0, 2, 2], [4, 0, 0]])
        assert fd(weighted(lambda x: ag.embedding_lookup(x, ids), (2, 3, 3)), table) < FD_TOL

    def test_layer_norm(self, rng):
        x = rng.standard_normal((4, 6))
        gamma = Tensor(rng.standard_normal(6) + 1)
        beta = Tensor(rng.standard_normal(6))
        assert fd(weighted(lambda t: ag.layer_norm(t, gamma, beta), (4, 6)), x) < 1e-5
        assert fd(weighted(lambda t: ag.layer_norm(Tensor(x), t, beta), (4, 6)), gamma.data) < FD_TOL

    def test_layer_norm_normalizes(self, rng):
        y = ag.layer_norm(Tensor(rng.standard_normal((3, 64)) * 5 + 2)).data
        np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-12)
        np.testing.assert_allclose(y.std(axis=-1), 1, atol=1e-3)

    def test_gelu(self, rng):
        x = rng.standard_normal((5, 5)) * 2
        assert fd(weighted(ag.gelu, (5, 5)), x) < FD_TOL

    def test_gelu_values(self):
        y = ag.gelu(Tensor(np.array([0.0, 10.0, -10.0]))).data
        np.testing.assert_allclose(y, [0.0, 10.0, 0.0], atol=1e-12)

    def test_cross_entropy(self, rng):
        logits = rng.standard_normal((2, 3, 7))
        t = rng.integers(0, 7, size=(2, 3))
        assert fd(lambda x: ag.cross_entropy_loss(x, t), logits) < FD_TOL

    def test_cross_entropy_uniform(self):
        loss = ag.cross_entropy_loss(Tensor(np.zeros((4, 11))), np.arange(4))
        assert float(loss.data) == pytest.approx(np.log(11), abs=1e-12)

    def test_cross_entropy_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ag.cross_entropy_loss(Tensor(np.zeros((4, 3))), np.zeros(5, dtype=int))

    def test_cross_entropy_non_finite(self):
        with pytest.raises(NumericError):
            ag.cross_entropy_loss(Tensor(np.array([[np.nan, 0.0]])), np.array([0]))


class TestMaskedSoftmax:
    def test_rows_sum_to_one_and_zero_outside(self, rng):
        s = rng.standard_normal((6, 6))
        lo = np.array([0, 0, 1, 0, 2, 5])
        hi = np.array([0, 1, 2, -1, 4, 5])
        p = ag.masked_softmax_rows(s, lo, hi).data
        allowed = (np.arange(6) >= lo[:, None]) & (np.arange(6) <= hi[:, None])
        assert (p[~allowed] == 0).all()
        sums = p.sum(axis=1)
        np.testing.assert_allclose(sums[allowed.any(axis=1)], 1.0, atol=1e-15)
        assert sums[3] == 0

    def test_empty_row_gradient_is_zero(self, rng):
        s = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        p = ag.masked_softmax_rows(s, np.array([0, 0]), np.array([-1, 2]))
        ag.sum_all(ag.mul(p, rng.standard_normal((2, 3)))).backward()
        assert (s.grad[0] == 0).all()

    def test_large_scores_stable(self):
        s = np.array([[1000.0, 1001.0, -1e300]])
        p = ag.masked_softmax_rows(s, np.array([0]), np.array([1])).data
        np.testing.assert_allclose(p[0, :2], [1 / (1 + np.e), np.e / (1 + np.e)])

    def test_non_finite_outside_mask_is_ignored(self):
        s = np.array([[0.0, np.inf]])
        p = ag.masked_softmax_rows(s, np.array([0]), np.array([0])).data
        assert p.tolist() == [[1.0, 0.0]]

    def test_non_finite_inside_mask_raises(self):
        with pytest.raises(NumericError):
            ag.masked_softmax_rows(np.array([[np.nan, 0.0]]), np.array([0]), np.array([1]))

    def test_dense_and_interval_forms_agree(self, rng):
        s = rng.standard_normal((5, 5))
        lo, hi = np.array([0, 0, 1, 2, 3]), np.arange(5)
        allowed = (np.arange(5) >= lo[:, None]) & (np.arange(5) <= hi[:, None])
        a = ag.masked_softmax_rows(s, lo, hi).data
        b = ag.masked_softmax_rows(s, allowed=allowed).data
        np.testing.assert_array_equal(a, b)

    def test_gradient(self, rng):
        s = rng.standard_normal((4, 4))
        lo, hi = np.array([0, 0, 1, 0]), np.array([0, 1, 3, -1])
        assert fd(weighted(lambda x: ag.masked_softmax_rows(x, lo, hi), (4, 4)), s) < FD_TOL

    def test_requires_mask(self):
        with pytest.raises(ShapeError):
            ag.masked_softmax_rows(np.zeros((2, 2)))


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = {"w": Tensor(np.array([1.0, -1.0]), requires_grad=True)}
        p["w"].grad = np.array([0.5, -2.0])
        st_ = ag.AdamState()
        ag.adam_step(p, st_, lr=0.1)
        # bias-corrected first step is lr * sign(g) up to eps
        np.testing.assert_allclose(p["w"].data, [0.9, -0.9], atol=1e-7)
        assert st_.step == 1

    def test_skips_params_without_grad(self):
        p = {"a": Tensor(np.ones(2), requires_grad=True), "b": Tensor(np.ones(2), requires_grad=True)}
        p["a"].grad = np.ones(2)
        st_ = ag.AdamState()
        ag.adam_step(p, st_, lr=0.1)
        assert "b" not in st_.m
        np.testing.assert_array_equal(p["b"].data, [1.0, 1.0])

    def test_minimizes_quadratic(self):
        w = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        st_ = ag.AdamState()
        for _ in range(500):
            w.grad = None
            ag.sum_all(ag.mul(w, w)).backward()
            ag.adam_step({"w": w}, st_, lr=0.05)
        assert np.abs(w.data).max() < 1e-2

    def test_keeps_float32(self):
        w = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        w.grad = np.ones(3, dtype=np.float32)
        ag.adam_step({"w": w}, ag.AdamState(), lr=1e-3)
        assert w.data.dtype == np.float32


class TestFiniteDifferenceCheck:
    def test_catches_wrong_gradient(self):
        def bad(x):
            return ag.custom_op(np.asarray((x.data**2).sum()), (x,), lambda g: (g * 3 * x.data,))

        assert fd(bad, np.array([1.0, 2.0])) > 0.1

    def test_eps_range(self):
        with pytest.raises(ValueError):
            fd(lambda x: ag.sum_all(x), np.ones(2), eps=1e-2)

    def test_subsamples_large_inputs(self):
        calls = []

        def f(x):
            calls.append(1)
            return ag.sum_all(ag.mul(x, x))

        fd(f, np.ones(1000), max_coords=64)
        assert len(calls) == 1 + 2 * 64

    def test_restores_input(self):
        x = Tensor(np.arange(5.0))
        finite_difference_check(lambda t: ag.sum_all(ag.mul(t, t)), x)
        np.testing.assert_array_equal(x.data, np.arange(5.0))
