import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ddeq import kernel as K
from ddeq.autodiff import DTYPE
from ddeq.errors import DimensionMismatch
from ddeq.kernel import RIESZ, KernelSpec
from ddeq.measure import DiscreteMeasure

GAUSS = KernelSpec("gaussian", 1.0)


def mmd_sq_loops(k, x, y):
    """Plain double sums over particles, independent of the vectorised path."""
    def mean_k(a, b):
        return sum(K.kernel_eval(k, p, q) for p in a for q in b) / (len(a) * len(b))

    return mean_k(x, x) + mean_k(y, y) - 2 * mean_k(x, y)


def small_cloud(n_max=8):
    return arrays(np.float64, st.tuples(st.integers(1, n_max), st.just(2)),
                  elements=st.floats(-5, 5, allow_nan=False).map(lambda v: round(v, 3)))


class TestKernelSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            KernelSpec("laplace")
        with pytest.raises(ValueError):
            KernelSpec("gaussian", 0.0)
        assert KernelSpec("Riesz").family == "riesz"


class TestPointwise:
    def test_riesz_values(self):
        assert K.kernel_eval(RIESZ, [1.0, 2.0], [1.0, 2.0]) == 0.0
        assert K.kernel_eval(RIESZ, [0.0], [1.0]) == -1.0

    def test_gaussian_at_zero(self):
        assert K.kernel_eval(GAUSS, [0.3, 0.1], [0.3, 0.1]) == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            K.kernel_eval(RIESZ, [0.0, 1.0], [0.0])

    def test_grad1_riesz(self):
        assert np.array_equal(K.kernel_grad1(RIESZ, [1.0, 1.0], [1.0, 1.0]), [0.0, 0.0])
        assert np.allclose(K.kernel_grad1(RIESZ, [1.0, 0.0], [0.0, 0.0]), [-1.0, 0.0])

    def test_grad1_gaussian_1d(self):
        g = K.kernel_grad1(GAUSS, [1.0], [0.0])
        assert math.isclose(g[0], -math.exp(-0.5), rel_tol=1e-15)

    def test_grad_matrix_matches_pointwise(self, rng):
        x, y = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        y[0] = x[1]
        for k in (RIESZ, KernelSpec("gaussian", 0.7)):
            G = K.grad1_matrix(k, torch.tensor(x), torch.tensor(y)).numpy()
            for i in range(4):
                for j in range(5):
                    assert np.allclose(G[i, j], K.kernel_grad1(k, x[i], y[j]), atol=1e-15)


class TestMMD:
    def test_self_is_zero(self, rng):
        mu = DiscreteMeasure(rng.normal(size=(6, 2)))
        assert K.mmd_sq(RIESZ, mu, mu) == 0.0

    def test_diracs(self):
        assert K.mmd_sq(RIESZ, [[0.0]], [[1.0]]) == pytest.approx(2.0, abs=1e-15)

    def test_uniform_pair_vs_dirac(self):
        assert K.mmd_sq(RIESZ, [[0.0], [2.0]], [[1.0]]) == pytest.approx(1.0, abs=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            K.mmd_sq(RIESZ, np.zeros((2, 2)), np.zeros((2, 3)))

    @pytest.mark.parametrize("k", [RIESZ, GAUSS, KernelSpec("gaussian", 2.0)])
    def test_matches_loops(self, k, rng):
        x, y = rng.normal(size=(5, 2)), rng.normal(size=(3, 2))
        assert K.mmd_sq(k, x, y) == pytest.approx(mmd_sq_loops(k, x, y), abs=1e-12)

    def test_masked_rows_excluded(self, rng):
        x, y = rng.normal(size=(5, 2)), rng.normal(size=(4, 2))
        plain = K.mmd_sq(RIESZ, x, y)
        padded = K.mmd_sq(RIESZ, DiscreteMeasure(x).with_padding(3), DiscreteMeasure(y).with_padding(1))
        assert abs(plain - padded) <= 1e-12

    @settings(max_examples=60, deadline=None)
    @given(small_cloud(), small_cloud(), st.randoms(use_true_random=False))
    def test_symmetric_and_permutation_invariant(self, x, y, rnd):
        a = K.mmd_sq(RIESZ, x, y)
        assert a == K.mmd_sq(RIESZ, y, x)
        px = x[rnd.sample(range(len(x)), len(x))]
        py = y[rnd.sample(range(len(y)), len(y))]
        assert K.mmd_sq(RIESZ, px, py) == pytest.approx(a, abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(small_cloud(), small_cloud())
    def test_riesz_positive_on_distinct(self, x, y):
        same = len(x) == len(y) and sorted(map(tuple, x)) == sorted(map(tuple, y))
        # multisets with the same proportions are the same measure
        ux, cx = np.unique(x, axis=0, return_counts=True)
        uy, cy = np.unique(y, axis=0, return_counts=True)
        equal_measures = ux.shape == uy.shape and np.array_equal(ux, uy) and np.allclose(
            cx / cx.sum(), cy / cy.sum())
        v = K.mmd_sq(RIESZ, x, y)
        if same or equal_measures:
            assert abs(v) <= 1e-12
        else:
            assert v > 0

    def test_duplicates_have_finite_gradient(self):
        x = torch.tensor([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]], dtype=DTYPE, requires_grad=True)
        y = torch.tensor([[0.0, 0.0]], dtype=DTYPE)
        K.mmd_sq_masked(RIESZ, x, None, y, None).backward()
        assert torch.isfinite(x.grad).all()


class TestFlowGradients:
    def test_same_support_is_zero(self, rng):
        x = rng.normal(size=(5, 2))
        assert np.abs(K.mmd_flow_gradient_fixed(RIESZ, x, x[::-1])).max() <= 1e-15

    def test_dirac_pair(self):
        # grad_1 k(0,0) - grad_1 k(0,1) = 0 - (+1) = -1: the particle is pushed towards 1
        g = K.mmd_flow_gradient_fixed(RIESZ, [[0.0]], [[1.0]])
        assert g.shape == (1, 1) and g[0, 0] == -1.0

    @pytest.mark.parametrize("k", [RIESZ, GAUSS])
    def test_matches_finite_differences(self, k, rng):
        x, y = rng.normal(size=(5, 2)), rng.normal(size=(4, 2))
        g = K.mmd_flow_gradient_fixed(k, x, y)
        h = 1e-5
        fd = np.zeros_like(x)
        for i in range(5):
            for c in range(2):
                xp, xm = x.copy(), x.copy()
                xp[i, c] += h
                xm[i, c] -= h
                fd[i, c] = (K.mmd_sq(k, xp, y) - K.mmd_sq(k, xm, y)) / (2 * h)
        # d/dx_i of 1/2 MMD^2 is (1/N) grad f(x_i)
        fd = 0.5 * fd * 5
        assert np.abs(g - fd).max() / np.abs(fd).max() <= 1e-6

    def test_masked_rows_zero(self, rng):
        mu = DiscreteMeasure(rng.normal(size=(4, 2))).with_padding(2)
        g = K.mmd_flow_gradient_fixed(RIESZ, mu, rng.normal(size=(3, 2)))
        assert np.array_equal(g[4:], np.zeros((2, 2)))

    def test_pushforward_identity(self, rng):
        x = rng.normal(size=(6, 2))
        g = K.wasserstein_gradient_pushforward(RIESZ, x, lambda z: z, lambda z, v: v)
        assert np.abs(g).max() == 0.0

    def test_pushforward_constant_map(self, rng):
        x = rng.normal(size=(6, 2))
        c = torch.tensor([0.5, -1.0], dtype=DTYPE)
        g = K.wasserstein_gradient_pushforward(
            RIESZ, x, lambda z: c.expand_as(z), lambda z, v: torch.zeros_like(v))
        assert np.allclose(g, K.mmd_flow_gradient_fixed(RIESZ, x, c.numpy()[None]), atol=1e-15)

    @pytest.mark.parametrize("k", [RIESZ, GAUSS])
    def test_pushforward_matches_finite_differences(self, k, rng):
        W1, b1 = torch.tensor(rng.normal(size=(2, 5))), torch.tensor(rng.normal(size=5))
        W2, b2 = torch.tensor(rng.normal(size=(5, 2))), torch.tensor(rng.normal(size=2))

        def T(z):
            return torch.tanh(z @ W1 + b1) @ W2 + b2

        def T_vjp(z, v):
            h = torch.tanh(z @ W1 + b1)
            return ((v @ W2.T) * (1 - h * h)) @ W1.T

        x = rng.normal(size=(5, 2))
        g = K.wasserstein_gradient_pushforward(k, x, T, T_vjp)

        def obj(a):
            t = torch.tensor(a)
            return 0.5 * K.mmd_sq(k, a, T(t).numpy())

        h = 1e-5
        fd = np.zeros_like(x)
        for i in range(5):
            for c in range(2):
                xp, xm = x.copy(), x.copy()
                xp[i, c] += h
                xm[i, c] -= h
                fd[i, c] = (obj(xp) - obj(xm)) / (2 * h)
        fd *= 5
        assert np.abs(g - fd).max() / np.abs(fd).max() <= 1e-6

    def test_rotation_map(self):
        T, T_vjp = K.rotation_map(math.pi / 2)
        x = torch.tensor([[1.0, 0.0]], dtype=DTYPE)
        assert torch.allclose(T(x), torch.tensor([[0.0, 1.0]], dtype=DTYPE), atol=1e-15)
        v = torch.tensor([[0.3, -0.7]], dtype=DTYPE)
        J = torch.autograd.functional.jacobian(lambda z: T(z)[0], x)[:, 0, :]
        assert torch.allclose(T_vjp(x, v), v @ J, atol=1e-15)
