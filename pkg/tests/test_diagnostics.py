import itertools
import math
import types

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ddeq import diagnostics as D
from ddeq import net, solver
from ddeq.autodiff import DTYPE
from ddeq.errors import AllTermsSkipped, DimensionMismatch, UnsupportedScale
from ddeq.measure import DiscreteMeasure

from conftest import tiny_config

# frozen from the seeded runs in the tests that read them
PL_FAR = 3.475408449263471
DISCREPANCY_AT_FIXED_POINT = 0.30306312354990866
DISCREPANCY_OFF_FIXED_POINT = 0.7450763491375625


def brute_force_w2(x, y):
    """Minimum over every permutation, independent of any solver."""
    n = len(x)
    best = min(sum(((x[i] - y[p[i]]) ** 2).sum() for i in range(n))
               for p in itertools.permutations(range(n)))
    return math.sqrt(best / n)


def cloud(n_min=1, n_max=6):
    return arrays(np.float64, st.tuples(st.integers(n_min, n_max), st.just(2)),
                  elements=st.floats(-4, 4, allow_nan=False).map(lambda v: round(v, 2)))


class TestW2:
    def test_identical(self, rng):
        x = rng.normal(size=(6, 2))
        assert D.w2_distance(x, x[::-1]) == 0.0

    def test_dirac_pair(self):
        assert D.w2_distance([[0.0]], [[1.0]]) == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            D.w2_distance(np.zeros((2, 2)), np.zeros((2, 3)))
        with pytest.raises(DimensionMismatch):
            D.w2_distance_flow(np.zeros((2, 2)), np.zeros((3, 3)))

    def test_brute_force_suite(self):
        rng = np.random.default_rng(9)
        worst = 0.0
        for _ in range(50):
            x, y = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
            worst = max(worst, abs(D.w2_distance(x, y) - brute_force_w2(x, y)))
        assert worst <= 1e-12

    def test_flow_path_matches_assignment_on_equal_counts(self):
        rng = np.random.default_rng(10)
        for n in (1, 3, 5, 8):
            x, y = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
            assert abs(D.w2_distance_flow(x, y) - D.w2_distance(x, y)) <= 1e-12

    def test_unequal_counts_split_mass(self):
        # one particle at 0 against two at +-1: every unit of mass moves distance 1
        assert D.w2_distance([[0.0]], [[-1.0], [1.0]]) == pytest.approx(1.0, abs=1e-15)

    def test_unequal_counts_against_duplicated_cloud(self, rng):
        # the uniform measure on y equals the one on y repeated, so both paths must agree
        x, y = rng.normal(size=(3, 2)), rng.normal(size=(2, 2))
        a = D.w2_distance(x, y)
        y6, x6 = np.repeat(y, 3, axis=0), np.repeat(x, 2, axis=0)
        assert a == pytest.approx(D.w2_distance(x6, y6), abs=1e-12)

    def test_padding_ignored(self, rng):
        x, y = rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
        padded = D.w2_distance(DiscreteMeasure(x).with_padding(2), DiscreteMeasure(y).with_padding(5))
        assert padded == D.w2_distance(x, y)

    def test_unsupported_scale(self):
        with pytest.raises(UnsupportedScale):
            D.w2_distance(np.zeros((997, 1)), np.zeros((991, 1)))

    @settings(max_examples=40, deadline=None)
    @given(cloud(), cloud())
    def test_symmetric(self, x, y):
        assert D.w2_distance(x, y) == D.w2_distance(y, x)

    @settings(max_examples=40, deadline=None)
    @given(cloud(), cloud())
    def test_identity_of_indiscernibles(self, x, y):
        d = D.w2_distance(x, y)
        ux, cx = np.unique(x, axis=0, return_counts=True)
        uy, cy = np.unique(y, axis=0, return_counts=True)
        same = ux.shape == uy.shape and np.array_equal(ux, uy) and np.allclose(
            cx / cx.sum(), cy / cy.sum())
        assert (d <= 1e-12) if same else (d > 0)

    @settings(max_examples=30, deadline=None)
    @given(cloud(1, 4), cloud(1, 4), cloud(1, 4))
    def test_triangle(self, x, y, z):
        assert D.w2_distance(x, z) <= D.w2_distance(x, y) + D.w2_distance(y, z) + 1e-10


class TestEps:
    def test_values(self):
        assert D.eps_t(1) == 1.0 and D.eps_t(4) == 0.5 and D.eps_t(16) == 0.25

    def test_start_at_one(self):
        with pytest.raises(ValueError):
            D.eps_t(0)


class TestPL:
    def test_mu_equals_mu_star_skips_everything(self, rng):
        mu_star = rng.normal(size=(5, 2))
        with pytest.raises(AllTermsSkipped):
            D.pl_ratio_masked(torch.tensor(mu_star), torch.ones(5, dtype=torch.bool), 4,
                              _ConstantRng(mu_star))

    def test_far_fixture(self):
        mu_star = np.random.default_rng(5).normal(size=(7, 2)) + 4
        v = D.pl_ratio(None, None, mu_star, 8, np.random.default_rng(11))
        assert math.isfinite(v) and v > 0
        assert v == pytest.approx(PL_FAR, rel=1e-9)

    def test_common_permutation(self, rng):
        mu_star = rng.normal(size=(6, 2)) + 2
        perm = rng.permutation(6)
        a = D.pl_ratio(None, None, mu_star, 8, np.random.default_rng(3))
        b = D.pl_ratio(None, None, mu_star[perm], 8, _PermutedRng(np.random.default_rng(3), perm))
        assert abs(a - b) <= 1e-12

    def test_pure(self, rng):
        mu_star = rng.normal(size=(6, 2))
        before = mu_star.copy()
        D.pl_ratio(None, None, mu_star, 2, 0)
        assert np.array_equal(mu_star, before)


class _ConstantRng:
    """Draws that always return ``value``: every random measure coincides with it."""

    def __init__(self, value):
        self.value = value

    def standard_normal(self, shape):
        return np.broadcast_to(self.value, shape).copy()


class _PermutedRng:
    """Same draws as ``rng`` with particles reordered by ``perm``."""

    def __init__(self, rng, perm):
        self.rng, self.perm = rng, perm

    def standard_normal(self, shape):
        return self.rng.standard_normal(shape)[..., self.perm, :]


def fixed_point_instance():
    params = net.init_params(tiny_config(), 21)
    gen = torch.Generator().manual_seed(21)
    Z = torch.randn(6, 8, generator=gen, dtype=DTYPE)
    X = torch.randn(5, 2, generator=gen, dtype=DTYPE)
    Zs, _ = solver.solve(Z, X, params, solver.FlowConfig(iterations=30, step_size=1.0))
    return params, Z, X, Zs


class TestDiscrepancy:
    def test_identity_map_is_zero(self, rng):
        z = torch.tensor(rng.normal(size=(1, 5, 2)))
        mask = torch.ones(1, 5, dtype=torch.bool)
        # F = identity: mu_t is its own image, so the inner gradient vanishes
        prob = types.SimpleNamespace(zmask=mask, free=mask,
                                     direction=lambda Z, k, rescale: (torch.zeros_like(Z), None))
        assert D.grad_discrepancy_masked(prob, z, z, 3).tolist() == [0.0]

    def test_seeded_fixtures(self):
        params, Z, X, Zs = fixed_point_instance()
        at = D.grad_discrepancy_ratio(params, X, Zs, Zs, 4)
        off = D.grad_discrepancy_ratio(params, X, Z, Zs, 4)
        assert at == pytest.approx(DISCREPANCY_AT_FIXED_POINT, rel=1e-9)
        assert off == pytest.approx(DISCREPANCY_OFF_FIXED_POINT, rel=1e-9)

    def test_scales_with_inverse_eps(self):
        params, _, X, Zs = fixed_point_instance()
        r4 = D.grad_discrepancy_ratio(params, X, Zs, Zs, 4)
        r16 = D.grad_discrepancy_ratio(params, X, Zs, Zs, 16)
        assert r16 == pytest.approx(2 * r4, rel=1e-14)

    def test_pinned_rows_excluded(self):
        params, _, X, Zs = fixed_point_instance()
        pin = np.ones(6, dtype=bool)
        # with every row pinned both gradients are masked, so nothing is left to compare
        assert D.grad_discrepancy_ratio(params, X, Zs, Zs, 2, pin_mask=pin) == 0.0


class TestTheorem:
    def test_zero(self):
        assert D.theorem_ratio([0.0] * 10) == 0.0

    @pytest.mark.parametrize("T", [2, 10, 100])
    def test_constant_closed_form(self, T):
        g2 = 0.7
        assert D.theorem_ratio([g2] * T) == pytest.approx(g2 * math.sqrt(T) / math.log(T) ** 2,
                                                          rel=1e-14)

    def test_constant_grows(self):
        vals = [D.theorem_ratio([1.0] * T) for T in (100, 1000, 10000)]
        assert vals[0] < vals[1] < vals[2]

    def test_explicit_horizon(self):
        assert D.theorem_ratio([1.0, 2.0, 100.0], T=2) == pytest.approx(3 / (math.sqrt(2) * math.log(2) ** 2))

    def test_short_series(self):
        with pytest.raises(ValueError):
            D.theorem_ratio([1.0])
