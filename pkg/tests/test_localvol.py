"""Normal-model local volatility from the fitted variance smiles."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hjmlv.errors import LocalVolError, ValidationError
from hjmlv.localvol import (build_local_vol_surface, local_variance, local_vol_row,
                            lv_dump)
from hjmlv.smallvol import ForwardVolGrid
from hjmlv.smile import build_variance_grid, eval_smile, fit_smile_table

OFFSETS = (-0.02, -0.01, 0.0, 0.01, 0.02)
NB = 24


def surface_from(sig_of_x, **limits):
    grids = {x: ForwardVolGrid(np.triu(sig_of_x(x)), 0.25, x) for x in OFFSETS}
    return build_local_vol_surface(fit_smile_table(build_variance_grid(grids)), grids, **limits)


@pytest.fixture(scope="module")
def flat():
    return surface_from(lambda x: np.full((NB, NB), 0.0093))


@pytest.fixture(scope="module")
def quad_sig():
    return np.random.default_rng(3).uniform(0.004, 0.012, (NB, NB))


@pytest.fixture(scope="module")
def quad(quad_sig):
    # sigma^2 quadratic in x, so every smile fit is exact
    return surface_from(lambda x: quad_sig * math.sqrt(1 + 50 * x * x))


def denominator(fit, x):
    w, wx, wxx = eval_smile(fit, x)
    return 1 - x / w * wx + 0.25 * (-1 / w + x * x / (w * w)) * wx * wx + 0.5 * wxx


class TestLocalVariance:
    @given(st.integers(1, NB - 2), st.integers(0, NB - 1), st.floats(-0.3, 0.3))
    def test_flat_smile_degenerates(self, flat, i, j, x):
        if j <= i:
            return
        v2, clamped = local_variance(flat, i, j, x)
        assert math.sqrt(v2) == pytest.approx(0.0093, abs=1e-12)
        assert not clamped

    def test_reduced_denominator_at_zero(self, quad):
        for i, j in [(1, 3), (5, 12), (10, 20)]:
            fit = quad.table.fit_at(i, j)
            w, wx, wxx = eval_smile(fit, 0.0)
            num = (quad.table.fit_at(i + 1, j).alpha - w) / 0.25
            v2, _ = local_variance(quad, i, j, 0.0)
            assert v2 == pytest.approx(num / (1 - wx * wx / (4 * w) + 0.5 * wxx), rel=1e-12)

    def test_numerator_is_cell_variance(self, quad, quad_sig):
        for i, j in [(1, 3), (5, 12), (10, 20)]:
            num = (quad.table.fit_at(i + 1, j).alpha - quad.table.fit_at(i, j).alpha) / 0.25
            assert num == pytest.approx(quad_sig[i, j] ** 2, rel=1e-9)

    def test_first_row_bypass(self, quad, quad_sig):
        for x, scale in [(0.0, 1.0), (0.004, 1.0), (-0.017, math.sqrt(1.02)),
                         (0.3, math.sqrt(1.02))]:
            v2, clamped = local_variance(quad, 0, 7, x)
            assert v2 == pytest.approx((quad_sig[0, 7] * scale) ** 2, rel=1e-14)
            assert not clamped

    @pytest.mark.parametrize("i,j", [(3, 2), (4, 4), (0, NB), (NB, NB)])
    def test_invalid_indices(self, flat, i, j):
        with pytest.raises(ValidationError):
            local_variance(flat, i, j, 0.0)

    def test_cap_counts_as_clamp(self):
        s = surface_from(lambda x: np.full((NB, NB), 0.0093), v_max=0.005)
        v2, clamped = local_variance(s, 3, 10, 0.0)
        assert v2 == pytest.approx(0.005 ** 2) and clamped

    def test_bad_limits(self):
        with pytest.raises(ValidationError):
            surface_from(lambda x: np.full((NB, NB), 0.01), v_min=0.3)

    def test_non_finite_named(self, flat):
        with pytest.raises(LocalVolError, match="i=2"):
            local_variance(flat, 2, 5, math.nan)


class TestLocalVolRow:
    def test_flat_zero_strikes(self, flat):
        vols, clamps = local_vol_row(flat, 4, np.zeros(NB - 5))
        np.testing.assert_allclose(vols, 0.0093, atol=1e-12)
        assert clamps == 0

    def test_matches_scalar(self, lv):
        rng = np.random.default_rng(11)
        for i in (0, 1, 9, 40):
            strikes = rng.normal(0, 0.02, (5, 199 - i))
            vols, clamps = local_vol_row(lv, i, strikes)
            ref = [[local_variance(lv, i, i + 1 + k, strikes[p, k]) for k in range(199 - i)]
                   for p in range(5)]
            np.testing.assert_array_equal(vols, np.sqrt([[r[0] for r in row] for row in ref]))
            assert clamps == sum(r[1] for row in ref for r in row)

    def test_beyond_outer_knot_is_tail(self, lv):
        far = local_vol_row(lv, 12, np.full(60, 0.25), start=30)[0]
        edge = local_vol_row(lv, 12, np.full(60, 0.5), start=30)[0]
        np.testing.assert_array_equal(far, edge)

    def test_row_past_grid_rejected(self, lv):
        with pytest.raises(ValidationError):
            local_vol_row(lv, 8, np.zeros(200), start=9)

    def test_one_dimensional_shape(self, lv):
        vols, _ = local_vol_row(lv, 8, np.zeros(10), start=20)
        assert vols.shape == (10,)

    def test_non_finite_named(self, lv):
        strikes = np.zeros((2, 5))
        strikes[1, 3] = math.inf
        with pytest.raises(LocalVolError, match="j=10"):
            local_vol_row(lv, 4, strikes, start=7)


class TestFixtureSurface:
    def test_clamp_rate_after_two_years(self, lv):
        xs = np.round(np.arange(-0.1, 0.1001, 0.005), 6)
        total = clamps = 0
        for i in range(8, 80):
            strikes = np.tile(xs[:, None], (1, 199 - i))
            clamps += local_vol_row(lv, i, strikes)[1]
            total += strikes.size
        assert clamps / total < 0.01

    def test_positive_finite(self, lv):
        rng = np.random.default_rng(5)
        for i in (0, 1, 20, 79, 150):
            vols, _ = local_vol_row(lv, i, rng.normal(0, 0.05, (20, 199 - i)))
            assert np.all(np.isfinite(vols)) and np.all(vols > 0)

    def test_continuous_inside_pieces(self, lv):
        h = 1e-7
        rng = np.random.default_rng(9)
        knots = (-0.1, -0.02, 0.02, 0.1)
        for i, j in [(1, 5), (8, 40), (40, 80), (79, 199)]:
            for x in rng.uniform(-0.12, 0.12, 200):
                if min(abs(x - k) for k in knots) < 2 * h:
                    continue
                a = local_variance(lv, i, j, x - h)[0]
                b = local_variance(lv, i, j, x + h)[0]
                assert abs(math.sqrt(a) - math.sqrt(b)) < 1e-4 * math.sqrt(a)

    def test_knot_jump_is_curvature_jump(self, lv):
        # w is C1, not C2: the only jump at a knot comes from the 1/2 w_xx term
        tab = lv.table
        for i, j in [(8, 40), (40, 80)]:
            fit, nxt = tab.fit_at(i, j), tab.fit_at(i + 1, j)
            for k in (-0.1, -0.02, 0.02, 0.1):
                lo, hi = k - 1e-12, k + 1e-12
                d_lo, d_hi = denominator(fit, lo), denominator(fit, hi)
                jump = 0.5 * (eval_smile(fit, lo)[2] - eval_smile(fit, hi)[2])
                assert d_lo - d_hi == pytest.approx(jump, rel=1e-6, abs=1e-9)
                num = (eval_smile(nxt, k)[0] - eval_smile(fit, k)[0]) / 0.25
                assert local_variance(lv, i, j, hi)[0] == pytest.approx(
                    num / max(d_hi, 0.1), rel=1e-6)

    def test_dump(self, lv):
        rows = lv_dump(lv, 8, 40)
        assert len(rows) == 49 and rows[24][2] == 0.0
