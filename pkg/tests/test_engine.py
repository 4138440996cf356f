"""HJM path stepping, strike maps, estimators and the simulation driver."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hjmlv.curve import (DiscountCurve, TimeGrid, atm_swap_rate, discounts_from_forwards,
                         flat_curve, swap_rate_at_state)
from hjmlv.engine import (MartingaleObserver, Moments, PathState, SimConfig, Simulator,
                          TenorBlocks, hjm_drift_row, path_shocks, simulate,
                          step_constant_vol, step_local_vol, strike_row,
                          strike_row_longexpiry)
from hjmlv.errors import SimulationError, ValidationError
from hjmlv.localvol import build_local_vol_surface
from hjmlv.smallvol import ForwardVolGrid
from hjmlv.smile import build_variance_grid, fit_smile_table

NB = 200


def flat_grid(s, nb=NB):
    return ForwardVolGrid(np.triu(np.full((nb, nb), s)), 0.25)


@pytest.fixture(scope="module")
def flat_lv():
    grids = {x: ForwardVolGrid(np.triu(np.full((NB, NB), 0.009)), 0.25, x)
             for x in (-0.02, -0.01, 0.0, 0.01, 0.02)}
    return build_local_vol_surface(fit_smile_table(build_variance_grid(grids)), grids)


def naive_drift(v, dt):
    out = np.zeros(len(v))
    for r in range(len(v)):
        out[r] = 0.5 * v[r] ** 2 * dt + v[r] * dt * sum(v[l] for l in range(1, r))
    return out


class TestDrift:
    def test_zero(self):
        assert np.all(hjm_drift_row(np.zeros(12), 0.25) == 0.0)

    def test_constant_closed_form(self):
        c, dt, n = 0.01, 0.25, 7
        a = hjm_drift_row(np.full(NB - n, c), dt)
        for N in (n, n + 1, n + 2, n + 50, NB - 1):
            expect = 0.5 * c * c * dt + c * c * max(N - 1 - n, 0) * dt
            assert a[N - n] == pytest.approx(expect, rel=1e-12)

    def test_first_bucket(self):
        assert hjm_drift_row(np.array([0.02, 0.03]), 0.25)[1] == 0.5 * 0.03 ** 2 * 0.25

    @given(st.lists(st.floats(0.0, 0.05), min_size=1, max_size=80))
    def test_prefix_sum_matches_double_loop(self, v):
        np.testing.assert_allclose(hjm_drift_row(v, 0.25), naive_drift(v, 0.25),
                                   rtol=1e-13, atol=1e-15)

    def test_batched_rows(self):
        v = np.random.default_rng(1).uniform(0, 0.02, (3, 30))
        np.testing.assert_allclose(hjm_drift_row(v, 0.25)[1], naive_drift(v[1], 0.25),
                                   rtol=1e-14)


class TestConstantVolStep:
    def test_zero_vol_keeps_curve(self, fwd, disc):
        state = PathState.initial(fwd, 3)
        for n in range(40):
            step_constant_vol(state, flat_grid(0.0), np.full(3, 1.3))
        np.testing.assert_array_equal(state.forwards[:, 40:], np.tile(fwd.rates[40:], (3, 1)))
        assert state.money_market[0] == pytest.approx(disc.at(10.0), rel=1e-14)

    def test_single_step_by_hand(self, fwd):
        sig = np.triu(np.random.default_rng(2).uniform(0.005, 0.01, (NB, NB)))
        state = PathState.initial(fwd, 1)
        xi = 0.7
        step_constant_vol(state, ForwardVolGrid(sig, 0.25), np.array([xi]))
        v = sig[0]
        for N in (1, 2, 3, 40):
            alpha = 0.5 * v[N] ** 2 * 0.25 + v[N] * 0.25 * v[1:N].sum()
            expect = fwd.rates[N] + alpha * 0.25 + v[N] * xi * 0.5
            assert state.forwards[0, N] == pytest.approx(expect, rel=1e-14)
        assert state.mm_log[0] == -fwd.rates[0] * 0.25
        assert state.step == 1

    def test_one_factor(self, fwd):
        state = PathState.initial(fwd, 1)
        step_constant_vol(state, flat_grid(0.01), np.array([1.0]))
        up = state.forwards[0, 1:] - fwd.rates[1:]
        state = PathState.initial(fwd, 1)
        step_constant_vol(state, flat_grid(0.01), np.array([-1.0]))
        down = state.forwards[0, 1:] - fwd.rates[1:]
        # same shock on every bucket: the diffusion part is identical across buckets
        np.testing.assert_allclose((up - down) / 2, 0.01 * 0.5, rtol=1e-12)

    def test_antithetic_pair_averages_to_drift(self, fwd):
        grid = flat_grid(0.01)
        pair = PathState.initial(fwd, 2)
        drift = PathState.initial(fwd, 1)
        for n in range(20):
            step_constant_vol(pair, grid, np.array([0.9, -0.9]))
            step_constant_vol(drift, grid, np.zeros(1))
        np.testing.assert_allclose(pair.forwards[:, 20:].mean(axis=0), drift.forwards[0, 20:],
                                   rtol=0, atol=1e-15)

    def test_mm_nonincreasing_for_positive_rates(self, fwd):
        state = PathState.initial(fwd, 4)
        prev = state.mm_log.copy()
        for n in range(10):
            step_constant_vol(state, flat_grid(0.001), np.zeros(4))
            assert np.all(state.mm_log < prev)
            prev = state.mm_log.copy()


class TestStrikes:
    def test_initial_zero(self, fwd):
        assert np.all(strike_row(PathState.initial(fwd, 2), fwd) == 0.0)

    def test_parallel_shift(self, fwd):
        state = PathState.initial(fwd, 1)
        state.forwards += 0.01
        state.step = 9
        x = strike_row(state, fwd)
        assert x.shape == (1, NB - 9)
        np.testing.assert_allclose(x, 0.01, atol=1e-15)

    def test_longexpiry_zero_vol(self, fwd, disc):
        blocks = TenorBlocks((1.0, 5.0, 10.0), disc)
        state = PathState.initial(fwd, 2)
        for n in range(30):
            step_constant_vol(state, flat_grid(0.0), np.zeros(2))
        x = strike_row_longexpiry(state, fwd, 5.0, blocks)
        np.testing.assert_allclose(x, 0.0, atol=1e-15)

    def test_longexpiry_parallel_shift(self, grid):
        base = flat_curve(0.02, grid)
        disc0 = discounts_from_forwards(base, grid)
        blocks = TenorBlocks((1.0, 5.0), disc0)
        state = PathState.initial(base, 1)
        state.forwards += 0.01
        state.step = 28
        x = strike_row_longexpiry(state, base, 5.0, blocks)[0]
        brute = swap_rate_at_state(state, 28, 5.0)[0] - atm_swap_rate(disc0, 7.0, 5.0)
        assert x[4] == pytest.approx(brute, abs=1e-15)
        assert np.all(x[4:20] == x[4])
        assert x[4] == pytest.approx(0.01, abs=5e-4)
        np.testing.assert_allclose(x[20:], 0.01, atol=1e-15)

    def test_longexpiry_block_values(self, fwd, disc):
        blocks = TenorBlocks((1.0, 5.0), disc)
        state = PathState.initial(fwd, 1)
        state.forwards[:, 30:] += np.linspace(0.0, 0.02, NB - 30)
        state.step = 24
        x = strike_row_longexpiry(state, fwd, 5.0, blocks)[0]
        for tenor, lo, hi in ((1.0, 0, 4), (5.0, 4, 20)):
            r = swap_rate_at_state(state, 24, tenor)[0] - atm_swap_rate(disc, 6.0, tenor)
            np.testing.assert_allclose(x[lo:hi], r, atol=1e-15)
        np.testing.assert_array_equal(x[20:], strike_row(state, fwd)[0, 20:])

    def test_longexpiry_before_cutoff_and_disabled(self, fwd, disc):
        blocks = TenorBlocks((1.0, 5.0), disc)
        state = PathState.initial(fwd, 1)
        state.forwards += np.random.default_rng(4).normal(0, 0.01, NB)
        state.step = 20
        np.testing.assert_array_equal(strike_row_longexpiry(state, fwd, 5.0, blocks),
                                      strike_row(state, fwd))
        state.step = 60
        np.testing.assert_array_equal(strike_row_longexpiry(state, fwd, math.inf, blocks),
                                      strike_row(state, fwd))
        np.testing.assert_array_equal(strike_row_longexpiry(state, fwd, None, blocks),
                                      strike_row(state, fwd))

    def test_block_edges(self, disc):
        blocks = TenorBlocks((5.0, 1.0), disc)
        assert blocks.tenors == (1.0, 5.0) and blocks.widths == [4, 20]
        assert blocks.row_end(10, 12) == 14
        assert blocks.row_end(10, 15) == 30
        assert blocks.row_end(10, 31) == 31

    def test_bad_blocks(self, disc):
        with pytest.raises(ValidationError):
            TenorBlocks((), disc)


class TestLocalVolStep:
    def test_flat_surface_matches_constant_vol(self, fwd, flat_lv):
        a = PathState.initial(fwd, 4)
        b = PathState.initial(fwd, 4)
        xi = np.random.default_rng(8).standard_normal((60, 4))
        for n in range(60):
            step_constant_vol(a, flat_grid(0.009), xi[n])
            _, clamps = step_local_vol(b, flat_lv, fwd, xi[n])
            assert clamps == 0
        np.testing.assert_allclose(b.forwards, a.forwards, rtol=0, atol=1e-12)
        np.testing.assert_allclose(b.mm_log, a.mm_log, rtol=0, atol=1e-12)

    def test_first_step_uses_first_row(self, fwd, lv, extended):
        state = PathState.initial(fwd, 1)
        step_local_vol(state, lv, fwd, np.array([1.0]))
        other = PathState.initial(fwd, 1)
        step_constant_vol(other, extended[0.0], np.array([1.0]))
        np.testing.assert_array_equal(state.forwards, other.forwards)

    def test_no_clamps_in_calibrated_region(self, fwd, disc, lv):
        cfg = SimConfig(n_paths=2000, seed=3)
        ens = simulate(cfg, fwd, disc, lv, MartingaleObserver([20.0], 0.25))
        assert ens.clamps[2:].sum() == 0
        assert ens.clamp_rate() == 0.0


class TestMoments:
    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=40), st.integers(1, 39))
    def test_merge_matches_batch(self, ys, cut):
        y = np.array(ys)[:, None]
        cut = min(cut, len(ys) - 1)
        m = Moments.of(y[:cut]).merge(Moments.of(y[cut:]))
        assert m.n == len(ys)
        np.testing.assert_allclose(m.mean, y.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(m.stderr, y.std(axis=0, ddof=1) / math.sqrt(len(ys)),
                                   atol=1e-12)

    def test_empty_merge(self):
        one = Moments.of(np.ones((3, 2)))
        assert Moments(0, np.zeros(2), np.zeros(2)).merge(one) is one

    def test_single_observation_stderr(self):
        assert np.all(Moments.of(np.ones((1, 2))).stderr == 0.0)


class TestShocks:
    def test_streams_independent_of_batching(self):
        whole = path_shocks(5, 0, 10, 7)
        np.testing.assert_array_equal(whole[4:9], path_shocks(5, 4, 5, 7))

    def test_seed_changes_draws(self):
        assert not np.array_equal(path_shocks(5, 0, 2, 7), path_shocks(6, 0, 2, 7))


class TestSimulate:
    MAT = [1.0, 5.0, 10.0]

    def run(self, fwd, disc, model, **kw):
        cfg = SimConfig(**{"n_paths": 1000, "mode": "const", "seed": 9, **kw})
        return simulate(cfg, fwd, disc, model, MartingaleObserver(self.MAT, 0.25))

    def test_zero_vol_single_path(self, fwd, disc):
        ens = self.run(fwd, disc, flat_grid(0.0), n_paths=1, antithetic=False)
        for T in self.MAT:
            assert ens.mean(("bond", T)) == pytest.approx(disc.at(T), rel=1e-13)
            assert ens.stderr(("bond", T)) == 0.0

    def test_workers_bitwise(self, fwd, disc, extended):
        a = self.run(fwd, disc, extended[0.0], chunk_size=128, workers=1)
        b = self.run(fwd, disc, extended[0.0], chunk_size=128, workers=4)
        np.testing.assert_array_equal(a.moments.mean, b.moments.mean)
        np.testing.assert_array_equal(a.moments.m2, b.moments.m2)

    def test_stderr_scaling(self, fwd, disc, extended):
        small = self.run(fwd, disc, extended[0.0], n_paths=4000)
        big = self.run(fwd, disc, extended[0.0], n_paths=8000)
        ratio = big.stderr(("bond", 10.0)) / small.stderr(("bond", 10.0))
        assert ratio == pytest.approx(1 / math.sqrt(2), rel=0.2)

    def test_antithetic_observation_count(self, fwd, disc, extended):
        ens = self.run(fwd, disc, extended[0.0], n_paths=200)
        assert ens.moments.n == 100 and ens.n_paths == 200

    def test_martingale_small_run(self, fwd, disc, extended):
        ens = self.run(fwd, disc, extended[0.0], n_paths=4000)
        for T in self.MAT:
            key = ("bond", T)
            assert abs(ens.mean(key) - disc.at(T)) < 4 * ens.stderr(key)

    def test_mode_model_mismatch(self, fwd, disc, lv):
        with pytest.raises(ValidationError):
            self.run(fwd, disc, lv)

    def test_dt_mismatch(self, fwd, disc, extended):
        with pytest.raises(ValidationError):
            self.run(fwd, disc, extended[0.0], dt=0.5)

    @pytest.mark.parametrize("kw", [{"n_paths": 0}, {"mode": "x"}, {"n_paths": 3},
                                    {"chunk_size": 1, "antithetic": False}, {"workers": 0}])
    def test_bad_config(self, kw):
        with pytest.raises(ValidationError):
            SimConfig(**kw)

    def test_memory_error_reports_progress(self, fwd, disc, extended, monkeypatch):
        cfg = SimConfig(n_paths=64, mode="const", chunk_size=16)
        sim = Simulator(cfg, fwd, disc, extended[0.0], MartingaleObserver([1.0], 0.25))
        real = sim.run_chunk

        def flaky(start, count):
            if start >= 32:
                raise MemoryError
            return real(start, count)

        monkeypatch.setattr(sim, "run_chunk", flaky)
        with pytest.raises(SimulationError) as info:
            sim.run()
        assert info.value.completed == 32

    def test_plan_truncates_dead_buckets(self, fwd, disc, extended):
        sim = Simulator(SimConfig(n_paths=2, mode="const"), fwd, disc, extended[0.0],
                        MartingaleObserver([5.0], 0.25))
        assert sim.n_steps == 20
        assert list(sim.ends) == [21] * 20 + [21]

    def test_plan_extends_blocks_past_cutoff(self, fwd, disc, lv):
        blocks = TenorBlocks((1.0, 10.0), disc)
        cfg = SimConfig(n_paths=2, long_expiry_cutoff=5.0)
        sim = Simulator(cfg, fwd, disc, lv, MartingaleObserver([8.0], 0.25), blocks)
        # step 28 needs the whole 10y block (28 + 40); from 29 on the 1y block reaches 33
        assert sim.ends[28] == 68 and sim.ends[29] == 35 and sim.ends[32] == 33
        assert sim.ends[10] == 68
