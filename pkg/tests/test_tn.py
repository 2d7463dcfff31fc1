import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from merppg.data import standardize
from merppg.tn import TNState, fit_linear_trend, tn_chunk, tn_flow_init, tn_flow_step


class TestFitLinearTrend:
    def test_exact_linear_input(self):
        fit = fit_linear_trend(np.array([5.0, 7.0, 9.0, 11.0]))  # x_t = 2t + 3
        assert fit.beta0 == pytest.approx(2.0, abs=1e-12)
        assert fit.beta1 == pytest.approx(3.0, abs=1e-12)

    def test_constant_input(self):
        fit = fit_linear_trend(np.full(3, 4.25))
        assert fit.beta0 == pytest.approx(0.0, abs=1e-12)
        assert fit.beta1 == pytest.approx(4.25, abs=1e-12)

    def test_normal_equation_oracle(self):
        # beta0 = sum((t - tbar)(x - xbar)) / sum((t - tbar)^2) with t = 1..4
        # = 3.0 / 5.0 = 0.6;  beta1 = xbar - beta0 * tbar = 2 - 1.5 = 0.5
        fit = fit_linear_trend(np.array([1.0, 2.0, 2.0, 3.0]))
        assert fit.beta0 == pytest.approx(0.6, abs=1e-12)
        assert fit.beta1 == pytest.approx(0.5, abs=1e-12)

    def test_too_short(self):
        with pytest.raises(ValueError):
            fit_linear_trend(np.array([1.0]))

    def test_non_finite(self):
        with pytest.raises(ValueError):
            fit_linear_trend(np.array([1.0, np.nan, 2.0]))


class TestTnChunk:
    def test_exactly_linear_coordinate_maps_to_zero(self):
        t = np.arange(1, 101, dtype=np.float64)
        x = np.stack([2.0 * t + 3.0, -0.5 * t + 1.0], axis=1)
        out = tn_chunk(x)
        assert np.isfinite(out).all()
        assert np.abs(out).max() < 1e-9

    def test_detrend_oracle_on_sinusoid_plus_trend(self):
        # 30 s at 30 fps; the least-squares line couples with a finite
        # sinusoid at O(1/T), which stays under the 0.05 budget here
        t = np.arange(1, 901, dtype=np.float64)
        pure = np.sin(2.0 * np.pi * t / 30.0)
        out = tn_chunk(pure + 0.01 * t)
        assert np.abs(out - standardize(pure)).max() <= 0.05

    def test_residual_mean_and_unit_std(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            t_len = int(rng.integers(16, 400))
            scale = rng.uniform(2.0, 10.0)
            x = (
                rng.normal(scale=scale, size=t_len)
                + rng.uniform(-1, 1) * np.arange(1, t_len + 1)
                + rng.uniform(-5, 5)
            )
            out = tn_chunk(x)
            assert abs(out.mean()) <= 1e-6
            assert abs(np.sqrt(np.mean(out * out)) - 1.0) <= 1e-6

    def test_permuting_coordinates_permutes_outputs(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(64, 5))
        perm = rng.permutation(5)
        assert np.array_equal(tn_chunk(x)[:, perm], tn_chunk(x[:, perm]))

    def test_constant_column_is_finite_zero(self):
        x = np.stack([np.full(32, 3.0), np.random.default_rng(2).normal(size=32)], 1)
        out = tn_chunk(x)
        assert np.isfinite(out).all()
        assert np.abs(out[:, 0]).max() == 0.0

    @settings(max_examples=40, deadline=None)
    @given(
        a=st.floats(-4.0, 4.0).filter(lambda v: abs(v) >= 0.5),
        b=st.floats(-2.0, 2.0),
        c=st.floats(-50.0, 50.0),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_affine_invariance(self, a, b, c, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(scale=rng.uniform(1.0, 5.0), size=128)
        t = np.arange(1, 129, dtype=np.float64)
        transformed = a * x + b * t + c
        ref = np.sign(a) * tn_chunk(x)
        assert np.abs(tn_chunk(transformed) - ref).max() <= 1e-5


class TestTnFlow:
    def test_direct_formula_application(self):
        state = TNState(mu=np.zeros(1), var=np.zeros(1), alpha=0.9, eps=1e-6)
        state, out = tn_flow_step(state, np.array([1.0]))
        assert state.mu[0] == pytest.approx(0.1, abs=1e-15)
        assert state.var[0] == pytest.approx(0.081, abs=1e-15)
        assert out[0] == pytest.approx(0.9 / (np.sqrt(0.081) + 1e-6), rel=1e-12)
        assert state.warm == 1

    def test_constant_input_fixed_point(self):
        state = tn_flow_init(0.95, 1e-6, np.array([2.5, -1.0]))
        for _ in range(50):
            state, out = tn_flow_step(state, np.array([2.5, -1.0]))
            assert np.abs(out).max() == 0.0
        np.testing.assert_allclose(state.mu, [2.5, -1.0])

    def test_init_then_step_on_first_frame_is_zero(self):
        x1 = np.array([0.3, -4.0, 7.0])
        state = tn_flow_init(0.9, 1e-6, x1)
        _, out = tn_flow_step(state, x1)
        assert np.abs(out).max() == 0.0

    def test_init_validation(self):
        for alpha in (0.0, 1.0, -0.5, 1.5):
            with pytest.raises(ValueError):
                tn_flow_init(alpha, 1e-6, np.array([1.0]))
        with pytest.raises(ValueError):
            tn_flow_init(0.9, 0.0, np.array([1.0]))

    @pytest.mark.parametrize("hr_bpm", [72, 96, 120, 150])
    def test_flow_matches_chunk_after_warmup(self, hr_bpm):
        fps, seconds = 30.0, 60
        t = np.arange(1, int(fps * seconds) + 1)
        x = np.sin(2.0 * np.pi * (hr_bpm / 60.0) * t / fps) + 0.005 * t + 0.3
        chunk = tn_chunk(x)
        state = tn_flow_init(0.95, 1e-6, x[:1])
        flow = np.array([tn_flow_step(state, np.array([v]))[1][0] for v in x])
        warm = int(3 * fps)
        r = np.corrcoef(chunk[warm:], flow[warm:])[0, 1]
        assert r >= 0.95

    def test_state_size_constant_over_long_stream(self):
        state = tn_flow_init(0.95, 1e-6, np.zeros(4))
        size0 = state.nbytes()
        ids = (state.mu.ctypes.data, state.var.ctypes.data)
        rng = np.random.default_rng(0)
        for chunk in range(100):
            xs = rng.normal(size=(1000, 4))
            for x in xs:
                state, out = tn_flow_step(state, x)
                assert np.isfinite(out).all()
        assert state.nbytes() == size0
        assert (state.mu.ctypes.data, state.var.ctypes.data) == ids
        assert state.warm == 100_000
