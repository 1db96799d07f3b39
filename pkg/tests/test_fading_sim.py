import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wncs_lab import channel_physics as phys
from wncs_lab import fading_sim as fs


def exp_acf(variance, rho, p):
    return variance * rho ** np.arange(p + 1)


class TestAcf:
    def test_zero_lag_is_variance(self):
        spec = fs.AcfSpec(4.0, "time", 1.5, 0.001)
        assert fs.acf_values(spec, 3)[0] == 4.0

    def test_shadowing_lag_one(self):
        spec = fs.AcfSpec(4.0, "distance", 9.0, 0.001, speed_mps=5.37)
        assert fs.acf_values(spec, 1)[1] == pytest.approx(3.99761404521396, rel=1e-12)

    def test_zero_variance(self):
        spec = fs.AcfSpec(0.0, "time", 1.5, 0.001)
        assert not fs.acf_values(spec, 5).any()

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            fs.AcfSpec(1.0, "frequency", 1.0, 0.001)
        with pytest.raises(ValueError):
            fs.AcfSpec(-1.0, "time", 1.0, 0.001)


class TestFit:
    def test_scalar_yule_walker(self):
        m = fs.fit_ar([1.0, 0.5])
        assert m.coeffs == pytest.approx((-0.5,), abs=1e-15)
        assert m.noise_variance == pytest.approx(0.75, abs=1e-15)

    def test_white(self):
        m = fs.fit_ar([2.0, 0.0, 0.0, 0.0])
        assert np.allclose(m.coeffs, 0.0)
        assert m.noise_variance == pytest.approx(2.0)

    def test_order_two_matches_linear_solve(self):
        r = np.array([1.0, 0.5, 0.25])
        toe = np.array([[r[0], r[1]], [r[1], r[0]]])
        expect = -np.linalg.solve(toe, r[1:])
        m = fs.fit_ar(r)
        assert np.allclose(m.coeffs, expect, atol=1e-14)
        assert np.allclose(m.coeffs, [-0.5, 0.0], atol=1e-14)

    def test_not_positive_definite(self):
        with pytest.raises(fs.ArFitError) as info:
            fs.fit_ar([1.0, 1.0, 1.0])
        assert info.value.condition is None or info.value.condition > 1e10

    def test_zero_variance_rejected(self):
        with pytest.raises(fs.ArFitError):
            fs.fit_ar([0.0, 0.0])

    @pytest.mark.parametrize("p", [1, 10, 50])
    @pytest.mark.parametrize("rho", [0.5, 0.9, 0.999, 0.99993])
    def test_acf_match(self, p, rho):
        r = exp_acf(3.0, rho, p)
        model = fs.fit_ar(r)
        back = fs.theoretical_acf(model, p)
        assert np.allclose(back, r, rtol=1e-9, atol=0)
        assert model.is_stationary()
        assert 0 <= model.noise_variance <= r[0]

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.01, 100.0), st.floats(0.05, 0.9999), st.integers(1, 30))
    def test_fitted_models_stationary(self, var, rho, p):
        m = fs.fit_ar(exp_acf(var, rho, p))
        assert m.spectral_radius() < 1.0
        assert 0 <= m.noise_variance <= var * (1 + 1e-12)


class TestTheoreticalAcf:
    def test_ar1_closed_form(self):
        m = fs.ArModel((-0.5,), 0.75)
        assert np.allclose(fs.theoretical_acf(m, 10), 0.5 ** np.arange(11), atol=1e-14)

    def test_zero_order(self):
        out = fs.theoretical_acf(fs.ArModel((), 2.5), 4)
        assert out.tolist() == [2.5, 0, 0, 0, 0]

    def test_extension_follows_recursion(self):
        m = fs.fit_ar(exp_acf(1.0, 0.8, 3))
        r = fs.theoretical_acf(m, 8)
        a = np.asarray(m.coeffs)
        for n in range(4, 9):
            assert r[n] == pytest.approx(-np.dot(a, r[n - 1:n - 4:-1]), abs=1e-15)


class TestGenerate:
    def test_silent_model(self):
        assert not fs.generate(fs.ArModel((0.0, 0.0), 0.0), 100, seed=1).any()

    def test_seed_reproducible(self):
        m = fs.fit_ar(exp_acf(1.0, 0.9, 5))
        a = fs.generate(m, 1000, seed=7, burn_in=20)
        b = fs.generate(m, 1000, seed=7, burn_in=20)
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, fs.generate(m, 1000, seed=8, burn_in=20))

    def test_lag_one_statistics(self):
        m = fs.ArModel((-0.5,), 0.75)
        z = fs.generate(m, 1_000_000, seed=3)
        r1 = np.dot(z[1:], z[:-1]) / np.dot(z, z)
        # large-sample sd of the lag-1 estimator for AR(1) is sqrt((1-rho^2)/n)
        se = np.sqrt((1 - 0.25) / len(z))
        assert abs(r1 - 0.5) < 3 * se
        assert np.var(z) == pytest.approx(1.0, rel=0.01)

    def test_refuses_unstable(self):
        with pytest.raises(ValueError):
            fs.generate(fs.ArModel((-1.5,), 1.0), 10, seed=0)

    def test_bad_arguments(self):
        m = fs.ArModel((-0.5,), 0.75)
        with pytest.raises(ValueError):
            fs.generate(m, 0, seed=0)
        with pytest.raises(ValueError):
            fs.generate(m, 5, seed=0, burn_in=-1)

    def test_stationary_start_without_burn_in(self):
        # highly correlated process: the first sample must already have the target variance
        m = fs.fit_ar(exp_acf(4.0, 0.9999, 3))
        first = np.array([fs.generate(m, 1, seed=s, burn_in=0)[0] for s in range(4000)])
        assert np.var(first) == pytest.approx(4.0, rel=0.1)


class TestStream:
    def test_stream_matches_itself_across_block_sizes(self):
        m = fs.fit_ar(exp_acf(1.0, 0.95, 4))
        a = fs.ArStream(m, np.random.default_rng(5), block=7)
        b = fs.ArStream(m, np.random.default_rng(5), block=7)
        xs = [a.next() for _ in range(30)]
        ys = b.take(30)
        assert np.array_equal(xs, ys)


class TestSinrGenerator:
    def test_degenerate_noise_is_deterministic(self):
        p = phys.ChannelParams(sigma_beta=0.0, sigma_xi=0.0)
        gen = fs.SinrGenerator(p, 0.001, seed=1, order=5)
        expect = phys.sinr_linear(p, phys.LinkRealization(16.0, 10.0))
        for _ in range(5):
            gdb, g = gen.step(2.0)
            assert g == pytest.approx(expect, rel=1e-12)
            assert gdb == pytest.approx(10 * np.log10(expect), abs=1e-12)

    def test_moving_away_lowers_sinr(self):
        p = phys.ChannelParams()
        a = fs.SinrGenerator(p, 0.001, seed=4, order=5)
        b = fs.SinrGenerator(p, 0.001, seed=4, order=5)
        for y1 in (0.0, 1.0, 3.0):
            assert b.step(y1 + 0.5)[0] < a.step(y1)[0]

    def test_block_equals_steps(self):
        p = phys.ChannelParams()
        pos = np.linspace(0.0, 3.0, 50)
        a = fs.SinrGenerator(p, 0.001, seed=9, order=5)
        b = fs.SinrGenerator(p, 0.001, seed=9, order=5)
        stepped = np.array([a.step(y)[1] for y in pos])
        assert np.allclose(b.block(pos), stepped, rtol=1e-14)


def test_trace_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    g = rng.normal(size=6)
    y = rng.normal(size=(6, 4))
    u = rng.normal(size=6)
    d = np.array([1, 0, 1, 1, 0, 1])
    path = tmp_path / "t.csv"
    fs.write_trace_csv(path, g, y, u, d)
    assert path.read_text().splitlines()[0] == "k,gamma_db,y1,y2,y3,y4,u,delivered"
    back = fs.read_trace_csv(path)
    assert np.array_equal(back["gamma_db"], g)
    assert np.array_equal(np.column_stack([back[f"y{i}"] for i in range(1, 5)]), y)
    assert np.array_equal(back["delivered"], d)
