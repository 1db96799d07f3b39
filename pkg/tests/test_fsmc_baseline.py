import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from wncs_lab import channel_physics as phys
from wncs_lab import fsmc_baseline as fsmc

STD = fsmc.GaussianSinrMoments(0.0, 1.0, 0.0)


def correlated_pairs(rho, n, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    y = rho * x + math.sqrt(1 - rho * rho) * rng.standard_normal(n)
    return x, y


class TestMoments:
    def test_no_fading_gives_deterministic_mean(self):
        p = phys.ChannelParams(sigma_beta=0.0, sigma_xi=0.0)
        m = fsmc.moment_match(p, 5.0, 10_000, seed=1, n_chains=4, ar_order=5, allow_degenerate=True)
        det = phys.sinr_db(phys.sinr_linear(p, phys.LinkRealization(19.0, 10.0)))
        assert m.variance_db2 == 0.0
        assert m.mean_db == pytest.approx(det, abs=1e-9)

    def test_degenerate_trace_is_an_error(self):
        p = phys.ChannelParams(sigma_beta=0.0, sigma_xi=0.0)
        with pytest.raises(ValueError):
            fsmc.moment_match(p, 5.0, 10_000, seed=1, n_chains=4, ar_order=5)

    def test_minimum_sample_count(self):
        with pytest.raises(ValueError):
            fsmc.moment_match(phys.ChannelParams(), 5.0, 100, seed=1)

    def test_interference_free_matches_closed_form(self):
        p = phys.ChannelParams(p1_dbm=-1e300)
        exact = fsmc.analytic_moments_interference_free(p, 5.0)
        mc = fsmc.moment_match(p, 5.0, 200_000, seed=11, ar_order=10)
        assert abs(mc.mean_db - exact.mean_db) < 3 * mc.stderr["mean_db"]
        assert abs(mc.variance_db2 - exact.variance_db2) < 3 * mc.stderr["variance_db2"]

    def test_standard_error_shrinks_with_samples(self):
        p = phys.ChannelParams()
        small = fsmc.moment_match(p, 5.0, 64_000, seed=2, ar_order=10)
        big = fsmc.moment_match(p, 5.0, 128_000, seed=3, ar_order=10)
        ratio = big.stderr["mean_db"] / small.stderr["mean_db"]
        # 1/sqrt(2) in expectation; chain-level estimates are noisy
        assert 0.4 < ratio < 1.0

    def test_moment_validation(self):
        with pytest.raises(ValueError):
            fsmc.GaussianSinrMoments(0.0, 1.0, 1.5)
        with pytest.raises(ValueError):
            fsmc.GaussianSinrMoments(0.0, -1.0, 0.0)


class TestThresholds:
    def test_median_split(self):
        m = fsmc.GaussianSinrMoments(3.0, 4.0, 0.0)
        th = fsmc.equiprobable_thresholds(m, 2)
        assert th[0] == -np.inf and th[2] == np.inf and th[1] == pytest.approx(3.0)

    def test_quartiles(self):
        th = fsmc.equiprobable_thresholds(STD, 4)
        assert np.allclose(th[1:4], [-0.6744897501960817, 0.0, 0.6744897501960817], atol=1e-12)

    @given(st.integers(2, 30), st.floats(-30, 30), st.floats(0.1, 20))
    def test_equal_masses(self, n, mu, var):
        m = fsmc.GaussianSinrMoments(mu, var, 0.0)
        probs = fsmc.region_probs(m, fsmc.equiprobable_thresholds(m, n))
        assert np.allclose(probs, 1.0 / n, atol=1e-9)
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_needs_two_states(self):
        with pytest.raises(ValueError):
            fsmc.equiprobable_thresholds(STD, 1)


class TestStatePdp:
    def test_dead_channel(self):
        m = fsmc.GaussianSinrMoments(-200.0, 1.0, 0.0)
        th = np.array([-np.inf, np.inf])
        assert fsmc.state_pdp(m, th, 0, 1064) == pytest.approx(0.0, abs=1e-12)

    def test_strong_region(self):
        m = fsmc.GaussianSinrMoments(30.0, 4.0, 0.0)
        th = np.array([-np.inf, 10.0, np.inf])
        assert fsmc.state_pdp(m, th, 1, 1064) >= 1 - 1e-9

    def test_point_mass(self):
        m = fsmc.GaussianSinrMoments(-3.0, 0.0, 0.0)
        th = np.array([-np.inf, np.inf])
        expect = 1 - phys.packet_error_rate(10 ** -0.3, 1064)
        assert fsmc.state_pdp(m, th, 0, 1064) == pytest.approx(expect, abs=1e-15)

    def test_against_rejection_sampling(self):
        m = fsmc.GaussianSinrMoments(-4.0, 9.0, 0.0)
        th = fsmc.equiprobable_thresholds(m, 9)
        draws = m.mean_db + m.std_db * np.random.default_rng(0).standard_normal(1_000_000)
        delivery = 1 - phys.error_rate(10 ** (draws / 10), 1064, "bit")
        region = np.searchsorted(th, draws, side="right") - 1
        for r in range(9):
            sample = delivery[region == r]
            se = sample.std(ddof=1) / math.sqrt(len(sample))
            pdp = fsmc.state_pdp(m, th, r, 1064, "bit")
            assert abs(pdp - sample.mean()) <= 3 * se + 1e-12

    def test_monotone_in_region(self):
        model = fsmc.build_fsmc(fsmc.GaussianSinrMoments(-2.0, 6.0, 5.0), 9, loss_model="bit")
        assert np.all(np.diff(model.pdp) >= 0)
        assert np.all((model.pdp >= 0) & (model.pdp <= 1))


class TestBivariate:
    def test_independent_factorizes(self):
        v = fsmc.bvn_rectangle(-0.3, 1.2, 0.1, 2.0, 0.0)
        expect = (norm.cdf(1.2) - norm.cdf(-0.3)) * (norm.cdf(2.0) - norm.cdf(0.1))
        assert v == pytest.approx(expect, abs=1e-12)

    def test_random_rectangles_against_monte_carlo(self):
        rng = np.random.default_rng(42)
        n = 400_000
        for _ in range(20):
            rho = rng.uniform(-0.95, 0.99)
            a1, b1 = np.sort(rng.normal(size=2) * 1.5)
            a2, b2 = np.sort(rng.normal(size=2) * 1.5)
            x, y = correlated_pairs(rho, n, int(rng.integers(1 << 30)))
            hit = (x > a1) & (x < b1) & (y > a2) & (y < b2)
            p_hat = hit.mean()
            se = math.sqrt(max(p_hat * (1 - p_hat), 1e-12) / n)
            assert abs(fsmc.bvn_rectangle(a1, b1, a2, b2, rho) - p_hat) <= 3 * se + 1e-9

    def test_rejects_perfect_correlation(self):
        with pytest.raises(ValueError):
            fsmc.bvn_rectangle(0, 1, 0, 1, 1.0)


class TestTpm:
    def test_independent_rows_are_steady_probs(self):
        m = fsmc.GaussianSinrMoments(1.0, 2.0, 0.0)
        P = fsmc.tpm_physics(m, fsmc.equiprobable_thresholds(m, 9))
        assert np.allclose(P, 1 / 9, atol=1e-12)

    def test_high_correlation_near_identity(self):
        m = fsmc.GaussianSinrMoments(0.0, 1.0, 0.999)
        th = fsmc.equiprobable_thresholds(m, 2)
        P = fsmc.tpm_physics(m, th)
        assert np.abs(P - np.eye(2)).sum(axis=1).max() < 0.05
        x, y = correlated_pairs(0.999, 1_000_000, 5)
        stay = np.mean((x > 0) == (y > 0))
        assert P[0, 0] == pytest.approx(stay, abs=3 * math.sqrt(stay * (1 - stay) / 1e6))

    @settings(max_examples=15, deadline=None)
    @given(st.floats(-10, 10), st.floats(0.5, 16), st.floats(-0.9, 0.9999), st.integers(2, 9))
    def test_rows_stochastic_and_stationary(self, mu, var, rho, n):
        m = fsmc.GaussianSinrMoments(mu, var, rho * var)
        th = fsmc.equiprobable_thresholds(m, n)
        P = fsmc.tpm_physics(m, th)
        assert np.allclose(P.sum(axis=1), 1.0, atol=1e-9)
        assert np.all((P >= 0) & (P <= 1))
        pi = fsmc.stationary_distribution(P)
        assert 0.5 * np.abs(pi - 1 / n).sum() < 1e-3

    def test_matches_ar1_transition_frequencies(self):
        rho, n_states, n = 0.9, 4, 400_000
        m = fsmc.GaussianSinrMoments(0.0, 1.0, rho)
        th = fsmc.equiprobable_thresholds(m, n_states)
        P = fsmc.tpm_physics(m, th)
        rng = np.random.default_rng(8)
        z = np.empty(n)
        z[0] = rng.standard_normal()
        w = rng.standard_normal(n) * math.sqrt(1 - rho * rho)
        for k in range(1, n):
            z[k] = rho * z[k - 1] + w[k]
        s = np.searchsorted(th, z, side="right") - 1
        counts = np.zeros((n_states, n_states))
        np.add.at(counts, (s[:-1], s[1:]), 1)
        emp = counts / counts.sum(axis=1, keepdims=True)
        # transitions are serially dependent; inflate the binomial error accordingly
        se = np.sqrt(emp * (1 - emp) / counts.sum(axis=1, keepdims=True)) * math.sqrt((1 + rho) / (1 - rho))
        assert np.all(np.abs(P - emp) <= 3 * se + 1e-4)

    def test_correlation_one_rejected(self):
        m = fsmc.GaussianSinrMoments(0.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            fsmc.tpm_physics(m, fsmc.equiprobable_thresholds(m, 3))


def test_state_lookup_and_json_roundtrip():
    model = fsmc.build_fsmc(fsmc.GaussianSinrMoments(-3.0, 4.0, 3.9), 5, loss_model="bit")
    th = model.thresholds
    assert model.state_of(-1e9) == 0 and model.state_of(1e9) == 4
    assert model.state_of(th[2]) == 2
    assert model.state_of(np.nextafter(th[2], -np.inf)) == 1
    back = fsmc.FsmcModel.from_json(model.to_json())
    assert np.array_equal(back.thresholds, th)
    assert np.array_equal(back.tpm, model.tpm) and np.array_equal(back.pdp, model.pdp)
    assert back.moments == model.moments and back.loss_model == "bit"
    assert np.allclose(model.steady_probs, 0.2, atol=1e-12)
