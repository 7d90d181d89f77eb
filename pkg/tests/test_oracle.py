import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import quad as squad
from scipy.special import iv

from sprisk import (
    Asset,
    ImpossibleLoss,
    NonIntegerExposure,
    Portfolio,
    analytic_family,
    compound_poisson_gamma_reference,
    conditional_pd_array,
    convolve_independent,
    exact_var_delta,
    exponential_reference,
    gamma_reference,
    mixed_exact,
    monte_carlo,
    normal_reference,
)
from sprisk.oracle import _enumerate


class TestConvolution:
    def test_single_asset(self):
        grid = convolve_independent([2], [0.3])
        assert_allclose(grid.probabilities, [0.7, 0.0, 0.3])

    def test_two_coin_flips(self):
        grid = convolve_independent([1, 1], [0.5, 0.5])
        assert_allclose(grid.probabilities, [0.25, 0.5, 0.25])

    def test_mass_sums_to_one(self, rng):
        for _ in range(5):
            n = rng.integers(2, 40)
            e = rng.integers(1, 30, n)
            p = rng.uniform(0.001, 0.99, n)
            grid = convolve_independent(e, p)
            assert abs(grid.probabilities.sum() - 1.0) < 1e-12

    def test_non_integer_exposure_rejected(self):
        with pytest.raises(NonIntegerExposure):
            convolve_independent([1.5, 2.0], [0.1, 0.1])

    def test_quantum_rescaling(self):
        grid = convolve_independent([1.5, 2.0], [0.1, 0.2], quantum=0.5)
        assert grid.quantum == 0.5
        assert len(grid.probabilities) == 8  # 0 .. 3.5 in halves
        assert_allclose(grid.tail(3.4), 0.1 * 0.2)

    def test_matches_enumeration(self, ten_asset):
        e = ten_asset.effective_exposures.astype(int)
        p = ten_asset.pds
        grid = convolve_independent(e, p)
        bits, losses, prob = _enumerate(e, p)
        for y in (0, 11, 39, 40, 64, 129):
            assert_allclose(
                grid.density_lump(float(y)), prob[losses == y].sum(), atol=1e-14
            )
        # reachability: 39 = 9+18+12 occurs, 11 never does
        assert grid.density_lump(39.0) > 0
        assert grid.density_lump(11.0) == 0
        assert grid.density_lump(40.0) > 0

    def test_tail_and_esf_conventions(self):
        grid = convolve_independent([1, 1], [0.5, 0.5])
        assert_allclose(grid.tail(1.0), 0.25 + 0.5 * 0.5)
        assert_allclose(grid.tail(0.5), 0.75)
        assert_allclose(grid.esf_numerator(1.0), 2 * 0.25 + 0.5 * 1 * 0.5)
        assert_allclose(grid.mean(), 1.0)

    def test_var_interpolation(self, ten_asset):
        grid = convolve_independent(
            ten_asset.effective_exposures.astype(int), ten_asset.pds
        )
        y = grid.var(0.05)
        assert 30 < y < 45
        # corrected tail brackets the level across the two nearest cells
        lo, hi = np.floor(y), np.ceil(y)
        assert grid.tail(hi) <= 0.05 <= grid.tail(lo)


class TestMixedExact:
    def test_independent_match(self, ten_asset, indep, quad):
        a = convolve_independent(ten_asset.effective_exposures, ten_asset.pds)
        b = mixed_exact(ten_asset, indep, quad)
        assert_allclose(a.probabilities, b.probabilities, atol=1e-15)

    def test_mean_preserved_through_copula(self, gauss, quad, fifty_asset):
        grid = mixed_exact(fifty_asset, gauss, quad)
        assert_allclose(
            grid.mean(),
            float(fifty_asset.effective_exposures @ fifty_asset.pds),
            rtol=1e-8,
        )

    def test_tail_within_mc_errors(self, gauss, quad, fifty_asset):
        grid = mixed_exact(fifty_asset, gauss, quad)
        mc = monte_carlo(fifty_asset, gauss, 200_000, seed=11)
        for p in (0.05, 0.01):
            y = grid.nearest_level(p)
            t, se = mc.tail(y)
            assert abs(grid.tail(y) - t) <= 3.5 * se


class TestExactDeltas:
    def test_impossible_loss(self, ten_asset):
        with pytest.raises(ImpossibleLoss):
            exact_var_delta(
                ten_asset.effective_exposures.astype(int), ten_asset.pds, 11.0
            )

    def test_enumeration_guard(self):
        with pytest.raises(ValueError):
            exact_var_delta(np.ones(21, dtype=int), np.full(21, 0.1), 3.0)

    def test_delta_homogeneity_at_level(self, ten_asset):
        e = ten_asset.effective_exposures.astype(int)
        d = exact_var_delta(e, ten_asset.pds, 40.0)
        assert_allclose(d.sum(), 40.0, rtol=1e-12)


class TestAnalyticFamilies:
    def test_exponential(self):
        ref = exponential_reference(1.0, 1.0)
        assert_allclose(ref.density, np.exp(-1.0), rtol=1e-15)
        assert_allclose(ref.tail, np.exp(-1.0), rtol=1e-15)
        assert_allclose(ref.esf, 2.0, rtol=1e-15)

    def test_gamma_against_numerical_integration(self):
        shape, scale = 2.0, 1.0
        ref = gamma_reference(shape, scale, 4.0)
        dens = lambda t: t ** (shape - 1) * np.exp(-t / scale) / scale**shape
        tail_num = squad(dens, 4.0, np.inf)[0]
        esf_num = squad(lambda t: t * dens(t), 4.0, np.inf)[0]
        assert_allclose(ref.tail, tail_num, rtol=1e-10)
        assert_allclose(ref.esf, esf_num / tail_num, rtol=1e-10)
        assert_allclose(ref.density, dens(4.0), rtol=1e-12)

    def test_normal(self):
        ref = normal_reference(1.0, 2.0, 2.0)
        from scipy.stats import norm

        assert_allclose(ref.tail, norm.sf(0.5), rtol=1e-14)
        assert_allclose(ref.density, norm.pdf(0.5) / 2.0, rtol=1e-14)

    def test_cpg_point_mass_and_small_threshold(self):
        ref0 = compound_poisson_gamma_reference(1.0, 1.0, 0.5, 0.0)
        assert_allclose(ref0.tail, 1.0 - 0.5 * np.exp(-1.0), rtol=1e-13)
        ref = compound_poisson_gamma_reference(1.0, 1.0, 0.5, 1e-12)
        assert_allclose(ref.tail, 1.0 - np.exp(-1.0), rtol=1e-9)

    def test_cpg_density_matches_bessel_closed_form(self):
        # for unit shape the series collapses to a Bessel-I expression
        th, be = 1.3, 0.7
        for y in (0.3, 1.0, 2.5, 6.0):
            ref = compound_poisson_gamma_reference(th, 1.0, be, y)
            closed = np.exp(-th - y / be) * np.sqrt(th / (be * y)) * iv(
                1, 2.0 * np.sqrt(th * y / be)
            )
            assert_allclose(ref.density, closed, rtol=1e-12)

    def test_cpg_mean_identity(self):
        ref = compound_poisson_gamma_reference(2.0, 1.5, 0.8, 1e-10)
        assert_allclose(ref.esf * ref.tail, 2.0 * 1.5 * 0.8, rtol=1e-6)

    def test_dispatcher(self):
        ref = analytic_family("gamma", (2.0, 1.0), 4.0)
        assert_allclose(ref.tail, 0.0915781944436709, rtol=1e-12)
        with pytest.raises(ValueError):
            analytic_family("cauchy", (), 1.0)


class TestMonteCarlo:
    def test_deterministic_for_seed(self, gauss, fifty_asset):
        a = monte_carlo(fifty_asset, gauss, 50_000, seed=5)
        b = monte_carlo(fifty_asset, gauss, 50_000, seed=5)
        assert np.array_equal(a.losses, b.losses)
        c = monte_carlo(fifty_asset, gauss, 50_000, seed=6)
        assert not np.array_equal(a.losses, c.losses)

    def test_single_asset_frequency(self, indep):
        pf = Portfolio([Asset("x", 1.0, 0.1)])
        mc = monte_carlo(pf, indep, 100_000, seed=3)
        freq = (mc.losses > 0).mean()
        se = np.sqrt(0.1 * 0.9 / 100_000)
        assert abs(freq - 0.1) <= 4 * se

    def test_near_comonotone_pair(self, gauss, quad):
        pf = Portfolio([Asset("a", 1.0, 0.1, 0.999), Asset("b", 1.0, 0.1, 0.999)])
        mc = monte_carlo(pf, gauss, 200_000, seed=9)
        joint = (mc.losses == 2.0).mean()
        pds = conditional_pd_array(pf, gauss, quad.nodes)
        joint_exact = float(quad.weights @ (pds[:, 0] * pds[:, 1]))
        assert joint > 5 * 0.1**2  # far above the independent product
        se = np.sqrt(joint_exact * (1 - joint_exact) / 200_000)
        assert abs(joint - joint_exact) <= 4 * se

    def test_tail_and_esf_accessors(self, gauss, fifty_asset):
        mc = monte_carlo(fifty_asset, gauss, 50_000, seed=1)
        t, se = mc.tail(10.0)
        assert 0 < t < 1 and se > 0
        e, ese = mc.esf(10.0)
        assert e > 10.0 and ese > 0
        q = mc.quantile(0.01)
        tq, _ = mc.tail(q)
        assert abs(tq - 0.01) < 0.005
