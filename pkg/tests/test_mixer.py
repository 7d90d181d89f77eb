import numpy as np
import pytest
from numpy.testing import assert_allclose

from sprisk import (
    Asset,
    BernoulliPortfolioKgf,
    BracketingError,
    CompoundPoissonGammaKgf,
    DegenerateTail,
    GammaKgf,
    NotMonotone,
    OutOfRange,
    Portfolio,
    Quadrature,
    UnsupportedFamily,
    clt_esf,
    clt_tail,
    compound_poisson_gamma_reference,
    conditional_pd_array,
    convolve_independent,
    direct_saddlepoint,
    distribution_curve,
    ga_from_curve,
    granularity_adjust,
    mixed_esf,
    mixed_tail,
    monte_carlo,
    solve_var,
    tail_probability,
)
from sprisk.kgf import batch_bernoulli_moments
from sprisk.mixer import conditional_batch
from tests.conftest import make_fifty_asset


class TestQuadrature:
    def test_weights_and_nodes(self):
        for n in (5, 99, 199, 399):
            q = Quadrature.gauss_hermite(n)
            assert (q.weights > 0).all()
            assert_allclose(q.weights.sum(), 1.0, atol=1e-12)
            assert_allclose(q.nodes, -q.nodes[::-1], atol=1e-12)

    def test_normal_moments(self, quad):
        assert_allclose(quad.weights @ quad.nodes, 0.0, atol=1e-14)
        assert_allclose(quad.weights @ quad.nodes**2, 1.0, rtol=1e-12)


class TestMixedTail:
    def test_independent_equals_single_node(self, ten_asset, indep, quad):
        prov = BernoulliPortfolioKgf(ten_asset.effective_exposures, ten_asset.pds)
        for y in (10.0, 37.0, 80.0):
            assert_allclose(
                mixed_tail(ten_asset, indep, quad, y),
                tail_probability(prov, y),
                rtol=1e-13,
            )

    def test_zero_loss_limit_by_product_quadrature(self, gauss, quad, ten_asset):
        pf = ten_asset.with_loading(0.5)
        pds = conditional_pd_array(pf, gauss, quad.nodes)
        expected = 1.0 - quad.weights @ np.prod(1.0 - pds, axis=1)
        assert_allclose(mixed_tail(pf, gauss, quad, 1e-9), expected, rtol=1e-12)

    def test_max_loss_limit(self, gauss, quad, ten_asset):
        pf = ten_asset.with_loading(0.5)
        pds = conditional_pd_array(pf, gauss, quad.nodes)
        expected = quad.weights @ np.prod(pds, axis=1)
        assert_allclose(
            mixed_tail(pf, gauss, quad, 128.999999), expected, rtol=1e-12
        )

    def test_monotone_in_threshold(self, gauss, quad, fifty_asset):
        ys = np.linspace(2, 150, 50)
        tails = [mixed_tail(fifty_asset, gauss, quad, y) for y in ys]
        assert np.all(np.diff(tails) <= 0)

    def test_global_out_of_range(self, ten_asset, indep, quad):
        with pytest.raises(OutOfRange):
            mixed_tail(ten_asset, indep, quad, 130.0)
        with pytest.raises(OutOfRange):
            mixed_tail(ten_asset, indep, quad, -1.0)

    def test_quadrature_doubling(self, ten_asset, gauss, indep):
        q99 = Quadrature.gauss_hermite(99)
        q199 = Quadrature.gauss_hermite(199)
        books = [
            (ten_asset, indep),
            (ten_asset.with_loading(0.5), gauss),
            (make_fifty_asset(0.3), gauss),
            (make_fifty_asset(0.5), gauss),
        ]
        for pf, mdl in books:
            y = solve_var(pf, mdl, q99, 0.01)
            t99 = mixed_tail(pf, mdl, q99, y)
            t199 = mixed_tail(pf, mdl, q199, y)
            assert abs(t199 / t99 - 1.0) < 1e-8

    def test_mixing_destroys_log_concavity(self, gauss, quad):
        """High correlation produces a mixed tail that bends upward
        somewhere on the log scale."""
        pf = Portfolio([Asset(f"x{i}", 1.0, 0.01, 0.95) for i in range(20)])
        ys = np.arange(1.0, 19.0)
        lt = np.log([mixed_tail(pf, gauss, quad, y) for y in ys])
        assert (np.diff(lt, 2) > 1e-9).any()

    def test_lattice_mode_on_binomial(self, indep):
        pf = Portfolio([Asset(f"b{i}", 1.0, 0.1, 0.0) for i in range(50)])
        quad = Quadrature.gauss_hermite(5)
        grid = convolve_independent(pf.effective_exposures, pf.pds)
        for y in (7.0, 9.0, 12.0):
            exact = grid.tail(y)
            lat = mixed_tail(pf, indep, quad, y, lattice=1.0)
            assert abs(lat / exact - 1.0) < 0.01


class TestMixedEsf:
    def test_independent_reduces_to_unconditional(self, ten_asset, indep, quad):
        from sprisk import esf_numerator

        prov = BernoulliPortfolioKgf(ten_asset.effective_exposures, ten_asset.pds)
        y = 37.0
        up = mixed_esf(ten_asset, indep, quad, y, side="upper")
        ref = esf_numerator(prov, y, "upper") / tail_probability(prov, y)
        assert_allclose(up, ref, rtol=1e-12)

    def test_esf_exceeds_threshold(self, gauss, quad, fifty_asset, ten_asset):
        for pf in (ten_asset.with_loading(0.5), fifty_asset):
            for p in (0.10, 0.05, 0.01):
                y = solve_var(pf, gauss, quad, p)
                esf = mixed_esf(pf, gauss, quad, y, side="upper")
                assert esf > y

    def test_both_sides_returned(self, ten_asset, indep, quad):
        up, lo = mixed_esf(ten_asset, indep, quad, 20.0)
        assert up > 20.0 > lo

    def test_esf_curve_vs_convolution(self, ten_asset, indep, quad):
        grid = convolve_independent(ten_asset.effective_exposures, ten_asset.pds)
        for p in (0.2, 0.1, 0.05, 0.02, 0.01, 0.005):
            y = grid.nearest_level(p)
            exact = grid.esf(y)
            sp = mixed_esf(ten_asset, indep, quad, y, side="upper")
            assert abs(sp / exact - 1.0) < 0.05

    def test_degenerate_tail_raises(self, ten_asset, indep, quad):
        with pytest.raises(DegenerateTail):
            mixed_esf(ten_asset, indep, quad, 128.99, side="lower")


class TestClt:
    def test_symmetric_single_asset(self, indep, quad):
        pf = Portfolio([Asset("x", 1.0, 0.5)])
        assert_allclose(clt_tail(pf, indep, quad, 0.5), 0.5, rtol=1e-12)

    def test_beta_zero_equals_unconditional_clt(self, ten_asset, indep, quad):
        from scipy.stats import norm

        mu = float(ten_asset.effective_exposures @ ten_asset.pds)
        sd = float(np.sqrt(ten_asset.effective_exposures**2 @ (ten_asset.pds * 0.9)))
        y = 30.0
        assert_allclose(
            clt_tail(ten_asset, indep, quad, y), norm.sf((y - mu) / sd), rtol=1e-12
        )

    def test_esf_formula(self, ten_asset, indep, quad):
        from scipy.stats import norm

        mu = float(ten_asset.effective_exposures @ ten_asset.pds)
        sd = float(np.sqrt(ten_asset.effective_exposures**2 @ (ten_asset.pds * 0.9)))
        y = 30.0
        z = (y - mu) / sd
        expected = (mu * norm.sf(z) + sd * norm.pdf(z)) / norm.sf(z)
        assert_allclose(clt_esf(ten_asset, indep, quad, y, "upper"), expected, rtol=1e-12)

    def test_clt_vs_sp_at_moderate_quantile(self, indep):
        pf = Portfolio([Asset(f"m{i}", 1.0, 0.01) for i in range(1000)])
        quad = Quadrature.gauss_hermite(5)
        grid = convolve_independent(pf.effective_exposures, pf.pds)
        y10 = grid.nearest_level(0.10)
        sp = mixed_tail(pf, indep, quad, y10)
        clt = clt_tail(pf, indep, quad, y10)
        exact = grid.tail(y10)
        assert abs(clt / exact - 1.0) < 0.10
        assert abs(sp / exact - 1.0) < 0.05


class TestSolveVar:
    def test_round_trip(self, ten_asset, indep, quad):
        y = solve_var(ten_asset, indep, quad, 0.05)
        assert abs(mixed_tail(ten_asset, indep, quad, y) - 0.05) <= 1e-10

    def test_round_trip_correlated(self, gauss, quad, fifty_asset):
        for p in (0.10, 0.01):
            y = solve_var(fifty_asset, gauss, quad, p)
            assert abs(mixed_tail(fifty_asset, gauss, quad, y) - p) <= 1e-10

    def test_level_at_the_mean_exercises_zero_tilt(self, ten_asset, gauss, quad):
        pf = ten_asset.with_loading(0.3)
        p_mean = mixed_tail(pf, gauss, quad, 12.9)
        y = solve_var(pf, gauss, quad, p_mean)
        assert_allclose(y, 12.9, rtol=1e-6)

    def test_var_within_mc_band(self, gauss, quad):
        pf = make_fifty_asset(0.3)
        y = solve_var(pf, gauss, quad, 0.01)
        mc = monte_carlo(pf, gauss, 200_000, seed=7)
        t, se = mc.tail(y)
        assert abs(t - 0.01) <= 3.0 * se + 1e-12

    def test_clt_method(self, ten_asset, indep, quad):
        y = solve_var(ten_asset, indep, quad, 0.05, method="clt")
        assert abs(clt_tail(ten_asset, indep, quad, y) - 0.05) <= 1e-10

    def test_level_inside_zero_atom_raises(self, indep, quad):
        pf = Portfolio([Asset("x", 1.0, 0.01)])
        with pytest.raises(BracketingError):
            solve_var(pf, indep, quad, 0.5)


class TestDistributionCurve:
    def test_invariants(self, ten_asset, indep, quad):
        ys = np.linspace(10, 90, 17)
        curve = distribution_curve(ten_asset, indep, quad, ys)
        assert np.all(np.diff(curve.tail) <= 0)
        assert np.isfinite(curve.tail).all()
        assert np.isfinite(curve.density).all()
        assert (curve.density >= 0).all()


class TestGranularityAdjustment:
    def test_zero_variance_means_zero_corrections(self):
        v = np.linspace(-6, 6, 41)
        mu = 100.0 - 10.0 * v  # strictly decreasing
        res = ga_from_curve(v, mu, np.zeros_like(v), 0.01)
        assert res.var_correction == 0.0
        assert res.esf_correction == 0.0
        assert_allclose(res.var_ga, res.var_infinity)

    def test_linear_case_is_exact(self):
        """mu(v) = a - b v makes Y_inf Normal(a, b^2): quantiles in closed
        form."""
        from scipy.stats import norm

        v = np.linspace(-8, 8, 81)
        a, b = 50.0, 5.0
        res = ga_from_curve(v, a - b * v, np.zeros_like(v), 0.01)
        assert_allclose(res.var_infinity, a + b * norm.isf(0.01), rtol=1e-9)
        assert_allclose(res.esf_infinity, a + b * norm.pdf(norm.isf(0.01)) / 0.01,
                        rtol=1e-6)

    def test_not_monotone_raised(self, ten_asset, indep, quad):
        with pytest.raises(NotMonotone):
            granularity_adjust(ten_asset, indep, quad, 0.01)  # flat mean
        v = np.linspace(-3, 3, 11)
        with pytest.raises(NotMonotone):
            ga_from_curve(v, np.abs(v), np.ones_like(v), 0.01)

    def test_shortfall_correction_positive(self, gauss, quad, fifty_asset,
                                           hundred_homog, ten_asset):
        for pf in (fifty_asset, hundred_homog, ten_asset.with_loading(0.5)):
            for p in (0.05, 0.01):
                res = granularity_adjust(pf, gauss, quad, p)
                assert res.esf_correction > 0.0

    def test_ga_moves_var_toward_exact(self, gauss, quad, hundred_homog):
        from sprisk import mixed_exact

        grid = mixed_exact(hundred_homog, gauss, quad)
        exact = grid.var(0.01)
        res = granularity_adjust(hundred_homog, gauss, quad, 0.01)
        assert abs(res.var_ga - exact) < abs(res.var_infinity - exact)


class TestDirectMethod:
    def test_rejects_unregistered_families(self):
        with pytest.raises(UnsupportedFamily):
            direct_saddlepoint(GammaKgf(2.0, 1.0), 3.0)

    def test_mean_threshold_uses_zero_tilt_branch(self):
        kgf = CompoundPoissonGammaKgf(1.0, 1.0, 0.5)
        dens, tail, esf = direct_saddlepoint(kgf, kgf.mean)
        assert np.isfinite([dens, tail, esf]).all()
        assert 0.0 < tail < 1.0
        assert esf > kgf.mean

    def test_tail_and_esf_against_series(self):
        kgf = CompoundPoissonGammaKgf(1.0, 1.0, 0.5)
        for y in (0.4, 1.0, 2.0):
            dens, tail, esf = direct_saddlepoint(kgf, y)
            ref = compound_poisson_gamma_reference(1.0, 1.0, 0.5, y)
            assert abs(tail / ref.tail - 1.0) < 0.01
            assert abs(esf / ref.esf - 1.0) < 0.01

    def test_correction_term_shrinks_like_one_over_theta(self):
        """The curvature bracket's deviation from 1 scales ~ 1/theta at a
        fixed y/theta."""
        from sprisk.saddle import _correction_bracket

        devs = []
        for th in (1.0, 10.0, 100.0):
            kgf = CompoundPoissonGammaKgf(th, 1.0, 0.5)
            sh = kgf.algebraic_saddlepoint(2.0 * kgf.mean)
            ev = kgf.evaluate(sh)
            devs.append(abs(_correction_bracket(ev.K2, ev.K3, ev.K4) - 1.0))
        assert abs(devs[0] / (10 * devs[1]) - 1.0) < 0.2
        assert abs(devs[1] / (10 * devs[2]) - 1.0) < 0.2

    def test_degenerate_tail(self):
        kgf = CompoundPoissonGammaKgf(1.0, 1.0, 0.5)
        with pytest.raises(DegenerateTail):
            direct_saddlepoint(kgf, 40.0)

    def test_out_of_range(self):
        kgf = CompoundPoissonGammaKgf(1.0, 1.0, 0.5)
        with pytest.raises(OutOfRange):
            direct_saddlepoint(kgf, -1.0)


class TestBatchEdgeHandling:
    def test_gap_nodes_excluded_from_solve(self, ten_asset, indep, quad):
        batch = conditional_batch(ten_asset, indep, quad, 4.0)
        assert not batch.feasible.any()
        assert_allclose(batch.tail_up, 1.0 - 0.9**10, rtol=1e-12)

    def test_tranche_parity(self, ten_asset, indep, quad):
        grid = convolve_independent(ten_asset.effective_exposures, ten_asset.pds)
        mu = grid.mean()
        for y in (5.0, 30.0, 90.0):
            call, put = conditional_batch(ten_asset, indep, quad, y).tranche()
            assert_allclose(call - put, mu - y, atol=1e-10)
            exact_call = float(
                np.sum(np.maximum(grid.losses - y, 0.0) * grid.probabilities)
            )
            assert abs(call / exact_call - 1.0) < 0.05
