"""Factor integration: mixing conditional saddlepoint results over the
risk factor, the VaR outer loop, CLT fallbacks, the granularity
adjustment, and the direct (unconditional-KGF) route.

The indirect method evaluates density / tail / shortfall conditionally on
each Gauss-Hermite node of the Normal factor and averages with the node
weights; the saddlepoint (and hence accuracy) question stays confined to
sums of independent variables, whatever the correlation model does.
"""

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad as _quad_integrate
from scipy.special import roots_hermitenorm
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq
from scipy.special import ndtr, ndtri

from .errors import (
    BracketingError,
    DegenerateTail,
    NotMonotone,
    OutOfRange,
    UnsupportedFamily,
)
from .kgf import CompoundPoissonGammaKgf, batch_bernoulli_moments
from .model import conditional_pd_array
from .saddle import (
    SaddleSolution,
    _correction_bracket,
    _density_arrays,
    _esf_density_factor,
    _tail_arrays,
    _zhat,
    solve_bernoulli_batch,
    sp_density,
    sp_esf_terms,
    sp_tail,
)

__all__ = [
    "Quadrature",
    "DistributionCurve",
    "ConditionalBatch",
    "conditional_batch",
    "mixed_tail",
    "mixed_density",
    "mixed_esf",
    "clt_tail",
    "clt_esf",
    "solve_var",
    "GaResult",
    "ga_from_curve",
    "granularity_adjust",
    "direct_saddlepoint",
]

_SQRT_2PI = np.sqrt(2.0 * np.pi)

DEGENERATE_TAIL = 1e-12


def _phi(x):
    return np.exp(-0.5 * np.square(x)) / _SQRT_2PI


@dataclass(frozen=True)
class Quadrature:
    """Probabilist Gauss-Hermite nodes/weights for the N(0,1) factor."""

    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def gauss_hermite(cls, count: int = 99) -> "Quadrature":
        if count < 1:
            raise ValueError("node count must be positive")
        x, w = roots_hermitenorm(count)  # stable for large counts
        return cls(nodes=x, weights=w / _SQRT_2PI)

    @property
    def count(self) -> int:
        return len(self.nodes)


class ConditionalBatch:
    """Saddlepoint quantities on every factor node at one threshold.

    Nodes where y falls outside the conditional support get the exact
    boundary values (tail 0 or 1, density 0) instead of a solve.  The
    arrays here feed both the mixed risk measures and the contribution
    formulas, which is what makes contributions nearly free once the risk
    itself has been computed.
    """

    def __init__(self, exposures, pds, weights, y, form="bn",
                 with_correction=False, lattice=None):
        self.y = float(y)
        self.weights = np.asarray(weights, dtype=float)
        self.exposures = np.asarray(exposures, dtype=float)
        self.pds = np.asarray(pds, dtype=float)
        self.form = form
        self.with_correction = with_correction
        self.lattice = lattice

        sol = solve_bernoulli_batch(self.exposures, self.pds, self.y)
        self.feasible = sol["feasible"]
        self.shat = sol["shat"]
        self.mean = sol["mean"]
        self.var = sol["var"]
        self.pt = sol["pt"]

        fe = self.feasible
        k = len(self.mean)
        self.zhat = np.zeros(k)
        self.u = np.zeros(k)
        self.tail_up = np.zeros(k)
        self.density = np.zeros(k)
        self.esf_factor = np.zeros(k)
        self._esf_num_up = np.zeros(k)  # numerators on non-solved nodes
        self.K2s = np.where(fe, sol["K2"], np.nan)

        if np.any(fe):
            shat = sol["shat"][fe]
            self.zhat[fe] = _zhat(shat, sol["K"][fe], self.y)
            u = shat * np.sqrt(sol["var"][fe])
            self.u[fe] = u
            base = _density_arrays(
                sol["K"][fe], sol["K2"][fe], sol["K3"][fe], sol["K4"][fe],
                shat, self.y, False,
            )
            brk = _correction_bracket(sol["K2"][fe], sol["K3"][fe], sol["K4"][fe])
            self.density[fe] = base * brk if with_correction else base
            span = float(lattice) if lattice else 0.0
            raw = _tail_arrays(
                shat, self.zhat[fe], sol["K2"][fe], u,
                sol["var"][fe], sol["K3_0"][fe], form, span,
            )
            if span > 0.0:
                # half-mass convention: P[Y >= y] less half a lattice cell;
                # the cell mass uses the corrected density (best estimate)
                raw = raw - 0.5 * span * base * brk
            # exact bounds from the point masses at the support ends
            self.tail_up[fe] = np.clip(
                raw, np.exp(sol["log_p_max"][fe]), 1.0 - np.exp(sol["log_p_min"][fe])
            )
            self.esf_factor[fe] = _esf_density_factor(
                self.y, sol["mean"][fe], shat, u,
                sol["var"][fe], sol["K3_0"][fe], sol["K4_0"][fe],
            )
        if np.any(~fe):
            # non-solved nodes: inside the edge gaps the tail and the
            # shortfall numerator are exact constants; outside the support
            # they are 0 or 1 (1/2 exactly on a point mass).
            ne = ~fe
            lo = sol["y_min"][ne]
            hi = sol["y_max"][ne]
            mu = sol["mean"][ne]
            p_lo = np.exp(sol["log_p_min"][ne])
            p_hi = np.exp(sol["log_p_max"][ne])
            low_gap = sol["in_lower_gap"][ne]
            up_gap = sol["in_upper_gap"][ne]
            below = self.y <= lo
            above = self.y >= hi
            t = np.where(below, 1.0, np.where(above, 0.0, 0.5))
            t = np.where((self.y == lo) & (lo == hi), 0.5, t)
            t = np.where(low_gap, 1.0 - p_lo, t)
            t = np.where(up_gap, p_hi, t)
            self.tail_up[ne] = t
            num = mu * t  # right for below/above/degenerate nodes
            num = np.where(low_gap, mu - lo * p_lo, num)
            num = np.where(up_gap, hi * p_hi, num)
            self._esf_num_up[ne] = num

    # node-level numerators for E[Y 1{Y beyond y}] --------------------
    def esf_node_numerators(self, side: str) -> np.ndarray:
        fe = self.feasible
        up = np.where(
            fe, self.mean * self.tail_up + self.esf_factor * self.density,
            self._esf_num_up,
        )
        if side == "upper":
            return up
        if side == "lower":
            # the half-mass convention splits atoms evenly, so the two
            # sides always add up to the conditional mean
            return self.mean - up
        raise ValueError(f"unknown side {side!r}")

    # mixed (unconditional) quantities --------------------------------
    def tail(self, side: str = "upper") -> float:
        up = float(np.dot(self.weights, self.tail_up))
        return up if side == "upper" else 1.0 - up

    def mixed_density(self) -> float:
        return float(np.dot(self.weights, self.density))

    def esf(self, side: str = "upper") -> float:
        p = self.tail(side)
        if p < DEGENERATE_TAIL:
            raise DegenerateTail(f"{side} tail {p:.3e} below {DEGENERATE_TAIL:.0e}")
        num = float(np.dot(self.weights, self.esf_node_numerators(side)))
        return num / p

    def tranche(self):
        """(call, put); parity call - put = mean - y holds by construction."""
        mu = float(np.dot(self.weights, self.mean))
        num_up = self.esf_node_numerators("upper")
        call = float(np.dot(self.weights, num_up - self.y * self.tail_up))
        return call, call - (mu - self.y)


def _check_global_range(exposures, y):
    total = float(np.sum(exposures))
    if not 0.0 < y < total:
        raise OutOfRange(f"threshold {y:g} outside portfolio support (0, {total:g})")


def conditional_batch(portfolio, model, quad, y, form="bn", with_correction=False,
                      lattice=None):
    _check_global_range(portfolio.effective_exposures, y)
    pds = conditional_pd_array(portfolio, model, quad.nodes)
    return ConditionalBatch(
        portfolio.effective_exposures, pds, quad.weights, y, form,
        with_correction, lattice,
    )


def mixed_tail(portfolio, model, quad, y, form: str = "bn", lattice=None) -> float:
    """P[Y above y] mixed over the factor.

    ``lattice`` (a grid span) switches on the discrete continuity
    correction, appropriate when every effective exposure is a multiple of
    that span and y sits on the grid.
    """
    return conditional_batch(
        portfolio, model, quad, y, form, lattice=lattice
    ).tail("upper")


def mixed_density(portfolio, model, quad, y, with_correction: bool = False) -> float:
    return conditional_batch(
        portfolio, model, quad, y, with_correction=with_correction
    ).mixed_density()


def mixed_esf(portfolio, model, quad, y, side=None, form="bn", with_correction=False,
              lattice=None):
    """Expected shortfall at threshold y.

    side None returns (upper, lower); otherwise the requested side only.
    """
    batch = conditional_batch(portfolio, model, quad, y, form, with_correction, lattice)
    if side is not None:
        return batch.esf(side)
    return batch.esf("upper"), batch.esf("lower")


# ----------------------------------------------------------------------
# conditional-Normal (CLT) versions

def _clt_node_values(portfolio, model, quad, y):
    pds = conditional_pd_array(portfolio, model, quad.nodes)
    mom = batch_bernoulli_moments(portfolio.effective_exposures, pds)
    mean, var = mom["mean"], mom["var"]
    sd = np.sqrt(var)
    ok = sd > 0.0
    z = np.zeros_like(mean)
    z[ok] = (y - mean[ok]) / sd[ok]
    tail = np.where(
        ok,
        ndtr(np.where(ok, -z, 0.0)),
        np.where(mean > y, 1.0, np.where(mean < y, 0.0, 0.5)),
    )
    dens = np.where(ok, _phi(z) / np.where(ok, sd, 1.0), 0.0)
    return mean, sd, z, tail, dens, ok


def clt_tail(portfolio, model, quad, y) -> float:
    _check_global_range(portfolio.effective_exposures, y)
    _, _, _, tail, _, _ = _clt_node_values(portfolio, model, quad, y)
    return float(np.dot(quad.weights, tail))


def clt_esf(portfolio, model, quad, y, side: str = "upper") -> float:
    _check_global_range(portfolio.effective_exposures, y)
    mean, sd, z, tail, _, ok = _clt_node_values(portfolio, model, quad, y)
    if side == "upper":
        num = mean * tail + np.where(ok, sd * _phi(z), 0.0)
        p = float(np.dot(quad.weights, tail))
    elif side == "lower":
        num = mean * (1.0 - tail) - np.where(ok, sd * _phi(z), 0.0)
        p = 1.0 - float(np.dot(quad.weights, tail))
    else:
        raise ValueError(f"unknown side {side!r}")
    if p < DEGENERATE_TAIL:
        raise DegenerateTail(f"{side} tail {p:.3e} below {DEGENERATE_TAIL:.0e}")
    return float(np.dot(quad.weights, num)) / p


# ----------------------------------------------------------------------
# VaR outer loop

def solve_var(
    portfolio, model, quad, p_tail: float, method: str = "sp", form: str = "bn",
    lattice=None,
) -> float:
    """Loss level y with P[Y above y] = p_tail, by safeguarded bracketing
    on the monotone mixed tail curve."""
    if not 0.0 < p_tail < 1.0:
        raise BracketingError("tail probability must lie in (0,1)")
    if method == "sp":
        tail = lambda y: mixed_tail(portfolio, model, quad, y, form, lattice)
    elif method == "clt":
        tail = lambda y: clt_tail(portfolio, model, quad, y)
    else:
        raise ValueError(f"unknown method {method!r}")
    e = portfolio.effective_exposures
    total = float(np.sum(e))
    # anchor the bracket inside the first/last support gaps, where the node
    # tails are exact constants
    margin = 0.5 * float(np.min(e))
    lo = min(margin, 1e-3 * total)
    hi = total - min(margin, 1e-3 * total)
    f_lo = tail(lo) - p_tail
    if f_lo <= 0.0:
        raise BracketingError(
            f"tail({lo:g}) = {f_lo + p_tail:.3e} <= requested level {p_tail:g}; "
            "the level sits inside the zero-loss atom"
        )
    f_hi = tail(hi) - p_tail
    if f_hi >= 0.0:
        raise BracketingError(
            f"requested level {p_tail:g} not above the all-default point mass"
        )
    y = brentq(lambda t: tail(t) - p_tail, lo, hi, xtol=1e-13 * total, rtol=1e-15)
    return float(y)


# ----------------------------------------------------------------------
# distribution curve over thresholds

@dataclass(frozen=True)
class DistributionCurve:
    thresholds: np.ndarray
    tail: np.ndarray
    density: np.ndarray
    esf_upper: np.ndarray
    shat_min: np.ndarray
    shat_max: np.ndarray


def distribution_curve(
    portfolio, model, quad, thresholds, form="bn", with_correction=False
) -> DistributionCurve:
    thresholds = np.asarray(thresholds, dtype=float)
    tails, dens, esfs, smin, smax = [], [], [], [], []
    for y in thresholds:
        b = conditional_batch(portfolio, model, quad, y, form, with_correction)
        tails.append(b.tail("upper"))
        dens.append(b.mixed_density())
        try:
            esfs.append(b.esf("upper"))
        except DegenerateTail:
            esfs.append(np.nan)
        sh = b.shat[b.feasible]
        smin.append(float(sh.min()) if sh.size else np.nan)
        smax.append(float(sh.max()) if sh.size else np.nan)
    return DistributionCurve(
        thresholds,
        np.array(tails),
        np.array(dens),
        np.array(esfs),
        np.array(smin),
        np.array(smax),
    )


# ----------------------------------------------------------------------
# granularity adjustment

@dataclass(frozen=True)
class GaResult:
    """Factor-only quantile and its variance-corrected refinements."""

    var_infinity: float
    var_ga: float
    esf_infinity: float
    esf_ga: float
    var_correction: float
    esf_correction: float


def ga_from_curve(v_nodes, mu_nodes, var_nodes, p_tail: float) -> GaResult:
    """Granularity adjustment from tabulated conditional mean/variance.

    ``mu_nodes`` must be strictly monotone in the factor; the density of
    the factor-only loss is recovered by the change of variables
    f(x) = phi(v(x)) / |dmu/dv|, with monotone cubic interpolation between
    nodes.
    """
    v = np.asarray(v_nodes, dtype=float)
    mu = np.asarray(mu_nodes, dtype=float)
    s2 = np.asarray(var_nodes, dtype=float)
    if not 0.0 < p_tail < 1.0:
        raise BracketingError("tail probability must lie in (0,1)")
    d = np.diff(mu)
    if np.all(d < 0.0):
        decreasing = True
    elif np.all(d > 0.0):
        decreasing = False
    else:
        raise NotMonotone("conditional mean is not strictly monotone across nodes")

    mu_hat = PchipInterpolator(v, mu)
    dmu = mu_hat.derivative()
    s2_hat = PchipInterpolator(v, np.maximum(s2, 0.0))

    v_star = float(ndtri(p_tail) if decreasing else ndtri(1.0 - p_tail))
    v_star = float(np.clip(v_star, v[0], v[-1]))
    x_p = float(mu_hat(v_star))

    lo, hi = (min(mu[0], mu[-1]), max(mu[0], mu[-1]))

    def v_of_x(x):
        x = float(np.clip(x, lo, hi))
        return brentq(lambda t: float(mu_hat(t)) - x, v[0], v[-1], xtol=1e-14)

    def f_of_x(x):
        vv = v_of_x(x)
        return float(_phi(vv) / abs(dmu(vv)))

    def g_of_x(x):
        vv = v_of_x(x)
        return float(max(s2_hat(vv), 0.0) * _phi(vv) / abs(dmu(vv)))

    f_xp = f_of_x(x_p)
    h = 1e-4 * (hi - lo)
    dg = (g_of_x(x_p + h) - g_of_x(x_p - h)) / (2.0 * h)
    var_correction = -dg / (2.0 * f_xp)
    var_ga = x_p + var_correction

    # tail-conditional mean of the factor-only loss; the factor mass
    # outside the node range is below 1e-30 for the default quadrature
    if decreasing:
        esf_inf = _quad_integrate(
            lambda t: float(mu_hat(t)) * _phi(t), v[0], v_star, limit=200
        )[0] / p_tail
    else:
        esf_inf = _quad_integrate(
            lambda t: float(mu_hat(t)) * _phi(t), v_star, v[-1], limit=200
        )[0] / p_tail
    esf_correction = float(max(s2_hat(v_star), 0.0)) * f_xp / (2.0 * p_tail)
    return GaResult(
        x_p, var_ga, float(esf_inf), float(esf_inf) + esf_correction,
        float(var_correction), esf_correction,
    )


def granularity_adjust(portfolio, model, quad, p_tail: float) -> GaResult:
    """Granularity adjustment for a portfolio: conditional mean/variance
    curves are evaluated on the quadrature nodes."""
    pds = conditional_pd_array(portfolio, model, quad.nodes)
    mom = batch_bernoulli_moments(portfolio.effective_exposures, pds)
    return ga_from_curve(quad.nodes, mom["mean"], mom["var"], p_tail)


# ----------------------------------------------------------------------
# direct method on an unconditional KGF

def direct_saddlepoint(
    kgf, y: float, form: str = "lr", with_correction: bool = True, order: int = 2
):
    """Density, upper tail and upper ESF from an unconditional KGF.

    Only the compound Poisson-Gamma family is accepted: the direct route
    needs the unconditional MGF to exist on a real interval around 0, and
    this registered exponential family is the supported case.  The
    saddlepoint comes from the family's closed-form root.  Because a
    single KGF carries the whole distribution here (no factor mixing),
    the tail and shortfall default to the order-2 expansion.
    """
    if not isinstance(kgf, CompoundPoissonGammaKgf):
        raise UnsupportedFamily(
            "direct method accepts only the compound Poisson-Gamma family"
        )
    if not kgf.y_min < y < kgf.y_max:
        raise OutOfRange(f"threshold {y:g} outside support ({kgf.y_min:g}, inf)")
    shat = kgf.algebraic_saddlepoint(y)
    ev = kgf.evaluate(shat)
    ev0 = kgf.evaluate(0.0)
    sol = SaddleSolution(
        float(y), float(shat), float(_zhat(np.asarray(shat), np.asarray(ev.K), y)),
        ev, ev0.K1, ev0.K2, ev0.K3, ev0.K4,
    )
    dens = sp_density(sol, with_correction)
    tail = min(sp_tail(sol, form, order), 1.0 - kgf.mass_at_min)
    if tail < DEGENERATE_TAIL:
        raise DegenerateTail(f"upper tail {tail:.3e} below {DEGENERATE_TAIL:.0e}")
    t1, t2 = sp_esf_terms(sol, "upper", form, with_correction, order)
    return dens, tail, (t1 + t2) / tail
