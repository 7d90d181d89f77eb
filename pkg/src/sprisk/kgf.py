"""Cumulant-generating functions and their derivatives.

The workhorse is the conditional portfolio KGF for default/no-default
losses,

    K(s) = sum_j log(1 - p_j + p_j exp(e_j s)),      e_j = alloc_j * exposure_j,

together with its first four s-derivatives.  All derivatives are closed
forms in the tilted default probability

    pt = p e^{e s} / (1 - p + p e^{e s}),

namely K' = e pt, K'' = e^2 pt(1-pt), K''' = e^3 pt(1-pt)(1-2pt),
K'''' = e^4 pt(1-pt)(1-6pt+6pt^2).  Closed forms beat repeated log/exp
differentiation for both speed and accuracy, and the tilted pd is exactly
the quantity needed later for risk contributions.

Large tilts are routine (saddlepoints deep in the tail), so everything is
evaluated in an overflow-free form: with t = e s and m = max(t, 0),

    K_j = m + log((1-p) e^{-m} + p e^{t-m}),
    pt  = p e^{t-m} / ((1-p) e^{-m} + p e^{t-m}).

Analytic KGF families (Normal, Gamma, compound Poisson-Gamma) are provided
for the solver tests and for the direct (unconditional) method.
"""

from dataclasses import dataclass

import numpy as np

from .model import conditional_pd_array

__all__ = [
    "KgfEval",
    "tilted_pd",
    "kgf_bernoulli",
    "kgf_portfolio",
    "BernoulliPortfolioKgf",
    "NormalKgf",
    "GammaKgf",
    "ExponentialKgf",
    "CompoundPoissonGammaKgf",
]


@dataclass(frozen=True)
class KgfEval:
    """K and its first four s-derivatives at one tilt point.

    For portfolio KGFs, ``per_asset_K1`` holds each asset's contribution to
    K1 (i.e. e_j * pt_j, summing to K1) and ``tilted_pd`` the pt_j
    themselves; both are None for analytic families.
    """

    s: float
    K: float
    K1: float
    K2: float
    K3: float
    K4: float
    per_asset_K1: np.ndarray | None = None
    tilted_pd: np.ndarray | None = None


def _bernoulli_log_terms(p, t):
    """K, pt and 1-pt for one Bernoulli KGF, evaluated in log space.

    K = logaddexp(log(1-p), log(p) + t) never over/underflows, and
    1 - pt = -expm1(log pt) keeps precision when the tilt saturates.
    Handles p = 0 and p = 1 exactly.
    """
    with np.errstate(divide="ignore"):
        lq = np.log1p(-p)
        lp = np.log(p)
    K = np.logaddexp(lq, lp + t)
    lpt = lp + t - K
    pt = np.exp(lpt)
    one_minus_pt = -np.expm1(lpt)
    return K, pt, one_minus_pt


def tilted_pd(p, a, s):
    """Default probability under the exponential tilt exp(a s Y).

    Stable for any magnitude of a*s; vectorizes over numpy inputs.
    """
    p = np.asarray(p, dtype=float)
    t = np.asarray(a, dtype=float) * np.asarray(s, dtype=float)
    _, pt, _ = _bernoulli_log_terms(p, t)
    return float(pt) if pt.ndim == 0 else pt


def _bernoulli_terms(p, a, s):
    """Per-asset K, pt, 1-pt for Bernoulli losses; inputs broadcast."""
    return _bernoulli_log_terms(p, a * s)


def _derivs_from_tilted(a, pt, one_minus_pt):
    """First four derivative factors of one Bernoulli KGF given pt."""
    q = pt * one_minus_pt
    K1 = a * pt
    K2 = a * a * q
    K3 = a**3 * q * (1.0 - 2.0 * pt)
    K4 = a**4 * q * (1.0 - 6.0 * pt + 6.0 * pt * pt)
    return K1, K2, K3, K4


def kgf_bernoulli(p: float, a: float, s: float) -> KgfEval:
    """KGF of a single Bernoulli(p) loss of size a, orders 0..4 at s."""
    K, pt, omp = _bernoulli_terms(float(p), float(a), float(s))
    K1, K2, K3, K4 = _derivs_from_tilted(float(a), pt, omp)
    return KgfEval(float(s), float(K), float(K1), float(K2), float(K3), float(K4))


def kgf_portfolio(portfolio, model, v: float, s: float) -> KgfEval:
    """Conditional portfolio KGF at factor value v and tilt s.

    Sums the per-asset Bernoulli KGFs over the conditional pds and fills the
    per-asset first-derivative cache used by the contribution formulas.
    """
    pds = conditional_pd_array(portfolio, model, float(v))
    return BernoulliPortfolioKgf(portfolio.effective_exposures, pds).evaluate(s)


class BernoulliPortfolioKgf:
    """KGF provider for a vector of independent Bernoulli losses.

    This is the conditional portfolio KGF at one factor node: exposures e_j
    and (conditional) pds p_j are fixed, evaluation maps s -> KgfEval.
    """

    def __init__(self, exposures, pds):
        self.exposures = np.asarray(exposures, dtype=float)
        self.pds = np.asarray(pds, dtype=float)
        if self.exposures.shape != self.pds.shape:
            raise ValueError("exposures and pds must have equal length")
        mom = batch_bernoulli_moments(self.exposures, self.pds[None, :])
        # conditional support: assets at pd 1 always default
        self.y_min = float(mom["y_min"][0])
        self.y_max = float(mom["y_max"][0])
        # beyond |s| = 800/e_min every tilt saturates in float64, so the
        # saddlepoint always lies inside these (finite) solver bounds
        bound = 800.0 / float(mom["gap_lo"][0])
        self.s_min = -bound
        self.s_max = bound
        self.mean = float(mom["mean"][0])
        self.variance = float(mom["var"][0])
        self.mass_at_min = float(np.exp(mom["log_p_min"][0]))
        self.mass_at_max = float(np.exp(mom["log_p_max"][0]))
        self.gap_lo = float(mom["gap_lo"][0])
        self.gap_hi = float(mom["gap_hi"][0])

    def evaluate(self, s: float) -> KgfEval:
        e, p = self.exposures, self.pds
        Kj, pt, omp = _bernoulli_terms(p, e, float(s))
        K1j, K2j, K3j, K4j = _derivs_from_tilted(e, pt, omp)
        return KgfEval(
            float(s),
            float(np.sum(Kj)),
            float(np.sum(K1j)),
            float(np.sum(K2j)),
            float(np.sum(K3j)),
            float(np.sum(K4j)),
            per_asset_K1=K1j,
            tilted_pd=pt,
        )

    __call__ = evaluate


class NormalKgf:
    """K(s) = mu s + sigma^2 s^2 / 2 (exact quadratic KGF)."""

    def __init__(self, mu: float, sigma2: float):
        if sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        self.mu = float(mu)
        self.sigma2 = float(sigma2)
        self.y_min, self.y_max = -np.inf, np.inf
        self.s_min, self.s_max = -np.inf, np.inf
        self.mean = self.mu
        self.variance = self.sigma2
        self.mass_at_min = self.mass_at_max = 0.0
        self.gap_lo = self.gap_hi = 0.0

    def evaluate(self, s: float) -> KgfEval:
        s = float(s)
        return KgfEval(
            s,
            self.mu * s + 0.5 * self.sigma2 * s * s,
            self.mu + self.sigma2 * s,
            self.sigma2,
            0.0,
            0.0,
        )

    __call__ = evaluate


class GammaKgf:
    """K(s) = -shape * log(1 - scale * s), defined for s < 1/scale."""

    def __init__(self, shape: float, scale: float):
        if shape <= 0 or scale <= 0:
            raise ValueError("shape and scale must be positive")
        self.shape = float(shape)
        self.scale = float(scale)
        self.y_min, self.y_max = 0.0, np.inf
        self.s_min, self.s_max = -np.inf, 1.0 / self.scale
        self.mean = self.shape * self.scale
        self.variance = self.shape * self.scale**2
        self.mass_at_min = self.mass_at_max = 0.0
        self.gap_lo = self.gap_hi = 0.0

    def evaluate(self, s: float) -> KgfEval:
        g, b = self.shape, self.scale
        r = 1.0 - b * s
        return KgfEval(
            float(s),
            -g * np.log(r),
            g * b / r,
            g * b * b / r**2,
            2.0 * g * b**3 / r**3,
            6.0 * g * b**4 / r**4,
        )

    __call__ = evaluate


def ExponentialKgf(rate: float = 1.0) -> GammaKgf:
    """Exponential distribution as the shape-1 Gamma."""
    return GammaKgf(1.0, 1.0 / rate)


class CompoundPoissonGammaKgf:
    """K(s) = theta * ((1 - scale*s)^(-shape) - 1): Poisson(theta) many
    Gamma(shape, scale) losses.

    The saddlepoint equation has the closed-form root
    ``shat = (1 - (theta*shape*scale/y)^(1/(shape+1))) / scale``.
    """

    def __init__(self, theta: float, shape: float, scale: float):
        if min(theta, shape, scale) <= 0:
            raise ValueError("theta, shape, scale must be positive")
        self.theta = float(theta)
        self.shape = float(shape)
        self.scale = float(scale)
        self.y_min, self.y_max = 0.0, np.inf
        self.s_min, self.s_max = -np.inf, 1.0 / self.scale
        self.mean = self.theta * self.shape * self.scale
        self.variance = self.theta * self.shape * (self.shape + 1.0) * self.scale**2
        self.mass_at_min = float(np.exp(-self.theta))  # no-event atom at zero
        self.mass_at_max = 0.0
        self.gap_lo = self.gap_hi = 0.0

    def evaluate(self, s: float) -> KgfEval:
        th, al, b = self.theta, self.shape, self.scale
        r = 1.0 - b * s
        c1 = th * al * b
        return KgfEval(
            float(s),
            th * (r**-al - 1.0),
            c1 * r ** -(al + 1.0),
            c1 * (al + 1.0) * b * r ** -(al + 2.0),
            c1 * (al + 1.0) * (al + 2.0) * b**2 * r ** -(al + 3.0),
            c1 * (al + 1.0) * (al + 2.0) * (al + 3.0) * b**3 * r ** -(al + 4.0),
        )

    __call__ = evaluate

    def algebraic_saddlepoint(self, y: float) -> float:
        if y <= 0:
            raise ValueError("y must be positive")
        th, al, b = self.theta, self.shape, self.scale
        return (1.0 - (th * al * b / y) ** (1.0 / (al + 1.0))) / b


# ----------------------------------------------------------------------
# Vectorized node-batch evaluation (one threshold, many factor nodes).
# Shapes: exposures (n,), pds (k, n), s (k,); outputs (k,) or (k, n).

def batch_bernoulli_eval(exposures, pds, s):
    """K..K4 row sums and tilted pds for per-node tilts s, all nodes at once.

    Returns dict with K, K1, K2, K3, K4 of shape (k,) and pt of shape (k, n).
    The reductions are ordered numpy sums, so results are reproducible.
    """
    e = np.asarray(exposures, dtype=float)[None, :]
    p = np.asarray(pds, dtype=float)
    t = e * np.asarray(s, dtype=float)[:, None]
    Kj, pt, omp = _bernoulli_log_terms(p, t)
    q = pt * omp
    return {
        "K": Kj.sum(axis=1),
        "K1": (e * pt).sum(axis=1),
        "K2": (e**2 * q).sum(axis=1),
        "K3": (e**3 * q * (1.0 - 2.0 * pt)).sum(axis=1),
        "K4": (e**4 * q * (1.0 - 6.0 * pt + 6.0 * pt**2)).sum(axis=1),
        "pt": pt,
    }


def batch_bernoulli_moments(exposures, pds):
    """Conditional moments at s=0 plus support/edge data per node.

    Besides mean/var/K3/K4 this carries what the edge treatment needs: the
    support ends y_min/y_max, the log point masses sitting there (log_p_min,
    log_p_max), and the widths of the empty gaps adjacent to the ends
    (gap_lo, gap_hi): no loss level is reachable strictly inside those.
    """
    e = np.asarray(exposures, dtype=float)[None, :]
    p = np.asarray(pds, dtype=float)
    q = p * (1.0 - p)
    random_mask = (p > 0.0) & (p < 1.0)
    e_random = np.where(random_mask, e, np.inf)
    with np.errstate(divide="ignore"):
        log_p_min = np.where(p < 1.0, np.log1p(-p), 0.0).sum(axis=1)
        log_p_max = np.where(p > 0.0, np.log(np.maximum(p, 1e-300)), 0.0).sum(axis=1)
    return {
        "mean": (e * p).sum(axis=1),
        "var": (e**2 * q).sum(axis=1),
        "K3": (e**3 * q * (1.0 - 2.0 * p)).sum(axis=1),
        "K4": (e**4 * q * (1.0 - 6.0 * p + 6.0 * p**2)).sum(axis=1),
        "y_min": np.where(p >= 1.0, e, 0.0).sum(axis=1),
        "y_max": np.where(p > 0.0, e, 0.0).sum(axis=1),
        "log_p_min": log_p_min,
        "log_p_max": log_p_max,
        "gap_lo": e_random.min(axis=1),
        "gap_hi": e_random.min(axis=1),
    }
