"""Exact and simulation references used to verify the approximations.

* grid convolution of independent Bernoulli losses (exact on a quantum grid),
* factor-mixed convolution (exact up to quadrature),
* exhaustive enumeration of tiny portfolios for conditional-loss quantities,
* closed-form families (Normal, exponential, Gamma, compound Poisson-Gamma),
* a Monte Carlo simulator for correlated default models.

Discrete tails follow the continuity-corrected convention
P[Y above y] = P[Y > y] + P[Y = y]/2 so they can be compared directly with
continuum approximations.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import gammaincc, gammaln, ndtr

from .errors import ImpossibleLoss, NonIntegerExposure
from .model import conditional_pd_array

__all__ = [
    "LossGrid",
    "convolve_independent",
    "mixed_exact",
    "exact_var_delta",
    "exact_esf_delta",
    "RefValues",
    "normal_reference",
    "exponential_reference",
    "gamma_reference",
    "compound_poisson_gamma_reference",
    "analytic_family",
    "MonteCarloResult",
    "monte_carlo",
]

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def _phi(x):
    return np.exp(-0.5 * np.square(x)) / _SQRT_2PI


def _integer_exposures(exposures, quantum):
    units = np.asarray(exposures, dtype=float) / quantum
    rounded = np.rint(units).astype(np.int64)
    if np.any(rounded <= 0) or np.any(
        np.abs(units - rounded) > 1e-9 * np.maximum(units, 1.0)
    ):
        raise NonIntegerExposure(
            f"exposures do not sit on the quantum grid (quantum={quantum:g})"
        )
    return rounded


@dataclass(frozen=True)
class LossGrid:
    """Discrete loss distribution on multiples of a quantum."""

    quantum: float
    probabilities: np.ndarray

    def __post_init__(self):
        p = self.probabilities
        if np.any(p < -1e-15) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("grid probabilities must be nonnegative and sum to 1")

    @property
    def losses(self) -> np.ndarray:
        return self.quantum * np.arange(len(self.probabilities))

    def mean(self) -> float:
        return float(np.dot(self.losses, self.probabilities))

    def _cell(self, y: float) -> int | None:
        c = y / self.quantum
        r = int(np.rint(c))
        if 0 <= r < len(self.probabilities) and abs(c - r) < 1e-9:
            return r
        return None

    def tail(self, y: float) -> float:
        """P[Y > y] + P[Y = y]/2 (mass at y counted half)."""
        c = self._cell(y)
        p = self.probabilities
        if c is None:
            return float(p[self.losses > y].sum())
        return float(p[c + 1:].sum() + 0.5 * p[c])

    def density_lump(self, y: float) -> float:
        """P[Y = y] (zero off the grid)."""
        c = self._cell(y)
        return 0.0 if c is None else float(self.probabilities[c])

    def esf_numerator(self, y: float) -> float:
        """E[Y 1{Y above y}] with the half-mass convention at y."""
        losses, p = self.losses, self.probabilities
        c = self._cell(y)
        if c is None:
            return float((losses * p)[losses > y].sum())
        return float((losses * p)[c + 1:].sum() + 0.5 * y * p[c])

    def esf(self, y: float) -> float:
        return self.esf_numerator(y) / self.tail(y)

    def var(self, p_tail: float) -> float:
        """Threshold where the corrected tail crosses p_tail, interpolated
        linearly between grid levels."""
        t = np.concatenate([[1.0], np.cumsum(self.probabilities[::-1])[::-1][1:]])
        t = t - 0.5 * self.probabilities  # corrected tail at each level
        idx = np.nonzero(t <= p_tail)[0]
        if idx.size == 0 or idx[0] == 0:
            raise ImpossibleLoss(f"level {p_tail:g} not attained on the grid")
        j = idx[0]
        y0, y1 = self.losses[j - 1], self.losses[j]
        t0, t1 = t[j - 1], t[j]
        if t0 == t1:
            return float(y1)
        return float(y0 + (t0 - p_tail) / (t0 - t1) * (y1 - y0))

    def nearest_level(self, p_tail: float) -> float:
        """Grid level whose corrected tail is closest to p_tail in log space."""
        t = np.concatenate([[1.0], np.cumsum(self.probabilities[::-1])[::-1][1:]])
        t = t - 0.5 * self.probabilities
        ok = t > 0.0
        j = np.argmin(np.abs(np.log(t[ok]) - np.log(p_tail)))
        return float(self.losses[ok][j])


def convolve_independent(exposures, pds, quantum: float = 1.0) -> LossGrid:
    """Exact distribution of sum_j e_j Bernoulli(p_j), built up asset by
    asset on the quantum grid; O(assets * grid length)."""
    units = _integer_exposures(exposures, quantum)
    pds = np.asarray(pds, dtype=float)
    probs = np.zeros(int(units.sum()) + 1)
    probs[0] = 1.0
    size = 1
    for m, p in zip(units, pds):
        block = probs[:size]
        shifted = p * block
        probs[:size] = (1.0 - p) * block
        probs[m:size + m] += shifted
        size += m
    return LossGrid(float(quantum), probs)


def mixed_exact(portfolio, model, quad, quantum: float = 1.0) -> LossGrid:
    """Quadrature mixture of the per-node exact convolutions: the exact
    unconditional distribution up to factor-quadrature error."""
    pds = conditional_pd_array(portfolio, model, quad.nodes)
    e = portfolio.effective_exposures
    units = _integer_exposures(e, quantum)
    acc = np.zeros(int(units.sum()) + 1)
    for w, row in zip(quad.weights, pds):
        acc += w * convolve_independent(e, row, quantum).probabilities
    acc /= acc.sum()  # quadrature weights sum to 1 - O(1e-16)
    return LossGrid(float(quantum), acc)


# ----------------------------------------------------------------------
# exhaustive enumeration (independent losses, desk scale)

def _enumerate(exposures, pds):
    n = len(exposures)
    if n > 20:
        raise ValueError("enumeration limited to 20 assets")
    units = np.asarray(exposures)
    masks = np.arange(2**n, dtype=np.int64)
    bits = (masks[:, None] >> np.arange(n)) & 1
    losses = bits @ units
    pds = np.asarray(pds, dtype=float)
    prob = np.prod(np.where(bits == 1, pds, 1.0 - pds), axis=1)
    return bits, losses, prob


def exact_var_delta(exposures, pds, y: float) -> np.ndarray:
    """E[X_j | Y = y] for independent losses, by summing over all 2^n
    default patterns.  Undefined (ImpossibleLoss) when P[Y = y] = 0."""
    bits, losses, prob = _enumerate(exposures, pds)
    at = losses == y
    p_y = prob[at].sum()
    if p_y <= 0.0:
        raise ImpossibleLoss(f"loss level {y:g} has zero probability")
    num = (prob[at, None] * bits[at] * np.asarray(exposures)).sum(axis=0)
    return num / p_y


def exact_esf_delta(exposures, pds, y: float) -> np.ndarray:
    """E[X_j | Y above y] for independent losses (half mass at y)."""
    bits, losses, prob = _enumerate(exposures, pds)
    w = np.where(losses > y, prob, 0.0) + 0.5 * np.where(losses == y, prob, 0.0)
    p = w.sum()
    if p <= 0.0:
        raise ImpossibleLoss(f"upper tail at {y:g} is empty")
    num = (w[:, None] * bits * np.asarray(exposures)).sum(axis=0)
    return num / p


# ----------------------------------------------------------------------
# closed-form families

class RefValues(NamedTuple):
    density: float
    tail: float
    esf: float


def normal_reference(mu: float, sigma: float, y: float) -> RefValues:
    z = (y - mu) / sigma
    tail = float(ndtr(-z))
    dens = float(_phi(z) / sigma)
    esf = (mu * tail + sigma * _phi(z)) / tail
    return RefValues(dens, tail, float(esf))


def exponential_reference(rate: float, y: float) -> RefValues:
    tail = float(np.exp(-rate * y))
    return RefValues(rate * tail, tail, y + 1.0 / rate)


def gamma_reference(shape: float, scale: float, y: float) -> RefValues:
    x = y / scale
    tail = float(gammaincc(shape, x))
    log_dens = (shape - 1.0) * np.log(x) - x - gammaln(shape) - np.log(scale)
    dens = float(np.exp(log_dens))
    esf_num = shape * scale * float(gammaincc(shape + 1.0, x))
    return RefValues(dens, tail, esf_num / tail)


def compound_poisson_gamma_reference(
    theta: float, shape: float, scale: float, y: float, rel_tol: float = 1e-15
) -> RefValues:
    """Series over the event count: each count r contributes a
    Gamma(r*shape, scale) term weighted by the Poisson mass at r.

    The count sum is truncated when a term falls below rel_tol of the
    running total (past the Poisson mode).
    """
    if y < 0.0:
        return RefValues(0.0, 1.0, theta * shape * scale)
    if y == 0.0:
        # half of the point mass at zero counts toward the tail
        p0 = np.exp(-theta)
        tail = 1.0 - 0.5 * p0
        return RefValues(0.0, tail, theta * shape * scale / tail)
    x = y / scale
    dens = tail = esf_num = 0.0
    r = 0
    log_pois = -theta  # log of e^-theta theta^r / r!
    while True:
        r += 1
        log_pois += np.log(theta) - np.log(r)
        g = r * shape
        w = np.exp(log_pois)
        term_tail = w * gammaincc(g, x)
        term_dens = w * np.exp((g - 1.0) * np.log(x) - x - gammaln(g)) / scale
        term_esf = w * g * scale * gammaincc(g + 1.0, x)
        dens += term_dens
        tail += term_tail
        esf_num += term_esf
        biggest = max(term_tail, term_dens, term_esf)
        if r > theta and biggest < rel_tol * max(tail, dens, esf_num, 1e-300):
            break
        if r > 100000:
            raise RuntimeError("count series failed to converge")
    return RefValues(float(dens), float(tail), float(esf_num / tail))


def analytic_family(family: str, params, y: float) -> RefValues:
    """Dispatch: family in {normal, exponential, gamma, cpg} with positional
    params (mu, sigma), (rate,), (shape, scale), (theta, shape, scale)."""
    table = {
        "normal": normal_reference,
        "exponential": exponential_reference,
        "gamma": gamma_reference,
        "cpg": compound_poisson_gamma_reference,
    }
    try:
        fn = table[family]
    except KeyError:
        raise ValueError(f"unknown family {family!r}") from None
    return fn(*params, y)


# ----------------------------------------------------------------------
# Monte Carlo

@dataclass(frozen=True)
class MonteCarloResult:
    """Simulated losses (sorted) plus the inputs that produced them."""

    losses: np.ndarray
    paths: int
    seed: int

    def tail(self, y: float):
        """(estimate, standard error) of P[Y > y] + P[Y = y]/2."""
        n = self.paths
        left = np.searchsorted(self.losses, y, side="left")
        right = np.searchsorted(self.losses, y, side="right")
        p = ((n - right) + 0.5 * (right - left)) / n
        se = np.sqrt(max(p * (1.0 - p), 1e-300) / n)
        return float(p), float(se)

    def quantile(self, p_tail: float) -> float:
        """Empirical upper quantile: smallest y with P[Y > y] <= p_tail."""
        k = int(np.ceil((1.0 - p_tail) * self.paths)) - 1
        return float(self.losses[min(max(k, 0), self.paths - 1)])

    def esf(self, y: float):
        """(estimate, standard error) of E[Y | Y above y] (half mass at y)."""
        lo = np.searchsorted(self.losses, y, side="left")
        hi = np.searchsorted(self.losses, y, side="right")
        w = np.full(self.paths - lo, 0.5)
        w[hi - lo:] = 1.0
        tail_mass = w.sum()
        if tail_mass <= 0:
            raise ImpossibleLoss(f"no simulated losses above {y:g}")
        sample = self.losses[lo:]
        est = float((w * sample).sum() / tail_mass)
        var = float((w * (sample - est) ** 2).sum() / tail_mass)
        return est, np.sqrt(var / tail_mass)


def monte_carlo(
    portfolio, model, paths: int, seed: int, chunk: int = 100_000
) -> MonteCarloResult:
    """Simulate default losses: one factor draw per path, then independent
    conditional defaults.

    Uses the counter-based Philox generator keyed on the seed; draws are
    consumed in fixed-size path chunks (factor vector first, then the
    uniform default matrix), so results are reproducible for a given seed
    and path count regardless of platform.
    """
    if paths < 1:
        raise ValueError("paths must be positive")
    rng = np.random.Generator(np.random.Philox(key=seed))
    e = portfolio.effective_exposures
    out = np.empty(paths)
    done = 0
    while done < paths:
        m = min(chunk, paths - done)
        v = rng.standard_normal(m)
        pds = conditional_pd_array(portfolio, model, v)
        u = rng.random((m, len(e)))
        out[done:done + m] = (u < pds) @ e
        done += m
    out.sort()
    return MonteCarloResult(out, paths, seed)
