"""Portfolio and one-factor model types.

A portfolio is a list of assets, each with an exposure (loss net of
recovery), an unconditional default probability and a factor loading.
Dependence between assets enters only through a single risk factor V,
standardized to N(0,1): conditionally on V the defaults are independent
Bernoulli events with probability ``conditional_pd(asset, model, v)``.

Allocations are kept separate from exposures: the loss of asset j is
``allocation_j * exposure_j * B_j``.  Risk derivatives are taken with
respect to the allocations (at their default value 1), which leaves the
base portfolio untouched.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import PortfolioFormatError

__all__ = [
    "Asset",
    "Portfolio",
    "FactorModel",
    "conditional_pd",
    "conditional_pd_array",
    "load_portfolio",
]

MODEL_KINDS = ("gaussian", "crplus", "independent")


@dataclass(frozen=True)
class Asset:
    """One obligor: exposure (net of recovery), default probability, loading."""

    id: str
    exposure: float
    pd: float
    loading: float = 0.0

    def __post_init__(self):
        if not (self.exposure > 0 and np.isfinite(self.exposure)):
            raise PortfolioFormatError(f"asset {self.id!r}: exposure must be positive")
        if not (0.0 < self.pd < 1.0):
            raise PortfolioFormatError(f"asset {self.id!r}: pd must lie in (0,1)")
        if not (0.0 <= self.loading < 1.0):
            raise PortfolioFormatError(f"asset {self.id!r}: loading must lie in [0,1)")


class Portfolio:
    """Ordered collection of assets plus per-asset allocation multipliers.

    Immutable after construction; the array views are shared, so callers
    must not write into them.
    """

    def __init__(self, assets, allocations=None):
        assets = list(assets)
        if not assets:
            raise PortfolioFormatError("portfolio must contain at least one asset")
        ids = [a.id for a in assets]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise PortfolioFormatError(f"duplicate asset id(s): {', '.join(dup)}")
        if allocations is None:
            allocations = np.ones(len(assets))
        allocations = np.asarray(allocations, dtype=float)
        if allocations.shape != (len(assets),) or not np.all(allocations > 0):
            raise PortfolioFormatError("allocations must be positive, one per asset")
        self.assets = tuple(assets)
        self.allocations = allocations.copy()
        self.allocations.flags.writeable = False
        self._exposures = np.array([a.exposure for a in assets])
        self._pds = np.array([a.pd for a in assets])
        self._loadings = np.array([a.loading for a in assets])
        for arr in (self._exposures, self._pds, self._loadings):
            arr.flags.writeable = False

    def __len__(self):
        return len(self.assets)

    def __repr__(self):
        return f"Portfolio({len(self.assets)} assets, total exposure {self.total_exposure:g})"

    @property
    def ids(self):
        return [a.id for a in self.assets]

    @property
    def exposures(self) -> np.ndarray:
        """Base exposures a_j (without allocation multipliers)."""
        return self._exposures

    @property
    def pds(self) -> np.ndarray:
        return self._pds

    @property
    def loadings(self) -> np.ndarray:
        return self._loadings

    @property
    def effective_exposures(self) -> np.ndarray:
        """allocation_j * exposure_j, the loss amount of a default."""
        return self.allocations * self._exposures

    @property
    def total_exposure(self) -> float:
        """Maximum possible loss."""
        return float(np.sum(self.effective_exposures))

    def with_allocations(self, allocations) -> "Portfolio":
        return Portfolio(self.assets, allocations)

    def with_loading(self, loading: float) -> "Portfolio":
        """Copy with every asset's loading replaced (correlation override)."""
        assets = [
            Asset(a.id, a.exposure, a.pd, float(loading)) for a in self.assets
        ]
        return Portfolio(assets, self.allocations)


@dataclass(frozen=True)
class FactorModel:
    """Coupling between the N(0,1) risk factor and conditional default rates.

    kinds:
      * ``gaussian``: p_j(v) = Phi((Phi^-1(pd_j) - loading_j v) / sqrt(1 - loading_j^2))
      * ``crplus``: p_j(v) = min(pd_j * g(v), 1) with g(v) = exp(sigma_f v - sigma_f^2/2),
        a unit-mean lognormal scaling of the default rates.
      * ``independent``: p_j(v) = pd_j.

    All kinds share the Normal factor; the crplus scaling variance is the
    single extra knob ``sigma_f``.
    """

    kind: str = "gaussian"
    sigma_f: float = 1.0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise PortfolioFormatError(
                f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}"
            )
        if self.kind == "crplus" and not self.sigma_f > 0:
            raise PortfolioFormatError("crplus scaling volatility must be positive")


def conditional_pd(asset: Asset, model: FactorModel, v: float) -> float:
    """Default probability of one asset conditional on the factor value v."""
    if model.kind == "independent":
        return asset.pd
    if model.kind == "gaussian":
        b = asset.loading
        if b == 0.0:
            return asset.pd
        return float(ndtr((ndtri(asset.pd) - b * v) / np.sqrt(1.0 - b * b)))
    # crplus: lognormal scaling, clamped at 1
    g = np.exp(model.sigma_f * v - 0.5 * model.sigma_f**2)
    return float(min(asset.pd * g, 1.0))


def conditional_pd_array(portfolio: Portfolio, model: FactorModel, v) -> np.ndarray:
    """Conditional pds for every asset, vectorized over scalar or array v.

    Returns shape (n_assets,) for scalar v, else (len(v), n_assets).
    """
    v = np.asarray(v, dtype=float)
    pds = portfolio.pds
    if model.kind == "independent":
        out = np.broadcast_to(pds, v.shape + pds.shape)
        return out.copy()
    if model.kind == "gaussian":
        b = portfolio.loadings
        thresh = ndtri(pds)
        denom = np.sqrt(1.0 - b * b)
        arg = (thresh - b * v[..., None]) / denom
        out = ndtr(arg)
        # zero-loading assets decouple exactly (avoid 0/denom rounding)
        if np.any(b == 0.0):
            out = np.where(b == 0.0, pds, out)
        return out
    g = np.exp(model.sigma_f * v - 0.5 * model.sigma_f**2)
    return np.minimum(pds * g[..., None], 1.0)


def load_portfolio(path) -> Portfolio:
    """Read a portfolio from CSV with header ``id,exposure,pd,beta``.

    Raises PortfolioFormatError with the offending line number (or asset id
    for invariant violations).
    """
    assets = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PortfolioFormatError(f"{path}: empty file") from None
        expected = ["id", "exposure", "pd", "beta"]
        if [h.strip().lower() for h in header] != expected:
            raise PortfolioFormatError(
                f"{path}: line 1: header must be {','.join(expected)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise PortfolioFormatError(
                    f"{path}: line {lineno}: expected 4 fields, got {len(row)}"
                )
            ident = row[0].strip()
            try:
                exposure, pd, beta = (float(c) for c in row[1:])
            except ValueError as exc:
                raise PortfolioFormatError(
                    f"{path}: line {lineno}: {exc}"
                ) from None
            try:
                assets.append(Asset(ident, exposure, pd, beta))
            except PortfolioFormatError as exc:
                raise PortfolioFormatError(f"{path}: line {lineno}: {exc}") from None
    return Portfolio(assets)
