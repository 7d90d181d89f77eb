"""Saddlepoint portfolio risk engine.

Loss distributions, VaR, expected shortfall, tranche values and
first/second-order risk contributions for one-factor conditional-
independence credit portfolios, with exact oracles (grid convolution,
enumeration, analytic families, Monte Carlo) for verification.
"""

from .contrib import (
    RiskReport,
    TiltedView,
    analyze,
    build_tilted_view,
    clt_esf_delta,
    clt_esf_hessian,
    clt_var_delta,
    conditional_cov,
    deflate,
    esf_delta,
    esf_hessian,
    tilted_pd,
    var_delta,
)
from .errors import (
    BracketingError,
    ConfigError,
    DegenerateTail,
    ImpossibleLoss,
    NoConvergence,
    NonIntegerExposure,
    NotMonotone,
    NumericError,
    OutOfRange,
    PortfolioFormatError,
    RiskEngineError,
    SingularDirection,
    UnsupportedFamily,
)
from .kgf import (
    BernoulliPortfolioKgf,
    CompoundPoissonGammaKgf,
    ExponentialKgf,
    GammaKgf,
    KgfEval,
    NormalKgf,
    kgf_bernoulli,
    kgf_portfolio,
)
from .mixer import (
    DistributionCurve,
    GaResult,
    Quadrature,
    clt_esf,
    clt_tail,
    direct_saddlepoint,
    distribution_curve,
    ga_from_curve,
    granularity_adjust,
    mixed_density,
    mixed_esf,
    mixed_tail,
    solve_var,
)
from .model import (
    Asset,
    FactorModel,
    Portfolio,
    conditional_pd,
    conditional_pd_array,
    load_portfolio,
)
from .oracle import (
    LossGrid,
    MonteCarloResult,
    analytic_family,
    compound_poisson_gamma_reference,
    convolve_independent,
    exact_esf_delta,
    exact_var_delta,
    exponential_reference,
    gamma_reference,
    mixed_exact,
    monte_carlo,
    normal_reference,
)
from .saddle import (
    SaddleSolution,
    density,
    esf_numerator,
    saddle_solution,
    solve_saddlepoint,
    sp_density,
    sp_esf_terms,
    sp_tail,
    sp_tranche,
    tail_probability,
    tranche_values,
)

__version__ = "0.1.0"
