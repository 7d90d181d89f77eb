"""Exception hierarchy for the risk engine.

Config/input problems and numeric failures are kept distinct so the CLI can
map them to different exit codes.
"""


class RiskEngineError(Exception):
    """Base class for all engine errors."""


class PortfolioFormatError(RiskEngineError):
    """Portfolio file cannot be parsed or violates an invariant."""


class ConfigError(RiskEngineError):
    """Invalid job configuration (flags, levels, model parameters)."""


class NumericError(RiskEngineError):
    """Base class for numeric failures inside the solvers."""


class OutOfRange(NumericError):
    """Threshold outside the support of the (conditional) loss variable."""


class NoConvergence(NumericError):
    """Root search failed to converge (diagnostic; should not occur)."""


class BracketingError(NumericError):
    """Outer quantile loop could not bracket the requested level."""


class DegenerateTail(NumericError):
    """Tail probability (or density) too small for a conditional quantity."""


class NotMonotone(NumericError):
    """Factor-conditional mean is not strictly monotone across nodes."""


class SingularDirection(NumericError):
    """Deflation direction carries no quadratic mass (a'Omega a ~ 0)."""


class NonIntegerExposure(NumericError):
    """Exposures do not fit the requested loss grid quantum."""


class ImpossibleLoss(NumericError):
    """Conditioning on a loss level that has zero probability."""


class UnsupportedFamily(NumericError):
    """KGF family not registered for the direct (unconditional) method."""
