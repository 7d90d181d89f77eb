"""Risk contributions: first and second derivatives of VaR and expected
shortfall with respect to asset allocations.

Everything reuses the per-asset first derivatives of the conditional KGF
cached while the saddlepoints were being found, so contributions cost
little beyond the risk numbers themselves.  Write K for the conditional
portfolio KGF and b_j for base exposures; with allocations a_j the tilt
argument of asset j is b_j a_j s and

    (1/s) dK/da_j           = b_j pt_j            (tilted mean of asset j)
    (1/s^2) d2K/da_j da_k   = delta_jk b_j^2 pt_j (1-pt_j)
    d/ds[(1/s) dK/da_j]     = a_j b_j^2 pt_j (1-pt_j)

(the mixed allocation second derivative is diagonal because K is a sum of
one-asset terms).  The shortfall Hessian splits into a systematic part

    H^S_jk = (tilted_mean_j - dy/da_j)(tilted_mean_k - dy/da_k)

and an unsystematic part

    H^U_jk = delta_jk b_j^2 pt (1-pt) - c_j c_k / K''(shat),
    c_j = a_j b_j^2 pt_j (1-pt_j),

whose second term is essential: dropping it breaks the null-eigenvector
property H a = 0.  (Two further O(1) terms of the underlying expansion are
omitted, as they do not affect H a = 0 and vanish in the Normal case.)
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import DegenerateTail, SingularDirection
from .kgf import tilted_pd  # noqa: F401  (public here: contribution-side API)
from .mixer import DEGENERATE_TAIL, conditional_batch, solve_var
from .model import conditional_pd_array
from .saddle import NEAR_ZERO_U

__all__ = [
    "tilted_pd",
    "TiltedView",
    "build_tilted_view",
    "var_delta",
    "esf_delta",
    "esf_hessian",
    "conditional_cov",
    "deflate",
    "clt_var_delta",
    "clt_esf_delta",
    "clt_esf_hessian",
    "RiskReport",
    "analyze",
]

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def _phi(x):
    return np.exp(-0.5 * np.square(x)) / _SQRT_2PI


@dataclass(frozen=True)
class TiltedView:
    """Per-node, per-asset tilted quantities at one threshold.

    Shapes: (nodes,) for node arrays, (nodes, assets) for matrices.  The
    saddlepoint equation reads sum_j alloc_j * tilted_mean[k, j] = y on
    every feasible node.
    """

    y: float
    weights: np.ndarray
    allocations: np.ndarray
    tilted_mean: np.ndarray   # b_j * pt_j  (per unit allocation)
    cond_mean: np.ndarray     # b_j * p_j
    unit_k2: np.ndarray       # b_j^2 * pt_j (1 - pt_j)
    shat: np.ndarray
    u: np.ndarray
    feasible: np.ndarray
    density: np.ndarray
    tail_up: np.ndarray
    K2s: np.ndarray           # K''(shat) per node
    mean: np.ndarray          # conditional portfolio mean per node
    esf_factor: np.ndarray    # (y - mean)/shat per node (series near 0)
    cum0: tuple               # per-asset (c2, c3, c4) at s = 0

    def tail(self, side: str) -> float:
        up = float(np.dot(self.weights, self.tail_up))
        return up if side == "upper" else 1.0 - up

    def mixed_density(self) -> float:
        return float(np.dot(self.weights, self.density))

    def esf(self, side: str = "upper") -> float:
        p = self.tail(side)
        if p < DEGENERATE_TAIL:
            raise DegenerateTail(f"{side} tail {p:.3e} below {DEGENERATE_TAIL:.0e}")
        node_tail = self.tail_up if side == "upper" else 1.0 - self.tail_up
        sign = 1.0 if side == "upper" else -1.0
        num = float(
            self.weights @ (self.mean * node_tail)
            + sign * (self.weights * self.density) @ self.esf_factor
        )
        return num / p


def build_tilted_view(
    portfolio, model, quad, y, form="bn", with_correction=False
) -> TiltedView:
    batch = conditional_batch(portfolio, model, quad, y, form, with_correction)
    b = portfolio.exposures
    pt = batch.pt
    p = batch.pds
    q0 = p * (1.0 - p)
    cum0 = (
        b**2 * q0,
        b**3 * q0 * (1.0 - 2.0 * p),
        b**4 * q0 * (1.0 - 6.0 * p + 6.0 * p * p),
    )
    return TiltedView(
        y=batch.y,
        weights=batch.weights,
        allocations=portfolio.allocations,
        tilted_mean=b * pt,
        cond_mean=b * p,
        unit_k2=b**2 * pt * (1.0 - pt),
        shat=batch.shat,
        u=batch.u,
        feasible=batch.feasible,
        density=batch.density,
        tail_up=batch.tail_up,
        K2s=batch.K2s,
        mean=batch.mean,
        esf_factor=batch.esf_factor,
        cum0=cum0,
    )


def _view(portfolio, model, quad, y, view, form, with_correction):
    if view is not None:
        return view
    return build_tilted_view(portfolio, model, quad, y, form, with_correction)


def var_delta(portfolio, model, quad, y, view=None, form="bn", with_correction=False):
    """dVaR/da_j: density-weighted average of the tilted asset means.

    The allocation-weighted deltas sum to y (Euler allocation).
    """
    v = _view(portfolio, model, quad, y, view, form, with_correction)
    f_y = v.mixed_density()
    if f_y < 1e-300:
        raise DegenerateTail(f"mixed density {f_y:.3e} vanishes at y={y:g}")
    wf = v.weights * v.density
    return wf @ v.tilted_mean / f_y


def _esf_bracket(v: TiltedView) -> np.ndarray:
    """(tilted_mean - cond_mean)/shat per node/asset, with the removable
    shat -> 0 singularity replaced by its series."""
    safe = np.abs(v.u) >= NEAR_ZERO_U
    s = np.where(safe, v.shat, 1.0)
    direct = (v.tilted_mean - v.cond_mean) / s[:, None]
    a = v.allocations
    c2, c3, c4 = v.cum0
    sh = np.where(np.isnan(v.shat), 0.0, v.shat)[:, None]
    taylor = a * (c2 + sh * a * c3 / 2.0 + sh**2 * a**2 * c4 / 6.0)
    out = np.where(safe[:, None], direct, taylor)
    return np.where(v.feasible[:, None], out, 0.0)


def esf_delta(
    portfolio, model, quad, y, side="upper",
    view=None, form="bn", with_correction=False,
):
    """Shortfall deltas split into (systematic, unsystematic) parts.

    systematic_j mixes the conditional asset mean with the node tails;
    unsystematic_j mixes the tilted-minus-conditional mean bracket with the
    node densities and is nonnegative for the upper side.
    """
    v = _view(portfolio, model, quad, y, view, form, with_correction)
    p_side = v.tail(side)
    if p_side < DEGENERATE_TAIL:
        raise DegenerateTail(f"{side} tail {p_side:.3e} below {DEGENERATE_TAIL:.0e}")
    node_tail = v.tail_up if side == "upper" else 1.0 - v.tail_up
    sign = 1.0 if side == "upper" else -1.0
    sys = (v.weights * node_tail) @ v.cond_mean / p_side
    unsys = sign * (v.weights * v.density) @ _esf_bracket(v) / p_side
    return sys, unsys


def _hessian_core(v: TiltedView, dy_da, drop_correction=False):
    """sum_k w_k f_k (H^S_k + H^U_k), assembled across nodes."""
    wf = v.weights * v.density
    dev = v.tilted_mean - dy_da[None, :]
    H = np.einsum("k,kj,kl->jl", wf, dev, dev)
    H[np.diag_indices_from(H)] += wf @ v.unit_k2
    if not drop_correction:
        c = v.allocations * v.unit_k2
        k2 = np.where(v.feasible, v.K2s, 1.0)
        H -= np.einsum("k,kj,kl->jl", wf / k2, c, c)
    return 0.5 * (H + H.T)


def esf_hessian(
    portfolio, model, quad, y, side="upper",
    view=None, form="bn", with_correction=False, drop_correction=False,
):
    """Hessian of the shortfall w.r.t. allocations (H^S + H^U mixed).

    ``drop_correction`` omits the -c c'/K'' term of H^U; that variant is
    provided only so its failure mode (H a != 0) can be demonstrated.
    """
    v = _view(portfolio, model, quad, y, view, form, with_correction)
    p_side = v.tail(side)
    if p_side < DEGENERATE_TAIL:
        raise DegenerateTail(f"{side} tail {p_side:.3e} below {DEGENERATE_TAIL:.0e}")
    dy = var_delta(portfolio, model, quad, y, view=v)
    sign = 1.0 if side == "upper" else -1.0
    return sign * _hessian_core(v, dy, drop_correction) / p_side


def conditional_cov(portfolio, model, quad, y, view=None, form="bn", with_correction=False):
    """Covariance of the assets conditional on the portfolio losing
    exactly y (density-weighted mix of the per-node tilted covariances
    with their rank-one corrections plus the systematic deviations).

    Satisfies a' C a = 0: the portfolio itself cannot vary given Y = y.
    """
    v = _view(portfolio, model, quad, y, view, form, with_correction)
    f_y = v.mixed_density()
    if f_y < 1e-300:
        raise DegenerateTail(f"mixed density {f_y:.3e} vanishes at y={y:g}")
    dy = var_delta(portfolio, model, quad, y, view=v)
    return _hessian_core(v, dy) / f_y


def deflate(omega, a, tol: float = 1e-12):
    """Remove the quadratic mass of a symmetric PSD matrix along a:
    omega - (omega a)(omega a)' / (a' omega a).

    The result annihilates a and stays PSD (Cauchy-Schwarz).
    """
    omega = np.asarray(omega, dtype=float)
    a = np.asarray(a, dtype=float)
    w = omega @ a
    denom = float(a @ w)
    scale = float(np.linalg.norm(omega) * (a @ a))
    if denom <= tol * max(scale, 1e-300):
        raise SingularDirection("direction carries no quadratic mass")
    return omega - np.outer(w, w) / denom


# ----------------------------------------------------------------------
# conditional-Normal (CLT) counterparts

def _clt_pieces(portfolio, model, quad, y):
    b = portfolio.exposures
    a = portfolio.allocations
    pds = conditional_pd_array(portfolio, model, quad.nodes)
    cond_mean = b * pds                     # per unit allocation
    unit_var = b**2 * pds * (1.0 - pds)
    mu = (a * cond_mean).sum(axis=1)
    var = (a**2 * unit_var).sum(axis=1)
    sd = np.sqrt(var)
    ok = sd > 0.0
    z = np.where(ok, (y - mu) / np.where(ok, sd, 1.0), 0.0)
    tail = np.where(ok, ndtr(-z), np.where(mu > y, 1.0, np.where(mu < y, 0.0, 0.5)))
    dens = np.where(ok, _phi(z) / np.where(ok, sd, 1.0), 0.0)
    return cond_mean, unit_var, mu, sd, ok, z, tail, dens


def clt_var_delta(portfolio, model, quad, y):
    cond_mean, unit_var, _, sd, ok, z, _, dens = _clt_pieces(portfolio, model, quad, y)
    a = portfolio.allocations
    f_y = float(np.dot(quad.weights, dens))
    if f_y < 1e-300:
        raise DegenerateTail(f"CLT mixed density {f_y:.3e} vanishes at y={y:g}")
    dsig = a * unit_var / np.where(ok, sd, 1.0)[:, None]
    num = cond_mean + z[:, None] * dsig
    return (quad.weights * dens) @ num / f_y


def clt_esf_delta(portfolio, model, quad, y, side="upper"):
    cond_mean, unit_var, _, sd, ok, z, tail, _ = _clt_pieces(portfolio, model, quad, y)
    a = portfolio.allocations
    node_tail = tail if side == "upper" else 1.0 - tail
    p_side = float(np.dot(quad.weights, node_tail))
    if p_side < DEGENERATE_TAIL:
        raise DegenerateTail(f"{side} tail {p_side:.3e} below {DEGENERATE_TAIL:.0e}")
    sign = 1.0 if side == "upper" else -1.0
    sys = (quad.weights * node_tail) @ cond_mean / p_side
    dsig = a * unit_var / np.where(ok, sd, 1.0)[:, None]
    wphi = quad.weights * np.where(ok, _phi(z), 0.0)
    unsys = sign * wphi @ dsig / p_side
    return sys, unsys


def clt_esf_hessian(portfolio, model, quad, y, side="upper"):
    cond_mean, unit_var, _, sd, ok, z, tail, dens = _clt_pieces(portfolio, model, quad, y)
    a = portfolio.allocations
    node_tail = tail if side == "upper" else 1.0 - tail
    p_side = float(np.dot(quad.weights, node_tail))
    if p_side < DEGENERATE_TAIL:
        raise DegenerateTail(f"{side} tail {p_side:.3e} below {DEGENERATE_TAIL:.0e}")
    dy = clt_var_delta(portfolio, model, quad, y)
    wf = quad.weights * dens
    sd_safe = np.where(ok, sd, 1.0)
    r = a * unit_var / sd_safe[:, None]
    q = dy[None, :] - cond_mean - z[:, None] * r
    H = np.einsum("k,kj,kl->jl", wf, q, q)
    H[np.diag_indices_from(H)] += wf @ unit_var
    H -= np.einsum("k,kj,kl->jl", wf, r, r)
    sign = 1.0 if side == "upper" else -1.0
    return sign * 0.5 * (H + H.T) / p_side


# ----------------------------------------------------------------------
# one-call report

@dataclass(frozen=True)
class RiskReport:
    p_tail: float
    var: float
    esf: float
    var_delta: np.ndarray
    esf_delta_systematic: np.ndarray
    esf_delta_unsystematic: np.ndarray
    esf_hessian: np.ndarray
    tail_prob: float
    node_count: int
    method: str


def analyze(
    portfolio, model, quad, p_tail: float, method: str = "sp",
    form: str = "bn", with_correction: bool = False, hessian: bool = True,
) -> RiskReport:
    """Solve the VaR at p_tail, then assemble shortfall and contributions."""
    y = solve_var(portfolio, model, quad, p_tail, method=method, form=form)
    if method == "sp":
        v = build_tilted_view(portfolio, model, quad, y, form, with_correction)
        p_up = v.tail("upper")
        esf = v.esf("upper")
        sys, unsys = esf_delta(portfolio, model, quad, y, "upper", view=v)
        vd = var_delta(portfolio, model, quad, y, view=v)
        H = (
            esf_hessian(portfolio, model, quad, y, "upper", view=v)
            if hessian
            else np.zeros((len(portfolio), len(portfolio)))
        )
        return RiskReport(
            p_tail, y, esf, vd, sys, unsys, H, p_up, len(quad.nodes), "sp"
        )
    if method == "clt":
        from .mixer import clt_esf, clt_tail  # local: avoid cycle at import time

        sys, unsys = clt_esf_delta(portfolio, model, quad, y, "upper")
        esf = clt_esf(portfolio, model, quad, y, "upper")
        vd = clt_var_delta(portfolio, model, quad, y)
        H = (
            clt_esf_hessian(portfolio, model, quad, y, "upper")
            if hessian
            else np.zeros((len(portfolio), len(portfolio)))
        )
        return RiskReport(
            p_tail, y, esf,
            np.asarray(vd), np.asarray(sys), np.asarray(unsys), H,
            clt_tail(portfolio, model, quad, y), len(quad.nodes), "clt",
        )
    raise ValueError(f"unknown method {method!r}")
