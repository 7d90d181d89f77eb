"""Command-line driver.

One job per invocation; CSV output with a '#'-prefixed metadata header
(config echo, version, seed) so runs are diff-able and plot-ready.  All
numeric cells carry 12 significant digits.  Exit codes: 0 success,
2 config error, 3 numeric error (module error name on stderr).
"""

import argparse
import io
import sys

import numpy as np

from . import __version__
from .contrib import analyze, clt_esf_hessian, esf_hessian
from .errors import ConfigError, NumericError, PortfolioFormatError
from .mixer import (
    Quadrature,
    clt_esf,
    clt_tail,
    distribution_curve,
    granularity_adjust,
    mixed_esf,
    mixed_tail,
    solve_var,
)
from .model import FactorModel, load_portfolio
from .oracle import mixed_exact, monte_carlo

MODEL_FLAGS = {"gauss": "gaussian", "crp": "crplus", "indep": "independent"}
JOBS = ("dist", "var", "esf", "contrib", "hessian", "ga", "compare", "mc")
METHODS = ("sp", "clt", "exact", "mc")


def _fmt(x) -> str:
    return f"{float(x):.12g}"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sprisk",
        description="portfolio loss distributions, VaR/ESF and risk contributions",
    )
    p.add_argument("--portfolio", default=None, help="CSV with id,exposure,pd,beta")
    p.add_argument("--model", choices=sorted(MODEL_FLAGS), default="gauss")
    p.add_argument("--beta", type=float, default=None,
                   help="override every asset's loading")
    p.add_argument("--sigma-f", type=float, default=1.0,
                   help="scaling volatility of the crp model")
    p.add_argument("--nodes", type=int, default=99, help="quadrature node count")
    p.add_argument("--job", choices=JOBS, default=None)
    p.add_argument("--levels-prob", default=None,
                   help="comma-separated tail probabilities in (0,1)")
    p.add_argument("--levels-loss", default=None,
                   help="comma-separated loss thresholds")
    p.add_argument("--method", choices=METHODS, default="sp")
    p.add_argument("--paths", type=int, default=100_000, help="Monte Carlo paths")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output CSV path (default stdout)")
    p.add_argument("--config", default=None,
                   help="key=value file supplying defaults for the flags above")
    return p


def _apply_config_file(argv, path):
    """Prepend flag defaults read from a key=value file (flags win)."""
    extra = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: line {lineno}: expected key=value")
            key, val = (part.strip() for part in line.split("=", 1))
            extra.extend([f"--{key.replace('_', '-')}", val])
    return extra + list(argv)


def _parse_levels(args):
    if args.levels_prob is not None and args.levels_loss is not None:
        raise ConfigError("--levels-prob and --levels-loss are mutually exclusive")
    try:
        if args.levels_prob is not None:
            levels = [float(t) for t in args.levels_prob.split(",") if t.strip()]
            if not levels or any(not 0.0 < p < 1.0 for p in levels):
                raise ConfigError("probabilities must lie in (0,1)")
            return "prob", levels
        if args.levels_loss is not None:
            levels = [float(t) for t in args.levels_loss.split(",") if t.strip()]
            if not levels:
                raise ConfigError("no loss thresholds given")
            return "loss", levels
    except ValueError as exc:
        raise ConfigError(f"bad level list: {exc}") from None
    return None, None


def _metadata_lines(args):
    keys = [
        ("portfolio", args.portfolio), ("model", args.model), ("beta", args.beta),
        ("sigma_f", args.sigma_f), ("nodes", args.nodes), ("job", args.job),
        ("levels_prob", args.levels_prob), ("levels_loss", args.levels_loss),
        ("method", args.method), ("paths", args.paths), ("seed", args.seed),
    ]
    lines = [f"# sprisk {__version__}"]
    lines += [f"# {k} = {v}" for k, v in keys if v is not None]
    return lines


def _thresholds_for(portfolio, model, quad, mode, levels, args):
    """Resolve requested levels to loss thresholds."""
    if mode == "loss":
        return list(levels), [None] * len(levels)
    method = "clt" if args.method == "clt" else "sp"
    ys = [solve_var(portfolio, model, quad, p, method=method) for p in levels]
    return ys, list(levels)


def _default_grid(portfolio, model, quad, args):
    lo = solve_var(portfolio, model, quad, 0.5)
    hi = solve_var(portfolio, model, quad, 0.001)
    span = hi - lo
    total = float(np.sum(portfolio.effective_exposures))
    a = max(lo - 0.1 * span, 1e-6 * total)
    b = min(hi + 0.1 * span, (1.0 - 1e-6) * total)
    return np.linspace(a, b, 101)


def _job_dist(w, portfolio, model, quad, mode, levels, args):
    if mode == "loss":
        grid = np.asarray(levels, dtype=float)
    else:
        if mode == "prob":
            ys = [solve_var(portfolio, model, quad, p) for p in levels]
            grid = np.asarray(sorted(ys))
        else:
            grid = _default_grid(portfolio, model, quad, args)
    curve = distribution_curve(portfolio, model, quad, grid)
    w.writerow(["y", "tail", "density", "esf_upper"])
    for y, t, d, e in zip(curve.thresholds, curve.tail, curve.density, curve.esf_upper):
        w.writerow([_fmt(y), _fmt(t), _fmt(d), _fmt(e)])


def _job_var(w, portfolio, model, quad, mode, levels, args):
    if mode != "prob":
        raise ConfigError("job 'var' needs --levels-prob")
    method = "clt" if args.method == "clt" else "sp"
    w.writerow(["p_tail", "var"])
    for p in levels:
        w.writerow([_fmt(p), _fmt(solve_var(portfolio, model, quad, p, method=method))])


def _job_esf(w, portfolio, model, quad, mode, levels, args):
    ys, ps = _thresholds_for(portfolio, model, quad, mode, levels, args)
    w.writerow(["p_tail", "y", "esf_upper"])
    for y, p in zip(ys, ps):
        if args.method == "clt":
            esf = clt_esf(portfolio, model, quad, y, "upper")
        else:
            esf = mixed_esf(portfolio, model, quad, y, side="upper")
        w.writerow(["" if p is None else _fmt(p), _fmt(y), _fmt(esf)])


def _job_contrib(w, portfolio, model, quad, mode, levels, args):
    if mode != "prob" or len(levels) != 1:
        raise ConfigError("job 'contrib' needs --levels-prob with exactly one level")
    method = "clt" if args.method == "clt" else "sp"
    rep = analyze(portfolio, model, quad, levels[0], method=method, hessian=False)
    w.writerow(["id", "var_delta", "esf_sys", "esf_unsys", "esf_total"])
    for i, ident in enumerate(portfolio.ids):
        w.writerow([
            ident, _fmt(rep.var_delta[i]),
            _fmt(rep.esf_delta_systematic[i]), _fmt(rep.esf_delta_unsystematic[i]),
            _fmt(rep.esf_delta_systematic[i] + rep.esf_delta_unsystematic[i]),
        ])
    a = portfolio.allocations
    var_sum = float(a @ rep.var_delta)
    esf_sum = float(a @ (rep.esf_delta_systematic + rep.esf_delta_unsystematic))
    if abs(var_sum - rep.var) > 1e-9 * max(abs(rep.var), 1.0) or abs(
        esf_sum - rep.esf
    ) > 1e-9 * max(abs(rep.esf), 1.0):
        raise NumericError("homogeneity violated in contribution sums")
    w.writerow(["SUM", _fmt(var_sum), "", "", _fmt(esf_sum)])
    w.writerow(["TOTAL_RISK", _fmt(rep.var), "", "", _fmt(rep.esf)])


def _job_hessian(w, portfolio, model, quad, mode, levels, args):
    if mode != "prob" or len(levels) != 1:
        raise ConfigError("job 'hessian' needs --levels-prob with exactly one level")
    y = solve_var(portfolio, model, quad, levels[0],
                  method="clt" if args.method == "clt" else "sp")
    if args.method == "clt":
        H = clt_esf_hessian(portfolio, model, quad, y, "upper")
    else:
        H = esf_hessian(portfolio, model, quad, y, "upper")
    w.writerow(["id"] + portfolio.ids)
    for ident, row in zip(portfolio.ids, H):
        w.writerow([ident] + [_fmt(x) for x in row])


def _job_ga(w, portfolio, model, quad, mode, levels, args):
    if mode != "prob":
        raise ConfigError("job 'ga' needs --levels-prob")
    w.writerow(["p_tail", "var_infinity", "var_ga", "esf_infinity", "esf_ga"])
    for p in levels:
        res = granularity_adjust(portfolio, model, quad, p)
        w.writerow([_fmt(p), _fmt(res.var_infinity), _fmt(res.var_ga),
                    _fmt(res.esf_infinity), _fmt(res.esf_ga)])


def _job_compare(w, portfolio, model, quad, mode, levels, args):
    if mode != "prob":
        raise ConfigError("job 'compare' needs --levels-prob")
    grid = mixed_exact(portfolio, model, quad)
    mc = monte_carlo(portfolio, model, args.paths, args.seed)
    w.writerow([
        "p_tail", "y", "exact_tail", "sp_tail", "clt_tail", "mc_tail", "mc_se",
        "sp_rel_err", "clt_rel_err", "sp_in_3se", "clt_in_3se",
    ])
    for p in levels:
        y = grid.nearest_level(p)
        exact = grid.tail(y)
        sp = mixed_tail(portfolio, model, quad, y)
        clt = clt_tail(portfolio, model, quad, y)
        m, se = mc.tail(y)
        w.writerow([
            _fmt(p), _fmt(y), _fmt(exact), _fmt(sp), _fmt(clt), _fmt(m), _fmt(se),
            _fmt(sp / exact - 1.0), _fmt(clt / exact - 1.0),
            str(abs(sp - m) <= 3.0 * se).lower(), str(abs(clt - m) <= 3.0 * se).lower(),
        ])


def _job_mc(w, portfolio, model, quad, mode, levels, args):
    if mode != "prob":
        raise ConfigError("job 'mc' needs --levels-prob")
    mc = monte_carlo(portfolio, model, args.paths, args.seed)
    w.writerow(["p_tail", "y", "mc_tail", "mc_tail_se", "mc_esf", "mc_esf_se"])
    for p in levels:
        y = mc.quantile(p)
        t, t_se = mc.tail(y)
        e, e_se = mc.esf(y)
        w.writerow([_fmt(p), _fmt(y), _fmt(t), _fmt(t_se), _fmt(e), _fmt(e_se)])


_JOB_TABLE = {
    "dist": _job_dist, "var": _job_var, "esf": _job_esf, "contrib": _job_contrib,
    "hessian": _job_hessian, "ga": _job_ga, "compare": _job_compare, "mc": _job_mc,
}


class _CsvWriter:
    """Minimal CSV writer with deterministic newline handling."""

    def __init__(self, stream):
        self.stream = stream

    def writerow(self, cells):
        self.stream.write(",".join(str(c) for c in cells) + "\n")


def run(args) -> str:
    """Execute one parsed job; returns the output text."""
    if args.portfolio is None:
        raise ConfigError("--portfolio is required")
    if args.job is None:
        raise ConfigError("--job is required")
    mode, levels = _parse_levels(args)
    portfolio = load_portfolio(args.portfolio)
    if args.beta is not None:
        if not 0.0 <= args.beta < 1.0:
            raise ConfigError("--beta must lie in [0,1)")
        portfolio = portfolio.with_loading(args.beta)
    if args.nodes < 1:
        raise ConfigError("--nodes must be positive")
    if args.paths < 1:
        raise ConfigError("--paths must be positive")
    model = FactorModel(MODEL_FLAGS[args.model], sigma_f=args.sigma_f)
    quad = Quadrature.gauss_hermite(args.nodes)

    buf = io.StringIO()
    for line in _metadata_lines(args):
        buf.write(line + "\n")
    _JOB_TABLE[args.job](_CsvWriter(buf), portfolio, model, quad, mode, levels, args)
    return buf.getvalue()


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        # pre-scan for --config so its values become defaults
        pre, _ = parser.parse_known_args(argv)
        if pre.config:
            argv = _apply_config_file(argv, pre.config)
        args = parser.parse_args(argv)
        text = run(args)
    except (ConfigError, PortfolioFormatError, OSError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
