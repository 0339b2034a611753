"""Sequence-model carved inference for a single coordinate.

The conditional law of the full-data statistic given selection has density
proportional to phi(z) * factor(z + m) in the centered variable z, where the
factor is the probability of the selection event given the statistic value.
The exact pivot is the upper-tail probability integral transform of that law;
confidence intervals invert it in the non-centrality m.  All integrals are
carried in log space so that rare selection events (factors down to e^-70)
stay representable.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp

from .errors import QuadratureConvergenceError, RareEventUnderflow, SolverConvergenceError
from .gauss import (
    LOG_2PI,
    QuadratureConfig,
    _panel_nodes,
    log_std_normal_survival,
    std_normal_pdf,
)

LOG_UNDERFLOW = np.log(1e-300)
PIVOT_TOL = 1e-9


@dataclass(frozen=True)
class SeqCarveProblem:
    """Univariate carved problem: non-centrality m, noise ratio rho,
    randomized selection cutoff offset (already scaled by sqrt(1+rho^2)),
    and selection side sign (+1 keeps the upper tail, -1 the lower)."""

    m: float
    rho: float
    offset: float
    sign: float = 1.0

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not np.isfinite(self.offset) or not np.isfinite(self.m):
            raise ValueError("offset and m must be finite")
        if self.sign not in (-1.0, 1.0, -1, 1):
            raise ValueError("sign must be +1 or -1")


@dataclass(frozen=True)
class PivotResult:
    value: float
    numerator: float
    denominator: float
    quadrature_error: float
    std_error: float = 0.0  # nonzero only for MC-based pivots


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    level: float
    iterations: int


def seq_survival_factor(z, prob):
    """Probability of selecting the coordinate given its centered statistic z."""
    return np.exp(log_seq_survival_factor(z, prob))


def log_seq_survival_factor(z, prob):
    # P(value + rho*N(0,1) on the selected side of offset), value = z + m
    return log_std_normal_survival(prob.sign * (prob.offset - (z + prob.m)) / prob.rho)


def _log_weighted_integrand(nodes, weights, prob):
    return (
        np.log(weights)
        - 0.5 * nodes * nodes
        - 0.5 * LOG_2PI
        + log_seq_survival_factor(nodes, prob)
    )


def _log_integrals(z_lo, prob, cfg):
    """Log of (integral from z_lo to R, integral from -R to R) of phi*factor,
    refined jointly until both stabilize."""
    radius = cfg.truncation_radius
    lo = max(z_lo, -radius)
    prev = None
    n_panels = 8
    for _ in range(cfg.max_refinements + 1):
        nodes, weights = _panel_nodes(-radius, radius, 4 * n_panels)
        log_den = logsumexp(_log_weighted_integrand(nodes, weights, prob))
        if lo >= radius:
            log_num = -np.inf
        else:
            nodes_n, weights_n = _panel_nodes(lo, radius, n_panels)
            log_num = logsumexp(_log_weighted_integrand(nodes_n, weights_n, prob))
        if prev is not None:
            gap = max(abs(log_num - prev[0]) if np.isfinite(log_num) else 0.0,
                      abs(log_den - prev[1]))
            if gap < max(cfg.abs_tol, cfg.rel_tol):
                return log_num, log_den, gap
        prev = (log_num, log_den)
        n_panels *= 2
    raise QuadratureConvergenceError(
        "pivot quadrature did not converge",
        last_estimate=float(np.exp(log_num - log_den)),
        gap=gap if prev is not None else None,
    )


def seq_pivot(z_obs, prob, cfg=QuadratureConfig()):
    """Exact conditional pivot: P(Z > z_obs | selection) under non-centrality m.

    Decreasing in z_obs, increasing in m; Unif(0,1) under the exact Gaussian
    conditional law at the true m.
    """
    if not np.isfinite(z_obs):
        raise ValueError("z_obs must be finite")
    log_num, log_den, gap = _log_integrals(z_obs - prob.m, prob, cfg)
    if log_den < LOG_UNDERFLOW:
        raise RareEventUnderflow(
            f"selection probability underflowed (log denominator {log_den:.1f})"
        )
    if z_obs - prob.m <= -cfg.truncation_radius:
        value = 1.0
    else:
        value = float(np.exp(log_num - log_den)) if np.isfinite(log_num) else 0.0
    value = min(max(value, 0.0), 1.0)
    return PivotResult(
        value=value,
        numerator=float(np.exp(log_num)),
        denominator=float(np.exp(log_den)),
        quadrature_error=float(gap),
    )


def seq_carved_density(z, prob, cfg=QuadratureConfig()):
    """Carved conditional density of the centered statistic at z."""
    _, log_den, _ = _log_integrals(cfg.truncation_radius, prob, cfg)
    if log_den < LOG_UNDERFLOW:
        raise RareEventUnderflow("selection probability underflowed")
    z = np.asarray(z, dtype=float)
    log_f = -0.5 * z * z - 0.5 * LOG_2PI + log_seq_survival_factor(z, prob) - log_den
    out = np.exp(log_f)
    return float(out) if out.ndim == 0 else out


def invert_pivot(pivot_fn, z_obs, level, max_doublings=60, tol=PIVOT_TOL):
    """Invert a pivot increasing in m at the symmetric quantiles of level.

    pivot_fn(m) must be increasing in m.  Returns (lower, upper, iterations).
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    targets = ((1.0 - level) / 2.0, (1.0 + level) / 2.0)
    endpoints = []
    total_iters = 0

    for target in targets:
        lo, hi = z_obs - 1.0, z_obs + 1.0
        step = 1.0
        for _ in range(max_doublings):
            if pivot_fn(lo) <= target:
                break
            step *= 2.0
            lo -= step
        else:
            raise SolverConvergenceError("bracket expansion failed (lower)")
        step = 1.0
        for _ in range(max_doublings):
            if pivot_fn(hi) >= target:
                break
            step *= 2.0
            hi += step
        else:
            raise SolverConvergenceError("bracket expansion failed (upper)")
        evals = [0]

        def objective(m):
            evals[0] += 1
            return pivot_fn(m) - target

        root = brentq(objective, lo, hi, xtol=1e-10, rtol=8.9e-16, maxiter=200)
        total_iters += evals[0]
        endpoints.append(float(root))

    return endpoints[0], endpoints[1], total_iters


def seq_confidence_interval(z_obs, rho, offset, sign, level, cfg=QuadratureConfig()):
    """Equal-tailed interval for m by pivot inversion.

    The pivot is increasing in m, so the lower endpoint solves
    pivot = (1-level)/2 and the upper solves pivot = (1+level)/2; this is the
    orientation under which the interval covers the true m with the nominal
    probability.
    """

    def pivot_at(m):
        return seq_pivot(z_obs, SeqCarveProblem(m, rho, offset, sign), cfg).value

    lower, upper, iters = invert_pivot(pivot_at, z_obs, level)
    return ConfidenceInterval(lower=lower, upper=upper, level=level, iterations=iters)


def split_interval(z2, n, n2, level):
    """Classical z-interval for m = sqrt(n)*beta from stage-two data alone.

    z2 is the stage-two statistic sqrt(n2)*mean(stage two); the rescaling by
    sqrt(n/n2) converts it to an estimate of m with variance n/n2.
    """
    from .gauss import std_normal_quantile

    q = std_normal_quantile((1.0 + level) / 2.0)
    scale = np.sqrt(n / n2)
    center = z2 * scale
    return ConfidenceInterval(
        lower=center - q * scale, upper=center + q * scale, level=level, iterations=0
    )
