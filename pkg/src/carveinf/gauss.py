"""Gaussian special functions, seeded RNG streams, quadrature and orthant MC.

Everything downstream (pivots, selection probabilities, tail checks) is built
on the functions here.  The survival function is routed through the scaled
complementary error function so that relative accuracy survives deep into the
tails, which the rare-selection checks rely on.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import NumericError, QuadratureConvergenceError

LOG_2PI = np.log(2.0 * np.pi)
SQRT_2PI = np.sqrt(2.0 * np.pi)

EIGENVALUE_FLOOR = 1e-10


@dataclass(frozen=True)
class RngStream:
    """Deterministic, replication-keyed random stream.

    Identical (master_seed, stream_id) pairs reproduce identical sample
    sequences; distinct stream ids give statistically independent streams.
    """

    master_seed: int
    stream_id: int = 0

    def generator(self):
        return np.random.default_rng([self.master_seed, self.stream_id])

    def child(self, stream_id):
        return RngStream(self.master_seed, stream_id)


@dataclass(frozen=True)
class QuadratureConfig:
    abs_tol: float = 1e-10
    rel_tol: float = 1e-10
    max_refinements: int = 12
    truncation_radius: float = 10.0

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.truncation_radius < 8:
            raise ValueError("truncation_radius must be >= 8")


@dataclass
class MvnSpec:
    mean: np.ndarray
    covariance: np.ndarray
    floored: bool = field(default=False, init=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.covariance = np.asarray(self.covariance, dtype=float)
        if self.covariance.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance shape does not match mean")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-12):
            raise ValueError("covariance must be symmetric")


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")


def std_normal_pdf(x):
    """Standard normal density exp(-x^2/2)/sqrt(2*pi)."""
    x = np.asarray(x, dtype=float)
    _check_finite(x)
    out = np.exp(-0.5 * x * x) / SQRT_2PI
    return float(out) if out.ndim == 0 else out


def std_normal_survival(x):
    """Upper tail P(N(0,1) > x), accurate in relative terms for |x| <= 38."""
    x = np.asarray(x, dtype=float)
    _check_finite(x)
    out = 0.5 * special.erfc(x / np.sqrt(2.0))
    return float(out) if out.ndim == 0 else out


def std_normal_cdf(x):
    x = np.asarray(x, dtype=float)
    _check_finite(x)
    out = special.ndtr(x)
    return float(out) if out.ndim == 0 else out


def log_std_normal_survival(x):
    """log P(N(0,1) > x), valid far beyond double-precision underflow of the tail."""
    x = np.asarray(x, dtype=float)
    _check_finite(x)
    out = special.log_ndtr(-x)
    return float(out) if out.ndim == 0 else out


def std_normal_quantile(p):
    """Inverse CDF; p must lie strictly inside (0, 1)."""
    p = np.asarray(p, dtype=float)
    if np.any(~np.isfinite(p)) or np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("quantile argument must lie in (0, 1)")
    out = special.ndtri(p)
    return float(out) if out.ndim == 0 else out


def mills_lower(x):
    """Lower envelope of the normal survival function: 2*phi(x)/(sqrt(4+x^2)+x)."""
    x = np.asarray(x, dtype=float)
    _check_finite(x)
    out = 2.0 * std_normal_pdf(x) / (np.sqrt(4.0 + x * x) + x)
    return float(out) if out.ndim == 0 else out


def mills_upper(x):
    """Upper envelope of the normal survival function: 2*phi(x)/(sqrt(2+x^2)+x)."""
    x = np.asarray(x, dtype=float)
    _check_finite(x)
    out = 2.0 * std_normal_pdf(x) / (np.sqrt(2.0 + x * x) + x)
    return float(out) if out.ndim == 0 else out


def _panel_nodes(lo, hi, n_panels, n_nodes=16):
    """Composite Gauss-Legendre nodes/weights on [lo, hi] split into n_panels."""
    base_x, base_w = np.polynomial.legendre.leggauss(n_nodes)
    edges = np.linspace(lo, hi, n_panels + 1)
    half = 0.5 * (edges[1:] - edges[:-1])
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * base_x[None, :]).ravel()
    weights = (half[:, None] * base_w[None, :]).ravel()
    return nodes, weights


def gauss_expectation(f, cfg=QuadratureConfig()):
    """Integral of f(z) phi(z) dz over [-R, R] by adaptive panel refinement.

    Panels are doubled until successive estimates agree to the configured
    tolerance.  Raises QuadratureConvergenceError (carrying the last estimate
    and gap) if the refinement budget is exhausted.
    """
    radius = cfg.truncation_radius
    previous = None
    n_panels = 8
    for _ in range(cfg.max_refinements + 1):
        nodes, weights = _panel_nodes(-radius, radius, n_panels)
        estimate = float(np.sum(weights * np.asarray(f(nodes)) * std_normal_pdf(nodes)))
        if previous is not None:
            gap = abs(estimate - previous)
            if gap < max(cfg.abs_tol, cfg.rel_tol * abs(estimate)):
                return estimate
        previous = estimate
        n_panels *= 2
    raise QuadratureConvergenceError(
        "gauss_expectation did not converge",
        last_estimate=previous,
        gap=abs(estimate - previous) if previous is not None else None,
    )


def covariance_factor(covariance, floor=EIGENVALUE_FLOOR):
    """Symmetric square-root factor with an eigenvalue floor at zero.

    Returns (factor, floored_flag); floored_flag is True when any eigenvalue
    fell below the floor and was clipped.
    """
    try:
        vals, vecs = np.linalg.eigh(np.asarray(covariance, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from exc
    if np.min(vals) < -1e-10 * max(1.0, np.max(np.abs(vals))):
        raise NumericError("covariance has a significantly negative eigenvalue")
    floored = bool(np.any(vals < floor))
    vals = np.clip(vals, 0.0, None)
    return vecs * np.sqrt(vals)[None, :], floored


def mvn_orthant_mc(spec, n_samples, rng):
    """Plain MC estimate of P(X > 0 componentwise), X ~ MvnSpec.

    Returns (estimate, std_error) with std_error = sample sd / sqrt(n).
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be >= 1000")
    factor, spec.floored = covariance_factor(spec.covariance)
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    k = spec.mean.size
    hits = 0
    total = 0
    chunk = min(n_samples, 1_000_000)
    while total < n_samples:
        m = min(chunk, n_samples - total)
        draws = spec.mean[None, :] + gen.standard_normal((m, k)) @ factor.T
        hits += int(np.count_nonzero(np.all(draws > 0.0, axis=1)))
        total += m
    p = hits / n_samples
    se = float(np.sqrt(max(p * (1.0 - p), 0.0) / n_samples))
    return p, se
