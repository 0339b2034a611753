"""Multivariate carved inference.

From a selection rule's linear representation (Q_E, P_E, r_E) and the
statistic covariance Sigma, this module builds the (Q, sqrt_n_alpha) geometry
of the carved Gaussian likelihood, evaluates selection probabilities as
orthant integrals, and computes the exact conditional pivot for one selected
coordinate with the remaining coordinates held fixed through their nuisance
statistics.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import NumericError, QuadratureConvergenceError, RareEventUnderflow
from .gauss import (
    LOG_2PI,
    MvnSpec,
    QuadratureConfig,
    RngStream,
    _panel_nodes,
    covariance_factor,
    log_std_normal_survival,
    mvn_orthant_mc,
    std_normal_cdf,
)
from .seq import LOG_UNDERFLOW, ConfidenceInterval, PivotResult, invert_pivot

MATRIX_EIGEN_FLOOR = 1e-12


@dataclass
class CarveGeometry:
    """Linear description of the selection event acting on the randomization.

    The event is expressed through a(z) = P_E z + r_E; the selected rows of
    Q_E pick out the constraints that involve the randomization W.
    """

    Sigma: np.ndarray  # d x d statistic covariance
    Q_E: np.ndarray  # d x |E|
    r_E: np.ndarray  # length d
    P_E: np.ndarray  # d x d
    rho: float

    def __post_init__(self):
        self.Sigma = np.asarray(self.Sigma, dtype=float)
        self.Q_E = np.atleast_2d(np.asarray(self.Q_E, dtype=float))
        if self.Q_E.shape[0] != self.Sigma.shape[0]:
            self.Q_E = self.Q_E.T
        self.r_E = np.asarray(self.r_E, dtype=float)
        self.P_E = np.asarray(self.P_E, dtype=float)
        d = self.Sigma.shape[0]
        if self.Sigma.shape != (d, d) or self.P_E.shape != (d, d) or self.r_E.size != d:
            raise ValueError("geometry dimensions are inconsistent")
        if not np.allclose(self.Sigma, self.Sigma.T, atol=1e-12):
            raise ValueError("Sigma must be symmetric")
        if not self.rho > 0:
            raise ValueError("rho must be positive")

    @property
    def n_selected(self):
        return self.Q_E.shape[1]


@dataclass(frozen=True)
class QAlpha:
    Q: np.ndarray  # |E| x d
    sqrt_n_alpha: np.ndarray  # length |E|

    def __post_init__(self):
        if not np.all(np.isfinite(self.Q)) or not np.all(np.isfinite(self.sqrt_n_alpha)):
            raise ValueError("Q and sqrt_n_alpha must be finite")
        if self.Q.shape[0] != self.sqrt_n_alpha.size:
            raise ValueError("row count of Q must match sqrt_n_alpha")


def _sym_inv_sqrt(mat, floor=MATRIX_EIGEN_FLOOR):
    """(inverse square root, inverse) of a symmetric positive-definite matrix."""
    vals, vecs = np.linalg.eigh(np.asarray(mat, dtype=float))
    if np.min(vals) <= floor:
        raise NumericError("matrix is not positive-definite beyond the eigenvalue floor")
    inv_sqrt = (vecs / np.sqrt(vals)[None, :]) @ vecs.T
    inv = (vecs / vals[None, :]) @ vecs.T
    return inv_sqrt, inv


def build_q_alpha(geom, sqrt_n_beta):
    """Carved-likelihood geometry: the selection factor is prod_j
    survival(Q_j. z + sqrt_n_alpha_j) in the whitened statistic z."""
    sqrt_n_beta = np.asarray(sqrt_n_beta, dtype=float)
    rho2 = geom.rho * geom.rho
    sigma_inv_sqrt, sigma_inv = _sym_inv_sqrt(geom.Sigma)
    gram = geom.Q_E.T @ sigma_inv @ geom.Q_E / rho2
    gram_inv_sqrt, _ = _sym_inv_sqrt(gram)
    Q = -gram_inv_sqrt @ geom.Q_E.T @ sigma_inv_sqrt / rho2
    alpha = gram_inv_sqrt @ geom.Q_E.T @ sigma_inv @ (-sqrt_n_beta + geom.r_E) / rho2
    return QAlpha(Q=Q, sqrt_n_alpha=alpha)


def mv_selection_prob(qa, n_mc, rng):
    """Selection probability E_Phi[prod_j survival(Q_j. Z + alpha_j)].

    Uses the identity that the expectation equals the orthant probability of
    N(-sqrt_n_alpha, I + Q Q^T): absorbing an independent standard Gaussian G
    per factor turns each survival term into an indicator of G_j - Q_j. Z >
    alpha_j.
    """
    k = qa.sqrt_n_alpha.size
    spec = MvnSpec(mean=-qa.sqrt_n_alpha, covariance=np.eye(k) + qa.Q @ qa.Q.T)
    return mvn_orthant_mc(spec, n_mc, rng)


def mv_selprob_product_mc(qa, n_mc, rng):
    """Direct MC of E_Phi[prod_j survival(Q_j. Z + alpha_j)].

    Samples the |E|-dimensional marginal Q Z ~ N(0, Q Q^T) and averages the
    smooth product, which resolves probabilities far smaller than indicator
    MC can reach at the same sample size.
    """
    if n_mc < 1000:
        raise ValueError("n_mc must be >= 1000")
    factor, _ = covariance_factor(qa.Q @ qa.Q.T)
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    k = qa.sqrt_n_alpha.size
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n_mc:
        m = min(1_000_000, n_mc - done)
        qz = gen.standard_normal((m, k)) @ factor.T
        vals = np.exp(
            np.sum(log_std_normal_survival(qz + qa.sqrt_n_alpha[None, :]), axis=1)
        )
        total += float(np.sum(vals))
        total_sq += float(np.sum(vals * vals))
        done += m
    mean = total / n_mc
    var = max(total_sq / n_mc - mean * mean, 0.0)
    return mean, float(np.sqrt(var / n_mc))


def mv_selprob_importance_mc(qa, n_mc, rng):
    """Importance-sampled estimate of E_Phi[prod_j survival(Q_j. Z + alpha_j)].

    The integrand in the marginal y = Q Z is log-concave; a Gaussian proposal
    matched to its mode and curvature gives O(1) relative variance even when
    the probability is as small as e^-70, where both indicator MC and the
    plain smooth-product MC are hopeless.
    """
    if n_mc < 1000:
        raise ValueError("n_mc must be >= 1000")
    alpha = qa.sqrt_n_alpha
    k = alpha.size
    C = qa.Q @ qa.Q.T
    C_inv = np.linalg.inv(C)
    sign, logdet_c = np.linalg.slogdet(C)
    if sign <= 0:
        raise NumericError("Q Q^T must be positive-definite for importance sampling")

    def hazard(u):
        return np.exp(-0.5 * u * u - 0.5 * LOG_2PI - log_std_normal_survival(u))

    # Newton iterations on the convex negative log-integrand
    y = -C @ np.linalg.solve(np.eye(k) + C, alpha)
    for _ in range(100):
        u = y + alpha
        lam = hazard(u)
        grad = C_inv @ y + lam
        hess = C_inv + np.diag(lam * (lam - u))
        step = np.linalg.solve(hess, grad)
        y = y - step
        if np.max(np.abs(step)) < 1e-12:
            break
    u = y + alpha
    lam = hazard(u)
    hess = C_inv + np.diag(lam * (lam - u))
    hess_chol = np.linalg.cholesky(np.linalg.inv(hess))
    sign_h, logdet_h = np.linalg.slogdet(hess)

    gen = rng.generator() if isinstance(rng, RngStream) else rng
    log_w_all = np.empty(n_mc)
    done = 0
    while done < n_mc:
        m = min(1_000_000, n_mc - done)
        eps = gen.standard_normal((m, k))
        ys = y[None, :] + eps @ hess_chol.T
        log_target = (
            -0.5 * np.einsum("ri,ij,rj->r", ys, C_inv, ys)
            - 0.5 * (logdet_c + k * LOG_2PI)
            + np.sum(log_std_normal_survival(ys + alpha[None, :]), axis=1)
        )
        log_prop = (
            -0.5 * np.sum(eps * eps, axis=1) + 0.5 * logdet_h - 0.5 * k * LOG_2PI
        )
        log_w_all[done:done + m] = log_target - log_prop
        done += m
    shift = np.max(log_w_all)
    w = np.exp(log_w_all - shift)
    mean_w = float(np.mean(w))
    se_w = float(np.sqrt(max(np.mean(w * w) - mean_w * mean_w, 0.0) / n_mc))
    return mean_w * np.exp(shift), se_w * np.exp(shift)


def mv_carved_density_ratio(z_vector, qa, selprob):
    """Likelihood ratio of the carved law to the unconditional Gaussian."""
    if not selprob > 0:
        raise ValueError("selprob must be positive")
    z_vector = np.asarray(z_vector, dtype=float)
    log_num = float(np.sum(log_std_normal_survival(qa.Q @ z_vector + qa.sqrt_n_alpha)))
    return np.exp(log_num) / selprob


def orthant_product_approx(mean, cov):
    """Coordinate-wise product approximation of P(N(mean, cov) > 0).

    Exact when cov is diagonal; otherwise a fast approximation that ignores
    the cross-correlations.
    """
    mean = np.asarray(mean, dtype=float)
    sd = np.sqrt(np.diag(np.asarray(cov, dtype=float)))
    return float(np.prod(std_normal_cdf(mean / sd)))


class MvPivotEvaluator:
    """Exact conditional pivot for one selected coordinate.

    The pivot is a ratio of one-dimensional integrals over the coordinate's
    statistic value z.  The integrand couples z to the selection event through
    a(z) = P_E Zvec(z) + r_E, where Zvec carries the conditioned nuisance
    statistics of the other coordinates; both a(z) and the tilted Gaussian
    mean are linear in z, so all node evaluations vectorize.

    The inner positive-orthant probability is exact for a single selected
    coordinate and estimated by common-random-number MC otherwise; the same
    Gaussian draws are reused across quadrature nodes and across pivot
    evaluations at different non-centralities, which keeps the pivot monotone
    in the parameter during interval inversion.
    """

    def __init__(self, j, geom, nuisance, n_mc=20_000, cfg=QuadratureConfig(),
                 rng=None, inner="auto"):
        self.geom = geom
        self.cfg = cfg
        self.j = int(j)
        d = geom.Sigma.shape[0]
        if not 0 <= self.j < d:
            raise ValueError("coordinate index out of range")
        nuisance = np.asarray(nuisance, dtype=float)
        if nuisance.size != d - 1:
            raise ValueError("nuisance must have dimension d-1")

        rho2 = geom.rho * geom.rho
        self.sigma_jj = float(geom.Sigma[self.j, self.j])
        sigma_inv = np.linalg.inv(geom.Sigma)
        gram = geom.Q_E.T @ sigma_inv @ geom.Q_E / rho2
        vals, vecs = np.linalg.eigh(gram)
        if np.min(vals) <= MATRIX_EIGEN_FLOOR:
            raise NumericError("inner Gaussian precision is not positive-definite")
        self.sigma_tilde = (vecs / vals[None, :]) @ vecs.T
        self.gram = gram

        others = [k for k in range(d) if k != self.j]
        v0 = np.zeros(d)
        v0[others] = nuisance
        v1 = np.zeros(d)
        v1[self.j] = 1.0
        v1[others] = geom.Sigma[others, self.j] / self.sigma_jj
        a0 = geom.P_E @ v0 + geom.r_E
        a1 = geom.P_E @ v1
        # mu_tilde(z) = -Sigma_tilde Q_E' Sigma^-1 a(z) / rho^2, linear in z
        proj = -self.sigma_tilde @ geom.Q_E.T @ sigma_inv / rho2
        self.mu0 = proj @ a0
        self.mu1 = proj @ a1
        # quadratic exponent f(z) = a'Sigma^-1 a/rho^2 - mu'gram mu, by coeffs
        s0 = a0 @ sigma_inv @ a0 / rho2 - self.mu0 @ gram @ self.mu0
        s1 = 2.0 * (a0 @ sigma_inv @ a1 / rho2 - self.mu0 @ gram @ self.mu1)
        s2 = a1 @ sigma_inv @ a1 / rho2 - self.mu1 @ gram @ self.mu1
        self.quad_coeffs = (s0, s1, s2)

        k = geom.n_selected
        self.exact_inner = inner == "exact" or (inner == "auto" and k == 1)
        if self.exact_inner:
            self.sd_tilde = np.sqrt(np.diag(self.sigma_tilde))
            self.draws = None
            self.n_mc = 0
        else:
            factor, _ = covariance_factor(self.sigma_tilde)
            gen = rng.generator() if isinstance(rng, RngStream) else rng
            if gen is None:
                raise ValueError("rng required for MC inner probabilities")
            self.n_mc = int(n_mc)
            self.draws = gen.standard_normal((self.n_mc, k)) @ factor.T

    def _log_inner(self, mu_nodes):
        """log P(N(mu, Sigma_tilde) > 0) per node; mu_nodes is nodes x |E|."""
        if self.exact_inner:
            return np.sum(
                np.log(np.maximum(std_normal_cdf(mu_nodes / self.sd_tilde[None, :]),
                                  1e-300)),
                axis=1,
            )
        probs = np.empty(mu_nodes.shape[0])
        for i in range(mu_nodes.shape[0]):
            probs[i] = np.count_nonzero(
                np.all(self.draws + mu_nodes[i][None, :] > 0.0, axis=1)
            ) / self.n_mc
        return np.log(np.maximum(probs, 1e-300))

    def _log_weighted(self, nodes, weights, m):
        s0, s1, s2 = self.quad_coeffs
        mu_nodes = self.mu0[None, :] + nodes[:, None] * self.mu1[None, :]
        return (
            np.log(weights)
            - 0.5 * (nodes - m) ** 2 / self.sigma_jj
            - 0.5 * (s0 + s1 * nodes + s2 * nodes * nodes)
            + self._log_inner(mu_nodes)
        )

    def pivot(self, z_obs, m):
        """P(Z_j > z_obs | selection, nuisance) at non-centrality m."""
        sd = np.sqrt(self.sigma_jj)
        radius = self.cfg.truncation_radius * sd
        lo_full, hi = m - radius, m + radius
        lo_num = max(z_obs, lo_full)
        prev = None
        n_panels = 8
        max_ref = self.cfg.max_refinements if self.exact_inner else 4
        for _ in range(max_ref + 1):
            nodes, weights = _panel_nodes(lo_full, hi, 2 * n_panels)
            log_den = logsumexp(self._log_weighted(nodes, weights, m))
            if lo_num >= hi:
                log_num = -np.inf
            else:
                nodes_n, weights_n = _panel_nodes(lo_num, hi, n_panels)
                log_num = logsumexp(self._log_weighted(nodes_n, weights_n, m))
            if prev is not None:
                gap = max(abs(log_num - prev[0]) if np.isfinite(log_num) else 0.0,
                          abs(log_den - prev[1]))
                tol = max(self.cfg.abs_tol, self.cfg.rel_tol) if self.exact_inner else 1e-4
                if gap < tol:
                    break
            prev = (log_num, log_den)
            n_panels *= 2
        else:
            if self.exact_inner:
                raise QuadratureConvergenceError(
                    "pivot quadrature did not converge",
                    last_estimate=float(np.exp(log_num - log_den)),
                    gap=gap if prev is not None else None,
                )
            gap = gap if prev is not None else 0.0
        if log_den - 0.5 * np.log(2 * np.pi * self.sigma_jj) < LOG_UNDERFLOW:
            raise RareEventUnderflow("selection probability underflowed")
        if z_obs <= lo_full:
            value = 1.0
        else:
            value = float(np.exp(log_num - log_den)) if np.isfinite(log_num) else 0.0
        value = min(max(value, 0.0), 1.0)
        se = 0.0 if self.exact_inner else float(
            np.sqrt(value * (1.0 - value) / self.n_mc)
        )
        return PivotResult(
            value=value,
            numerator=float(np.exp(log_num)),
            denominator=float(np.exp(log_den)),
            quadrature_error=float(gap),
            std_error=se,
        )


def mv_pivot(z_obs_j, j, geom, beta_j, nuisance, n_mc=20_000,
             cfg=QuadratureConfig(), rng=None, inner="auto"):
    """Exact conditional pivot for coordinate j at non-centrality beta_j
    (on the sqrt(n)-scaled scale), nuisance statistics held fixed."""
    ev = MvPivotEvaluator(j, geom, nuisance, n_mc=n_mc, cfg=cfg, rng=rng, inner=inner)
    return ev.pivot(float(z_obs_j), float(beta_j))


def mv_confidence_interval(z_obs_j, j, geom, nuisance, level, n_mc=20_000,
                           cfg=QuadratureConfig(), rng=None, inner="auto"):
    """Equal-tailed interval for the coordinate's non-centrality by inverting
    the conditional pivot; inner MC draws are shared across all evaluations."""
    ev = MvPivotEvaluator(j, geom, nuisance, n_mc=n_mc, cfg=cfg, rng=rng, inner=inner)

    def pivot_at(m):
        return ev.pivot(float(z_obs_j), m).value

    lower, upper, iters = invert_pivot(pivot_at, float(z_obs_j), level)
    return ConfidenceInterval(lower=lower, upper=upper, level=level, iterations=iters)


def screening_geometry(Sigma, rho, selected, signs, offsets, d,
                       dropped_randomized=None):
    """Geometry for marginal screening: coordinate j in E was selected because
    its randomized statistic fell on side sign_j of offsets_j (both on the
    randomized sqrt(1+rho^2)-inflated scale)."""
    Sigma = np.asarray(Sigma, dtype=float)
    selected = list(selected)
    signs = np.asarray(signs, dtype=float)
    offsets = np.asarray(offsets, dtype=float)
    Q_E = np.zeros((d, len(selected)))
    r_E = np.zeros(d)
    # the sign lives in the Q_E column; r_E carries the raw cutoff, so the
    # event reads s_j (stat_j - c_j) > 0 for either side
    for col, (j, s, c) in enumerate(zip(selected, signs, offsets)):
        Q_E[j, col] = s
        r_E[j] = c
    if dropped_randomized is not None:
        others = [k for k in range(d) if k not in set(selected)]
        r_E[others] = np.asarray(dropped_randomized, dtype=float)
    return CarveGeometry(Sigma=Sigma, Q_E=Q_E, r_E=r_E, P_E=-np.eye(d), rho=rho)


def elastic_net_geometry(gram, active, lam, eta, rho, active_signs,
                         inactive_subgradient):
    """Geometry for elastic-net selection from the stationarity map.

    gram is the full-data Gram matrix X'X/n; coordinates are reordered with
    the active set first.
    """
    gram = np.asarray(gram, dtype=float)
    p = gram.shape[0]
    active = list(active)
    inactive = [k for k in range(p) if k not in set(active)]
    order = active + inactive
    G = gram[np.ix_(order, order)]
    e = len(active)
    U = G[:e, :e]
    V = G[e:, :e]
    Q_E = np.vstack([U + eta * np.eye(e), V])
    P_E = -np.block([
        [U, np.zeros((e, p - e))],
        [V, np.eye(p - e)],
    ])
    r_E = np.concatenate([
        lam * np.asarray(active_signs, dtype=float),
        np.asarray(inactive_subgradient, dtype=float),
    ])
    Sigma = G  # unit noise variance: covariance of X'y/sqrt(n) is the Gram
    return CarveGeometry(Sigma=Sigma, Q_E=Q_E, r_E=r_E, P_E=P_E, rho=rho), order
