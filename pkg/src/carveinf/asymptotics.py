"""Closed-form tail asymptotics of selection probabilities and their
certification against exact quadrature/MC values.

Rare selection events have probabilities decaying like
exp(-m^2/2(1+rho^2)) / |m|; this module computes those leading-order
approximations, the limit constant of the multivariate decay, Mills-ratio
envelope reports, and the finite-sample second-moment identities of the
implicit randomization.  Every report is a plain dict so it serializes to
JSON unchanged.
"""

import numpy as np

from .errors import InvariantViolation, NumericError
from .families import sample_triangular_array
from .gauss import (
    LOG_2PI,
    RngStream,
    mills_lower,
    mills_upper,
    std_normal_survival,
)


def seq_selprob_asymptotic(m, rho):
    """Leading-order approximation of the rare selection probability
    Phi(m/sqrt(1+rho^2)):  |m|^-1 exp(-m^2/2(1+rho^2)) sqrt(1+rho^2)/sqrt(2pi).

    Relative error decays like 1/m^2.
    """
    if not m < 0 or abs(m) < 2:
        raise ValueError("requires m < 0 with |m| >= 2 (rare side)")
    if not rho > 0:
        raise ValueError("rho must be positive")
    log_val = (
        -np.log(abs(m))
        - m * m / (2.0 * (1.0 + rho * rho))
        + 0.5 * np.log(1.0 + rho * rho)
        - 0.5 * LOG_2PI
    )
    return float(np.exp(log_val))


def l_constant(QQt, QtQ, alpha_bar_ratios):
    """Limit constant of the multivariate decay:
    1 / [ (prod_j sum_k (I+QQ')^-1_{jk} abar_{kj}) (2pi)^{|E|/2} sqrt(det(I+Q'Q)) ].
    """
    QQt = np.atleast_2d(np.asarray(QQt, dtype=float))
    QtQ = np.atleast_2d(np.asarray(QtQ, dtype=float))
    abar = np.atleast_2d(np.asarray(alpha_bar_ratios, dtype=float))
    e = QQt.shape[0]
    try:
        inv = np.linalg.inv(np.eye(e) + QQt)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"I + QQ' is singular: {exc}") from exc
    row_sums = np.sum(inv * abar.T, axis=1)  # sum_k inv_{jk} abar_{kj}
    sign, logdet = np.linalg.slogdet(np.eye(QtQ.shape[0]) + QtQ)
    if sign <= 0:
        raise NumericError("I + Q'Q has non-positive determinant")
    prod = np.prod(row_sums)
    if prod == 0:
        raise NumericError("degenerate direction ratios")
    return float(1.0 / (prod * (2.0 * np.pi) ** (e / 2.0) * np.exp(0.5 * logdet)))


def log_mv_selprob_asymptotic(qa):
    alpha = qa.sqrt_n_alpha
    if np.any(np.abs(alpha) < 2):
        raise ValueError("requires all |sqrt_n_alpha_j| >= 2")
    e = alpha.size
    QQt = qa.Q @ qa.Q.T
    QtQ = qa.Q.T @ qa.Q
    abar = np.outer(alpha, 1.0 / alpha)  # abar[k, j] = alpha_k / alpha_j
    inv = np.linalg.inv(np.eye(e) + QQt)
    const = l_constant(QQt, QtQ, abar)
    return (
        -0.5 * float(alpha @ inv @ alpha)
        - float(np.sum(np.log(np.abs(alpha))))
        + np.log(const)
    )


def mv_selprob_asymptotic(qa):
    """Leading-order approximation of the multivariate selection probability:
    exp(-alpha'(I+QQ')^-1 alpha/2) / prod|alpha_j| times the limit constant."""
    return float(np.exp(log_mv_selprob_asymptotic(qa)))


def randomization_moments_check(n1, n2, spec, n_mc, rng):
    """Simulates the implicit randomization W = sqrt(n)(stage-one mean - full
    mean) and checks its exact finite-sample moments: mean 0, covariance
    rho^2 Sigma, zero cross-covariance with the full-data statistic."""
    if n1 < 2 or n2 < 0:
        raise ValueError("need n1 >= 2 and n2 >= 0")
    n = n1 + n2
    rho2 = n2 / n1
    d = spec.dim
    gen = rng.generator() if isinstance(rng, RngStream) else rng

    w_sum = np.zeros(d)
    w_outer = np.zeros((d, d))
    w_outer_sq = np.zeros((d, d))
    wz_outer = np.zeros((d, d))
    wz_outer_sq = np.zeros((d, d))
    done = 0
    chunk = max(1, min(n_mc, 20_000_000 // (n * d)))
    while done < n_mc:
        m = min(chunk, n_mc - done)
        data = sample_triangular_array(spec, n * m, gen).reshape(m, n, d)
        mean1 = data[:, :n1, :].mean(axis=1)
        meann = data.mean(axis=1)
        w = np.sqrt(n) * (mean1 - meann)
        z = np.sqrt(n) * meann - spec.sqrt_n_beta[None, :]
        w_sum += w.sum(axis=0)
        ww = np.einsum("ri,rj->rij", w, w)
        wz = np.einsum("ri,rj->rij", w, z)
        w_outer += ww.sum(axis=0)
        w_outer_sq += (ww * ww).sum(axis=0)
        wz_outer += wz.sum(axis=0)
        wz_outer_sq += (wz * wz).sum(axis=0)
        done += m

    mean_w = w_sum / n_mc
    cov_w = w_outer / n_mc
    cov_w_se = np.sqrt(np.maximum(w_outer_sq / n_mc - cov_w**2, 0.0) / n_mc)
    cross = wz_outer / n_mc
    cross_se = np.sqrt(np.maximum(wz_outer_sq / n_mc - cross**2, 0.0) / n_mc)
    target_cov = rho2 * spec.Sigma
    return {
        "n1": n1,
        "n2": n2,
        "rho2": rho2,
        "n_mc": n_mc,
        "family": spec.family,
        "mean_w": mean_w.tolist(),
        "cov_w": cov_w.tolist(),
        "cov_w_se": cov_w_se.tolist(),
        "cov_target": target_cov.tolist(),
        "cross_cov": cross.tolist(),
        "cross_cov_se": cross_se.tolist(),
        "cov_within_3se": bool(
            np.all(np.abs(cov_w - target_cov) <= 3.0 * cov_w_se + 1e-12)
        ),
        "cross_within_3se": bool(np.all(np.abs(cross) <= 3.0 * cross_se + 1e-12)),
    }


def sandwich_report(grid, lower_fn=mills_lower, upper_fn=mills_upper,
                    raise_on_violation=False):
    """Tabulates the Mills envelopes against the exact survival function.

    Note: the lower envelope holds for every real argument, but the upper
    envelope 2 phi(x)/(sqrt(2+x^2)+x) is a valid bound only for
    x >= -0.556 or so; callers certifying a build should restrict the grid
    accordingly (the envelopes are only ever applied to positive arguments
    in the tail-decay analysis).
    """
    grid = np.asarray(grid, dtype=float)
    lo = lower_fn(grid)
    up = upper_fn(grid)
    sv = std_normal_survival(grid)
    viol_lower = int(np.count_nonzero(lo > sv))
    viol_upper = int(np.count_nonzero(up < sv))
    with np.errstate(divide="ignore", invalid="ignore"):
        slack = np.where(sv > 0, (up - lo) / sv, np.inf)
    report = {
        "n_points": int(grid.size),
        "grid_min": float(grid.min()),
        "grid_max": float(grid.max()),
        "violations_lower": viol_lower,
        "violations_upper": viol_upper,
        "max_relative_slack": float(np.max(slack)),
    }
    if raise_on_violation and (viol_lower or viol_upper):
        raise InvariantViolation(
            f"sandwich violated: {viol_lower} lower, {viol_upper} upper"
        )
    return report


def decay_ratio_report(Q, alpha_bar, a_list, n_mc, rng, estimator=None):
    """Exact-vs-approximate selection probability along sqrt_n_alpha = a*abar.

    The exact value is a smooth-product MC estimate (indicator MC cannot
    resolve probabilities this small at feasible sample sizes); the
    approximation is the leading-order decay formula.
    """
    from .mv import QAlpha, mv_selprob_importance_mc

    if estimator is None:
        estimator = mv_selprob_importance_mc
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    alpha_bar = np.asarray(alpha_bar, dtype=float)
    rows = []
    for i, a in enumerate(a_list):
        qa = QAlpha(Q=Q, sqrt_n_alpha=a * alpha_bar)
        exact, se = estimator(qa, n_mc, rng.child(rng.stream_id + i + 1)
                              if isinstance(rng, RngStream) else rng)
        approx = mv_selprob_asymptotic(qa)
        rows.append({
            "a": float(a),
            "exact": exact,
            "exact_se": se,
            "approx": approx,
            "ratio": exact / approx,
            "ratio_se": se / approx,
        })
    return rows


def decay_sandwich_report(Q, alpha_bar, a, n_mc, rng):
    """MC check that the selection probability sits between the expectations
    of the product Mills envelopes on the region |QZ| < q*alpha, with the
    Chernoff remainder added to the upper end."""
    from .gauss import covariance_factor
    from .mv import QAlpha, mv_selprob_importance_mc

    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    alpha = a * np.asarray(alpha_bar, dtype=float)
    qa = QAlpha(Q=Q, sqrt_n_alpha=alpha)
    QQt = Q @ Q.T
    e = QQt.shape[0]
    lam_max = float(np.max(np.linalg.eigvalsh(QQt @ np.linalg.inv(np.eye(e) + QQt))))
    q = np.sqrt(lam_max)
    chernoff = 2.0 * np.exp(-0.5 * q * q * float(alpha @ np.linalg.inv(QQt) @ alpha))

    factor, _ = covariance_factor(QQt)
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    lower_sum = upper_sum = lower_sq = upper_sq = 0.0
    done = 0
    while done < n_mc:
        m = min(1_000_000, n_mc - done)
        qz = gen.standard_normal((m, e)) @ factor.T
        args = qz + alpha[None, :]
        inside = np.all(np.abs(qz) < q * alpha[None, :], axis=1)
        lo = np.where(inside, np.prod(mills_lower(args), axis=1), 0.0)
        up = np.where(inside, np.prod(mills_upper(args), axis=1), 0.0)
        lower_sum += float(np.sum(lo))
        lower_sq += float(np.sum(lo * lo))
        upper_sum += float(np.sum(up))
        upper_sq += float(np.sum(up * up))
        done += m
    lower_mc = lower_sum / n_mc
    upper_mc = upper_sum / n_mc + chernoff
    lower_se = np.sqrt(max(lower_sq / n_mc - (lower_sum / n_mc) ** 2, 0.0) / n_mc)
    upper_se = np.sqrt(max(upper_sq / n_mc - (upper_sum / n_mc) ** 2, 0.0) / n_mc)
    exact, exact_se = mv_selprob_importance_mc(qa, n_mc, rng)
    return {
        "a": float(a),
        "q": q,
        "chernoff": chernoff,
        "lower_mc": lower_mc,
        "lower_se": float(lower_se),
        "upper_mc": upper_mc,
        "upper_se": float(upper_se),
        "approx": mv_selprob_asymptotic(qa),
        "exact": exact,
        "exact_se": exact_se,
    }
