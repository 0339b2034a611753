"""First-stage selection rules and their conditioning information.

Each rule maps a vector of stage-one statistics to a SelectionOutcome carrying
the selected set, signs, the dropped statistics and the threshold information
that the carved conditional law conditions on.  An empty selection is a
first-class outcome (recorded, never raised) because conditional inference is
undefined on the empty event.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import SolverConvergenceError
from .gauss import std_normal_quantile, std_normal_survival

KKT_TOL = 1e-8


@dataclass(frozen=True)
class ScreeningRule:
    """Tagged union of the supported screening variants."""

    variant: str  # "threshold" | "top_d" | "bh" | "elastic_net"
    lam: Optional[np.ndarray] = None  # threshold: per-coordinate cutoffs
    d: Optional[int] = None  # top_d: number of reported effects
    alpha: Optional[float] = None  # bh: FDR level
    enet_lam: Optional[float] = None
    enet_eta: Optional[float] = None

    def __post_init__(self):
        if self.variant == "threshold":
            lam = np.asarray(self.lam, dtype=float)
            if not np.all(np.isfinite(lam)):
                raise ValueError("threshold vector must be finite")
            object.__setattr__(self, "lam", lam)
        elif self.variant == "top_d":
            if self.d is None or self.d < 1:
                raise ValueError("top_d requires d >= 1")
        elif self.variant == "bh":
            if self.alpha is None or not (0.0 < self.alpha < 1.0):
                raise ValueError("bh requires alpha in (0, 1)")
        elif self.variant == "elastic_net":
            if self.enet_lam is None or self.enet_lam <= 0 or (self.enet_eta or 0) < 0:
                raise ValueError("elastic_net requires lam > 0 and eta >= 0")
        else:
            raise ValueError(f"unknown screening variant: {self.variant}")


@dataclass
class SelectionOutcome:
    selected: list  # indices E (ordering is rule-specific)
    signs: np.ndarray  # +/-1 per selected index
    dropped_values: np.ndarray  # statistics over the complement of E
    threshold_info: dict  # rule-dependent conditioning side information
    rule: ScreeningRule

    @property
    def empty(self):
        return len(self.selected) == 0

    def to_dict(self):
        return {
            "selected": [int(j) for j in self.selected],
            "signs": [int(s) for s in self.signs],
            "dropped_values": [float(v) for v in self.dropped_values],
            "threshold_info": {
                k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in self.threshold_info.items()
            },
            "rule": self.rule.variant,
            "empty": self.empty,
        }


def _empty_outcome(z1, rule, info):
    return SelectionOutcome(
        selected=[],
        signs=np.zeros(0),
        dropped_values=np.asarray(z1, dtype=float),
        threshold_info=info,
        rule=rule,
    )


def screen_threshold(z1, lam):
    """Select {j : z1_j > lam_j}; one-sided, signs all +1."""
    z1 = np.asarray(z1, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if z1.shape != lam.shape:
        raise ValueError("z1 and lambda dimensions must match")
    rule = ScreeningRule("threshold", lam=lam)
    mask = z1 > lam
    selected = list(np.flatnonzero(mask))
    info = {"lambda": lam[mask]}
    if not selected:
        return _empty_outcome(z1, rule, info)
    return SelectionOutcome(
        selected=selected,
        signs=np.ones(len(selected)),
        dropped_values=z1[~mask],
        threshold_info=info,
        rule=rule,
    )


def screen_top_d(z1, d):
    """Report the D largest effects by |z1|, ties broken by ascending index.

    Conditioning information is the (D+1)-th largest absolute statistic; signs
    are taken from the ranked statistic itself.
    """
    z1 = np.asarray(z1, dtype=float)
    if not 1 <= d < z1.size:
        raise ValueError("top_d requires 1 <= D < d")
    rule = ScreeningRule("top_d", d=d)
    # stable sort on (-|z|, index) gives descending magnitude, ascending index
    order = np.lexsort((np.arange(z1.size), -np.abs(z1)))
    selected = list(order[:d])
    abs_next = float(np.abs(z1[order[d]]))
    mask = np.zeros(z1.size, dtype=bool)
    mask[selected] = True
    signs = np.where(z1[selected] >= 0.0, 1.0, -1.0)
    return SelectionOutcome(
        selected=selected,
        signs=signs,
        dropped_values=z1[~mask],
        threshold_info={"abs_dplus1_stat": abs_next},
        rule=rule,
    )


def screen_bh(z1, alpha):
    """Benjamini-Hochberg step-up on two-sided p-values 2*Phibar(|z1|)."""
    z1 = np.asarray(z1, dtype=float)
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    rule = ScreeningRule("bh", alpha=alpha)
    d = z1.size
    pvals = 2.0 * std_normal_survival(np.abs(z1))
    order = np.lexsort((np.arange(d), pvals))
    sorted_p = pvals[order]
    below = np.flatnonzero(sorted_p <= alpha * np.arange(1, d + 1) / d)
    if below.size == 0:
        return _empty_outcome(z1, rule, {"d0": 0, "tau": None})
    d0 = int(below[-1] + 1)
    tau = float(std_normal_quantile(1.0 - d0 * alpha / (2.0 * d)))
    selected = list(order[:d0])
    mask = np.zeros(d, dtype=bool)
    mask[selected] = True
    signs = np.where(z1[selected] >= 0.0, 1.0, -1.0)
    return SelectionOutcome(
        selected=selected,
        signs=signs,
        dropped_values=z1[~mask],
        threshold_info={"d0": d0, "tau": tau},
        rule=rule,
    )


@dataclass
class ElasticNetFit:
    beta_hat: np.ndarray
    active: list
    active_signs: np.ndarray
    inactive_subgradient: np.ndarray  # each entry in [-lam, lam]
    kkt_residual: float
    lam: float = field(default=0.0)
    eta: float = field(default=0.0)
    n_sweeps: int = field(default=0)


def _soft_threshold(x, t):
    return np.sign(x) * max(abs(x) - t, 0.0)


def elastic_net_fit(y1, X1, lam, eta, rho, max_sweeps=100_000, tol=1e-10):
    """Coordinate-descent minimizer of
        (1+rho^2)/(2 sqrt(n)) ||y1 - X1 b||^2 + lam ||b||_1 + eta/2 ||b||^2
    with n = n1 (1 + rho^2).
    """
    y1 = np.asarray(y1, dtype=float)
    X1 = np.asarray(X1, dtype=float)
    if lam <= 0 or eta < 0:
        raise ValueError("lam must be > 0 and eta >= 0")
    n1, p = X1.shape
    n = n1 * (1.0 + rho * rho)
    scale = (1.0 + rho * rho) / np.sqrt(n)
    col_sq = scale * np.sum(X1 * X1, axis=0)  # quadratic coefficient, pre-eta
    beta = np.zeros(p)
    resid = y1.copy()
    for sweep in range(1, max_sweeps + 1):
        max_delta = 0.0
        for j in range(p):
            old = beta[j]
            cj = scale * (X1[:, j] @ resid) + col_sq[j] * old
            new = _soft_threshold(cj, lam) / (col_sq[j] + eta)
            if new != old:
                resid -= X1[:, j] * (new - old)
                beta[j] = new
                max_delta = max(max_delta, abs(new - old))
        if max_delta < tol:
            break
    else:
        raise SolverConvergenceError("elastic net did not converge")

    grad = -scale * (X1.T @ resid) + eta * beta  # gradient of the smooth part
    active = list(np.flatnonzero(beta != 0.0))
    inactive = np.flatnonzero(beta == 0.0)
    resid_active = (
        np.max(np.abs(grad[active] + lam * np.sign(beta[active]))) if active else 0.0
    )
    resid_inactive = (
        np.max(np.clip(np.abs(grad[inactive]) - lam, 0.0, None)) if inactive.size else 0.0
    )
    return ElasticNetFit(
        beta_hat=beta,
        active=active,
        active_signs=np.sign(beta[active]),
        inactive_subgradient=-grad[inactive],
        kkt_residual=float(max(resid_active, resid_inactive)),
        lam=lam,
        eta=eta,
        n_sweeps=sweep,
    )


def elastic_net_outcome(fit):
    """Wrap an ElasticNetFit as a SelectionOutcome."""
    rule = ScreeningRule("elastic_net", enet_lam=fit.lam, enet_eta=fit.eta)
    if not fit.active:
        return _empty_outcome(fit.inactive_subgradient, rule, {"lambda": fit.lam})
    return SelectionOutcome(
        selected=fit.active,
        signs=fit.active_signs,
        dropped_values=fit.inactive_subgradient,
        threshold_info={"lambda": fit.lam, "eta": fit.eta},
        rule=rule,
    )


def kkt_randomization(fit, y, X, y1, X1, rho):
    """Randomization implied by solving the penalized problem on stage-one data:
    W = [-X'(y - X b) + (1+rho^2) X1'(y1 - X1 b)] / sqrt(n), b the fitted solution.
    """
    if fit.kkt_residual >= KKT_TOL:
        raise ValueError("fit did not satisfy KKT conditions")
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    y1 = np.asarray(y1, dtype=float)
    X1 = np.asarray(X1, dtype=float)
    if X.shape[1] != X1.shape[1] or X.shape[0] != y.size or X1.shape[0] != y1.size:
        raise ValueError("dimension mismatch")
    n = y.size
    beta = fit.beta_hat
    return (-X.T @ (y - X @ beta) + (1.0 + rho * rho) * (X1.T @ (y1 - X1 @ beta))) / np.sqrt(n)
