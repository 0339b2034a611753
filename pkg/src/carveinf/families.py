"""Non-parametric generative families for triangular-array simulation.

Each family is standardized to mean zero and unit variance per coordinate
before mixing by chol(Sigma) and shifting by the per-observation mean
sqrt_n_beta / sqrt(n); all listed families have finite exponential moments in
a neighborhood of zero.
"""

from dataclasses import dataclass, field

import numpy as np

from .gauss import RngStream

FAMILIES = ("gaussian", "centered_exponential", "laplace", "rademacher", "uniform")

SQRT3 = np.sqrt(3.0)
INV_SQRT2 = 1.0 / np.sqrt(2.0)


@dataclass
class GenerativeSpec:
    family: str
    sqrt_n_beta: np.ndarray  # mean vector on the sqrt(n) scale
    Sigma: np.ndarray = None  # defaults to identity
    exp_moment_ok: bool = field(default=True, init=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family: {self.family}")
        self.sqrt_n_beta = np.atleast_1d(np.asarray(self.sqrt_n_beta, dtype=float))
        d = self.sqrt_n_beta.size
        if self.Sigma is None:
            self.Sigma = np.eye(d)
        self.Sigma = np.asarray(self.Sigma, dtype=float)
        if self.Sigma.shape != (d, d):
            raise ValueError("Sigma shape does not match beta")
        # fails on non-PD Sigma, which is the intended validation
        self._chol = np.linalg.cholesky(self.Sigma)

    @property
    def dim(self):
        return self.sqrt_n_beta.size


def _standardized_draws(family, shape, gen):
    if family == "gaussian":
        return gen.standard_normal(shape)
    if family == "centered_exponential":
        return gen.standard_exponential(shape) - 1.0
    if family == "laplace":
        return gen.laplace(0.0, INV_SQRT2, shape)
    if family == "rademacher":
        return 2.0 * gen.integers(0, 2, shape).astype(float) - 1.0
    if family == "uniform":
        return gen.uniform(-SQRT3, SQRT3, shape)
    raise ValueError(f"unknown family: {family}")


def sample_triangular_array(spec, n, rng):
    """n iid rows with mean sqrt_n_beta/sqrt(n) and covariance Sigma."""
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    raw = _standardized_draws(spec.family, (n, spec.dim), gen)
    return raw @ spec._chol.T + spec.sqrt_n_beta[None, :] / np.sqrt(n)
