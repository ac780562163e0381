"""One-step linearized reconstruction with a Gaussian smoothness prior.

The MAP estimate

    dsigma = (J^T S^-1 J + alpha P)^-1 J^T S^-1 r,   P = C^-1,

is evaluated in the equivalent measurement-space form

    dsigma = C J^T (J C J^T + alpha S)^-1 r,

which never inverts the (numerically rank-deficient) prior covariance C and
only factors a (K*L) x (K*L) matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.distance import cdist

from .errors import NumericalError, ValidationError
from .fem import Conductivity, MeasurementFrame
from .jacobian import Jacobian
from .mesh import Mesh

log = logging.getLogger(__name__)

PRIOR_A = 0.15**2
PRIOR_B = 0.2


@dataclass(eq=False)
class SmoothnessPrior:
    """Covariance ``a * exp(-|x_i - x_j|^2 / (2b)^2)`` over element centroids."""

    covariance: np.ndarray
    a: float
    b: float
    jitter: float = 0.0

    @cached_property
    def cholesky(self):
        return cho_factor(self.covariance, lower=True)

    def precision(self) -> np.ndarray:
        """The regularizing matrix R^T R = C^-1 (dense; ill-conditioned for large b)."""
        return cho_solve(self.cholesky, np.eye(len(self.covariance)))


@dataclass
class NoiseModel:
    """Diagonal measurement covariance."""

    variances: np.ndarray

    def __post_init__(self):
        self.variances = np.asarray(self.variances, dtype=float).ravel()
        if np.any(self.variances <= 0):
            raise ValidationError("noise variances must be positive")

    @classmethod
    def from_level(cls, reference: np.ndarray, delta: float) -> "NoiseModel":
        """(delta * mean|U|)^2 I, the covariance of :func:`cemeit.fem.add_noise`."""
        ref = np.asarray(reference, dtype=float).ravel()
        std = delta * np.mean(np.abs(ref))
        return cls(np.full(ref.size, std**2))


def build_smoothness_prior(
    mesh: Mesh, a: float = PRIOR_A, b: float = PRIOR_B, max_jitter: float = 1e-2
) -> SmoothnessPrior:
    """Gaussian-kernel prior; diagonal jitter (relative to ``a``) is added in
    decades from 1e-10 until the Cholesky factorization succeeds."""
    if a <= 0 or b <= 0:
        raise ValidationError("prior parameters a and b must be positive")
    d2 = cdist(mesh.centroids, mesh.centroids, "sqeuclidean")
    cov = a * np.exp(-d2 / (2 * b) ** 2)
    del d2
    jitter = 0.0
    rel = 1e-10
    while True:
        try:
            chol = cho_factor(cov, lower=True)
            break
        except LinAlgError:
            if rel > max_jitter:
                raise NumericalError("smoothness prior not positive definite within jitter budget")
            step = rel * a - jitter
            cov[np.diag_indices_from(cov)] += step
            jitter += step
            rel *= 10
    if jitter:
        log.info("smoothness prior: added jitter %.3g", jitter)
    prior = SmoothnessPrior(cov, a, b, jitter)
    prior.__dict__["cholesky"] = chol
    return prior


@dataclass(eq=False)
class LinearReconstructor:
    """Precomputed reconstruction matrix ``dsigma = G r`` reusable across frames."""

    matrix: np.ndarray  # (M, K*L)
    alpha: float
    baseline: np.ndarray  # F(sigma0) I, stacked
    sigma0: Conductivity
    condition: float = float("nan")
    meta: dict = field(default_factory=dict)

    def perturbation(self, data) -> np.ndarray:
        d = data.voltages if isinstance(data, MeasurementFrame) else np.asarray(data).ravel()
        return self.matrix @ (d - self.baseline)

    def reconstruct(self, data, clip: bool = True) -> Conductivity:
        vals = self.sigma0.values + self.perturbation(data)
        if clip:
            lo, hi = self.sigma0.bounds
            vals = np.clip(vals, lo, hi)
        return self.sigma0.with_values(vals)


def build_linear_reconstructor(
    J0: Jacobian,
    baseline,
    alpha: float,
    noise: NoiseModel,
    prior: SmoothnessPrior,
) -> LinearReconstructor:
    if alpha <= 0:
        raise ValidationError("alpha must be positive")
    base = baseline.voltages if isinstance(baseline, MeasurementFrame) else np.asarray(baseline).ravel()
    J = J0.matrix
    if J.shape[0] != noise.variances.size:
        raise ValidationError("noise model size does not match the Jacobian rows")
    CJt = prior.covariance @ J.T
    S = J @ CJt
    S[np.diag_indices_from(S)] += alpha * noise.variances
    try:
        fac = cho_factor(S, lower=True)
    except LinAlgError as exc:
        raise NumericalError(f"normal matrix not positive definite: {exc}") from exc
    diag = np.diag(fac[0]) ** 2
    cond_est = float(diag.max() / diag.min())
    G = cho_solve(fac, CJt.T).T
    return LinearReconstructor(G, alpha, base, J0.sigma, cond_est)


def linearized_reconstruct(
    J0: Jacobian,
    baseline,
    data,
    alpha: float,
    noise: NoiseModel,
    prior: SmoothnessPrior,
) -> np.ndarray:
    """Perturbation ``dsigma`` for one frame (see :class:`LinearReconstructor`
    to reuse the factorization)."""
    return build_linear_reconstructor(J0, baseline, alpha, noise, prior).perturbation(data)
