"""Normal-Inverse-Gamma evidential distribution.

Density, moments, the Student-t marginal and its negative log-likelihood.
Everything is evaluated in log space with ``gammaln`` because the shape
parameter routinely runs past 100 during training.

Parameters are validated strictly here; nothing is clamped. Squashing raw
network outputs into the valid domain is the evidential head's job.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

LOG_PI = math.log(math.pi)
LOG_2PI = math.log(2.0 * math.pi)


class NIGDomainError(ValueError):
    """A parameter or argument lies outside its mathematical domain."""


class UndefinedMomentError(NIGDomainError):
    """Moments need alpha > 1."""


def _check_finite(**values) -> None:
    for name, v in values.items():
        if not math.isfinite(v):
            raise NIGDomainError(f"{name} must be finite, got {v!r}")


@dataclass(frozen=True)
class NIGParams:
    """Evidential parameters ``(gamma, upsilon, alpha, beta)``.

    ``upsilon > 0``, ``beta > 0`` and ``alpha > 0`` are enforced on
    construction. The moment functions additionally require ``alpha > 1``.
    """

    gamma: float
    upsilon: float
    alpha: float
    beta: float

    def __post_init__(self):
        _check_finite(gamma=self.gamma, upsilon=self.upsilon,
                      alpha=self.alpha, beta=self.beta)
        if not self.upsilon > 0:
            raise NIGDomainError(f"upsilon must be > 0, got {self.upsilon}")
        if not self.alpha > 0:
            raise NIGDomainError(f"alpha must be > 0, got {self.alpha}")
        if not self.beta > 0:
            raise NIGDomainError(f"beta must be > 0, got {self.beta}")

    @property
    def evidence(self) -> float:
        return 2.0 * self.upsilon + self.alpha


@dataclass(frozen=True)
class GaussianMoments:
    mu: float
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise NIGDomainError(f"sigma2 must be > 0, got {self.sigma2}")


@dataclass(frozen=True)
class UncertaintySummary:
    prediction: float
    aleatoric: float
    epistemic: float


@dataclass(frozen=True)
class StudentTParams:
    location: float
    scale2: float
    dof: float

    def logpdf(self, x):
        """Log density of the location-scale Student-t."""
        nu = self.dof
        z2 = (np.asarray(x, dtype=np.float64) - self.location) ** 2 / self.scale2
        return (gammaln(0.5 * (nu + 1.0)) - gammaln(0.5 * nu)
                - 0.5 * (math.log(nu) + LOG_PI + math.log(self.scale2))
                - 0.5 * (nu + 1.0) * np.log1p(z2 / nu))

    def pdf(self, x):
        return np.exp(self.logpdf(x))


def nig_log_density(mu: float, sigma2: float, params: NIGParams) -> float:
    """log p(mu, sigma2 | params) = log N(mu | gamma, sigma2/upsilon) + log InvGamma(sigma2 | alpha, beta)."""
    _check_finite(mu=mu, sigma2=sigma2)
    if not sigma2 > 0:
        raise NIGDomainError(f"sigma2 must be > 0, got {sigma2}")
    g, u, a, b = params.gamma, params.upsilon, params.alpha, params.beta
    log_normal = 0.5 * (math.log(u) - LOG_2PI - math.log(sigma2)) - u * (mu - g) ** 2 / (2.0 * sigma2)
    log_invgamma = a * math.log(b) - gammaln(a) - (a + 1.0) * math.log(sigma2) - b / sigma2
    return float(log_normal + log_invgamma)


def nig_moments(params: NIGParams) -> UncertaintySummary:
    if not params.alpha > 1:
        raise UndefinedMomentError(f"moments need alpha > 1, got {params.alpha}")
    aleatoric = params.beta / (params.alpha - 1.0)
    return UncertaintySummary(prediction=params.gamma, aleatoric=aleatoric,
                              epistemic=aleatoric / params.upsilon)


def marginal_student_t(params: NIGParams) -> StudentTParams:
    u, a = params.upsilon, params.alpha
    return StudentTParams(location=params.gamma,
                          scale2=params.beta * (1.0 + u) / (u * a),
                          dof=2.0 * a)


def nll_loss(b: float, params: NIGParams) -> float:
    """Negative log marginal likelihood of one boundary observation ``b``."""
    _check_finite(b=b)
    return float(nll_array(b, params.gamma, params.upsilon, params.alpha, params.beta))


def nll_array(b, gamma, upsilon, alpha, beta):
    """Vectorised expanded NLL; no domain checks."""
    omega = 2.0 * beta * (1.0 + upsilon)
    return (0.5 * (LOG_PI - np.log(upsilon))
            - alpha * np.log(omega)
            + (alpha + 0.5) * np.log((b - gamma) ** 2 * upsilon + omega)
            + gammaln(alpha) - gammaln(alpha + 0.5))


def uncertainty_arrays(upsilon, alpha, beta) -> tuple[np.ndarray, np.ndarray]:
    """(aleatoric, epistemic) for arrays of head outputs."""
    aleatoric = np.asarray(beta) / (np.asarray(alpha) - 1.0)
    return aleatoric, aleatoric / np.asarray(upsilon)
