"""Error/evidence normalisation and the evidential regularizers.

Scalar functions validate their inputs and return floats; the ``*_tensor``
variants build tape nodes for training and skip validation.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .nig import NIGParams, nll_loss


class NormMode(str, enum.Enum):
    STANDARD_MINMAX = "standard-minmax"
    PAPER_MINMAX = "paper-minmax"
    TANH = "tanh"


class Regularizer(str, enum.Enum):
    NONE = "none"
    VANILLA = "vanilla"
    TYPE1 = "geom1"
    TYPE2 = "geom2"


class DegenerateBatchError(ValueError):
    """Min-max normalisation of a batch whose values are all equal."""


class UnitSquareError(ValueError):
    pass


def normalize_batch(values: Sequence[float], mode: NormMode | str = NormMode.STANDARD_MINMAX) -> np.ndarray:
    """Normalise a batch of errors or evidences.

    ``standard-minmax`` maps onto [0, 1]; ``paper-minmax`` divides by the
    range without subtracting the minimum; ``tanh`` squashes elementwise and
    is the fallback for single-sample batches.
    """
    mode = NormMode(mode)
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot normalise an empty batch")
    if mode is NormMode.TANH:
        return np.tanh(v)
    span = v.max() - v.min()
    if span == 0:
        raise DegenerateBatchError("all values equal; min-max undefined (use tanh)")
    if mode is NormMode.STANDARD_MINMAX:
        return (v - v.min()) / span
    return v / span


def normalize_tensor(x, mode: NormMode | str = NormMode.STANDARD_MINMAX,
                     detach_stats: bool = False) -> ad.Tensor:
    """Tape version of :func:`normalize_batch`.

    By default the gradient also flows through the batch minimum and maximum
    (to the elements attaining them), which makes the result invariant to a
    common shift or rescaling of the batch. ``detach_stats`` treats them as
    constants instead. Batches that are degenerate under min-max fall back
    to tanh.
    """
    mode = NormMode(mode)
    x = ad.as_tensor(x)
    if mode is NormMode.TANH or x.data.size < 2 or np.ptp(x.data) == 0:
        return ad.tanh(x)
    if detach_stats:
        lo, hi = float(x.data.min()), float(x.data.max())
    else:
        flat = ad.reshape(x, (-1,))
        lo, hi = flat[int(np.argmin(flat.data))], flat[int(np.argmax(flat.data))]
    if mode is NormMode.STANDARD_MINMAX:
        return (x - lo) / (hi - lo)
    return x / (hi - lo)


@dataclass(frozen=True)
class ErrorEvidencePair:
    delta: float
    phi: float
    delta_norm: float
    phi_norm: float

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError(f"error must be >= 0, got {self.delta}")


def error_evidence_pairs(b, params: Sequence[NIGParams],
                         mode: NormMode | str = NormMode.STANDARD_MINMAX) -> list[ErrorEvidencePair]:
    """Raw and batch-normalised (error, evidence) for each prediction."""
    b = np.asarray(b, dtype=np.float64).ravel()
    if len(b) != len(params):
        raise ValueError(f"{len(b)} targets for {len(params)} predictions")
    delta = np.abs(b - np.array([p.gamma for p in params]))
    phi = np.array([p.evidence for p in params])
    if len(b) == 1:
        mode = NormMode.TANH
    try:
        dn, pn = normalize_batch(delta, mode), normalize_batch(phi, mode)
    except DegenerateBatchError:
        dn, pn = normalize_batch(delta, NormMode.TANH), normalize_batch(phi, NormMode.TANH)
    return [ErrorEvidencePair(*map(float, row)) for row in zip(delta, phi, dn, pn)]


@dataclass(frozen=True)
class LossWeights:
    lambda_nll: float = 1.0
    lambda_geom: float = 1.0
    lambda_der: float = 1e-3
    geom_type: Regularizer = Regularizer.TYPE1

    def __post_init__(self):
        for name in ("lambda_nll", "lambda_geom", "lambda_der"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        object.__setattr__(self, "geom_type", Regularizer(self.geom_type))


def _check_unit(delta_norm: float, phi_norm: float) -> None:
    for name, v in (("delta_norm", delta_norm), ("phi_norm", phi_norm)):
        if not 0.0 <= v <= 1.0:
            raise UnitSquareError(f"{name} must lie in [0, 1], got {v}")


def vanilla_regularizer(delta: float, phi: float) -> float:
    if delta < 0:
        raise ValueError(f"error must be >= 0, got {delta}")
    return delta * phi


def geom_type1(delta_norm: float, phi_norm: float) -> float:
    _check_unit(delta_norm, phi_norm)
    return (phi_norm + delta_norm - 1.0) ** 2


def geom_type2(delta_norm: float, phi_norm: float) -> float:
    _check_unit(delta_norm, phi_norm)
    return (phi_norm + delta_norm - 1.0) ** 2 - (phi_norm - delta_norm) ** 2


# analytic d/d(phi) of each regularizer (error held fixed)
def vanilla_grad_phi(delta, phi):
    return np.asarray(delta, dtype=np.float64) * np.ones_like(np.asarray(phi, dtype=np.float64))


def geom_type1_grad_phi(delta_norm, phi_norm):
    return 2.0 * (np.asarray(delta_norm) + np.asarray(phi_norm) - 1.0)


def geom_type2_grad_phi(delta_norm, phi_norm):
    d, p = np.asarray(delta_norm), np.asarray(phi_norm)
    return 2.0 * (p + d - 1.0) - 2.0 * (p - d)


def geom_tensor(delta_norm, phi_norm, kind: Regularizer | str) -> ad.Tensor:
    """Elementwise line regularizer; ``delta_norm`` is detached here."""
    kind = Regularizer(kind)
    d = ad.detach(delta_norm)
    p = ad.as_tensor(phi_norm)
    line = ad.square(p + d - 1.0)
    if kind is Regularizer.TYPE1:
        return line
    if kind is Regularizer.TYPE2:
        return line - ad.square(p - d)
    raise ValueError(f"{kind.value} is not a line regularizer")


def nll_tensor(b, gamma, upsilon, alpha, beta) -> ad.Tensor:
    """Expanded Student-t NLL built from tape primitives."""
    omega = 2.0 * beta * (1.0 + upsilon)
    resid2 = ad.square(ad.as_tensor(b) - gamma)
    return (0.5 * (math.log(math.pi) - ad.log(upsilon))
            - alpha * ad.log(omega)
            + (alpha + 0.5) * ad.log(resid2 * upsilon + omega)
            + ad.lgamma(alpha) - ad.lgamma(alpha + 0.5))


def evidential_loss(b: float, params: NIGParams, pair: ErrorEvidencePair,
                    weights: LossWeights = LossWeights()) -> float:
    """Weighted NLL plus the configured line regularizer."""
    value = weights.lambda_nll * nll_loss(b, params) if weights.lambda_nll else 0.0
    if weights.lambda_geom:
        reg = geom_type2 if weights.geom_type is Regularizer.TYPE2 else geom_type1
        value += weights.lambda_geom * reg(pair.delta_norm, pair.phi_norm)
    return value


def total_loss(grounding: float, evidential_terms: Sequence[float],
               weights: LossWeights = LossWeights()) -> float:
    """grounding + lambda_der * (2/N) * sum of per-clip evidential terms."""
    terms = np.asarray(evidential_terms, dtype=np.float64)
    if terms.size == 0:
        raise ValueError("evidential_terms is empty")
    return float(grounding + weights.lambda_der * 2.0 / terms.size * terms.sum())


@dataclass(frozen=True)
class GradientField:
    delta_norm: np.ndarray
    phi_norm: np.ndarray
    neg_grad: np.ndarray

    def rows(self):
        return zip(self.delta_norm.ravel(), self.phi_norm.ravel(), self.neg_grad.ravel())


def gradient_field(regularizer: Regularizer | str, grid_resolution: int) -> GradientField:
    """-dL/d(evidence) on a uniform grid over the unit square."""
    regularizer = Regularizer(regularizer)
    if grid_resolution < 2:
        raise ValueError("grid_resolution must be >= 2")
    axis = np.linspace(0.0, 1.0, grid_resolution)
    d, p = np.meshgrid(axis, axis, indexing="ij")
    if regularizer is Regularizer.VANILLA:
        g = vanilla_grad_phi(d, p)
    elif regularizer is Regularizer.TYPE1:
        g = geom_type1_grad_phi(d, p)
    elif regularizer is Regularizer.TYPE2:
        g = geom_type2_grad_phi(d, p)
    else:
        raise ValueError("no gradient field without a regularizer")
    return GradientField(d, p, -g + 0.0)  # +0.0 drops signed zeros
