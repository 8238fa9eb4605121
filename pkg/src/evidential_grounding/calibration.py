"""Post-hoc calibration: histogram equalisation, EUCM, entropy and KDE."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import kernels

DEFAULT_BINS = 64


class EUCMVariant(str, enum.Enum):
    PAPER_LITERAL = "paper-literal"
    CONSISTENCY = "consistency"


class BinsError(ValueError):
    pass


class DegenerateSampleError(ValueError):
    pass


def _values(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("empty sample")
    return v


def histogram_equalize(values: Sequence[float], bins: int = DEFAULT_BINS) -> np.ndarray:
    """Map each value through the CDF of a ``bins``-bin histogram over [min, max].

    Values that fall into distinct bins receive exactly their empirical CDF.
    A constant sample maps to all ones.
    """
    if bins < 2:
        raise BinsError(f"bins must be >= 2, got {bins}")
    return kernels.histogram_cdf_map(np.ascontiguousarray(_values(values)), int(bins))


def eucm(delta_norm: Sequence[float], uncertainty_norm: Sequence[float],
         variant: EUCMVariant | str = EUCMVariant.CONSISTENCY) -> float:
    """Mean squared sum (paper-literal) or difference (consistency) of the pairs."""
    variant = EUCMVariant(variant)
    d, u = _values(delta_norm), _values(uncertainty_norm)
    if d.shape != u.shape:
        raise ValueError(f"length mismatch: {d.size} errors vs {u.size} uncertainties")
    combined = d + u if variant is EUCMVariant.PAPER_LITERAL else d - u
    return float(np.mean(combined * combined))


def histogram_probabilities(values, bins: int = DEFAULT_BINS) -> np.ndarray:
    if bins < 2:
        raise BinsError(f"bins must be >= 2, got {bins}")
    v = _values(values)
    k = np.clip(np.floor(v * bins).astype(np.int64), 0, bins - 1)
    return np.bincount(k, minlength=bins) / v.size


def distribution_entropy(values: Sequence[float], bins: int = DEFAULT_BINS) -> float:
    """Shannon entropy (nats) of the histogram of values on [0, 1]."""
    p = histogram_probabilities(values, bins)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum()) + 0.0


def silverman_bandwidth(values) -> float:
    v = _values(values)
    return 1.06 * float(np.std(v, ddof=1)) * v.size ** (-0.2)


def gaussian_kde(values: Sequence[float], eval_points: Sequence[float]) -> np.ndarray:
    v = _values(values)
    if v.size < 2 or np.std(v) == 0:
        raise DegenerateSampleError(
            "KDE needs >= 2 distinct values; add a small jitter to a constant sample")
    points = np.ascontiguousarray(np.asarray(eval_points, dtype=np.float64).ravel())
    return kernels.gaussian_kde(np.ascontiguousarray(v), points, silverman_bandwidth(v))


@dataclass
class CalibrationReport:
    eucm: float
    entropy: float
    n_samples: int
    eucm_variant: str = EUCMVariant.CONSISTENCY.value
    bins: int = DEFAULT_BINS
    equalized: bool = False
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def calibration_summary(delta, uncertainty, bins: int = DEFAULT_BINS,
                        equalize: bool = False) -> dict:
    """Normalise both columns, optionally equalise the uncertainty, and score.

    Returns a dict with one :class:`CalibrationReport` per EUCM variant
    (both share the entropy of the processed uncertainty).
    """
    from .losses import NormMode, normalize_batch, DegenerateBatchError

    d, u = _values(delta), _values(uncertainty)
    if d.shape != u.shape:
        raise ValueError(f"length mismatch: {d.size} errors vs {u.size} uncertainties")

    def norm(x):
        try:
            return normalize_batch(x, NormMode.STANDARD_MINMAX)
        except DegenerateBatchError:
            return np.zeros_like(x)

    dn, un = norm(d), norm(u)
    if equalize:
        un = histogram_equalize(un, bins) if np.ptp(un) > 0 else un
    entropy = distribution_entropy(un, bins)
    return {
        variant.value: CalibrationReport(eucm=eucm(dn, un, variant), entropy=entropy,
                                         n_samples=int(d.size), eucm_variant=variant.value,
                                         bins=bins, equalized=equalize)
        for variant in EUCMVariant
    }
