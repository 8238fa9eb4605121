"""Evidential boundary regression with line-based (error, evidence) regularizers.

Modules
-------
nig
    Normal-Inverse-Gamma density, moments, Student-t marginal and NLL.
losses
    Error/evidence normalisation, vanilla and line regularizers, combined losses.
autodiff
    Reverse-mode tape, evidential head, MLP, Adam, checkpoints.
calibration
    Histogram equalisation, EUCM, entropy, Gaussian KDE.
attention
    Flipped cross-attention fusion blocks.
grounding
    Temporal-grounding head losses and 1-D NMS.
experiments
    Synthetic data, training runs, noise sweeps and the span-bias probe.
"""
from .kernels import BACKEND
from .nig import (GaussianMoments, NIGDomainError, NIGParams, StudentTParams,
                  UncertaintySummary, marginal_student_t, nig_log_density, nig_moments,
                  nll_loss)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "GaussianMoments", "NIGDomainError", "NIGParams", "StudentTParams",
    "UncertaintySummary", "marginal_student_t", "nig_log_density", "nig_moments", "nll_loss",
]
