"""Stable-rank diagnostics, spectral bound validators, and a periodic
sign-restoration optimizer for desk-scale transformer training."""

from .bounds import BoundCheck
from .linalg import (
    SvdFactors,
    frobenius_norm,
    numeric_rank,
    singular_values,
    spectral_norm,
    svd,
)
from .net import ModelConfig, ModelParams, backward, forward, init_params
from .optim import AdamWState, MetricsRecord, MSignConfig
from .spectral import (
    AlignmentResult,
    SpectralReport,
    alignment,
    geo_mean_srank,
    logit_margin,
    matrix_sign,
    msign_restore,
    stable_rank,
)

__all__ = [
    "AdamWState",
    "AlignmentResult",
    "BoundCheck",
    "MetricsRecord",
    "ModelConfig",
    "ModelParams",
    "MSignConfig",
    "SpectralReport",
    "SvdFactors",
    "alignment",
    "backward",
    "forward",
    "frobenius_norm",
    "geo_mean_srank",
    "init_params",
    "logit_margin",
    "matrix_sign",
    "msign_restore",
    "numeric_rank",
    "singular_values",
    "spectral_norm",
    "stable_rank",
    "svd",
]
