"""Multivariate Huber distribution, regression losses and estimate fusion."""

from ._core import (
    NumericError,
    fit_mle,
    fuse,
    huber,
    log_normalizing_constant,
    log_pdf,
    normalizing_constant,
    run_cli,
    sample,
    variance_factor,
)

__all__ = [
    "NumericError",
    "fit_mle",
    "fuse",
    "huber",
    "log_normalizing_constant",
    "log_pdf",
    "normalizing_constant",
    "run_cli",
    "sample",
    "variance_factor",
]
