"""Damped least squares and the measurement models built on it."""

from .lm import FitResult, ModelSpec, finite_difference_jacobian, least_squares
from .models import (REGISTRY, fano_model, fit_fano, fit_g2, fit_multiexp, fit_multiexp_arrays,
                     fit_odmr, fit_saturation, g2_model, multiexp_model, odmr_model,
                     poisson_sigma, saturation_signal)

__all__ = ["FitResult", "ModelSpec", "REGISTRY", "fano_model", "finite_difference_jacobian",
           "fit_fano", "fit_g2", "fit_multiexp", "fit_multiexp_arrays", "fit_odmr",
           "fit_saturation", "g2_model", "least_squares", "multiexp_model", "odmr_model",
           "poisson_sigma", "saturation_signal"]
