"""Generalized Fellner-Schall smoothing parameter estimation."""

__version__ = "0.1.0"

from .gaussian import FitOptions, GaussianProblem, fit, fit_gaussian
from .general import GeneralOptions, fit_general, fit_general_model
from .penalties import PenaltyBlock, PenaltySet
from .report import FitReport
from .smooths import ModelSpec, SmoothTerm, assemble_design

__all__ = [
    "FitOptions",
    "FitReport",
    "GaussianProblem",
    "GeneralOptions",
    "ModelSpec",
    "PenaltyBlock",
    "PenaltySet",
    "SmoothTerm",
    "assemble_design",
    "fit",
    "fit_gaussian",
    "fit_general",
    "fit_general_model",
]
