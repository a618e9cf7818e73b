"""Segmented zero-inflated Poisson mixed models with known or random changepoints."""

from .design import (Cluster, Dataset, Known, ModelSpec, Observation, Panel, ParamPack,
                     Random, ZetaMode)
from .errors import (DomainError, EvaluationError, InitializationError, ParseError,
                     SegZipError, StructuralError)
from .laplace import FitOptions, info_criteria, laplace_logmarg
from .segfit import (AlgorithmOptions, GridOptions, SegFitResult, fit_known, fit_plain,
                     fit_random, grid_init, predict, pseudo_step)
from .segfun import ChangepointBounds, SegKind, cp_derivative, cp_from_lambda, lambda_from_cp
from .zipdist import ZipParams, zip_logpmf, zip_mean, zip_var

__version__ = "0.1.0"

__all__ = [
    "Cluster",
    "Dataset",
    "Known",
    "ModelSpec",
    "Observation",
    "Panel",
    "ParamPack",
    "Random",
    "ZetaMode",
    "DomainError",
    "EvaluationError",
    "InitializationError",
    "ParseError",
    "SegZipError",
    "StructuralError",
    "FitOptions",
    "info_criteria",
    "laplace_logmarg",
    "AlgorithmOptions",
    "GridOptions",
    "SegFitResult",
    "fit_known",
    "fit_plain",
    "fit_random",
    "grid_init",
    "predict",
    "pseudo_step",
    "ChangepointBounds",
    "SegKind",
    "cp_derivative",
    "cp_from_lambda",
    "lambda_from_cp",
    "ZipParams",
    "zip_logpmf",
    "zip_mean",
    "zip_var",
]
