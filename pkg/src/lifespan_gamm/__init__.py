"""Additive mixed models for lifespan trajectories from sparse longitudinal data."""

from .data import Categorical, LongitudinalDataset, Schema, load_dataset, write_dataset
from .errors import (ConfigError, ConsistencyError, ConvergenceError, DegenerateCovariateError,
                     GammError, IdentifiabilityError, NumericalError, ParseError, RankError,
                     SchemaError, SpecError)
from .mixed import FittedModel, VarianceComponents, fit_reml, smoothing_parameter_from_variances
from .model import (ModelSpec, canonical_spec, cross_sectional_effect, fit_model, load_model,
                    longitudinal_effect, predict, save_model)

__version__ = "0.1.0"

__all__ = [
    "Categorical", "LongitudinalDataset", "Schema", "load_dataset", "write_dataset",
    "ConfigError", "ConsistencyError", "ConvergenceError", "DegenerateCovariateError",
    "GammError", "IdentifiabilityError", "NumericalError", "ParseError", "RankError",
    "SchemaError", "SpecError",
    "FittedModel", "VarianceComponents", "fit_reml", "smoothing_parameter_from_variances",
    "ModelSpec", "canonical_spec", "cross_sectional_effect", "fit_model", "load_model",
    "longitudinal_effect", "predict", "save_model",
]
