"""Robust scale-mixture clustering with native missing-data support.

Variational inference for a mixture of scale-mixture-of-normal (Student-t
like) components.  Rows may have missing cells; each row also carries a
latent precision scale whose posterior mean doubles as an outlier score.
"""

from .baseline import fit_gmm_em, gmm_em_baseline
from .data_io import ParseError, load_csv, save_csv
from .engine import (ImputationResult, PredictionResult, fit, impute,
                     initialize, predict)
from .evaluation import EvalReport, evaluate
from .model import (ConfigurationError, FitConfig, FitResult, MaskedDataset,
                    PriorSpec, default_priors, load_model, save_model)
from .synthetic import SyntheticSpec, generate

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "EvalReport",
    "FitConfig",
    "FitResult",
    "ImputationResult",
    "MaskedDataset",
    "ParseError",
    "PredictionResult",
    "PriorSpec",
    "SyntheticSpec",
    "default_priors",
    "evaluate",
    "fit",
    "fit_gmm_em",
    "generate",
    "gmm_em_baseline",
    "impute",
    "initialize",
    "load_csv",
    "load_model",
    "predict",
    "save_csv",
    "save_model",
    "__version__",
]
