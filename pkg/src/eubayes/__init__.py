"""Empirical uncertain Bayes estimation for area-level NEF-QVF models.

The prior on each area mean is a mixture: with probability ``p`` the usual
conjugate prior, otherwise a point mass at the regression mean.  Estimates
therefore shrink only the areas whose data look compatible with the model.
"""

from .family import (BINOMIAL_BETA, FAY_HERRIOT, POISSON_GAMMA, AreaData, AreaRecord,
                     DataError, FamilyKind, ModelParams, ParameterError, get_family)
from .shrinkage import eub_estimate, responsibility, shrinkage_profile, ub_estimate
from .em import FitConfig, FitResult, fit_em, fit_em_batch, marginal_loglik

__all__ = [
    "AreaData", "AreaRecord", "ModelParams", "FamilyKind", "DataError", "ParameterError",
    "FAY_HERRIOT", "POISSON_GAMMA", "BINOMIAL_BETA", "get_family",
    "ub_estimate", "eub_estimate", "responsibility", "shrinkage_profile",
    "FitConfig", "FitResult", "fit_em", "fit_em_batch", "marginal_loglik",
]
__version__ = "0.1.0"
