"""Estimand-tailored propensity score weighting (navigated weighting).

Propensity scores are fitted by weighted logistic score equations whose unit
weights depend on the target effect, then plugged into inverse probability
weighted effect estimates with sandwich or bootstrap standard errors.
"""

from .errors import (
    ConfigError,
    DataError,
    DomainError,
    NawtError,
    NonConvergence,
    NonFiniteScore,
    RankDeficientDesign,
    SeparationWarning,
    SingularHessian,
    SingularWeightMatrix,
    TooManyFailures,
    ZeroDenominator,
)
from .estimands import (
    EffectEstimate,
    Recipe,
    estimate_ao,
    estimate_atc,
    estimate_ate,
    estimate_att,
    relative_impact_profile,
)
from .inference import (
    VarianceReport,
    adaptive_select,
    bootstrap_se,
    sandwich,
    sandwich_ate_separate,
    sandwich_att,
)
from .model import Dataset, EstimandSpec, WeightingScheme, load_csv, write_csv
from .numerics import RngStream, hyp2f1_1b
from .solver import GmmFit, PropensityFit, fit_gmm, fit_nawt, pseudo_loglik, weighted_score

__version__ = "0.1.0"
