"""Survival analysis toolkit for facial-image biomarkers.

Modules
-------
cohort      subject records, CSV ingestion, validation
survival    Kaplan-Meier, log-rank, reverse-KM follow-up, early mortality
cox         proportional hazards fitting, screening, AIC comparison
metrics     concordance, time-dependent AUC, age accuracy, rank tests
biomarkers  face age difference, scaling, fixed-cut stratification
trainer     ranking-loss risk head, L1 age head, age balancing
synth       synthetic cohorts with known ground truth
attention   attention-map projection onto face meshes, OBJ export
cli         command line entry points
"""

__version__ = "0.1.0"

from .errors import (
    AnalysisError,
    ConstantInputError,
    ConvergenceError,
    DataError,
    MedianNotReachedError,
    NoComparablePairsError,
    SingularDesignError,
    VisageError,
)

__all__ = [
    "__version__",
    "AnalysisError",
    "ConstantInputError",
    "ConvergenceError",
    "DataError",
    "MedianNotReachedError",
    "NoComparablePairsError",
    "SingularDesignError",
    "VisageError",
]
