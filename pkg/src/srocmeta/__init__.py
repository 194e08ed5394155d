"""Meta-analysis of diagnostic test accuracy reported at multiple thresholds."""

from .data import CorrectionPolicy, Dataset, DataError, StudyRecord, ingest_csv, make_dataset, to_logits
from .inference import FitConfig, FitError, FitResult, classify_failure, fit, wald_ci
from .likelihood import Theta, loglik, reml_loglik
from .sroc import ausc, ausc_variance, sroc_value, sroc_variance, summary_point, youden_optimal
from .within import multinomial_cov

__all__ = [
    "CorrectionPolicy", "DataError", "Dataset", "FitConfig", "FitError", "FitResult",
    "StudyRecord", "Theta", "ausc", "ausc_variance", "classify_failure", "fit", "ingest_csv",
    "loglik", "make_dataset", "multinomial_cov", "reml_loglik", "sroc_value", "sroc_variance",
    "summary_point", "to_logits", "wald_ci", "youden_optimal",
]
