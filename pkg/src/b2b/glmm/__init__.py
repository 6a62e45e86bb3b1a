from .bootstrap import BootstrapError, BootstrapResult, cluster_bootstrap
from .model import (
    SPECS,
    BundleObservation,
    Design,
    HierarchicalFit,
    NonNestedError,
    SeparationError,
    aghq_loglik,
    build_design,
    fit,
    fit_design,
    irls,
    observed_information,
    read_observations,
    write_observations,
)
from .reports import (
    AnovaResult,
    aggregate_by_aisle_pair,
    chi2_pvalue,
    deviance_anova,
    write_heatmap,
    write_zero_copurchase,
    zero_copurchase_report,
)
from .simulate import Truth, simulate_bundle_data, simulate_outcomes

__all__ = [
    "SPECS",
    "AnovaResult",
    "BootstrapError",
    "BootstrapResult",
    "BundleObservation",
    "Design",
    "HierarchicalFit",
    "NonNestedError",
    "SeparationError",
    "Truth",
    "aggregate_by_aisle_pair",
    "aghq_loglik",
    "build_design",
    "chi2_pvalue",
    "cluster_bootstrap",
    "deviance_anova",
    "fit",
    "fit_design",
    "irls",
    "observed_information",
    "read_observations",
    "simulate_bundle_data",
    "simulate_outcomes",
    "write_heatmap",
    "write_observations",
    "write_zero_copurchase",
    "zero_copurchase_report",
]
