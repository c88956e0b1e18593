from .bayes import BayesComparison, bayes_factor_const_vs_linear, linear_posterior_band
from .eol import (
    EolEstimate,
    EolPair,
    EolSummary,
    TailFit,
    eol_cycle,
    eol_error_report,
    predicted_capacity_curve,
    slope_bounds,
    summarize_eol,
    weighted_tail_regression,
    write_eol_scatter,
)
from .metrics import (
    ErrorMetrics,
    ErrorObservation,
    MetricRow,
    PercentileBin,
    aggregate_report,
    error_metrics,
    percentile_curves,
    write_metric_report,
    write_percentile_csv,
)

__all__ = [
    "BayesComparison", "EolEstimate", "EolPair", "EolSummary", "ErrorMetrics", "ErrorObservation", "MetricRow",
    "PercentileBin", "TailFit", "aggregate_report", "bayes_factor_const_vs_linear", "eol_cycle",
    "eol_error_report", "error_metrics", "linear_posterior_band", "percentile_curves", "predicted_capacity_curve",
    "slope_bounds",
    "summarize_eol", "weighted_tail_regression", "write_eol_scatter", "write_metric_report",
    "write_percentile_csv",
]
