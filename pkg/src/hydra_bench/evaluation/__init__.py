from .experiments import (
    AttackReport,
    EvalConfig,
    PatchSpec,
    SuiteResult,
    evaluate,
    evaluate_trajectory,
    make_report,
    predict,
    read_reports_json,
    run_experiment_suite,
    write_metrics_csv,
    write_reports_csv,
    write_reports_json,
    write_sweep_csv,
)
from .metrics import (
    DetectionSet,
    Matches,
    MetricsReport,
    accumulate,
    compute_metrics,
    decode_detections,
    match_detections,
)

__all__ = [
    "AttackReport", "DetectionSet", "EvalConfig", "Matches", "MetricsReport", "PatchSpec", "SuiteResult",
    "accumulate", "compute_metrics", "decode_detections", "evaluate", "evaluate_trajectory", "make_report",
    "match_detections", "predict", "read_reports_json", "run_experiment_suite", "write_metrics_csv",
    "write_reports_csv", "write_reports_json", "write_sweep_csv",
]
