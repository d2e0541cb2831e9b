"""Cross-validation, ablation, significance testing, leakage probe and synthetic data."""
from .cv import AblationConfig, AblationResult, CvReport, fold_plan, run_ablation, run_cv, run_fold
from .forest import Forest, ForestConfig, predict_forest, train_forest
from .probe import LeakageReport, leakage_probe, write_leakage_report
from .report import render_svg, write_ablation, write_cv_report, write_summary, write_svg
from .stats import accuracy, paired_significance
from .synthetic import SEPARABLE, SyntheticData, SyntheticSpec, generate_synthetic, default_class_sizes

__all__ = [
    "AblationConfig", "AblationResult", "CvReport", "fold_plan", "run_ablation", "run_cv", "run_fold",
    "Forest", "ForestConfig", "predict_forest", "train_forest",
    "LeakageReport", "leakage_probe", "write_leakage_report",
    "render_svg", "write_ablation", "write_cv_report", "write_summary", "write_svg",
    "accuracy", "paired_significance",
    "SEPARABLE", "SyntheticData", "SyntheticSpec", "generate_synthetic", "default_class_sizes",
]
