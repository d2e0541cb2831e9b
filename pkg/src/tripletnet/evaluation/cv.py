"""Stratified cross-validation and the four-configuration ablation."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

from ..data import Dataset, FoldPlan, stratified_kfold
from ..model import ExtractorSpec, predict
from ..rng import derive_seed
from ..training import TrainConfig, embed_dataset, fit, fit_preprocessing
from .stats import accuracy, paired_significance

log = logging.getLogger(__name__)


class AblationConfig(IntEnum):
    IMAGES = 1
    IMAGES_MEASUREMENTS = 2
    TRIPLET = 3
    DYNAMIC_MARGIN = 4

    @property
    def label(self) -> str:
        return {1: "images", 2: "images+measurements", 3: "+triplet", 4: "+dynamic margin"}[self.value]

    def train_config(self, base: TrainConfig) -> TrainConfig:
        return replace(base, use_measurements=self >= 2, use_triplet=self >= 3,
                       use_dynamic_margin=self == 4)


@dataclass
class CvReport:
    config: str
    seed: int
    fold_accuracies: list[float]

    @property
    def k(self) -> int:
        return len(self.fold_accuracies)

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_accuracies, ddof=1)) if self.k > 1 else 0.0


@dataclass
class AblationResult:
    reports: list[CvReport]
    plan: FoldPlan
    p_vs_prev: list[float | None] = field(default_factory=list)

    @property
    def p_dynamic_vs_triplet(self) -> float:
        return self.p_vs_prev[3]


def fold_plan(dataset: Dataset, k: int, seed: int) -> FoldPlan:
    return stratified_kfold(dataset.labels, k, derive_seed(seed, "folds"))


def run_fold(cfg: TrainConfig, dataset: Dataset, plan: FoldPlan, fold: int,
             extractor: ExtractorSpec | None = None) -> float:
    """Train on every other fold and score fold ``fold`` (never balanced or augmented)."""
    train, test = plan.train_test(fold)
    prep = fit_preprocessing(dataset, train, cfg.standardize_measurements)
    data = prep.apply(dataset)
    params, _ = fit(cfg, data, train, extractor)
    _, logits = embed_dataset(params, data, test)
    acc = accuracy(predict(logits), data.labels[test])
    log.info("fold %d: accuracy %.4f", fold, acc)
    return acc


def _run_fold_job(args):
    return run_fold(*args)


def run_cv(config: AblationConfig | int, dataset: Dataset, k: int = 5, seed: int = 0,
           base: TrainConfig | None = None, extractor: ExtractorSpec | None = None,
           plan: FoldPlan | None = None, jobs: int = 1) -> CvReport:
    """k-fold CV of one ablation configuration; fold ``f`` trains with seed ``seed ^ f``."""
    config = AblationConfig(config)
    if config == AblationConfig.DYNAMIC_MARGIN and dataset.genetic is None:
        raise ValueError("configuration 4 requires a genetic distance matrix")
    base = base or TrainConfig()
    plan = plan or fold_plan(dataset, k, seed)
    cfg = config.train_config(base)
    jobs_args = [(replace(cfg, seed=seed ^ f), dataset, plan, f, extractor) for f in range(plan.k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            accs = list(pool.map(_run_fold_job, jobs_args))
    else:
        accs = [run_fold(*a) for a in jobs_args]
    return CvReport(str(int(config)), seed, accs)


def run_ablation(dataset: Dataset, k: int = 5, seed: int = 0, base: TrainConfig | None = None,
                 extractor: ExtractorSpec | None = None, jobs: int = 1,
                 configs=tuple(AblationConfig)) -> AblationResult:
    """All configurations on one shared fold plan, each compared to its predecessor."""
    if dataset.genetic is None and AblationConfig.DYNAMIC_MARGIN in configs:
        raise ValueError("the ablation requires a genetic distance matrix")
    plan = fold_plan(dataset, k, seed)
    reports = [run_cv(c, dataset, k, seed, base, extractor, plan, jobs) for c in configs]
    p = [None] + [paired_significance(reports[i].fold_accuracies, reports[i - 1].fold_accuracies)
                  for i in range(1, len(reports))]
    return AblationResult(reports, plan, p)
