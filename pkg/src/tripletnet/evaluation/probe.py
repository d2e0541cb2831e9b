"""Shortcut check: can a random forest recover species from site features?

A dataset is reported ``leaky`` when any site-identifying feature subset
classifies held-out specimens at or above the threshold, or when the
reduced (model-facing) feature set itself does.  Otherwise it is ``clean``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..data import FeatureSchema, SpecimenRecord, species_labels, stratified_kfold
from .forest import ForestConfig, predict_forest, train_forest
from .stats import accuracy

REDUCED = "reduced"
ALL_FLAGGED = "all_flagged"


@dataclass
class LeakageReport:
    accuracies: dict[str, float]     # probed subset -> held-out accuracy
    importances: list[tuple[str, float]]  # descending mean Gini decrease, all features
    threshold: float
    verdict: str

    @property
    def accuracy_reduced(self) -> float:
        return self.accuracies[REDUCED]

    @property
    def accuracy_flagged_subsets(self) -> dict[str, float]:
        return {k: v for k, v in self.accuracies.items() if k != REDUCED}


def leakage_probe(records: Sequence[SpecimenRecord], schema: FeatureSchema, split_seed: int,
                  threshold: float = 0.90, forest: ForestConfig | None = None) -> LeakageReport:
    flagged = [i for i, f in enumerate(schema.site_identifying) if f]
    kept = [i for i, f in enumerate(schema.site_identifying) if not f]
    if not flagged or not kept:
        raise ValueError("probe needs both flagged and unflagged features")
    forest = forest or ForestConfig(seed=split_seed)
    species = species_labels(records)
    index = {s: i for i, s in enumerate(species)}
    y = np.array([index[r.species] for r in records])
    X = np.stack([r.measurements for r in records])
    train, test = stratified_kfold(y, 5, split_seed).train_test(0)

    subsets: dict[str, list[int]] = {REDUCED: kept}
    for i in flagged:
        subsets[schema.names[i]] = [i]
    subsets[ALL_FLAGGED] = flagged

    def score(cols, cfg):
        f = train_forest(X[train][:, cols], y[train], cfg, n_classes=len(species))
        return accuracy(predict_forest(f, X[test][:, cols]), y[test]), f

    accs = {name: score(cols, forest)[0] for name, cols in subsets.items()}
    _, full = score(list(range(len(schema))), forest)
    order = np.argsort(-full.importances, kind="stable")
    importances = [(schema.names[i], float(full.importances[i])) for i in order]
    leaky = any(v >= threshold for v in accs.values())
    return LeakageReport(accs, importances, threshold, "leaky" if leaky else "clean")


def write_leakage_report(path, report: LeakageReport) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("kind", "name", "value"))
        for name, acc in report.accuracies.items():
            w.writerow(("accuracy", name, repr(acc)))
        for name, imp in report.importances:
            w.writerow(("importance", name, repr(imp)))
        w.writerow(("verdict", report.verdict, repr(report.threshold)))
