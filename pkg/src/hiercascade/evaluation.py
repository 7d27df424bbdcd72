"""Fold scoring and cross-fold aggregation of accuracy metrics."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .backend import ConfusionMatrix
from .routing import BatchPrediction, RoutedPrediction
from .taxonomy import Taxonomy


class EvaluationError(ValueError):
    pass


@dataclass
class FoldMetrics:
    mode: str
    overall_accuracy: float
    per_coarse_accuracy: dict[int, float]
    confusion: ConfusionMatrix

    def to_dict(self, taxonomy: Taxonomy | None = None) -> dict:
        def key(c):
            return taxonomy.coarse[c].name if taxonomy else str(c)

        return {
            "mode": self.mode,
            "overall": self.overall_accuracy,
            "per_coarse": {key(c): v for c, v in sorted(self.per_coarse_accuracy.items())},
            "confusion": self.confusion.to_list(),
        }


def _predicted_fine(predictions) -> tuple[np.ndarray, str]:
    if isinstance(predictions, BatchPrediction):
        return np.asarray(predictions.fine), predictions.mode
    preds = list(predictions)
    if preds and isinstance(preds[0], RoutedPrediction):
        modes = {p.mode for p in preds}
        if len(modes) > 1:
            raise EvaluationError(f"predictions mix modes {sorted(modes)}")
        return np.array([p.fine for p in preds], dtype=np.int64), preds[0].mode
    return np.asarray(preds, dtype=np.int64), "unknown"


def score(predictions, truths: Sequence[int], taxonomy: Taxonomy, mode: str | None = None) -> FoldMetrics:
    """Accuracy overall and per coarse category, grouped by the TRUE coarse label."""
    pred, found_mode = _predicted_fine(predictions)
    truth = np.asarray(truths, dtype=np.int64)
    if len(pred) != len(truth):
        raise EvaluationError(f"length mismatch: {len(pred)} predictions, {len(truth)} truths")
    if len(truth) == 0:
        raise EvaluationError("nothing to score")
    F = taxonomy.n_fine
    for name, arr in (("prediction", pred), ("truth", truth)):
        if arr.min() < 0 or arr.max() >= F:
            raise EvaluationError(f"{name} label out of range 0..{F - 1}")
    cm = ConfusionMatrix.from_labels(truth, pred, F)
    correct = pred == truth
    true_coarse = np.asarray(taxonomy.parent)[truth]
    per = {
        c: float(correct[true_coarse == c].mean())
        for c in range(taxonomy.n_coarse)
        if (true_coarse == c).any()
    }
    return FoldMetrics(mode or found_mode, cm.accuracy(), per, cm)


def format_pm(mean: float, std: float, digits: int = 2) -> str:
    """Fractions rendered as a percentage pair, e.g. ``94.10±0.65``."""
    return f"{100 * mean:.{digits}f}±{100 * std:.{digits}f}"


@dataclass
class ExperimentReport:
    mode: str
    folds: list[FoldMetrics]
    mean: dict
    std: dict
    metadata: dict = field(default_factory=dict)

    def overall_str(self) -> str:
        return format_pm(self.mean["overall"], self.std["overall"])

    def to_dict(self, taxonomy: Taxonomy | None = None) -> dict:
        def names(d):
            return {
                (taxonomy.coarse[c].name if taxonomy else str(c)): v
                for c, v in sorted(d.items())
            }

        return {
            "mode": self.mode,
            "folds": [f.to_dict(taxonomy) for f in self.folds],
            "mean": {"overall": self.mean["overall"], "per_coarse": names(self.mean["per_coarse"])},
            "std": {"overall": self.std["overall"], "per_coarse": names(self.std["per_coarse"])},
            "metadata": self.metadata,
        }


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def aggregate(folds: Sequence[FoldMetrics], metadata: dict | None = None) -> ExperimentReport:
    """Mean and sample (n-1) standard deviation of each metric across folds."""
    if len(folds) < 2:
        raise EvaluationError("aggregation needs at least two folds")
    modes = {f.mode for f in folds}
    if len(modes) > 1:
        raise EvaluationError(f"cannot aggregate mixed modes {sorted(modes)}")
    mean: dict = {"per_coarse": {}}
    std: dict = {"per_coarse": {}}
    mean["overall"], std["overall"] = _mean_std([f.overall_accuracy for f in folds])
    coarse_ids = sorted(set().union(*(f.per_coarse_accuracy for f in folds)))
    for c in coarse_ids:
        vals = [f.per_coarse_accuracy[c] for f in folds if c in f.per_coarse_accuracy]
        mean["per_coarse"][c], std["per_coarse"][c] = _mean_std(vals)
    return ExperimentReport(modes.pop(), list(folds), mean, std, dict(metadata or {}))


MODE_TITLES = {
    "topdown": "Experiment-1 (hierarchic top-down)",
    "oracle": "Experiment-2 (perfect first level + second level)",
    "bottomup": "Experiment-3 (hierarchic bottom-up)",
    "flat": "Basic classifier (non-hierarchic)",
}


def overall_table_csv(reports: Iterable[ExperimentReport]) -> str:
    """One row per experiment: mean and std of overall accuracy."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["experiment", "mode", "mean", "std", "formatted"])
    for r in reports:
        w.writerow([MODE_TITLES.get(r.mode, r.mode), r.mode,
                    f"{r.mean['overall']:.6f}", f"{r.std['overall']:.6f}", r.overall_str()])
    return buf.getvalue()


def category_table_csv(reports: Sequence[ExperimentReport], taxonomy: Taxonomy) -> str:
    """One row per coarse category plus an overall row; one column per mode."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["category"] + [r.mode for r in reports])
    for c in range(taxonomy.n_coarse):
        row = [taxonomy.coarse[c].name]
        for r in reports:
            if c in r.mean["per_coarse"]:
                row.append(format_pm(r.mean["per_coarse"][c], r.std["per_coarse"][c]))
            else:
                row.append("")
        w.writerow(row)
    w.writerow(["Overall Accuracy"] + [r.overall_str() for r in reports])
    return buf.getvalue()
