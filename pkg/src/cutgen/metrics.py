"""Detection metrics (image/pixel AUROC, max-F1, region-overlap AUC) and
multi-seed report aggregation with JSON/CSV export.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .types import ValidationError

METRICS = ("I-AUC", "I-F1", "P-AUC", "P-F1", "PRO")


def auroc(scores, labels) -> float:
    """Rank-statistic AUROC with midrank tie handling."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("auroc needs both classes present")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def max_f1(scores, labels) -> float:
    """Maximum F1 over thresholds at every distinct score value (predict >= threshold)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValidationError("max_f1 needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.cumsum(labels[order].astype(np.float64))
    fp = np.cumsum((~labels[order]).astype(np.float64))
    # last index of each equal-value run == the full "score >= value" prediction set
    cut = np.nonzero(np.diff(s, append=-np.inf))[0]
    f1 = 2.0 * tp[cut] / (2.0 * tp[cut] + fp[cut] + (n_pos - tp[cut]))
    return float(f1.max())


def _coverage_curve(sorted_vals: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Fraction of values >= each threshold. sorted_vals ascending."""
    below = np.searchsorted(sorted_vals, thresholds, side="left")
    return (sorted_vals.size - below) / sorted_vals.size


def pro(score_maps, gt_masks, fpr_limit: float = 0.3, num_thresholds: int | None = 1000) -> float:
    """Per-region overlap averaged over ground-truth components, integrated
    over false-positive rate up to fpr_limit and normalized by it.

    num_thresholds=None sweeps every distinct score value (exact, monotone-
    transform invariant); an int sweeps that many evenly spaced thresholds.
    """
    maps = [np.asarray(m, dtype=np.float64) for m in score_maps]
    masks = [np.asarray(m).astype(bool) for m in gt_masks]
    if len(maps) != len(masks) or any(a.shape != b.shape for a, b in zip(maps, masks)):
        raise ValidationError("score maps and ground-truth masks must pair up shape-wise")
    if not any(m.any() for m in masks):
        raise ValidationError("no anomalous ground-truth pixels anywhere")

    structure = np.ones((3, 3), dtype=int)  # 8-connectivity
    comp_scores: list[np.ndarray] = []
    normal_scores: list[np.ndarray] = []
    for amap, mask in zip(maps, masks):
        lab, n = ndimage.label(mask, structure=structure)
        for i in range(1, n + 1):
            comp_scores.append(np.sort(amap[lab == i]))
        normal_scores.append(amap[~mask])
    normals = np.sort(np.concatenate(normal_scores)) if normal_scores else np.empty(0)

    allv = np.concatenate([m.ravel() for m in maps])
    if num_thresholds is None:
        thresholds = np.unique(allv)[::-1]
    else:
        thresholds = np.linspace(allv.max(), allv.min(), num_thresholds)

    overlap = np.mean([_coverage_curve(cs, thresholds) for cs in comp_scores], axis=0)
    fpr = _coverage_curve(normals, thresholds) if normals.size else np.zeros_like(thresholds)

    return integrate_overlap_fpr(fpr, overlap, fpr_limit)


def integrate_overlap_fpr(fpr: np.ndarray, overlap: np.ndarray, fpr_limit: float) -> float:
    """Trapezoid area of the (fpr, overlap) sweep up to fpr_limit, normalized.

    The sweep comes from descending thresholds, so both series are
    nondecreasing; duplicate fpr values keep their best overlap. A point is
    interpolated exactly at fpr_limit when the sweep crosses it; no points
    at or below the limit yields 0.
    """
    order = np.lexsort((overlap, fpr))
    fpr, overlap = fpr[order], overlap[order]
    keep = np.ones(fpr.size, dtype=bool)
    keep[:-1] = fpr[:-1] != fpr[1:]  # last (max overlap) point per fpr value
    fpr, overlap = fpr[keep], overlap[keep]

    inside = fpr <= fpr_limit
    if not inside.any():
        return 0.0
    xs, ys = fpr[inside], overlap[inside]
    n_in = int(inside.sum())
    if n_in < fpr.size and xs[-1] < fpr_limit:
        x0, x1 = fpr[n_in - 1], fpr[n_in]
        y0, y1 = overlap[n_in - 1], overlap[n_in]
        y_lim = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0)
        xs = np.append(xs, fpr_limit)
        ys = np.append(ys, y_lim)
    return float(np.trapezoid(ys, xs) / fpr_limit)


@dataclass(frozen=True)
class MetricStat:
    mean: float
    std: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.mean <= 1.0):
            raise ValidationError(f"metric value {self.mean} outside [0, 1]")
        if self.std < 0.0:
            raise ValidationError("std must be >= 0")


@dataclass
class EvalReport:
    """Per-category metric values with mean/std over runs."""

    setup: str
    seeds: list[int]
    n_runs: int
    per_category: dict[str, dict[str, MetricStat]]
    average: dict[str, MetricStat] = field(default_factory=dict)

    def categories(self) -> list[str]:
        return sorted(self.per_category)


def single_run_report(setup: str, seed: int, values: dict[str, dict[str, float]]) -> EvalReport:
    per_cat = {c: {m: MetricStat(mean=float(v)) for m, v in mv.items()} for c, mv in values.items()}
    avg = {m: MetricStat(mean=float(np.mean([values[c][m] for c in values]))) for m in METRICS}
    return EvalReport(setup=setup, seeds=[seed], n_runs=1, per_category=per_cat, average=avg)


def aggregate_runs(reports: list[EvalReport]) -> EvalReport:
    """Sample mean and population std per (category, metric) across runs."""
    if not reports:
        raise ValidationError("no reports to aggregate")
    cats = reports[0].categories()
    for r in reports[1:]:
        if r.categories() != cats:
            raise ValidationError(f"category sets differ: {cats} vs {r.categories()}")

    def stat(vals: list[float]) -> MetricStat:
        return MetricStat(mean=float(np.mean(vals)), std=float(np.std(vals)))

    per_cat = {
        c: {m: stat([r.per_category[c][m].mean for r in reports]) for m in METRICS}
        for c in cats
    }
    avg = {m: stat([float(np.mean([r.per_category[c][m].mean for c in cats])) for r in reports])
           for m in METRICS}
    seeds = [s for r in reports for s in r.seeds]
    return EvalReport(setup=reports[0].setup, seeds=seeds, n_runs=len(reports),
                      per_category=per_cat, average=avg)


def report_to_dict(report: EvalReport) -> dict:
    return {
        "setup": report.setup,
        "seeds": report.seeds,
        "n_runs": report.n_runs,
        "per_category": {
            c: {m: {"mean": s.mean, "std": s.std} for m, s in mv.items()}
            for c, mv in report.per_category.items()
        },
        "average": {m: {"mean": s.mean, "std": s.std} for m, s in report.average.items()},
    }


def write_report(report: EvalReport, json_path: Path, csv_path: Path) -> None:
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "metric", "mean", "std", "n_runs"])
        for c in report.categories():
            for m in METRICS:
                s = report.per_category[c][m]
                w.writerow([c, m, repr(s.mean), repr(s.std), report.n_runs])
