"""Accuracy metrics, fold aggregation, and the synthetic-ratio sweep.

WA is overall accuracy (trace over total); UA is the mean of per-class
recalls. Classes with no evaluated utterances are excluded from the UA mean
and flagged with a warning, which real corpora never hit but tiny desk-scale
ones can.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DataError


@dataclass
class FoldResult:
    fold_index: int
    wa: float
    ua: float
    confusion: np.ndarray  # (C, C), rows = true class, cols = predicted


def confusion_matrix(
    y_true: Sequence[int], y_pred: Sequence[int], n_classes: int
) -> np.ndarray:
    if len(y_true) != len(y_pred):
        raise DataError("prediction and label vectors differ in length")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[t, p] += 1
    return cm


def wa_ua(confusion: np.ndarray) -> tuple[float, float]:
    """Weighted and unweighted accuracy from a confusion matrix."""
    confusion = np.asarray(confusion)
    total = confusion.sum()
    if total == 0:
        raise DataError("confusion matrix is all-zero")
    wa = float(np.trace(confusion) / total)
    row_sums = confusion.sum(axis=1)
    present = row_sums > 0
    if not present.all():
        empty = [int(i) for i in np.flatnonzero(~present)]
        warnings.warn(f"classes {empty} have no utterances; excluded from UA", stacklevel=2)
    recalls = np.diag(confusion)[present] / row_sums[present]
    ua = float(recalls.mean())
    return wa, ua


def fold_result(fold_index: int, confusion: np.ndarray) -> FoldResult:
    wa, ua = wa_ua(confusion)
    return FoldResult(fold_index=fold_index, wa=wa, ua=ua, confusion=confusion)


def aggregate_folds(
    results: Sequence[FoldResult], expected_folds: int = 5
) -> tuple[float, float]:
    """Unweighted arithmetic mean of per-fold WA and UA."""
    if len(results) != expected_folds:
        raise DataError(f"expected {expected_folds} fold results, got {len(results)}")
    mean_wa = float(np.mean([r.wa for r in results]))
    mean_ua = float(np.mean([r.ua for r in results]))
    return mean_wa, mean_ua


def results_csv(ratio_blocks: Sequence[tuple[float, Sequence[FoldResult]]]) -> str:
    """Render the results table: per-fold rows plus a mean row per ratio."""
    lines = ["ratio,fold,wa,ua"]
    for ratio, results in ratio_blocks:
        for r in results:
            lines.append(f"{ratio:g},{r.fold_index},{r.wa:.6f},{r.ua:.6f}")
        mean_wa, mean_ua = aggregate_folds(results, expected_folds=len(results))
        lines.append(f"{ratio:g},mean,{mean_wa:.6f},{mean_ua:.6f}")
    return "\n".join(lines) + "\n"


def ratio_sweep(
    ratios: Sequence[float],
    run_at_ratio: Callable[[float], Sequence[FoldResult]],
) -> tuple[list[tuple[float, list[FoldResult]]], str]:
    """Run the configured strategy once per ratio and render the CSV table.

    Ratio 0 means the un-augmented baseline. The sweep measures the response
    curve; it asserts nothing about its shape.
    """
    if list(ratios) != sorted(ratios):
        raise DataError("ratios must be sorted ascending")
    if any(r < 0 for r in ratios):
        raise DataError("ratios must be >= 0")
    blocks = [(float(ratio), list(run_at_ratio(float(ratio)))) for ratio in ratios]
    return blocks, results_csv(blocks)
