"""Mean class recall over the classes learned so far."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class EmptyClassError(ValueError):
    pass


@dataclass
class MCRResult:
    mcr: float
    per_class: dict[int, float]


def class_recalls(y_true: np.ndarray, y_pred: np.ndarray, classes: Sequence[int] | None = None) -> MCRResult:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"label/prediction shape mismatch {y_true.shape} vs {y_pred.shape}")
    classes = sorted(set(y_true.tolist())) if classes is None else sorted(int(c) for c in classes)
    stray = set(y_true.tolist()) - set(classes)
    if stray:
        raise ValueError(f"test labels {sorted(stray)} are not among the evaluated classes")
    per_class = {}
    for c in classes:
        mask = y_true == c
        n = int(mask.sum())
        if n == 0:
            raise EmptyClassError(f"class {c} has no test samples")
        per_class[c] = int((y_pred[mask] == c).sum()) / n
    if not per_class:
        raise EmptyClassError("no classes to evaluate")
    return MCRResult(float(np.mean(list(per_class.values()))), per_class)


def tally_recalls(y_true: Sequence[int], y_pred: Sequence[int]) -> dict[int, float]:
    """Plain-loop per-class tally, kept deliberately naive as a cross-check."""
    hits: dict[int, int] = {}
    totals: dict[int, int] = {}
    for t, p in zip(y_true, y_pred):
        t = int(t)
        totals[t] = totals.get(t, 0) + 1
        hits[t] = hits.get(t, 0) + (1 if int(p) == t else 0)
    return {c: hits[c] / totals[c] for c in sorted(totals)}


def evaluate_mcr(model, x: np.ndarray, y: np.ndarray, debug: bool = False) -> MCRResult:
    """Predict every test sample with ``model`` and score against ``y``."""
    pred = model.predict(x)
    result = class_recalls(y, pred, model.learned_classes)
    if debug:
        tally = tally_recalls(y, pred)
        if tally != result.per_class:
            raise AssertionError(f"recall mismatch: vectorized {result.per_class} vs tally {tally}")
    return result
