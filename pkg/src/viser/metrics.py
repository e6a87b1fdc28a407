"""Classification error, average precision and point localization."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyEvaluation, UndefinedAP

DEFAULT_TOLERANCE = 18.0


def _binary_counts(probs, truth):
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    t = np.asarray(truth).reshape(-1)
    if p.size == 0:
        raise EmptyEvaluation("no predictions to evaluate")
    if p.shape != t.shape:
        raise ValueError("predictions and truth differ in length")
    wrong = int(np.count_nonzero((p >= 0.5) != (t == 1)))
    return wrong, p.size


def classification_error(probs, truth) -> float:
    """Percentage of thresholded predictions (p >= 0.5 means class 1) that are wrong."""
    wrong, total = _binary_counts(probs, truth)
    return 100.0 * wrong / total


def classification_accuracy(probs, truth) -> float:
    wrong, total = _binary_counts(probs, truth)
    return 100.0 - 100.0 * wrong / total


def average_precision(scores, truth) -> float:
    """Non-interpolated AP over the ranking by descending score.

    Equal scores are ranked by ascending sample index.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    t = np.asarray(truth).reshape(-1) == 1
    if s.shape != t.shape:
        raise ValueError("scores and truth differ in length")
    n_pos = int(t.sum())
    if n_pos == 0:
        raise UndefinedAP("no positive samples")
    order = np.argsort(-s, kind="stable")
    hits = t[order]
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, n_pos + 1) / ranks
    return float(precision.sum() / n_pos)


@dataclass
class MeanAP:
    mean: float | None
    per_class: list[float | None]
    undefined: int = 0


def mean_average_precision(scores, truth) -> MeanAP:
    """Mean of per-class APs; classes without positives are excluded and counted."""
    S = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    T = np.atleast_2d(np.asarray(truth))
    if S.shape != T.shape:
        raise ValueError("scores and truth differ in shape")
    per: list[float | None] = []
    for c in range(S.shape[1]):
        try:
            per.append(average_precision(S[:, c], T[:, c]))
        except UndefinedAP:
            per.append(None)
    valid = [a for a in per if a is not None]
    mean = float(np.mean(valid)) if valid else None
    return MeanAP(mean, per, len(per) - len(valid))


def point_localization_correct(point, boxes: Sequence, tolerance: float = DEFAULT_TOLERANCE) -> bool:
    """True when ``point`` = (row, col) is inside some box grown by ``tolerance``.

    Boxes are (row_min, col_min, row_max, col_max) in pixels; edges count as
    inside.
    """
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    r, c = point
    for box in boxes:
        r0, c0, r1, c1 = box
        if not (r1 > r0 and c1 > c0):
            raise ValueError(f"box {box} has no area")
        if r0 - tolerance <= r <= r1 + tolerance and c0 - tolerance <= c <= c1 + tolerance:
            return True
    return False


@dataclass
class PredictionRecord:
    scores: np.ndarray
    truth: np.ndarray
    points: dict[int, tuple[float, float]] = field(default_factory=dict)
    boxes: dict[int, list[tuple[float, float, float, float]]] = field(default_factory=dict)


def localization_accuracy(records: Sequence[PredictionRecord], tolerance: float = DEFAULT_TOLERANCE):
    """Per-class and overall fraction of correct point predictions.

    Only (record, class) pairs whose class is present in ``truth`` and that
    carry a predicted point are scored.
    """
    hits: dict[int, list[bool]] = {}
    for rec in records:
        for cls, point in rec.points.items():
            if rec.truth[cls] != 1:
                continue
            hits.setdefault(cls, []).append(point_localization_correct(point, rec.boxes.get(cls, []), tolerance))
    per_class = {c: float(np.mean(v)) for c, v in sorted(hits.items())}
    flat = [h for v in hits.values() for h in v]
    overall = float(np.mean(flat)) if flat else None
    return overall, per_class


def evaluation_report(records: Sequence[PredictionRecord], tolerance: float = DEFAULT_TOLERANCE) -> dict:
    if not records:
        raise EmptyEvaluation("no predictions to evaluate")
    S = np.stack([np.asarray(r.scores, dtype=np.float64) for r in records])
    T = np.stack([np.asarray(r.truth) for r in records])
    m = mean_average_precision(S, T)
    wrong, total = _binary_counts(S, T)
    loc, loc_per = localization_accuracy(records, tolerance)
    return {
        "n_samples": len(records),
        "n_classes": int(S.shape[1]),
        "per_class_ap": m.per_class,
        "mean_ap": m.mean,
        "undefined_ap_classes": m.undefined,
        "error_percent": 100.0 * wrong / total,
        "accuracy_percent": 100.0 - 100.0 * wrong / total,
        "localization_accuracy": loc,
        "localization_per_class": {str(k): v for k, v in loc_per.items()},
        "tolerance": tolerance,
    }
