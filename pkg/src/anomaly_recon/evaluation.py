"""Rectified, body-masked, multi-label ROC evaluation of score volumes.

Thresholds are 1000 quantiles of the observed in-mask score distribution.
A voxel above threshold counts as a true positive for class ``c`` when it
carries the class-``c`` label; it only counts as a false positive when it
carries *no* abnormality label at all (the multi-label rectification).
False-positive rates are therefore shared across classes while each class
has its own true-positive rate.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .phantom import ABNORMALITY_CLASSES
from .scoring import ScoreMap
from .volume import LabelVolume


@dataclass
class OperatingPoint:
    threshold: float
    sensitivity: float
    specificity: float
    precision: float
    f1: float


@dataclass
class ClassRoc:
    tpr: np.ndarray
    auc: float
    n_positive: int
    operating_point: OperatingPoint


@dataclass
class RocResult:
    thresholds: np.ndarray  # ascending, len == n_thresholds
    fpr: np.ndarray  # shared across classes (rectified negatives)
    auc: float  # any-abnormality ROC
    classes: dict[str, ClassRoc] = field(default_factory=dict)
    absent: list[str] = field(default_factory=list)


def _counts_above(sorted_vals: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Number of values strictly above each threshold."""
    return sorted_vals.size - np.searchsorted(sorted_vals, thresholds, side="right")


def _auc_from_curve(fpr: np.ndarray, tpr: np.ndarray) -> float:
    """Trapezoidal AUC along the threshold-ordered polyline.

    Inputs are indexed by ascending threshold (rates non-increasing); the
    curve is completed with the (0,0) and (1,1) endpoints.
    """
    f = np.concatenate([[0.0], fpr[::-1], [1.0]])
    t = np.concatenate([[0.0], tpr[::-1], [1.0]])
    return float(np.trapezoid(t, f))


def _rate_curves(scores: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    if scores.size == 0:
        return np.zeros(thresholds.size)
    return _counts_above(np.sort(scores), thresholds) / scores.size


def evaluate_detection(
    score: ScoreMap | np.ndarray,
    labels: LabelVolume,
    mask: np.ndarray,
    n_thresholds: int = 1000,
    class_names=ABNORMALITY_CLASSES,
) -> RocResult:
    """Class-wise rectified ROC over the voxels inside ``mask``.

    Classes with no positive voxel are reported in ``absent`` rather than
    scored.  Operating points maximize Youden's J (TPR - FPR).
    """
    scores = score.scores if isinstance(score, ScoreMap) else np.asarray(score)
    mask = mask.astype(bool)
    if scores.shape != mask.shape:
        raise InvalidArgumentError(f"score shape {scores.shape} != mask shape {mask.shape}")
    labels.validate(volume_shape=scores.shape)
    any_abn = labels.any_of(class_names) & mask
    neg = mask & ~labels.any_of(class_names)
    n_pos_any = int(any_abn.sum())
    n_neg = int(neg.sum())
    if n_pos_any == 0 or n_neg == 0:
        raise InvalidArgumentError(
            f"need at least one positive and one negative voxel in the mask "
            f"(got {n_pos_any} positives, {n_neg} negatives)"
        )

    in_mask = scores[mask]
    thresholds = np.quantile(in_mask, np.linspace(0.0, 1.0, n_thresholds))
    neg_sorted = np.sort(scores[neg])
    fp = _counts_above(neg_sorted, thresholds)
    fpr = fp / n_neg

    result = RocResult(
        thresholds=thresholds,
        fpr=fpr,
        auc=_auc_from_curve(fpr, _rate_curves(scores[any_abn], thresholds)),
    )
    for name in class_names:
        cls_mask = labels.masks.get(name)
        pos = (cls_mask.astype(bool) & mask) if cls_mask is not None else np.zeros_like(mask)
        n_pos = int(pos.sum())
        if n_pos == 0:
            result.absent.append(name)
            continue
        pos_sorted = np.sort(scores[pos])
        tp = _counts_above(pos_sorted, thresholds)
        tpr = tp / n_pos
        youden = int(np.argmax(tpr - fpr))
        tp_k, fp_k = int(tp[youden]), int(fp[youden])
        precision = tp_k / (tp_k + fp_k) if (tp_k + fp_k) > 0 else 0.0
        recall = tpr[youden]
        f1 = 2.0 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
        result.classes[name] = ClassRoc(
            tpr=tpr,
            auc=_auc_from_curve(fpr, tpr),
            n_positive=n_pos,
            operating_point=OperatingPoint(
                threshold=float(thresholds[youden]),
                sensitivity=float(recall),
                specificity=float(1.0 - fpr[youden]),
                precision=float(precision),
                f1=float(f1),
            ),
        )
    return result


def aggregate_class_metrics(results: list[RocResult]) -> dict:
    """Per-class mean/std of AUC and operating-point metrics across volumes."""
    out = {}
    names = sorted({name for r in results for name in r.classes})
    for name in names:
        rows = [r.classes[name] for r in results if name in r.classes]
        op = [c.operating_point for c in rows]

        def stats(vals):
            arr = np.asarray(vals, dtype=np.float64)
            return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}

        out[name] = {
            "roc_auc": stats([c.auc for c in rows]),
            "sensitivity": stats([o.sensitivity for o in op]),
            "specificity": stats([o.specificity for o in op]),
            "precision": stats([o.precision for o in op]),
            "f1": stats([o.f1 for o in op]),
        }
    return out
