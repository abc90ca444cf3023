"""Per-class overlap and volume metrics for label maps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def classes(self):
        return len(self.tp)

    @property
    def v_pred(self):
        return self.tp + self.fp

    @property
    def v_gt(self):
        return self.tp + self.fn


def _labels(x):
    return np.asarray(getattr(x, "data", x))


def confusion(pred, gt, classes):
    """Exact per-class TP/FP/FN/TN voxel counts."""
    p, g = _labels(pred), _labels(gt)
    if p.shape != g.shape:
        raise ValueError(f"dims differ: prediction {p.shape} vs reference {g.shape}")
    for name, a in (("prediction", p), ("reference", g)):
        if a.size and (a.min() < 0 or a.max() >= classes):
            raise ValueError(f"{name} labels outside [0, {classes - 1}]")
    joint = np.bincount(p.ravel().astype(np.int64) * classes + g.ravel(), minlength=classes * classes)
    m = joint.reshape(classes, classes)  # rows: predicted, cols: reference
    tp = np.diag(m).copy()
    fp = m.sum(axis=1) - tp
    fn = m.sum(axis=0) - tp
    tn = p.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def dice(counts, c):
    """2TP / (2TP + FN + FP); a class absent from both maps scores 1."""
    tp, fp, fn = int(counts.tp[c]), int(counts.fp[c]), int(counts.fn[c])
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def avd(counts, c, percent=False, literal=False):
    """Relative volume error |Vp - Vg| / Vg.

    ``literal=True`` evaluates |Vp ∩ Vg| / Vg instead, reading the
    intersection as the true-positive volume. ``percent`` scales by 100.
    Vg = 0 gives ``inf`` (or 0 when Vp is also 0).
    """
    vp, vg = int(counts.v_pred[c]), int(counts.v_gt[c])
    if vg == 0:
        value = 0.0 if vp == 0 else math.inf
    elif literal:
        value = int(counts.tp[c]) / vg
    else:
        value = abs(vp - vg) / vg
    return value * 100 if percent else value


def macro(values, subset=None, exclude_background=True):
    """Unweighted mean of a per-class metric over ``subset``.

    Without an explicit subset all classes except index 0 are averaged.
    """
    values = np.asarray(values, dtype=np.float64)
    if subset is None:
        subset = range(1 if exclude_background else 0, len(values))
    subset = list(subset)
    if not subset:
        raise ValueError("macro average over an empty class subset")
    return float(np.mean(values[subset]))


def per_class(pred, gt, classes, percent=False):
    counts = confusion(pred, gt, classes)
    d = np.array([dice(counts, c) for c in range(classes)])
    a = np.array([avd(counts, c, percent) for c in range(classes)])
    return counts, d, a


def macro_dice(pred, gt, classes, subset=None):
    _, d, _ = per_class(pred, gt, classes)
    return macro(d, subset)


def write_report(path, dice_values, avd_values, region_names=None, subset=None):
    """Tab-separated report: region_name, class_index, dice, avd; then a macro row."""
    n = len(dice_values)
    names = region_names or {}
    finite = [c for c in (subset if subset is not None else range(1, n)) if math.isfinite(avd_values[c])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["region_name", "class_index", "dice", "avd"])
        for c in range(n):
            w.writerow([names.get(c, f"class_{c}"), c, f"{dice_values[c]:.6f}", f"{avd_values[c]:.6f}"])
        macro_avd = macro(avd_values, finite) if finite else float("nan")
        w.writerow(["macro", "", f"{macro(dice_values, subset):.6f}", f"{macro_avd:.6f}"])
