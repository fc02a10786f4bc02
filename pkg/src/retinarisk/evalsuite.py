"""Clinical evaluation metrics, curves and the DeLong test.

Conventions: confusion rows are true classes, columns predictions. Binary
scores count as positive when ``score >= threshold``. Ratios that come out
as 0/0 are reported as 0 and their name is added to ``flags``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats


class MetricError(ValueError):
    pass


def _ratio(num: float, den: float, flags: set | None, name: str) -> float:
    if den == 0:
        if flags is not None:
            flags.add(name)
        return 0.0
    return num / den


def _as_labels(y, name: str = "labels") -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise MetricError(f"{name} must be one-dimensional")
    if y.size and not np.all(np.equal(np.mod(y, 1), 0)):
        raise MetricError(f"{name} must be integers")
    return y.astype(int)


def _binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _as_labels(np.asarray(labels).ravel())
    if s.size != y.size:
        raise MetricError(f"{s.size} scores for {y.size} labels")
    if not np.all(np.isin(y, (0, 1))):
        raise MetricError("binary labels must be 0/1")
    return s, y


# ---------------------------------------------------------------- confusion

def confusion(y_true, y_pred, num_classes: int) -> np.ndarray:
    t, p = _as_labels(y_true, "true labels"), _as_labels(y_pred, "predicted labels")
    if t.size != p.size:
        raise MetricError("label arrays differ in length")
    for arr in (t, p):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise MetricError(f"labels must lie in 0..{num_classes - 1}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def _check_cm(cm) -> np.ndarray:
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] < 2:
        raise MetricError("confusion matrix must be square with at least 2 classes")
    if np.any(cm < 0):
        raise MetricError("confusion counts must be non-negative")
    if cm.sum() == 0:
        raise MetricError("empty confusion matrix")
    return cm


def _weighted_kappa(cm: np.ndarray, w: np.ndarray, flags: set | None, name: str) -> float:
    n = cm.sum()
    expected = np.outer(cm.sum(axis=1), cm.sum(axis=0)) / n
    den = float((w * expected).sum())
    if den == 0:
        if flags is not None:
            flags.add(name)
        return 0.0
    return 1.0 - float((w * cm).sum()) / den


def qwk(cm, flags: set | None = None) -> float:
    """Quadratic weighted kappa, weights (i-j)^2 / (C-1)^2."""
    cm = _check_cm(cm)
    c = cm.shape[0]
    i, j = np.indices((c, c))
    return _weighted_kappa(cm, (i - j) ** 2 / (c - 1) ** 2, flags, "qwk")


def cohen_kappa(cm, flags: set | None = None) -> float:
    cm = _check_cm(cm)
    return _weighted_kappa(cm, 1.0 - np.eye(cm.shape[0]), flags, "cohen_kappa")


def mcc(cm, flags: set | None = None) -> float:
    """Multi-class Matthews coefficient; equals the usual binary formula at C=2."""
    cm = _check_cm(cm)
    s = cm.sum()
    c = np.trace(cm)
    t, p = cm.sum(axis=1), cm.sum(axis=0)
    num = c * s - float(t @ p)
    den = math.sqrt((s * s - float(p @ p)) * (s * s - float(t @ t)))
    return _ratio(num, den, flags, "mcc")


def classification_metrics(cm, flags: set | None = None) -> dict[str, float]:
    """Accuracy and rate metrics.

    With two classes, class 1 is the positive class. With more, sensitivity,
    specificity, PPV, NPV and F1 are one-vs-rest per class, then averaged.
    """
    cm = _check_cm(cm)
    flags = set() if flags is None else flags
    n = cm.sum()
    c = cm.shape[0]
    tp = np.diag(cm)
    fn = cm.sum(axis=1) - tp
    fp = cm.sum(axis=0) - tp
    tn = n - tp - fn - fp

    def per_class(num, den, name):
        return np.array([_ratio(num[k], den[k], flags, name) for k in range(c)])

    rec = per_class(tp, tp + fn, "recall")
    prec = per_class(tp, tp + fp, "precision")
    spec = per_class(tn, tn + fp, "specificity")
    npv = per_class(tn, tn + fn, "npv")
    f1 = per_class(2 * tp, 2 * tp + fp + fn, "f1")
    pick = (lambda v: float(v[1])) if c == 2 else (lambda v: float(v.mean()))
    return {
        "accuracy": float(tp.sum() / n),
        "sensitivity": pick(rec),
        "specificity": pick(spec),
        "ppv": pick(prec),
        "npv": pick(npv),
        "f1": pick(f1),
        "macro_precision": float(prec.mean()),
        "macro_recall": float(rec.mean()),
        "mcc": mcc(cm, flags),
        "cohen_kappa": cohen_kappa(cm, flags),
    }


# ---------------------------------------------------------------- ranking

@dataclass
class RocCurve:
    auc: float
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray


def _operating_points(s: np.ndarray, y: np.ndarray):
    """TP / FP counts at every distinct threshold, highest first."""
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], s.size - 1]
    tp = np.cumsum(y_sorted)[last]
    fp = (last + 1) - tp
    return s_sorted[last], tp.astype(float), fp.astype(float)


def roc_auc(scores, labels) -> RocCurve:
    """AUC as the Mann-Whitney probability P(s+ > s-) + P(tie)/2."""
    s, y = _binary(scores, labels)
    n_pos, n_neg = int(y.sum()), int((1 - y).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("roc_auc needs both classes")
    ranks = stats.rankdata(s)
    auc = (ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    thr, tp, fp = _operating_points(s, y)
    return RocCurve(float(auc), np.r_[0.0, fp / n_neg], np.r_[0.0, tp / n_pos], np.r_[np.inf, thr])


@dataclass
class PrCurve:
    auc: float
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray


def pr_curve(scores, labels) -> PrCurve:
    """Trapezoid over operating points, anchored at (recall 0, precision 1)."""
    s, y = _binary(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("pr_auc needs at least one positive")
    thr, tp, fp = _operating_points(s, y)
    recall = np.r_[0.0, tp / n_pos]
    precision = np.r_[1.0, tp / (tp + fp)]
    area = float(np.sum(np.diff(recall) * (precision[1:] + precision[:-1]) / 2.0))
    return PrCurve(area, recall, precision, np.r_[np.inf, thr])


def pr_auc(scores, labels) -> float:
    return pr_curve(scores, labels).auc


def brier(probs, outcomes) -> float:
    p, y = _binary(probs, outcomes)
    if np.any((p < 0) | (p > 1)):
        raise MetricError("probabilities must lie in [0, 1]")
    return float(np.mean((p - y) ** 2))


def c_index(risk, times, events) -> float:
    """Harrell's C over pairs where the earlier time is an observed event."""
    r = np.asarray(risk, dtype=np.float64).ravel()
    t = np.asarray(times, dtype=np.float64).ravel()
    e = np.asarray(events).ravel().astype(bool)
    if not (r.size == t.size == e.size):
        raise MetricError("risk, times and events differ in length")
    comparable = (t[:, None] < t[None, :]) & e[:, None]
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        raise MetricError("no comparable pairs")
    diff = r[:, None] - r[None, :]
    score = np.where(diff > 0, 1.0, np.where(diff == 0, 0.5, 0.0))
    return float(score[comparable].sum() / n_pairs)


# ---------------------------------------------------------------- decisions

@dataclass(frozen=True)
class DcaPoint:
    p_t: float
    net_benefit: float
    treat_all_benefit: float
    treat_none_benefit: float = 0.0


def _check_pt(p_t: float) -> None:
    if not 0.0 < p_t < 1.0:
        raise MetricError(f"threshold probability must lie in (0, 1), got {p_t}")


def net_benefit(tp: float, fp: float, n: int, p_t: float) -> float:
    """TP/N - (FP/N) * p_t / (1 - p_t)."""
    _check_pt(p_t)
    if n <= 0:
        raise MetricError("N must be positive")
    return tp / n - (fp / n) * p_t / (1.0 - p_t)


def net_benefit_at(scores, labels, p_t: float) -> float:
    s, y = _binary(scores, labels)
    pos = s >= p_t
    return net_benefit(float(np.sum(pos & (y == 1))), float(np.sum(pos & (y == 0))), s.size, p_t)


DEFAULT_DCA_GRID = np.round(np.arange(1, 100) / 100.0, 2)


def dca_curve(scores, labels, grid: Sequence[float] | None = None) -> list[DcaPoint]:
    s, y = _binary(scores, labels)
    grid = DEFAULT_DCA_GRID if grid is None else grid
    prevalence = float(y.mean())
    out = []
    for p_t in grid:
        p_t = float(p_t)
        out.append(DcaPoint(p_t, net_benefit_at(s, y, p_t),
                            net_benefit(prevalence * s.size, (1 - prevalence) * s.size, s.size, p_t)))
    return out


def youden_threshold(scores, labels) -> tuple[float, float]:
    """Cut-point maximizing sens + spec - 1; ties go to the lower threshold."""
    s, y = _binary(scores, labels)
    n_pos, n_neg = int(y.sum()), int((1 - y).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("youden_threshold needs both classes")
    thr, tp, fp = _operating_points(s, y)
    # J scaled by n_pos * n_neg is an integer, so tied cut-points compare exactly
    scaled = tp.astype(np.int64) * n_neg - fp.astype(np.int64) * n_pos
    # thresholds are descending, so the last maximum is the lowest cut-point
    best = len(scaled) - 1 - int(np.argmax(scaled[::-1]))
    return float(thr[best]), float(scaled[best]) / (n_pos * n_neg)


# ---------------------------------------------------------------- DeLong

@dataclass
class DelongResult:
    auc_a: float
    auc_b: float
    var_a: float
    var_b: float
    cov: float
    z: float
    p: float
    flags: set = field(default_factory=set)


def _placements(s: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pos, neg = s[y == 1], s[y == 0]
    psi = (pos[:, None] > neg[None, :]) + 0.5 * (pos[:, None] == neg[None, :])
    return psi.mean(axis=1), psi.mean(axis=0)


def delong_variance(scores, labels) -> float:
    s, y = _binary(scores, labels)
    if y.sum() < 2 or (1 - y).sum() < 2:
        raise MetricError("DeLong variance needs at least two samples per class")
    v10, v01 = _placements(s, y)
    return float(np.var(v10, ddof=1) / v10.size + np.var(v01, ddof=1) / v01.size)


def delong_test(scores_a, scores_b, labels) -> DelongResult:
    sa, y = _binary(scores_a, labels)
    sb, _ = _binary(scores_b, labels)
    if y.sum() < 2 or (1 - y).sum() < 2:
        raise MetricError("DeLong test needs at least two samples per class")
    a10, a01 = _placements(sa, y)
    b10, b01 = _placements(sb, y)
    s10 = np.cov(np.vstack([a10, b10]), ddof=1)
    s01 = np.cov(np.vstack([a01, b01]), ddof=1)
    cov = s10 / a10.size + s01 / a01.size
    auc_a, auc_b = roc_auc(sa, y).auc, roc_auc(sb, y).auc
    var_diff = cov[0, 0] + cov[1, 1] - 2 * cov[0, 1]
    flags: set = set()
    if var_diff <= 1e-15 or np.array_equal(sa, sb):
        flags.add("zero_variance")
        z, p = 0.0, 1.0
    else:
        z = (auc_a - auc_b) / math.sqrt(var_diff)
        p = float(2.0 * stats.norm.sf(abs(z)))
    return DelongResult(auc_a, auc_b, float(cov[0, 0]), float(cov[1, 1]), float(cov[0, 1]), float(z), p, flags)


# ---------------------------------------------------------------- report

def binary_dr(probs: np.ndarray, grades) -> tuple[np.ndarray, np.ndarray]:
    """Referable-DR view: score = 1 - P(grade 0), label = grade >= 1."""
    probs = np.asarray(probs, dtype=np.float64)
    return np.clip(1.0 - probs[:, 0], 0.0, 1.0), (np.asarray(grades) >= 1).astype(int)


@dataclass
class MetricsReport:
    values: dict
    curves: dict
    confusion: np.ndarray
    flags: set

    def to_dict(self, include_curves: bool = False) -> dict:
        out = dict(self.values)
        out["confusion"] = self.confusion.tolist()
        out["flags"] = sorted(self.flags)
        if include_curves:
            out["curves"] = self.curves
        return out


def metrics_report(true_grades, probs, risk=None, times=None, events=None,
                   num_classes: int = 5, dca_grid: Sequence[float] | None = None) -> MetricsReport:
    """Every metric that the given columns support; the rest are ``None``."""
    y = _as_labels(np.asarray(true_grades))
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (y.size, num_classes):
        raise MetricError(f"probabilities must be [{y.size}, {num_classes}]")
    pred = probs.argmax(axis=1)
    cm = confusion(y, pred, num_classes)
    flags: set = set()
    values: dict = classification_metrics(cm, flags)
    values["qwk"] = qwk(cm, flags)
    curves: dict = {}
    score, label = binary_dr(probs, y)
    for key in ("auc_roc", "pr_auc", "brier", "youden_threshold", "youden_j", "net_benefit_0.3"):
        values[key] = None
    if label.min() != label.max():
        roc = roc_auc(score, label)
        pr = pr_curve(score, label)
        thr, j = youden_threshold(score, label)
        dca = dca_curve(score, label, dca_grid)
        values.update({"auc_roc": roc.auc, "pr_auc": pr.auc, "youden_threshold": thr, "youden_j": j,
                       "net_benefit_0.3": net_benefit_at(score, label, 0.3)})
        curves["roc"] = {"fpr": roc.fpr.tolist(), "tpr": roc.tpr.tolist(),
                         "threshold": [float(t) for t in roc.thresholds]}
        curves["pr"] = {"recall": pr.recall.tolist(), "precision": pr.precision.tolist()}
        curves["dca"] = [[d.p_t, d.net_benefit, d.treat_all_benefit] for d in dca]
    else:
        flags.add("single_class_binary")
    values["brier"] = brier(score, label)
    values["c_index"] = None
    if risk is not None and times is not None and events is not None:
        r, t, e = (np.asarray(a, dtype=np.float64) for a in (risk, times, events))
        ok = np.isfinite(r) & np.isfinite(t) & (e >= 0)
        try:
            values["c_index"] = c_index(r[ok], t[ok], e[ok])
        except MetricError:
            flags.add("c_index")
    values["n"] = int(y.size)
    return MetricsReport(values, curves, cm, flags)
