"""Confusion-matrix metrics, macro averages and one-vs-rest ROC curves."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .catalog import DEFAULT_CATALOG, OTHER, AnatomicalCatalog
from .errors import PreconditionError


@dataclass
class ConfusionMatrix:
    """Rows are true labels, columns predicted; ``labels`` gives the order."""

    counts: np.ndarray
    labels: list

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp(self):
        return np.diag(self.counts).astype(np.int64)

    def fp(self):
        return self.counts.sum(axis=0) - self.tp()

    def fn(self):
        return self.counts.sum(axis=1) - self.tp()

    def tn(self):
        return self.total - self.tp() - self.fp() - self.fn()


def confusion(predicted, truth, catalog: AnatomicalCatalog = DEFAULT_CATALOG) -> ConfusionMatrix:
    """Count matrix over the catalog labels followed by Other."""
    predicted, truth = list(predicted), list(truth)
    if len(predicted) != len(truth):
        raise PreconditionError(f"length mismatch: {len(predicted)} predictions, {len(truth)} labels")
    if not truth:
        raise PreconditionError("no items to evaluate")
    labels = catalog.indices + [OTHER]
    pos = {label: i for i, label in enumerate(labels)}
    counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for p, t in zip(predicted, truth):
        if p not in pos or t not in pos:
            raise PreconditionError(f"label not in catalog: {p if p not in pos else t}")
        counts[pos[t], pos[p]] += 1
    return ConfusionMatrix(counts, labels)


def _ratio(num, den, flags, name):
    if den == 0:
        flags.append(name)
        return 0.0
    return float(num / den)


@dataclass
class ClassMetrics:
    label: int
    support: int
    precision: float
    recall: float
    specificity: float
    f1: float
    accuracy_literal: float   # TP / N
    accuracy: float           # (TP + TN) / N
    balanced_auc: float       # (recall + specificity) / 2
    predicted: int = 0
    flags: list = field(default_factory=list)
    tp: int = 0


@dataclass
class MetricsReport:
    classes: list
    total: int
    macro_f1: float = 0.0
    macro_auc: float = 0.0
    overall_accuracy: float = 0.0
    mean_recall: float = 0.0
    mean_precision: float = 0.0
    mean_specificity: float = 0.0
    flags: list = field(default_factory=list)

    def by_label(self, label) -> ClassMetrics:
        return next(c for c in self.classes if c.label == label)


def per_class_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Per-class rates; a zero denominator yields 0 and a flag naming the rate."""
    tp, fp, fn, tn = cm.tp(), cm.fp(), cm.fn(), cm.tn()
    n = cm.total
    classes = []
    for i, label in enumerate(cm.labels):
        flags = []
        precision = _ratio(tp[i], tp[i] + fp[i], flags, "precision")
        recall = _ratio(tp[i], tp[i] + fn[i], flags, "recall")
        specificity = _ratio(tn[i], tn[i] + fp[i], flags, "specificity")
        f1 = _ratio(2 * recall * precision, recall + precision, flags, "f1")
        classes.append(ClassMetrics(
            label=label,
            support=int(tp[i] + fn[i]),
            precision=precision,
            recall=recall,
            specificity=specificity,
            f1=f1,
            accuracy_literal=_ratio(tp[i], n, flags, "accuracy"),
            accuracy=_ratio(tp[i] + tn[i], n, flags, "accuracy"),
            balanced_auc=(recall + specificity) / 2,
            predicted=int(tp[i] + fp[i]),
            flags=flags,
            tp=int(tp[i]),
        ))
    return macro_average(MetricsReport(classes, n))


def macro_average(report: MetricsReport) -> MetricsReport:
    """Fill macro F1 / macro AUC / overall accuracy in ``report``.

    Classes with no true items are left out of the means. Macro F1 and AUC
    combine the mean recall, precision and specificity; overall accuracy is the
    per-class TP / N summed over all classes, i.e. the fraction correct.
    """
    active = [c for c in report.classes if c.support > 0]
    flags = []
    if len(active) == 1:
        flags.append("single-class")
    if not active:
        flags.append("no-classes")
        report.flags = flags
        return report
    r = float(np.mean([c.recall for c in active]))
    p = float(np.mean([c.precision for c in active]))
    s = float(np.mean([c.specificity for c in active]))
    report.mean_recall, report.mean_precision, report.mean_specificity = r, p, s
    report.macro_f1 = _ratio(2 * r * p, r + p, flags, "macro_f1")
    report.macro_auc = (r + s) / 2
    # the sum of TP_i / N over classes, computed as one division so that a
    # perfect run gives exactly 1
    report.overall_accuracy = _ratio(sum(c.tp for c in report.classes), report.total, flags, "accuracy")
    report.flags = flags
    return report


def evaluate(predicted, truth, catalog: AnatomicalCatalog = DEFAULT_CATALOG) -> MetricsReport:
    return per_class_metrics(confusion(predicted, truth, catalog))


# ---------------------------------------------------------------------- ROC


@dataclass
class RocCurve:
    label: int
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    area: float
    defined: bool = True


def roc_curve(scores, positives, label=None) -> RocCurve:
    """One-vs-rest ROC. ``scores`` higher = more positive; ``positives`` bool mask.

    The threshold sweeps every distinct score (predict positive when
    score >= threshold), from +inf down.
    """
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return RocCurve(label, np.array([np.inf]), np.array([0.0]), np.array([0.0]), float("nan"), False)
    thresholds = np.concatenate([[np.inf], np.unique(scores)[::-1]])
    tpr = np.array([(scores[pos] >= t).sum() / n_pos for t in thresholds])
    fpr = np.array([(scores[~pos] >= t).sum() / n_neg for t in thresholds])
    area = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(label, thresholds, fpr, tpr, area)


def roc_curves(per_class_scores: dict, truth) -> dict:
    """``per_class_scores[label]`` = score per item (e.g. negative median distance)."""
    truth = np.asarray(truth)
    return {label: roc_curve(s, truth == label, label) for label, s in per_class_scores.items()}


# -------------------------------------------------------------------- output


def format_report(report: MetricsReport, catalog: AnatomicalCatalog = DEFAULT_CATALOG,
                  rocs: dict = None) -> str:
    lines = [
        f"items={report.total}",
        f"macro_f1={report.macro_f1!r}",
        f"macro_auc={report.macro_auc!r}",
        f"overall_accuracy={report.overall_accuracy!r}",
        f"mean_recall={report.mean_recall!r}",
        f"mean_precision={report.mean_precision!r}",
        f"mean_specificity={report.mean_specificity!r}",
        f"flags={';'.join(report.flags)}",
    ]
    if rocs:
        areas = [r.area for r in rocs.values() if r.defined]
        lines.append(f"macro_roc_area={float(np.mean(areas)) if areas else float('nan')!r}")
    lines.append("class,support,precision,recall,specificity,f1,accuracy_literal,accuracy,"
                 "balanced_auc,roc_area,flags")
    for c in report.classes:
        if c.support == 0 and c.predicted == 0:
            continue
        roc = rocs.get(c.label) if rocs else None
        area = repr(roc.area) if roc is not None and roc.defined else "nan"
        lines.append(",".join([
            catalog.name(c.label), str(c.support), repr(c.precision), repr(c.recall),
            repr(c.specificity), repr(c.f1), repr(c.accuracy_literal), repr(c.accuracy),
            repr(c.balanced_auc), area, ";".join(c.flags)]))
    return "\n".join(lines) + "\n"


def write_roc_points(path, rocs: dict, catalog: AnatomicalCatalog = DEFAULT_CATALOG):
    lines = ["#class,threshold,fpr,tpr"]
    for label, roc in rocs.items():
        if not roc.defined:
            continue
        for t, f, r in zip(roc.thresholds, roc.fpr, roc.tpr):
            lines.append(f"{catalog.name(label)},{float(t)!r},{float(f)!r},{float(r)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
