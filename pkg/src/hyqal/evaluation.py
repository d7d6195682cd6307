"""Confusion-matrix metrics, exact ROC/AUC, and report files.

Precision, recall and F1 come in two flavours: ``*_pos`` treats class 1 as
the positive class, ``*_macro`` averages the per-class values over both
classes.  On a balanced test set macro recall equals accuracy, which is the
convention of the published comparison table.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

METRIC_COLUMNS = (
    "accuracy", "auc",
    "f1_macro", "precision_macro", "recall_macro",
    "f1_pos", "precision_pos", "recall_pos",
    "sensitivity", "specificity",
)
RADAR_AXES = ("accuracy", "auc", "f1_macro", "precision_macro", "recall_macro", "sensitivity", "specificity")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")
        if self.total == 0:
            raise ValueError("confusion matrix is empty")

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def as_dict(self):
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


@dataclass
class MetricsReport:
    confusion: ConfusionMatrix
    accuracy: float
    auc: float
    f1_macro: float
    precision_macro: float
    recall_macro: float
    f1_pos: float
    precision_pos: float
    recall_pos: float
    sensitivity: float
    specificity: float
    roc_points: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    # Table-style aliases
    @property
    def f1(self):
        return self.f1_macro

    @property
    def precision(self):
        return self.precision_macro

    @property
    def recall(self):
        return self.recall_macro

    def row(self):
        return [getattr(self, c) for c in METRIC_COLUMNS]

    def to_dict(self):
        d = {c: getattr(self, c) for c in METRIC_COLUMNS}
        d["confusion"] = self.confusion.as_dict()
        d["flags"] = list(self.flags)
        return d


def _binary(a, name):
    a = np.asarray(a)
    if a.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{name} must contain only 0 and 1")
    return a.astype(np.int64)


def confusion(labels, predictions) -> ConfusionMatrix:
    y = _binary(labels, "labels")
    p = _binary(predictions, "predictions")
    if len(y) != len(p):
        raise ValueError(f"length mismatch: {len(y)} labels vs {len(p)} predictions")
    if len(y) == 0:
        raise ValueError("confusion of an empty set")
    return ConfusionMatrix(
        tp=int(np.sum((y == 1) & (p == 1))),
        fp=int(np.sum((y == 0) & (p == 1))),
        tn=int(np.sum((y == 0) & (p == 0))),
        fn=int(np.sum((y == 1) & (p == 0))),
    )


def _ratio(num, den, flag, flags):
    if den == 0:
        flags.append(flag)
        return 0.0
    return num / den


def _f1(p, r):
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def metrics(cm: ConfusionMatrix, auc=0.0, roc_points=None) -> MetricsReport:
    """All threshold metrics of ``cm``; zero denominators give 0 and a flag."""
    flags = []
    tp, fp, tn, fn = cm.tp, cm.fp, cm.tn, cm.fn
    sens = _ratio(tp, tp + fn, "sensitivity_undefined", flags)
    spec = _ratio(tn, tn + fp, "specificity_undefined", flags)
    prec_pos = _ratio(tp, tp + fp, "precision_pos_undefined", flags)
    prec_neg = _ratio(tn, tn + fn, "precision_neg_undefined", flags)
    f1_pos = _f1(prec_pos, sens)
    f1_neg = _f1(prec_neg, spec)
    return MetricsReport(
        confusion=cm,
        accuracy=(tp + tn) / cm.total,
        auc=auc,
        f1_macro=(f1_pos + f1_neg) / 2,
        precision_macro=(prec_pos + prec_neg) / 2,
        recall_macro=(sens + spec) / 2,
        f1_pos=f1_pos,
        precision_pos=prec_pos,
        recall_pos=sens,
        sensitivity=sens,
        specificity=spec,
        roc_points=list(roc_points or []),
        flags=flags,
    )


def roc_auc(labels, scores):
    """Exact ROC over every distinct score and its trapezoidal AUC.

    Tied scores move along the diagonal of one step, which credits ties with
    one half, so the result equals the Mann-Whitney statistic.
    """
    y = _binary(labels, "labels")
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {len(y)} labels vs {len(s)} scores")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined when only one class is present")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    tpr = np.r_[0, tps] / n_pos
    fpr = np.r_[0, fps] / n_neg
    # integer trapezoid sum avoids rounding drift
    area2 = np.sum((fps[1:] - fps[:-1]) * (tps[1:] + tps[:-1])) + fps[0] * tps[0]
    auc = float(area2) / (2.0 * n_pos * n_neg)
    return auc, [(float(a), float(b)) for a, b in zip(fpr, tpr)]


def evaluate(labels, scores, threshold=0.5) -> MetricsReport:
    """Report for positive-class probabilities ``scores``; predictions are ``scores >= threshold``."""
    scores = np.asarray(scores, dtype=np.float64)
    cm = confusion(labels, (scores >= threshold).astype(np.int64))
    auc, pts = roc_auc(labels, scores)
    return metrics(cm, auc, pts)


def _fmt(v):
    return f"{v:.4f}"


def metrics_csv(reports: dict, config_hash="") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "config_hash", "flags", *METRIC_COLUMNS])
    for name, r in reports.items():
        w.writerow([name, config_hash, ";".join(r.flags), *(_fmt(v) for v in r.row())])
    return buf.getvalue()


def emit_reports(reports: dict, out_dir, config_hash=""):
    """Write metrics.csv, metrics.json, roc.csv, confusion.json and radar.json.

    ``reports`` maps model name to MetricsReport; file order follows it.
    """
    if not reports:
        raise ValueError("emit_reports needs at least one report")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(metrics_csv(reports, config_hash))

        full = {"config_hash": config_hash, "columns": list(METRIC_COLUMNS),
                "models": {n: r.to_dict() for n, r in reports.items()}}
        (out / "metrics.json").write_text(json.dumps(full, indent=1) + "\n")

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "config_hash", "fpr", "tpr"])
        for name, r in reports.items():
            for fpr, tpr in r.roc_points:
                w.writerow([name, config_hash, _fmt(fpr), _fmt(tpr)])
        (out / "roc.csv").write_text(buf.getvalue())

        conf = {"config_hash": config_hash,
                "models": {n: {**r.confusion.as_dict(), "flags": list(r.flags)} for n, r in reports.items()}}
        (out / "confusion.json").write_text(json.dumps(conf, indent=1) + "\n")

        radar = {"config_hash": config_hash, "axes": list(RADAR_AXES),
                 "models": {n: [getattr(r, a) for a in RADAR_AXES] for n, r in reports.items()}}
        (out / "radar.json").write_text(json.dumps(radar, indent=1) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write reports: {exc.strerror}", str(out)) from None
    return [out / n for n in ("metrics.csv", "metrics.json", "roc.csv", "confusion.json", "radar.json")]
