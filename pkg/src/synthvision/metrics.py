"""Confusion matrix, classification report and split evaluation."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Callable, Sequence

import numpy as np

from . import data as D
from . import trainer
from .errors import DataError


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    classes: tuple
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def supports(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\predicted", *self.classes])
        for name, row in zip(self.classes, self.counts):
            w.writerow([name, *map(int, row)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"classes": list(self.classes), "counts": self.counts.tolist()}


def confusion(true_labels: Sequence, predicted_labels: Sequence, classes: Sequence) -> ConfusionMatrix:
    classes = tuple(classes)
    if len(true_labels) != len(predicted_labels):
        raise DataError(f"{len(true_labels)} true labels but {len(predicted_labels)} predictions")
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(true_labels, predicted_labels):
        for label in (t, p):
            if label not in index:
                raise DataError(f"unknown label {label!r}; expected one of {list(classes)}")
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(classes, counts)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    zero_division: tuple = ()


@dataclass(frozen=True)
class ClassificationReport:
    classes: tuple
    per_class: dict
    accuracy: float
    macro_avg: dict
    weighted_avg: dict
    total_support: int
    decimals: int = 2
    confusion: list = field(default_factory=list)

    @property
    def zero_division_flags(self) -> list[tuple[str, str]]:
        return [(c, m) for c in self.classes for m in self.per_class[c].zero_division]

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "per_class": {c: {"precision": m.precision, "recall": m.recall, "f1": m.f1, "support": m.support,
                              "zero_division": list(m.zero_division)} for c, m in self.per_class.items()},
            "accuracy": self.accuracy,
            "macro_avg": dict(self.macro_avg),
            "weighted_avg": dict(self.weighted_avg),
            "total_support": self.total_support,
            "decimals": self.decimals,
            "confusion": self.confusion,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ClassificationReport":
        try:
            classes = tuple(d["classes"])
            per_class = {c: ClassMetrics(float(m["precision"]), float(m["recall"]), float(m["f1"]),
                                         int(m["support"]), tuple(m.get("zero_division", ())))
                         for c, m in ((c, d["per_class"][c]) for c in classes)}
            return cls(classes, per_class, float(d["accuracy"]), dict(d["macro_avg"]), dict(d["weighted_avg"]),
                       int(d["total_support"]), int(d.get("decimals", 2)), list(d.get("confusion", [])))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"not a classification report: {exc}") from exc

    def format_text(self, decimals: int | None = None) -> str:
        return format_report(self, self.decimals if decimals is None else decimals)


def _ratio(num: float, den: float) -> tuple[float, bool]:
    return (num / den, False) if den else (0.0, True)


def report(cm: ConfusionMatrix, decimals: int = 2) -> ClassificationReport:
    """Per-class precision/recall/F1 plus accuracy and macro/weighted averages.

    Empty denominators give 0.0 and are listed in ``zero_division``.
    """
    counts = np.asarray(cm.counts, dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        raise DataError("confusion matrix is empty; nothing to report")
    rows, cols = counts.sum(axis=1), counts.sum(axis=0)
    per_class = {}
    for i, name in enumerate(cm.classes):
        tp = int(counts[i, i])
        precision, p_flag = _ratio(tp, int(cols[i]))
        recall, r_flag = _ratio(tp, int(rows[i]))
        f1, f_flag = _ratio(2 * precision * recall, precision + recall)
        flags = tuple(m for m, hit in (("precision", p_flag), ("recall", r_flag), ("f1", f_flag)) if hit)
        per_class[name] = ClassMetrics(precision, recall, f1, int(rows[i]), flags)
    metrics = ("precision", "recall", "f1")
    k = len(cm.classes)
    macro = {m: sum(getattr(per_class[c], m) for c in cm.classes) / k for m in metrics}
    weighted = {m: sum(getattr(per_class[c], m) * per_class[c].support for c in cm.classes) / total
                for m in metrics}
    accuracy = int(np.trace(counts)) / total
    return ClassificationReport(tuple(cm.classes), per_class, accuracy, macro, weighted, total, decimals,
                                counts.tolist())


def round_half_up(value: float, decimals: int) -> str:
    return str(Decimal(repr(float(value))).quantize(Decimal(1).scaleb(-decimals), rounding=ROUND_HALF_UP))


def format_report(rep: ClassificationReport, decimals: int = 2) -> str:
    """Aligned text table: per-class rows, then accuracy, macro avg and weighted avg."""
    width = max(len("weighted avg"), *(len(c) for c in rep.classes))

    def row(name, values, support):
        cells = "".join(f" {v:>9}" for v in values)
        return f"{name:>{width}} {cells} {support:>9}"

    def fmt(v):
        return round_half_up(v, decimals)

    lines = [row("", ["precision", "recall", "f1-score"], "support"), ""]
    for c in rep.classes:
        m = rep.per_class[c]
        lines.append(row(c, [fmt(m.precision), fmt(m.recall), fmt(m.f1)], m.support))
    lines.append("")
    lines.append(row("accuracy", ["", "", fmt(rep.accuracy)], rep.total_support))
    for name, avg in (("macro avg", rep.macro_avg), ("weighted avg", rep.weighted_avg)):
        lines.append(row(name, [fmt(avg["precision"]), fmt(avg["recall"]), fmt(avg["f1"])], rep.total_support))
    flags = rep.zero_division_flags
    if flags:
        lines.append("")
        lines.append("zero division (reported as 0): " + ", ".join(f"{c} {m}" for c, m in flags))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class Prediction:
    path: str
    true: str
    predicted: str
    logits: tuple


@dataclass
class Evaluation:
    confusion: ConfusionMatrix
    report: ClassificationReport
    predictions: list

    def predictions_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["path", "true", "predicted", *(f"logit_{c}" for c in self.confusion.classes)])
        for p in self.predictions:
            w.writerow([p.path, p.true, p.predicted, *(repr(float(v)) for v in p.logits)])
        return buf.getvalue()


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=1)


def evaluate(params, manifest: D.DatasetManifest, split: str = "test", batch_size: int = 64,
             loader: Callable | None = None, predict_fn: Callable | None = None,
             classes: Sequence[str] = D.LABELS) -> Evaluation:
    """Eval-mode predictions over one split, then confusion matrix and report.

    ``predict_fn(images) -> logits`` replaces the model forward when given.
    """
    records = manifest.split(split)
    if not records:
        raise DataError(f"split {split!r} is empty")
    if predict_fn is None:
        size = params.config.image_size
        images, _ = trainer.load_split(manifest, split, size, params.dtype, loader)
        logits = trainer.predict_logits(params, images, batch_size)
    else:
        size = getattr(getattr(params, "config", None), "image_size", None)
        load = loader or (lambda rec: D.load_image(manifest.resolve(rec), size or 32))
        images = np.stack([load(r) for r in records])
        logits = np.asarray(predict_fn(images))
    pred = argmax_lowest(logits)
    predicted = [classes[i] for i in pred]
    truth = [r.label for r in records]
    cm = confusion(truth, predicted, classes)
    preds = [Prediction(r.path, t, p, tuple(float(v) for v in row))
             for r, t, p, row in zip(records, truth, predicted, logits)]
    return Evaluation(cm, report(cm), preds)
