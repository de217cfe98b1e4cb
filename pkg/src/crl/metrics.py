"""Class-balanced evaluation (mean sensitivity), imbalance ratios and gain tables."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .datagen import AttributeSchema
from .errors import ContractError, EvaluationError


def per_class_recall(predictions, labels, cardinality: int) -> np.ndarray:
    """Recall of every class; NaN where the class never occurs in ``labels``."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    support = np.bincount(labels, minlength=cardinality).astype(np.float64)
    hits = np.bincount(labels[predictions == labels], minlength=cardinality).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(support > 0, hits / support, np.nan)


def mean_sensitivity(predictions, labels, schema: AttributeSchema, j: int) -> float:
    """Mean per-class recall of attribute j, in percent. Absent classes are skipped."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.ndim == 2:
        predictions, labels = predictions[:, j], labels[:, j]
    if len(labels) == 0:
        raise EvaluationError("no test samples")
    if predictions.shape != labels.shape:
        raise ContractError("predictions and labels are not aligned")
    rec = per_class_recall(predictions, labels, schema.cardinalities[j])
    return 100.0 * float(np.nanmean(rec))


def imbalance_ratio_value(counts) -> int:
    counts = np.asarray(counts)
    nz = counts[counts > 0]
    if len(nz) == 0:
        raise EvaluationError("imbalance ratio needs at least one non-empty class")
    # round half up: 1:42.5 reads as 1:43
    return int(math.floor(nz.max() / nz.min() + 0.5))


def imbalance_ratio(counts) -> str:
    return f"1:{imbalance_ratio_value(counts)}"


@dataclass
class AttributeReport:
    recalls: list  # None for classes absent from the test set
    mean_sensitivity: float
    imbalance_ratio: str
    ratio_value: int
    excluded_classes: list = field(default_factory=list)


@dataclass
class EvalReport:
    attributes: list
    mean_sensitivity: float  # average over attributes
    n_samples: int
    test_fingerprint: str

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        attrs = [AttributeReport(**a) for a in d["attributes"]]
        return cls(attrs, d["mean_sensitivity"], d["n_samples"], d["test_fingerprint"])

    def to_text(self) -> str:
        lines = [f"{'attr':>4}  {'ratio':>8}  {'mean sens %':>11}  recalls"]
        for j, a in enumerate(self.attributes):
            rec = " ".join("  -  " if r is None else f"{r:.3f}" for r in a.recalls)
            flag = f"  (excluded: {a.excluded_classes})" if a.excluded_classes else ""
            lines.append(f"{j:>4}  {a.imbalance_ratio:>8}  {a.mean_sensitivity:>11.2f}  {rec}{flag}")
        lines.append(f"average mean sensitivity: {self.mean_sensitivity:.2f}%  (n={self.n_samples})")
        return "\n".join(lines)


def fingerprint(labels) -> str:
    labels = np.ascontiguousarray(labels, dtype="<i8")
    return hashlib.sha256(labels.tobytes()).hexdigest()[:16]


def evaluate(predictions, labels, schema: AttributeSchema, train_counts=None) -> EvalReport:
    """Build an EvalReport. Imbalance ratios come from ``train_counts`` when given."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise EvaluationError("no test samples")
    attrs = []
    for j, card in enumerate(schema.cardinalities):
        rec = per_class_recall(predictions[:, j], labels[:, j], card)
        counts = train_counts[j] if train_counts is not None else np.bincount(labels[:, j], minlength=card)
        attrs.append(
            AttributeReport(
                recalls=[None if np.isnan(r) else float(r) for r in rec],
                mean_sensitivity=100.0 * float(np.nanmean(rec)),
                imbalance_ratio=imbalance_ratio(counts),
                ratio_value=imbalance_ratio_value(counts),
                excluded_classes=np.flatnonzero(np.isnan(rec)).tolist(),
            )
        )
    overall = float(np.mean([a.mean_sensitivity for a in attrs]))
    return EvalReport(attrs, overall, int(len(labels)), fingerprint(labels))


@dataclass(frozen=True)
class GainRow:
    attr: int
    ratio: str
    ratio_value: int
    method: str
    gain: float


def gain_table(baseline: EvalReport, candidates: dict) -> list[GainRow]:
    """Mean-sensitivity gain of every candidate over the baseline, per attribute.

    Rows are ordered by increasing imbalance ratio (then attribute, then method order).
    """
    rows = []
    for method, rep in candidates.items():
        if rep.test_fingerprint != baseline.test_fingerprint or rep.n_samples != baseline.n_samples:
            raise ContractError(f"report for {method!r} was not evaluated on the baseline's test set")
        if len(rep.attributes) != len(baseline.attributes):
            raise ContractError(f"report for {method!r} has a different attribute count")
    order = sorted(range(len(baseline.attributes)), key=lambda j: (baseline.attributes[j].ratio_value, j))
    for j in order:
        base = baseline.attributes[j]
        for method, rep in candidates.items():
            rows.append(
                GainRow(j, base.imbalance_ratio, base.ratio_value, method,
                        rep.attributes[j].mean_sensitivity - base.mean_sensitivity)
            )
    return rows


def gain_tsv(rows) -> str:
    out = ["attr\tratio\tmethod\tgain"]
    out += [f"{r.attr}\t{r.ratio}\t{r.method}\t{r.gain:.4f}" for r in rows]
    return "\n".join(out) + "\n"


def gain_text(rows) -> str:
    methods = list(dict.fromkeys(r.method for r in rows))
    attrs = list(dict.fromkeys((r.attr, r.ratio) for r in rows))
    cell = {(r.attr, r.method): r.gain for r in rows}
    width = max(10, *(len(m) for m in methods)) if methods else 10
    head = f"{'attr':>4}  {'ratio':>8}  " + "  ".join(f"{m:>{width}}" for m in methods)
    lines = [head]
    for a, ratio in attrs:
        lines.append(f"{a:>4}  {ratio:>8}  " + "  ".join(f"{cell[(a, m)]:>+{width}.2f}" for m in methods))
    return "\n".join(lines)


def report_json(report: EvalReport) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True)
