"""Evaluation across observation ratios.

A trained classifier is scored on the first i-th fraction of every test
sequence for i = 1..n_segments; the area-under-curve summary is defined
as the arithmetic mean of those per-ratio accuracies (in percent). The
report also carries per-expert selection counts from the full-observation
pass: each sample selects exactly one expert per bank per expert-carrying
layer, so the counts sum to samples x banks summed over layers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, make_partial, pad_partial_batch
from .model import Network

__all__ = [
    "EvalReport",
    "REPORT_SCHEMA",
    "auc_of",
    "evaluate_model",
    "predictions_at_ratio",
    "report_to_json",
    "report_to_tsv",
]

REPORT_SCHEMA = "eval-report/v1"


@dataclass
class EvalReport:
    ratios: list[float]
    accuracies: list[float]
    auc: float
    histogram: dict[str, int] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.ratios) != len(self.accuracies):
            raise ValueError("one accuracy per ratio required")
        if any(not 0.0 <= a <= 100.0 for a in self.accuracies):
            raise ValueError(f"accuracies must lie in [0, 100], got {self.accuracies}")


def auc_of(accuracies) -> float:
    """Arithmetic mean of the per-ratio accuracies."""
    if len(accuracies) == 0:
        raise ValueError("need at least one per-ratio accuracy")
    return float(np.mean(accuracies))


def _chunks(samples, batch_size):
    for start in range(0, len(samples), batch_size):
        yield samples[start : start + batch_size]


def predictions_at_ratio(
    model: Network, samples, i: int, n_segments: int, length: int, batch_size: int = 64
):
    """Predicted labels over ``samples`` observed up to segment i. Fixed order."""
    preds = []
    records_by_layer: dict[str, list] = {}
    for chunk in _chunks(samples, batch_size):
        partials = [make_partial(s, i, n_segments) for s in chunk]
        x = pad_partial_batch(partials, length)
        logits, records = model.forward(x, mode="eval")
        preds.append(np.argmax(logits.data, axis=1))
        for layer, recs in records.items():
            records_by_layer.setdefault(layer, []).extend(recs)
    return np.concatenate(preds), records_by_layer


def _selection_histogram(model: Network, records_by_layer: dict) -> dict[str, int]:
    counts: dict[str, int] = {}
    for module in model.expert_modules:
        for eid in module.expert_ids():
            counts[eid] = 0
    for layer, recs in records_by_layer.items():
        for r in recs:
            counts[f"{layer}.bank{r.bank_index}.expert{r.selected}"] += 1
    return counts


def evaluate_model(
    model: Network,
    dataset: Dataset,
    split: str = "test",
    batch_size: int = 64,
    metadata: dict | None = None,
) -> EvalReport:
    samples = getattr(dataset, split, None)
    if not isinstance(samples, list) or not samples:
        raise ValueError(f"dataset split {split!r} is empty or unknown")
    labels = np.array([s.label for s in samples])
    n = dataset.n_segments
    ratios, accuracies = [], []
    histogram: dict[str, int] = {}
    for i in range(1, n + 1):
        preds, records_by_layer = predictions_at_ratio(
            model, samples, i, n, dataset.length, batch_size
        )
        ratios.append(i / n)
        accuracies.append(100.0 * float(np.mean(preds == labels)))
        if i == n:
            histogram = _selection_histogram(model, records_by_layer)
    meta = {"split": split, "n_samples": len(samples)}
    if metadata:
        meta.update(metadata)
    return EvalReport(
        ratios=ratios,
        accuracies=accuracies,
        auc=auc_of(accuracies),
        histogram=histogram,
        metadata=meta,
    )


def report_to_tsv(report: EvalReport) -> str:
    lines = [f"# schema: {REPORT_SCHEMA}"]
    for key in sorted(report.metadata):
        lines.append(f"# {key}: {report.metadata[key]}")
    lines.append("ratio\taccuracy")
    for ratio, acc in zip(report.ratios, report.accuracies):
        lines.append(f"{ratio:.4f}\t{acc:.4f}")
    lines.append(f"auc\t{report.auc:.4f}")
    if report.histogram:
        lines.append("expert\tselections")
        for eid in sorted(report.histogram):
            lines.append(f"{eid}\t{report.histogram[eid]}")
    return "\n".join(lines) + "\n"


def report_to_json(report: EvalReport) -> str:
    payload = {
        "schema": REPORT_SCHEMA,
        "ratios": report.ratios,
        "accuracies": report.accuracies,
        "auc": report.auc,
        "histogram": report.histogram,
        "metadata": report.metadata,
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"