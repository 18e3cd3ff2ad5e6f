"""Batch classification over labeled query sets and accuracy reporting."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NoLabels
from .model import MixtureHyperparams, ModelState, classify_batch
from .store import QuerySet


@dataclass
class EvalReport:
    overall_accuracy: float
    per_class_accuracy: list[float | None]
    confusion: np.ndarray  # (N, N) counts, rows = true class
    config: dict = field(default_factory=dict)


def evaluate(
    state: ModelState,
    queries: QuerySet,
    hp: MixtureHyperparams,
    config_echo: dict | None = None,
) -> EvalReport:
    """Classify every query and report aggregate, per-class, and confusion counts.

    Read-only on the model; the result is order-invariant in the queries.
    """
    if queries.labels is None:
        raise NoLabels("evaluation needs labeled queries")
    n = state.num_classes
    _, pred = classify_batch(state, queries.embeddings, hp)
    confusion = np.zeros((n, n), dtype=np.int64)
    np.add.at(confusion, (queries.labels, pred), 1)
    row_totals = confusion.sum(axis=1)
    per_class = [
        float(confusion[k, k] / row_totals[k]) if row_totals[k] else None
        for k in range(n)
    ]
    overall = float(np.trace(confusion) / confusion.sum())
    return EvalReport(
        overall_accuracy=overall,
        per_class_accuracy=per_class,
        confusion=confusion,
        config=dict(config_echo or {}),
    )


def report_to_json(report: EvalReport) -> str:
    payload = {
        "overall_accuracy": report.overall_accuracy,
        "per_class_accuracy": report.per_class_accuracy,
        "confusion": report.confusion.tolist(),
        "config": report.config,
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def report_from_json(text: str) -> EvalReport:
    payload = json.loads(text)
    return EvalReport(
        overall_accuracy=payload["overall_accuracy"],
        per_class_accuracy=payload["per_class_accuracy"],
        confusion=np.asarray(payload["confusion"], dtype=np.int64),
        config=payload.get("config", {}),
    )


_MD_COLUMNS = ("dataset", "variant", "adapter", "shots", "alpha", "beta")


def markdown_table(reports: list[EvalReport]) -> str:
    """One row per report, columns from the config echo plus accuracy."""
    lines = [
        "| " + " | ".join(_MD_COLUMNS + ("accuracy",)) + " |",
        "|" + "---|" * (len(_MD_COLUMNS) + 1),
    ]
    for report in reports:
        cells = [str(report.config.get(col, "-")) for col in _MD_COLUMNS]
        cells.append(f"{report.overall_accuracy:.4f}")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
