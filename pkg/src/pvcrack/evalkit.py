"""Classification metrics, cross-validation aggregation, and budget gating.

Macro (unweighted) averaging is the headline convention because the source
data is imbalanced; per-class values are always reported so any other
convention can be recomputed from the same report.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MetricsError(Exception):
    """Invalid metric inputs (empty matrix, mismatched shapes)."""


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray      # rows: true class, columns: predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: tuple        # per class
    recall: tuple
    f1: tuple
    macro_precision: float
    macro_recall: float
    macro_f1: float
    sample_count: int
    confusion: ConfusionMatrix


def confusion_matrix(preds, truth, num_classes: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape:
        raise MetricsError(f"length mismatch: {preds.shape} vs {truth.shape}")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    if preds.size:
        if preds.min() < 0 or preds.max() >= num_classes:
            raise MetricsError("prediction class out of range")
        if truth.min() < 0 or truth.max() >= num_classes:
            raise MetricsError("truth class out of range")
        np.add.at(counts, (truth, preds), 1)
    return ConfusionMatrix(counts)


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy, per-class precision/recall/F1, and macro averages.

    Zero-denominator cases are defined as 0.
    """
    counts = cm.counts
    total = counts.sum()
    if total == 0:
        raise MetricsError("confusion matrix is empty")
    tp = np.diag(counts).astype(np.float64)
    pred_totals = counts.sum(axis=0).astype(np.float64)
    true_totals = counts.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, pred_totals, out=np.zeros_like(tp), where=pred_totals > 0)
    recall = np.divide(tp, true_totals, out=np.zeros_like(tp), where=true_totals > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(tp), where=pr > 0)
    return MetricsReport(
        accuracy=float(tp.sum() / total),
        precision=tuple(precision),
        recall=tuple(recall),
        f1=tuple(f1),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        sample_count=int(total),
        confusion=cm,
    )


_CV_FIELDS = ("accuracy", "macro_precision", "macro_recall", "macro_f1")


@dataclass(frozen=True)
class CVSummary:
    folds: int
    mean: dict
    std: dict


def aggregate_cv(reports: list) -> CVSummary:
    """Unweighted mean and sample standard deviation across fold reports."""
    if not reports:
        raise MetricsError("no reports to aggregate")
    n_classes = {r.confusion.num_classes for r in reports}
    if len(n_classes) != 1:
        raise MetricsError(f"mixed class counts across folds: {sorted(n_classes)}")
    mean, std = {}, {}
    for name in _CV_FIELDS:
        values = np.array([getattr(r, name) for r in reports])
        mean[name] = float(values.mean())
        std[name] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return CVSummary(len(reports), mean, std)


@dataclass(frozen=True)
class BudgetProfile:
    environment: str
    max_blob_bytes: int | None = None
    max_arena_bytes: int | None = None
    required_scheme: str | None = None

    def __post_init__(self):
        for limit in (self.max_blob_bytes, self.max_arena_bytes):
            if limit is not None and limit <= 0:
                raise ValueError("budget limits must be positive")


# A: offline workstation, no limits. B: edge box, int8 under 8 MB.
# C: microcontroller, int8 under 100 KB with a 256 KB activation arena.
PROFILES = {
    "A": BudgetProfile("A"),
    "B": BudgetProfile("B", max_blob_bytes=8 * 1024 * 1024, required_scheme="int8"),
    "C": BudgetProfile("C", max_blob_bytes=100 * 1024, max_arena_bytes=256 * 1024,
                       required_scheme="int8"),
}


@dataclass(frozen=True)
class Candidate:
    name: str
    scheme: str                     # "fp32" | "fp16" | "int8"
    blob_bytes: int
    arena_bytes: int
    mean_accuracy: float
    p50_latency_ms: float | None = None


@dataclass(frozen=True)
class GateResult:
    candidate: Candidate
    passed: bool
    failures: tuple
    rank: int | None    # 1-based among passers, None if failed


@dataclass(frozen=True)
class SelectionReport:
    profile: BudgetProfile
    results: tuple
    selected: str | None
    status: str         # "ok" | "empty selection"


def budget_gate(candidates: list, profile: BudgetProfile) -> SelectionReport:
    """Apply profile limits, rank survivors by accuracy, size, then latency."""
    if not candidates:
        raise ValueError("candidates list is empty")
    checked = []
    for cand in candidates:
        failures = []
        if profile.max_blob_bytes is not None and cand.blob_bytes > profile.max_blob_bytes:
            failures.append(
                f"blob {cand.blob_bytes} B exceeds {profile.max_blob_bytes} B")
        if profile.max_arena_bytes is not None and cand.arena_bytes > profile.max_arena_bytes:
            failures.append(
                f"arena {cand.arena_bytes} B exceeds {profile.max_arena_bytes} B")
        if profile.required_scheme is not None and cand.scheme != profile.required_scheme:
            failures.append(
                f"scheme {cand.scheme} is not required {profile.required_scheme}")
        checked.append((cand, tuple(failures)))

    passers = [cand for cand, failures in checked if not failures]
    passers.sort(key=lambda c: (
        -c.mean_accuracy, c.blob_bytes,
        c.p50_latency_ms if c.p50_latency_ms is not None else float("inf"),
        c.name))
    ranks = {cand.name: i + 1 for i, cand in enumerate(passers)}

    results = tuple(
        GateResult(cand, not failures, failures, ranks.get(cand.name))
        for cand, failures in checked
    )
    selected = passers[0].name if passers else None
    return SelectionReport(profile, results, selected,
                           "ok" if passers else "empty selection")


def write_metrics_report(path, report: MetricsReport) -> None:
    lines = [
        f"accuracy={report.accuracy:.6f}",
        f"macro_precision={report.macro_precision:.6f}",
        f"macro_recall={report.macro_recall:.6f}",
        f"macro_f1={report.macro_f1:.6f}",
        f"sample_count={report.sample_count}",
    ]
    for c in range(report.confusion.num_classes):
        lines.append(f"precision_{c}={report.precision[c]:.6f}")
        lines.append(f"recall_{c}={report.recall[c]:.6f}")
        lines.append(f"f1_{c}={report.f1[c]:.6f}")
    for c, row in enumerate(report.confusion.counts):
        lines.append(f"confusion_{c}=" + ",".join(str(int(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", "utf-8")


def write_selection_report(path, report: SelectionReport) -> None:
    """One key=value record per candidate, blank-line separated."""
    blocks = [
        "\n".join([
            f"profile={report.profile.environment}",
            f"status={report.status}",
            f"selected={report.selected or '-'}",
        ])
    ]
    for res in report.results:
        cand = res.candidate
        blocks.append("\n".join([
            f"name={cand.name}",
            f"scheme={cand.scheme}",
            f"blob_bytes={cand.blob_bytes}",
            f"arena_bytes={cand.arena_bytes}",
            f"mean_accuracy={cand.mean_accuracy:.6f}",
            f"p50_latency_ms={'' if cand.p50_latency_ms is None else format(cand.p50_latency_ms, '.3f')}",
            f"passed={'yes' if res.passed else 'no'}",
            f"rank={'' if res.rank is None else res.rank}",
            f"failures={'; '.join(res.failures)}",
        ]))
    Path(path).write_text("\n\n".join(blocks) + "\n", "utf-8")


def render_selection_table(report: SelectionReport) -> str:
    header = f"{'rank':>4}  {'name':<24} {'scheme':<6} {'blob':>10} {'arena':>10} {'acc':>7}  verdict"
    rows = [header, "-" * len(header)]
    ordered = sorted(report.results,
                     key=lambda r: (r.rank is None, r.rank or 0, r.candidate.name))
    for res in ordered:
        cand = res.candidate
        verdict = "pass" if res.passed else "FAIL: " + "; ".join(res.failures)
        rows.append(
            f"{res.rank or '-':>4}  {cand.name:<24.24} {cand.scheme:<6} "
            f"{cand.blob_bytes:>10} {cand.arena_bytes:>10} "
            f"{cand.mean_accuracy:>7.4f}  {verdict}")
    return "\n".join(rows)
