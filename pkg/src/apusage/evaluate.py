"""Detection metrics over labeled slots and report table renderers.

Joins detector verdicts with ground-truth slot labels, computes the
confusion-based metric set (FPR, TNR, TPR, accuracy, F1), per-pattern
detection rates, and renders the Markdown/CSV report tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .detect import FLAG_GMM_OUTLIER, FLAG_HMM_LOW_LOGLIK, DayVerdict
from .simulate import KIND_LABELS, LABEL_NORMAL, SCENARIO_KINDS, CorpusManifest

_FLAG_BY_SOURCE = {"gmm": FLAG_GMM_OUTLIER, "hmm": FLAG_HMM_LOW_LOGLIK}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )


@dataclass(frozen=True)
class MetricSet:
    """Detection ratios; a ratio with a zero denominator is None, not 0."""

    fpr: float | None
    tnr: float | None
    tpr: float | None
    accuracy: float | None
    f1: float | None


def _flagged_slots(verdicts: Iterable[DayVerdict], flag_source: str) -> dict[int, bool]:
    try:
        flag = _FLAG_BY_SOURCE[flag_source]
    except KeyError:
        raise ValueError(f"unknown flag source {flag_source!r}; expected 'gmm' or 'hmm'") from None
    out: dict[int, bool] = {}
    for verdict in verdicts:
        for slot in verdict.slots:
            out[slot.slot_start] = flag in slot.flags
    return out


def confusion(
    verdicts: Iterable[DayVerdict] | DayVerdict,
    ground_truth: Mapping[int, str],
    flag_source: str,
) -> ConfusionCounts:
    """Join flags with labels over identical slot grids."""
    if isinstance(verdicts, DayVerdict):
        verdicts = [verdicts]
    flags = _flagged_slots(verdicts, flag_source)
    if set(flags) != set(ground_truth):
        raise ValueError("verdict slots and ground-truth slots differ; grids must be identical")
    tp = fp = tn = fn = 0
    for slot, flagged in flags.items():
        anomalous = ground_truth[slot] != LABEL_NORMAL
        if flagged and anomalous:
            tp += 1
        elif flagged:
            fp += 1
        elif anomalous:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def metrics(counts: ConfusionCounts) -> MetricSet:
    if counts.total == 0:
        raise ValueError("cannot compute metrics over zero slots")

    def ratio(num: int, den: int) -> float | None:
        return None if den == 0 else num / den

    return MetricSet(
        fpr=ratio(counts.fp, counts.fp + counts.tn),
        tnr=ratio(counts.tn, counts.fp + counts.tn),
        tpr=ratio(counts.tp, counts.tp + counts.fn),
        accuracy=(counts.tp + counts.tn) / counts.total,
        f1=ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn),
    )


@dataclass(frozen=True)
class PatternRate:
    kind: str
    detected: int
    total: int

    @property
    def rate(self) -> float | None:
        return None if self.total == 0 else self.detected / self.total

    def formatted(self) -> str:
        return format_rate(self.detected, self.total)


def format_rate(detected: int, total: int) -> str:
    """Render ``x% (d/t)`` with the percentage truncated to one decimal."""
    if total == 0:
        return f"n/a ({detected}/{total})"
    pct = 100.0 * detected / total
    truncated = math.floor(pct * 10 + 1e-9) / 10
    text = f"{int(truncated)}%" if truncated == int(truncated) else f"{truncated:.1f}%"
    return f"{text} ({detected}/{total})"


def per_pattern_rates(
    verdicts: Mapping[str, DayVerdict],
    manifest: CorpusManifest,
    flag_source: str,
) -> list[PatternRate]:
    """Detected/total anomalous slots per scenario kind, over days present in ``verdicts``."""
    flag = _FLAG_BY_SOURCE.get(flag_source)
    if flag is None:
        raise ValueError(f"unknown flag source {flag_source!r}")
    detected: dict[str, int] = {}
    totals: dict[str, int] = {}
    for day in manifest.days:
        verdict = verdicts.get(day.name)
        if verdict is None:
            continue
        flagged = {s.slot_start for s in verdict.slots if flag in s.flags}
        grid = {s.slot_start for s in verdict.slots}
        for slot, label in day.labels:
            if label == LABEL_NORMAL or slot not in grid:
                continue
            totals[label] = totals.get(label, 0) + 1
            if slot in flagged:
                detected[label] = detected.get(label, 0) + 1
    kinds = [k for k in SCENARIO_KINDS if k in totals]
    return [PatternRate(kind=k, detected=detected.get(k, 0), total=totals[k]) for k in kinds]


@dataclass(frozen=True)
class DetectionRow:
    dataset: str
    threshold: float
    counts: ConfusionCounts
    metric_set: MetricSet


def _pct(value: float | None) -> str:
    if value is None:
        return "n/a"
    text = f"{100.0 * value:.2f}".rstrip("0").rstrip(".")
    return f"{text}%"


def render_detection_markdown(model_label: str, rows: Sequence[DetectionRow]) -> str:
    lines = [
        f"### {model_label} anomaly detection",
        "",
        "| Data - Threshold | FPR | TNR | TPR | ACC | F1 |",
        "|---|---|---|---|---|---|",
    ]
    for row in rows:
        m = row.metric_set
        label = f"{row.dataset} (threshold {row.threshold:g})"
        lines.append(
            f"| {label} | {_pct(m.fpr)} | {_pct(m.tnr)} | {_pct(m.tpr)} | "
            f"{_pct(m.accuracy)} | {_pct(m.f1)} |"
        )
    return "\n".join(lines) + "\n"


def render_detection_csv_rows(rows: Sequence[DetectionRow]) -> list[list[str]]:
    def cell(value: float | None) -> str:
        return "" if value is None else f"{value:.6f}"

    out = [["dataset", "threshold", "tp", "fp", "tn", "fn", "fpr", "tnr", "tpr", "accuracy", "f1"]]
    for row in rows:
        c, m = row.counts, row.metric_set
        out.append(
            [
                row.dataset,
                f"{row.threshold:g}",
                str(c.tp),
                str(c.fp),
                str(c.tn),
                str(c.fn),
                cell(m.fpr),
                cell(m.tnr),
                cell(m.tpr),
                cell(m.accuracy),
                cell(m.f1),
            ]
        )
    return out


def render_pattern_markdown(model_rows: Sequence[tuple[str, Sequence[PatternRate]]]) -> str:
    """Table with one column per anomaly kind and one row per model."""
    kinds: list[str] = []
    for _, rates in model_rows:
        for rate in rates:
            if rate.kind not in kinds:
                kinds.append(rate.kind)
    kinds = [k for k in SCENARIO_KINDS if k in kinds]
    header = "| Model | " + " | ".join(KIND_LABELS.get(k, k) for k in kinds) + " |"
    lines = ["### Detection rate per anomalous pattern", "", header, "|---|" + "---|" * len(kinds)]
    for label, rates in model_rows:
        by_kind = {r.kind: r for r in rates}
        cells = [by_kind[k].formatted() if k in by_kind else "n/a" for k in kinds]
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def render_pattern_csv_rows(model_rows: Sequence[tuple[str, Sequence[PatternRate]]]) -> list[list[str]]:
    out = [["model", "kind", "detected", "total", "rate"]]
    for label, rates in model_rows:
        for rate in rates:
            cell = "" if rate.rate is None else f"{rate.rate:.6f}"
            out.append([label, rate.kind, str(rate.detected), str(rate.total), cell])
    return out
