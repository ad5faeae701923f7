"""Slot- and day-level anomaly verdicts from fitted usage models.

Scoring refuses to run when a model and a feature series were produced
under different standardizer/PCA pipelines: silently scoring in the wrong
feature space is the worst failure mode, so both carry a fingerprint that
must match.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from . import gmm as gmm_mod
from . import hmm as hmm_mod
from .features import FeatureSeries

GMM_THRESHOLD = 0.6
HMM_STEP_THRESHOLD = -10.0

FLAG_GMM_OUTLIER = "gmm_outlier"
FLAG_HMM_LOW_LOGLIK = "hmm_low_loglik"
FLAG_RARE_TRANSITION = "rare_transition"

SLOT_CSV_COLUMNS = ("slot_start", "gmm_resp", "hmm_ll", "mahalanobis", "flags")


class PipelineMismatchError(ValueError):
    """Model and series come from different feature pipelines."""


def _check_fingerprint(model_fp: str | None, series: FeatureSeries, what: str) -> None:
    if model_fp != series.fingerprint:
        raise PipelineMismatchError(
            f"{what} fingerprint {model_fp!r} does not match series fingerprint "
            f"{series.fingerprint!r}; refusing to score in the wrong feature space"
        )


def _series_date(series: FeatureSeries) -> str:
    return datetime.fromtimestamp(int(series.slot_starts[0]), timezone.utc).date().isoformat()


@dataclass(frozen=True)
class SlotVerdict:
    slot_start: int
    gmm_max_responsibility: float | None = None
    hmm_step_loglik: float | None = None
    mahalanobis: float | None = None
    assigned_state: int | None = None
    flags: frozenset[str] = frozenset()


@dataclass
class DayVerdict:
    date: str
    ap: str
    slots: list[SlotVerdict]
    gmm_total: float | None = None
    hmm_total: float | None = None
    gmm_abnormal: bool | None = None
    hmm_abnormal: bool | None = None
    transition_flags: tuple[hmm_mod.TransitionFlag, ...] = ()

    def flagged_slots(self, flag: str) -> list[int]:
        return [s.slot_start for s in self.slots if flag in s.flags]


def score_day_gmm(
    model: gmm_mod.GmmModel,
    series: FeatureSeries,
    threshold: float = GMM_THRESHOLD,
    day_threshold: float | None = None,
) -> DayVerdict:
    """Flag slots whose maximum posterior responsibility falls below ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("gmm threshold must lie in (0, 1)")
    _check_fingerprint(model.fingerprint, series, "GMM model")
    resp = gmm_mod.responsibility_matrix(model, series.values)
    max_resp = resp.max(axis=1)
    total = gmm_mod.loglik(model, series.values)

    slots = [
        SlotVerdict(
            slot_start=int(t),
            gmm_max_responsibility=float(r),
            flags=frozenset({FLAG_GMM_OUTLIER}) if r < threshold else frozenset(),
        )
        for t, r in zip(series.slot_starts, max_resp)
    ]
    return DayVerdict(
        date=_series_date(series),
        ap=series.ap,
        slots=slots,
        gmm_total=total,
        gmm_abnormal=None if day_threshold is None else bool(total < day_threshold),
    )


def score_day_hmm(
    model: hmm_mod.HmmModel,
    series: FeatureSeries,
    step_threshold: float = HMM_STEP_THRESHOLD,
    diagnostics: bool = True,
    day_threshold: float | None = None,
    rarity_alpha: float = 0.05,
    rarity_floor: float = 0.02,
) -> DayVerdict:
    """Flag slots whose forward log-likelihood increment falls below ``step_threshold``.

    With diagnostics on, each slot also carries its Viterbi state and the
    Mahalanobis distance to it, and destination slots of statistically
    rare decoded transitions get a rare-transition flag.
    """
    _check_fingerprint(model.fingerprint, series, "HMM model")
    total, increments = hmm_mod.forward_loglik(model, series.values)

    assigned = maha = None
    rare_steps: set[int] = set()
    transition_flags: tuple[hmm_mod.TransitionFlag, ...] = ()
    if diagnostics:
        vit = hmm_mod.viterbi(model, series.values)
        assigned = vit.path
        maha = hmm_mod.state_divergence(model, series.values, vit.path)
        if len(series) >= 2:
            found = hmm_mod.transition_rarity(
                model, vit.path, alpha=rarity_alpha, p_floor=rarity_floor
            )
            transition_flags = tuple(found)
            # Slot flags only for transitions actually taken at a rare
            # probability; under-represented pairs have no single slot to
            # blame and stay day-level diagnostics.
            for flag in found:
                if flag.reason == "rare_taken":
                    rare_steps.update(t + 1 for t in flag.steps)

    slots = []
    for t in range(len(series)):
        flags = set()
        if increments[t] < step_threshold:
            flags.add(FLAG_HMM_LOW_LOGLIK)
        if t in rare_steps:
            flags.add(FLAG_RARE_TRANSITION)
        slots.append(
            SlotVerdict(
                slot_start=int(series.slot_starts[t]),
                hmm_step_loglik=float(increments[t]),
                mahalanobis=None if maha is None else float(maha[t]),
                assigned_state=None if assigned is None else int(assigned[t]),
                flags=frozenset(flags),
            )
        )
    return DayVerdict(
        date=_series_date(series),
        ap=series.ap,
        slots=slots,
        hmm_total=float(total),
        hmm_abnormal=None if day_threshold is None else bool(total < day_threshold),
        transition_flags=transition_flags,
    )


def merge_day_verdicts(gmm_verdict: DayVerdict, hmm_verdict: DayVerdict) -> DayVerdict:
    """Combine per-model verdicts over the same slot grid into one."""
    g_slots = {s.slot_start: s for s in gmm_verdict.slots}
    h_slots = {s.slot_start: s for s in hmm_verdict.slots}
    if set(g_slots) != set(h_slots):
        raise ValueError("verdicts cover different slot grids")
    merged = []
    for t in sorted(g_slots):
        g, h = g_slots[t], h_slots[t]
        merged.append(
            SlotVerdict(
                slot_start=t,
                gmm_max_responsibility=g.gmm_max_responsibility,
                hmm_step_loglik=h.hmm_step_loglik,
                mahalanobis=h.mahalanobis,
                assigned_state=h.assigned_state,
                flags=g.flags | h.flags,
            )
        )
    return DayVerdict(
        date=gmm_verdict.date,
        ap=gmm_verdict.ap,
        slots=merged,
        gmm_total=gmm_verdict.gmm_total,
        hmm_total=hmm_verdict.hmm_total,
        gmm_abnormal=gmm_verdict.gmm_abnormal,
        hmm_abnormal=hmm_verdict.hmm_abnormal,
        transition_flags=hmm_verdict.transition_flags,
    )


@dataclass
class ComparisonTable:
    """Per-dataset total log-likelihood of both models (train rows first)."""

    rows: list[tuple[str, float, float]]
    columns: tuple[str, str] = ("GMM", "HMM")

    def to_markdown(self) -> str:
        lines = [
            "| Test data LLVs | " + " | ".join(self.columns) + " |",
            "|---|" + "---|" * len(self.columns),
        ]
        for label, g, h in self.rows:
            lines.append(f"| {label} | {g:.1f} | {h:.1f} |")
        return "\n".join(lines) + "\n"

    def to_csv_rows(self) -> list[list[str]]:
        out = [["dataset", "gmm_loglik", "hmm_loglik"]]
        for label, g, h in self.rows:
            out.append([label, f"{g:.6f}", f"{h:.6f}"])
        return out


def compare_models(
    gmm_model: gmm_mod.GmmModel,
    hmm_model: hmm_mod.HmmModel,
    train_series: Sequence[FeatureSeries],
    test_series: Mapping[str, Sequence[FeatureSeries]],
) -> ComparisonTable:
    """Total log-likelihood of each model on the train data and each test group."""

    def totals(group: Sequence[FeatureSeries]) -> tuple[float, float]:
        g_total = 0.0
        h_total = 0.0
        for series in group:
            _check_fingerprint(gmm_model.fingerprint, series, "GMM model")
            _check_fingerprint(hmm_model.fingerprint, series, "HMM model")
            g_total += gmm_mod.loglik(gmm_model, series.values)
            h_total += hmm_mod.forward_loglik(hmm_model, series.values)[0]
        return g_total, h_total

    rows = [("The same train data", *totals(train_series))]
    for label, group in test_series.items():
        rows.append((f"Test data ({label})", *totals(group)))
    return ComparisonTable(rows=rows)


def day_verdict_to_json(verdict: DayVerdict) -> dict:
    return {
        "date": verdict.date,
        "ap": verdict.ap,
        "gmm_total": verdict.gmm_total,
        "hmm_total": verdict.hmm_total,
        "gmm_abnormal": verdict.gmm_abnormal,
        "hmm_abnormal": verdict.hmm_abnormal,
        "transition_flags": [
            {
                "source": f.source,
                "target": f.target,
                "reason": f.reason,
                "observed": f.observed,
                "outgoing": f.outgoing,
                "probability": f.probability,
                "tail": f.tail,
                "steps": list(f.steps),
            }
            for f in verdict.transition_flags
        ],
        "slots": [
            {
                "slot_start": s.slot_start,
                "gmm_resp": s.gmm_max_responsibility,
                "hmm_ll": s.hmm_step_loglik,
                "mahalanobis": s.mahalanobis,
                "assigned_state": s.assigned_state,
                "flags": sorted(s.flags),
            }
            for s in verdict.slots
        ],
    }


def write_slot_csv(verdicts: Iterable[DayVerdict], dest: str | Path | IO) -> None:
    """Flat per-slot CSV across days, ready for plotting."""

    def fmt(value: float | None, spec: str) -> str:
        return "" if value is None else format(value, spec)

    def _write(fh) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SLOT_CSV_COLUMNS)
        for verdict in verdicts:
            for s in verdict.slots:
                writer.writerow(
                    [
                        str(s.slot_start),
                        fmt(s.gmm_max_responsibility, ".6f"),
                        fmt(s.hmm_step_loglik, ".6g"),
                        fmt(s.mahalanobis, ".6g"),
                        "|".join(sorted(s.flags)),
                    ]
                )

    if hasattr(dest, "write"):
        _write(dest)
    else:
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            _write(fh)
