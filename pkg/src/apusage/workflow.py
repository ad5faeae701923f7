"""End-to-end orchestration: simulated corpus to features, models, verdicts, reports.

This is the path behind the ``evaluate`` and ``compare`` CLI commands and
the full-pipeline acceptance checks: load a labeled corpus, fit the
standardizer/PCA pipeline and both models on a split of normal days, score
the remaining days across threshold sweeps, and join the verdicts with
ground truth.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import detect, evaluate, gmm, hmm, plots
from .features import (
    FeaturePipeline,
    FeatureSeries,
    SlotFeatures,
    aggregate,
    build_series,
    feature_matrix,
    fit_pipeline,
)
from .ingest import parse_trace, sessionize
from .simulate import DAY_SECONDS, CorpusManifest

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    """Defaults for the whole pipeline; every stated experimental choice is a field."""

    timezone: str = "UTC"
    working_hours: bool = False
    slot_seconds: int = 900  # fixed slot length
    pca_components: int = 3
    gmm_components: int = 3
    gmm_max_iter: int = 100
    gmm_tol: float = 1e-6
    hmm_states: int = 3
    hmm_max_iter: int = 20
    hmm_tol: float = 1e-6
    hmm_init: str = "random"
    gmm_threshold: float = 0.6
    hmm_step_threshold: float = -10.0
    day_threshold: float | None = None
    gmm_sweep: tuple[float, ...] = (0.6, 0.7, 0.8)
    hmm_sweep: tuple[float, ...] = (-50.0, -20.0, -10.0)
    seed: int = 0
    train_normal_days: int = 10

    def updated(self, **overrides) -> "PipelineConfig":
        values = {k: v for k, v in overrides.items() if v is not None}
        for key in ("gmm_sweep", "hmm_sweep"):
            if key in values:
                values[key] = tuple(float(v) for v in values[key])
        return dataclasses.replace(self, **values)

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config fields in {path}: {sorted(unknown)}")
        return cls().updated(**doc)


DATASET_NORMAL = "Normal test days"
DATASET_ABNORMAL = "Anomalous test days"
DATASET_ALL = "All test days"


@dataclass
class TestDayOutcome:
    name: str
    date: str
    abnormal: bool
    labels: dict[int, str]  # restricted to the scored slot grid
    series: FeatureSeries
    gmm_verdicts: dict[float, detect.DayVerdict]
    hmm_verdicts: dict[float, detect.DayVerdict]
    merged_default: detect.DayVerdict


@dataclass
class CorpusData:
    manifest: CorpusManifest
    slots_by_day: dict[str, list[SlotFeatures]]


def load_corpus(corpus_dir: str | Path, config: PipelineConfig) -> CorpusData:
    """Parse every corpus day into per-slot feature rows."""
    corpus_dir = Path(corpus_dir)
    manifest_path = corpus_dir / "manifest.json"
    if not manifest_path.exists():
        raise ValueError(f"no manifest.json in corpus directory {corpus_dir}")
    manifest = CorpusManifest.load(manifest_path)

    slots_by_day: dict[str, list[SlotFeatures]] = {}
    for day in manifest.days:
        records, parse_issues = parse_trace(corpus_dir / day.file)
        if parse_issues:
            raise ValueError(f"corpus trace {day.file} has parse issues: {parse_issues[:3]}")
        sessions, session_issues = sessionize(records)
        if session_issues:
            raise ValueError(f"corpus trace {day.file} has session issues: {session_issues[:3]}")
        slots_by_day[day.name] = aggregate(
            sessions,
            ap=manifest.ap,
            window=(day.day_start, day.day_start + DAY_SECONDS),
            working_hours=config.working_hours,
            tz=config.timezone,
        )
    return CorpusData(manifest=manifest, slots_by_day=slots_by_day)


@dataclass
class TrainedModels:
    pipeline: FeaturePipeline
    gmm_model: gmm.GmmModel
    hmm_model: hmm.HmmModel
    train_names: list[str]


def train_models(corpus: CorpusData, config: PipelineConfig) -> TrainedModels:
    """Fit pipeline + GMM + HMM on a seeded choice of normal days."""
    normal_names = [d.name for d in corpus.manifest.normal_days()]
    if len(normal_names) < config.train_normal_days:
        raise ValueError(
            f"corpus has {len(normal_names)} normal days; need {config.train_normal_days} for training"
        )
    rng = np.random.default_rng(config.seed)
    chosen = rng.choice(len(normal_names), size=config.train_normal_days, replace=False)
    train_names = sorted(normal_names[i] for i in chosen)

    train_rows = np.concatenate(
        [feature_matrix(corpus.slots_by_day[name]) for name in train_names]
    )
    pipeline = fit_pipeline(train_rows, k=config.pca_components)
    fingerprint = pipeline.fingerprint()

    gmm_model, _ = gmm.fit_em(
        pipeline.transform(train_rows),
        m=config.gmm_components,
        seed=config.seed,
        max_iter=config.gmm_max_iter,
        tol=config.gmm_tol,
    )
    gmm_model.fingerprint = fingerprint

    sequences = [
        build_series(corpus.slots_by_day[name], pipeline).values for name in train_names
    ]
    hmm_model, _ = hmm.baum_welch(
        sequences,
        n=config.hmm_states,
        seed=config.seed,
        max_iter=config.hmm_max_iter,
        tol=config.hmm_tol,
        init=config.hmm_init,
    )
    hmm_model.fingerprint = fingerprint
    return TrainedModels(
        pipeline=pipeline, gmm_model=gmm_model, hmm_model=hmm_model, train_names=train_names
    )


@dataclass
class EvaluationReport:
    config: PipelineConfig
    manifest: CorpusManifest
    models: TrainedModels
    outcomes: list[TestDayOutcome]
    detection_rows: dict[str, list[evaluate.DetectionRow]]
    pattern_rows: list[tuple[str, list[evaluate.PatternRate]]]
    comparison: detect.ComparisonTable

    def _sweep(self, model: str) -> tuple[float, ...]:
        return self.config.gmm_sweep if model == "gmm" else self.config.hmm_sweep

    def _verdicts_at(self, model: str, threshold: float) -> dict[str, detect.DayVerdict]:
        out = {}
        for outcome in self.outcomes:
            verdicts = outcome.gmm_verdicts if model == "gmm" else outcome.hmm_verdicts
            out[outcome.name] = verdicts[threshold]
        return out

    def counts_for(self, model: str, dataset: str, threshold: float) -> evaluate.ConfusionCounts:
        total = evaluate.ConfusionCounts(0, 0, 0, 0)
        for outcome in self.outcomes:
            if dataset == DATASET_NORMAL and outcome.abnormal:
                continue
            if dataset == DATASET_ABNORMAL and not outcome.abnormal:
                continue
            verdicts = outcome.gmm_verdicts if model == "gmm" else outcome.hmm_verdicts
            total = total + evaluate.confusion(verdicts[threshold], outcome.labels, model)
        return total

    def metrics_for(self, model: str, dataset: str, threshold: float) -> evaluate.MetricSet:
        return evaluate.metrics(self.counts_for(model, dataset, threshold))

    def best_f1(self, model: str) -> tuple[float, evaluate.MetricSet]:
        best = None
        for threshold in self._sweep(model):
            m = self.metrics_for(model, DATASET_ALL, threshold)
            if m.f1 is not None and (best is None or m.f1 > best[1].f1):
                best = (threshold, m)
        if best is None:
            raise ValueError(f"no threshold with a defined F1 for {model}")
        return best

    def day_rows(self) -> list[tuple[str, str, bool, float, float]]:
        return [
            (
                o.name,
                o.date,
                o.abnormal,
                float(o.merged_default.gmm_total),
                float(o.merged_default.hmm_total),
            )
            for o in self.outcomes
        ]

    def day_level_best_accuracy(self, model: str) -> tuple[float, float]:
        """Best single day-likelihood threshold (abnormal when total < threshold)."""
        rows = self.day_rows()
        totals = np.array([r[3] if model == "gmm" else r[4] for r in rows])
        truth = np.array([r[2] for r in rows])
        order = np.sort(totals)
        candidates = [order[0] - 1.0, order[-1] + 1.0]
        candidates.extend((order[:-1] + order[1:]) / 2.0)
        best_threshold, best_acc = candidates[0], -1.0
        for threshold in candidates:
            acc = float(np.mean((totals < threshold) == truth))
            if acc > best_acc:
                best_threshold, best_acc = float(threshold), acc
        return best_threshold, best_acc

    def write_reports(self, out_dir: str | Path, figures: bool = True) -> None:
        out = Path(out_dir)
        reports = out / "reports"
        models_dir = out / "models"
        verdicts_dir = out / "verdicts"
        for sub in (reports, models_dir, verdicts_dir):
            sub.mkdir(parents=True, exist_ok=True)

        for model, label in (("gmm", "GMM"), ("hmm", "HMM")):
            rows = self.detection_rows[model]
            (reports / f"{model}_detection.md").write_text(
                evaluate.render_detection_markdown(label, rows), encoding="utf-8"
            )
            _write_csv(evaluate.render_detection_csv_rows(rows), reports / f"{model}_detection.csv")

        (reports / "pattern_rates.md").write_text(
            evaluate.render_pattern_markdown(self.pattern_rows), encoding="utf-8"
        )
        _write_csv(evaluate.render_pattern_csv_rows(self.pattern_rows), reports / "pattern_rates.csv")

        (reports / "comparison.md").write_text(self.comparison.to_markdown(), encoding="utf-8")
        _write_csv(self.comparison.to_csv_rows(), reports / "comparison.csv")

        day_rows = [["day", "date", "abnormal", "gmm_total", "hmm_total"]]
        for name, date, abnormal, g, h in self.day_rows():
            day_rows.append([name, date, str(int(abnormal)), f"{g:.6f}", f"{h:.6f}"])
        _write_csv(day_rows, reports / "day_likelihoods.csv")

        self.models.pipeline.save(models_dir / "pipeline.json")
        self.models.gmm_model.save(models_dir / "gmm.json")
        self.models.hmm_model.save(models_dir / "hmm.json")

        detect.write_slot_csv(
            [o.merged_default for o in self.outcomes], verdicts_dir / "slots.csv"
        )
        for outcome in self.outcomes:
            (verdicts_dir / f"{outcome.name}.json").write_text(
                json.dumps(detect.day_verdict_to_json(outcome.merged_default), indent=2) + "\n",
                encoding="utf-8",
            )

        if figures:
            rows = self.day_rows()
            names = [r[0] for r in rows]
            abnormal = [r[2] for r in rows]
            plots.plot_day_likelihoods(
                names,
                [r[3] for r in rows],
                abnormal,
                out / "figures" / "day_likelihoods_gmm.png",
                "GMM day log-likelihoods (test days)",
            )
            plots.plot_day_likelihoods(
                names,
                [r[4] for r in rows],
                abnormal,
                out / "figures" / "day_likelihoods_hmm.png",
                "HMM day log-likelihoods (test days)",
            )
            for outcome in self.outcomes:
                if not outcome.abnormal:
                    continue
                verdict = outcome.merged_default
                hours = [
                    (s.slot_start % DAY_SECONDS) / 3600.0 for s in verdict.slots
                ]
                values = [s.hmm_step_loglik for s in verdict.slots]
                flagged = [detect.FLAG_HMM_LOW_LOGLIK in s.flags for s in verdict.slots]
                plots.plot_step_series(
                    hours,
                    values,
                    self.config.hmm_step_threshold,
                    flagged,
                    out / "figures" / f"hmm_steps_{outcome.name}.png",
                    f"HMM step log-likelihood, {outcome.name} ({outcome.date})",
                    "step log-likelihood",
                )


def _write_csv(rows: Sequence[Sequence[str]], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerows(rows)


def _score_test_days(
    corpus: CorpusData, models: TrainedModels, config: PipelineConfig
) -> list[TestDayOutcome]:
    outcomes = []
    for day in corpus.manifest.days:
        if day.name in models.train_names:
            continue
        slots = corpus.slots_by_day[day.name]
        series = build_series(slots, models.pipeline)
        grid = set(int(t) for t in series.slot_starts)
        labels = {slot: label for slot, label in day.labels if slot in grid}

        gmm_verdicts = {
            threshold: detect.score_day_gmm(models.gmm_model, series, threshold=threshold)
            for threshold in config.gmm_sweep
        }
        hmm_verdicts = {
            threshold: detect.score_day_hmm(
                models.hmm_model, series, step_threshold=threshold, diagnostics=False
            )
            for threshold in config.hmm_sweep
        }
        merged = detect.merge_day_verdicts(
            detect.score_day_gmm(
                models.gmm_model,
                series,
                threshold=config.gmm_threshold,
                day_threshold=config.day_threshold,
            ),
            detect.score_day_hmm(
                models.hmm_model,
                series,
                step_threshold=config.hmm_step_threshold,
                diagnostics=True,
                day_threshold=config.day_threshold,
            ),
        )
        outcomes.append(
            TestDayOutcome(
                name=day.name,
                date=day.date,
                abnormal=day.abnormal,
                labels=labels,
                series=series,
                gmm_verdicts=gmm_verdicts,
                hmm_verdicts=hmm_verdicts,
                merged_default=merged,
            )
        )
    return outcomes


def evaluate_corpus(corpus_dir: str | Path, config: PipelineConfig | None = None) -> EvaluationReport:
    """Run the full pipeline over a simulated corpus and assemble the report."""
    config = config or PipelineConfig()
    corpus = load_corpus(corpus_dir, config)
    models = train_models(corpus, config)
    outcomes = _score_test_days(corpus, models, config)

    detection_rows: dict[str, list[evaluate.DetectionRow]] = {}
    report = EvaluationReport(
        config=config,
        manifest=corpus.manifest,
        models=models,
        outcomes=outcomes,
        detection_rows=detection_rows,
        pattern_rows=[],
        comparison=detect.ComparisonTable(rows=[]),
    )
    for model, sweep in (("gmm", config.gmm_sweep), ("hmm", config.hmm_sweep)):
        rows = []
        for dataset in (DATASET_NORMAL, DATASET_ABNORMAL):
            for threshold in sweep:
                counts = report.counts_for(model, dataset, threshold)
                rows.append(
                    evaluate.DetectionRow(
                        dataset=dataset,
                        threshold=threshold,
                        counts=counts,
                        metric_set=evaluate.metrics(counts),
                    )
                )
        detection_rows[model] = rows

    report.pattern_rows = [
        (
            f"GMM (threshold {config.gmm_sweep[-1]:g})",
            evaluate.per_pattern_rates(
                report._verdicts_at("gmm", config.gmm_sweep[-1]), corpus.manifest, "gmm"
            ),
        ),
        (
            f"HMM (threshold {config.hmm_sweep[-1]:g})",
            evaluate.per_pattern_rates(
                report._verdicts_at("hmm", config.hmm_sweep[-1]), corpus.manifest, "hmm"
            ),
        ),
    ]

    train_series = [
        build_series(corpus.slots_by_day[name], models.pipeline) for name in models.train_names
    ]
    test_groups = {
        "normal days": [o.series for o in outcomes if not o.abnormal],
        "abnormal days": [o.series for o in outcomes if o.abnormal],
    }
    report.comparison = detect.compare_models(
        models.gmm_model, models.hmm_model, train_series, test_groups
    )
    return report


def compare_corpus(corpus_dir: str | Path, config: PipelineConfig | None = None) -> detect.ComparisonTable:
    """Train both models on the corpus split and produce the comparison table."""
    report = evaluate_corpus(corpus_dir, config)
    return report.comparison
