"""Command-line surface binding the pipeline end to end.

Subcommands: ingest, featurize, stats, train-gmm, train-hmm, score,
simulate, evaluate, compare.  Outputs are CSV/JSON/Markdown files plus
rendered PNG figures alongside them.  ``--seed`` makes every stochastic
command deterministic; ``--config`` points at a JSON file whose values are
overridden by explicit flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import detect, gmm, hmm, plots, workflow
from .features import (
    FEATURE_COLUMNS,
    FeaturePipeline,
    SLOT_SECONDS,
    aggregate,
    build_series,
    correlation_matrix,
    feature_matrix,
    fit_pipeline,
    read_feature_csv,
    slot_iso,
    usage_statistics,
    write_feature_csv,
    write_projection_csv,
    write_stat_table,
)
from .ingest import parse_trace, sessionize, write_trace
from .simulate import PopulationProfile, generate_corpus
from .workflow import PipelineConfig

logger = logging.getLogger(__name__)


def _add_common(parser: argparse.ArgumentParser, working_hours_default: bool | None = None) -> None:
    parser.add_argument("--config", help="JSON config file; flags override its values")
    parser.add_argument("--seed", type=int, default=None, help="seed for stochastic steps")
    parser.add_argument("--timezone", default=None, help="timezone for slot rendering and filters")
    parser.add_argument(
        "--working-hours",
        action=argparse.BooleanOptionalAction,
        default=working_hours_default,
        help="restrict slots to weekdays 08:00-18:00",
    )


def _build_config(args: argparse.Namespace) -> PipelineConfig:
    config = PipelineConfig()
    if getattr(args, "config", None):
        config = PipelineConfig.from_file(args.config)
    overrides = {}
    for flag, field in (
        ("seed", "seed"),
        ("timezone", "timezone"),
        ("working_hours", "working_hours"),
        ("pca_components", "pca_components"),
        ("components", "gmm_components"),
        ("states", "hmm_states"),
        ("max_iter", None),  # handled per-command below
        ("gmm_threshold", "gmm_threshold"),
        ("hmm_threshold", "hmm_step_threshold"),
        ("day_threshold", "day_threshold"),
        ("train_days", "train_normal_days"),
        ("init", "hmm_init"),
    ):
        if field is None:
            continue
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field] = value
    command = getattr(args, "command", "")
    if getattr(args, "max_iter", None) is not None:
        overrides["gmm_max_iter" if command == "train-gmm" else "hmm_max_iter"] = args.max_iter
    if getattr(args, "tol", None) is not None:
        overrides["gmm_tol" if command == "train-gmm" else "hmm_tol"] = args.tol
    for flag, field in (("gmm_sweep", "gmm_sweep"), ("hmm_sweep", "hmm_sweep")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field] = tuple(float(v) for v in value.split(","))
    return config.updated(**overrides)


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_ingest(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    records, parse_issues = parse_trace(args.trace)
    sessions, session_issues = sessionize(records)
    write_trace(records, out / "records.csv")

    with open(out / "parse_issues.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("line,reason\n")
        for issue in parse_issues:
            fh.write(f"{issue.line},{issue.reason}\n")
    with open(out / "session_issues.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("session_id,reason\n")
        for issue in session_issues:
            fh.write(f"{issue.session_id},{issue.reason}\n")

    doc = [
        {
            "session_id": s.session_id,
            "client": s.client,
            "ap": s.ap,
            "start_time": s.start_time,
            "end_time": s.end_time,
            "open": s.open,
            "counters": [list(c) for c in s.counters],
        }
        for s in sessions
    ]
    (out / "sessions.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    print(
        f"parsed {len(records)} records ({len(parse_issues)} parse issues), "
        f"{len(sessions)} sessions ({len(session_issues)} session issues)"
    )
    return 0


def _trace_window(sessions) -> tuple[int, int]:
    lo = min(s.start_time for s in sessions)
    hi = max(s.end_time for s in sessions)
    t0 = (lo // SLOT_SECONDS) * SLOT_SECONDS
    t1 = ((hi // SLOT_SECONDS) + 1) * SLOT_SECONDS
    return t0, t1


def _cmd_featurize(args: argparse.Namespace) -> int:
    config = _build_config(args)
    out = _out_dir(args)
    records, parse_issues = parse_trace(args.trace)
    if parse_issues:
        logger.warning("%d malformed lines ignored", len(parse_issues))
    sessions, _ = sessionize(records)
    if not sessions:
        print("error: trace contains no sessions", file=sys.stderr)
        return 1

    aps = [args.ap] if args.ap else sorted({s.ap for s in sessions})
    if args.start and args.end:
        from .features import parse_slot_time

        window = (parse_slot_time(args.start), parse_slot_time(args.end))
    else:
        window = _trace_window(sessions)

    all_slots = []
    for ap in aps:
        all_slots.extend(
            aggregate(sessions, ap, window, working_hours=bool(config.working_hours), tz=config.timezone)
        )
    write_feature_csv(all_slots, out / "features.csv", tz=config.timezone)

    corr = correlation_matrix(feature_matrix(all_slots))
    with open(out / "correlation.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("feature," + ",".join(FEATURE_COLUMNS) + "\n")
        for name, row in zip(FEATURE_COLUMNS, corr):
            cells = ["" if not np.isfinite(v) else f"{v:.6f}" for v in row]
            fh.write(name + "," + ",".join(cells) + "\n")
    plots.plot_correlation(corr, FEATURE_COLUMNS, out / "correlation.png")
    print(f"wrote {len(all_slots)} slot rows for {len(aps)} AP(s)")
    return 0


def _cmd_stats(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    records, _ = parse_trace(args.trace)
    sessions, _ = sessionize(records)
    stats = usage_statistics(sessions)

    axis_names = {
        "sessions_per_user_hourly_ma": ("hour_start", "mean_sessions_per_user"),
        "sessions_per_user_hourly_cdf": ("sessions", "cumulative_fraction"),
        "sessions_per_user_daily_ma": ("day_start", "mean_sessions_per_user"),
        "sessions_per_user_daily_cdf": ("sessions", "cumulative_fraction"),
        "per_ap_user_cdf": ("mean_daily_users", "cumulative_fraction"),
        "per_ap_daily_duration_cdf": ("mean_daily_minutes", "cumulative_fraction"),
    }
    for name, table in stats.tables().items():
        x_name, y_name = axis_names[name]
        write_stat_table(table, out / f"{name}.csv", x_name=x_name, y_name=y_name)
        if table.x:
            plots.plot_stat_table(
                table,
                out / f"{name}.png",
                title=name.replace("_", " "),
                xlabel=x_name,
                ylabel=y_name,
                step=name.endswith("_cdf"),
            )
    print(f"wrote usage statistics for {len(sessions)} sessions")
    return 0


def _load_or_fit_pipeline(args: argparse.Namespace, rows: np.ndarray, config: PipelineConfig) -> FeaturePipeline:
    if getattr(args, "pipeline", None):
        return FeaturePipeline.load(args.pipeline)
    return fit_pipeline(rows, k=config.pca_components)


def _cmd_train_gmm(args: argparse.Namespace) -> int:
    config = _build_config(args)
    out = _out_dir(args)
    slots = read_feature_csv(args.features)
    rows = feature_matrix(slots)
    pipeline = _load_or_fit_pipeline(args, rows, config)
    model, trace = gmm.fit_em(
        pipeline.transform(rows),
        m=config.gmm_components,
        seed=config.seed,
        max_iter=config.gmm_max_iter,
        tol=config.gmm_tol,
    )
    model.fingerprint = pipeline.fingerprint()
    pipeline.save(out / "pipeline.json")
    model.save(out / "gmm.json")
    print(f"fitted GMM (m={config.gmm_components}) in {len(trace)} iterations; loglik {trace[-1]:.2f}")
    return 0


def _sequences_from_slots(slots, pipeline: FeaturePipeline):
    by_ap: dict[str, list] = defaultdict(list)
    for slot in slots:
        by_ap[slot.ap].append(slot)
    sequences = []
    for ap in sorted(by_ap):
        ordered = sorted(by_ap[ap], key=lambda s: s.slot_start)
        run = [ordered[0]]
        for slot in ordered[1:]:
            if slot.slot_start - run[-1].slot_start == SLOT_SECONDS:
                run.append(slot)
            else:
                sequences.append(build_series(run, pipeline).values)
                run = [slot]
        sequences.append(build_series(run, pipeline).values)
    return sequences


def _cmd_train_hmm(args: argparse.Namespace) -> int:
    config = _build_config(args)
    out = _out_dir(args)
    slots = read_feature_csv(args.features)
    rows = feature_matrix(slots)
    pipeline = _load_or_fit_pipeline(args, rows, config)
    sequences = _sequences_from_slots(slots, pipeline)
    model, trace = hmm.baum_welch(
        sequences,
        n=config.hmm_states,
        seed=config.seed,
        max_iter=config.hmm_max_iter,
        tol=config.hmm_tol,
        init=config.hmm_init,
    )
    model.fingerprint = pipeline.fingerprint()
    pipeline.save(out / "pipeline.json")
    model.save(out / "hmm.json")
    print(
        f"fitted HMM (n={config.hmm_states}) on {len(sequences)} sequences "
        f"in {len(trace)} iterations; loglik {trace[-1]:.2f}"
    )
    return 0


def _cmd_score(args: argparse.Namespace) -> int:
    config = _build_config(args)
    out = _out_dir(args)
    if not args.gmm and not args.hmm:
        print("error: provide --gmm and/or --hmm model files", file=sys.stderr)
        return 1
    pipeline = FeaturePipeline.load(args.pipeline)
    gmm_model = gmm.GmmModel.load(args.gmm) if args.gmm else None
    hmm_model = hmm.HmmModel.load(args.hmm) if args.hmm else None

    records, _ = parse_trace(args.trace)
    sessions, _ = sessionize(records)
    if not sessions:
        print("error: trace contains no sessions", file=sys.stderr)
        return 1
    ap = args.ap or sorted({s.ap for s in sessions})[0]
    window = _trace_window(sessions)
    slots = aggregate(sessions, ap, window, working_hours=bool(config.working_hours), tz=config.timezone)

    # One verdict per calendar day of contiguous slots.
    groups: dict[str, list] = defaultdict(list)
    for slot in slots:
        date = datetime.fromtimestamp(slot.slot_start, timezone.utc).date().isoformat()
        groups[date].append(slot)

    verdicts = []
    all_series = []
    for date in sorted(groups):
        series = build_series(groups[date], pipeline)
        all_series.append(series)
        gmm_verdict = (
            detect.score_day_gmm(
                gmm_model, series, threshold=config.gmm_threshold, day_threshold=config.day_threshold
            )
            if gmm_model
            else None
        )
        hmm_verdict = (
            detect.score_day_hmm(
                hmm_model,
                series,
                step_threshold=config.hmm_step_threshold,
                day_threshold=config.day_threshold,
            )
            if hmm_model
            else None
        )
        if gmm_verdict and hmm_verdict:
            verdict = detect.merge_day_verdicts(gmm_verdict, hmm_verdict)
        else:
            verdict = gmm_verdict or hmm_verdict
        verdicts.append(verdict)
        (out / f"day_{date}.json").write_text(
            json.dumps(detect.day_verdict_to_json(verdict), indent=2) + "\n", encoding="utf-8"
        )
        if hmm_verdict:
            hours = [(s.slot_start % 86400) / 3600.0 for s in verdict.slots]
            plots.plot_step_series(
                hours,
                [s.hmm_step_loglik for s in verdict.slots],
                config.hmm_step_threshold,
                [detect.FLAG_HMM_LOW_LOGLIK in s.flags for s in verdict.slots],
                out / f"hmm_steps_{date}.png",
                f"HMM step log-likelihood, {date}",
                "step log-likelihood",
            )
    detect.write_slot_csv(verdicts, out / "slots.csv")
    write_projection_csv(all_series, out / "projections.csv", tz=config.timezone)
    flagged = sum(len([s for s in v.slots if s.flags]) for v in verdicts)
    print(f"scored {len(verdicts)} day(s); {flagged} slots carry flags")
    return 0


def _cmd_simulate(args: argparse.Namespace) -> int:
    config = _build_config(args)
    out = _out_dir(args)
    profile = PopulationProfile(
        ap=args.ap,
        regular_users=args.regulars,
        guest_range=(args.guests_min, args.guests_max),
        alive_interval_seconds=args.alive_interval,
    )
    manifest = generate_corpus(
        profile,
        out,
        n_normal=args.normal_days,
        n_abnormal=args.abnormal_days,
        anomalies_per_abnormal_day=args.anomalies_per_day,
        seed=config.seed,
        start_date=args.start_date,
    )
    anomalous = sum(manifest.per_kind_slot_totals.values())
    print(
        f"wrote {len(manifest.days)} day traces to {out} "
        f"({len(manifest.abnormal_days())} abnormal days, {anomalous} anomalous slots)"
    )
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    config = _build_config(args)
    out = _out_dir(args)
    report = workflow.evaluate_corpus(args.corpus, config)
    report.write_reports(out, figures=not args.no_figures)
    for model in ("gmm", "hmm"):
        threshold, best = report.best_f1(model)
        f1 = "n/a" if best.f1 is None else f"{best.f1:.3f}"
        tpr = "n/a" if best.tpr is None else f"{best.tpr:.3f}"
        fpr = "n/a" if best.fpr is None else f"{best.fpr:.3f}"
        print(f"{model}: best F1 {f1} at threshold {threshold:g} (TPR {tpr}, FPR {fpr})")
    print(f"reports written to {out}")
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    config = _build_config(args)
    out = _out_dir(args)
    table = workflow.compare_corpus(args.corpus, config)
    (out / "comparison.md").write_text(table.to_markdown(), encoding="utf-8")
    with open(out / "comparison.csv", "w", encoding="utf-8", newline="") as fh:
        for row in table.to_csv_rows():
            fh.write(",".join(row) + "\n")
    print(table.to_markdown())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apusage",
        description="Model per-AP 802.11 usage from RADIUS accounting logs and flag anomalies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a trace and reconstruct sessions")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("featurize", help="aggregate per-slot features and correlations")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ap", help="restrict to one AP (default: all APs in trace)")
    p.add_argument("--start", help="window start (epoch seconds or ISO-8601)")
    p.add_argument("--end", help="window end (exclusive)")
    _add_common(p)
    p.set_defaults(func=_cmd_featurize)

    p = sub.add_parser("stats", help="descriptive usage statistics of a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("train-gmm", help="fit the mixture model on feature rows")
    p.add_argument("--features", required=True, help="features.csv from featurize")
    p.add_argument("--out", required=True)
    p.add_argument("--components", type=int, default=None)
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--pca-components", type=int, default=None)
    p.add_argument("--pipeline", help="reuse an existing pipeline.json")
    _add_common(p)
    p.set_defaults(func=_cmd_train_gmm)

    p = sub.add_parser("train-hmm", help="fit the hidden Markov model on feature rows")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--states", type=int, default=None)
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--init", choices=("random", "uniform"), default=None)
    p.add_argument("--pca-components", type=int, default=None)
    p.add_argument("--pipeline", help="reuse an existing pipeline.json")
    _add_common(p)
    p.set_defaults(func=_cmd_train_hmm)

    p = sub.add_parser("score", help="score a trace against trained models")
    p.add_argument("--trace", required=True)
    p.add_argument("--pipeline", required=True)
    p.add_argument("--gmm")
    p.add_argument("--hmm")
    p.add_argument("--ap")
    p.add_argument("--out", required=True)
    p.add_argument("--gmm-threshold", type=float, default=None)
    p.add_argument("--hmm-threshold", type=float, default=None)
    p.add_argument("--day-threshold", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("simulate", help="generate a labeled synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--normal-days", type=int, default=20)
    p.add_argument("--abnormal-days", type=int, default=10)
    p.add_argument("--anomalies-per-day", type=int, default=2)
    p.add_argument("--regulars", type=int, default=6)
    p.add_argument("--guests-min", type=int, default=3)
    p.add_argument("--guests-max", type=int, default=4)
    p.add_argument("--alive-interval", type=int, default=600, choices=(600, 900))
    p.add_argument("--start-date", default="2015-11-02")
    p.add_argument("--ap", default="AP1")
    _add_common(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("evaluate", help="full pipeline over a simulated corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-days", type=int, default=None)
    p.add_argument("--gmm-sweep", help="comma-separated thresholds, e.g. 0.6,0.7,0.8")
    p.add_argument("--hmm-sweep", help="comma-separated thresholds, e.g. -50,-20,-10")
    p.add_argument("--gmm-threshold", type=float, default=None)
    p.add_argument("--hmm-threshold", type=float, default=None)
    p.add_argument("--day-threshold", type=float, default=None)
    p.add_argument("--no-figures", action="store_true")
    _add_common(p, working_hours_default=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("compare", help="train/test log-likelihood comparison table")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-days", type=int, default=None)
    _add_common(p, working_hours_default=True)
    p.set_defaults(func=_cmd_compare)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
