import pytest

from apusage.detect import DayVerdict, SlotVerdict
from apusage.evaluate import (
    ConfusionCounts,
    DetectionRow,
    PatternRate,
    confusion,
    format_rate,
    metrics,
    per_pattern_rates,
    render_detection_csv_rows,
    render_detection_markdown,
    render_pattern_markdown,
)
from apusage.simulate import CorpusDay, CorpusManifest


def verdict_from_flags(flag_map, flag="hmm_low_loglik"):
    slots = [
        SlotVerdict(slot_start=t, hmm_step_loglik=-1.0, flags=frozenset({flag} if hit else ()))
        for t, hit in sorted(flag_map.items())
    ]
    return DayVerdict(date="2015-11-02", ap="AP1", slots=slots)


class TestConfusion:
    def test_all_normal_no_flags(self):
        labels = {t: "normal" for t in range(0, 7200, 900)}
        verdict = verdict_from_flags({t: False for t in labels})
        counts = confusion(verdict, labels, "hmm")
        assert (counts.tp, counts.fp, counts.fn) == (0, 0, 0)
        assert counts.tn == 8

    def test_flags_equal_labels(self):
        labels = {0: "normal", 900: "ap_shutdown", 1800: "normal", 2700: "ap_shutdown"}
        verdict = verdict_from_flags({0: False, 900: True, 1800: False, 2700: True})
        counts = confusion(verdict, labels, "hmm")
        assert (counts.tp, counts.fp, counts.tn, counts.fn) == (2, 0, 2, 0)

    def test_hand_built_eight_slot_case(self):
        # 8 slots, 2 anomalous; one caught, one false alarm.
        labels = {t: "normal" for t in range(0, 7200, 900)}
        labels[900] = "jam_low_interval"
        labels[1800] = "jam_low_interval"
        flags = {t: False for t in labels}
        flags[900] = True  # caught
        flags[4500] = True  # false alarm
        counts = confusion(verdict_from_flags(flags), labels, "hmm")
        assert (counts.tp, counts.fn, counts.fp, counts.tn) == (1, 1, 1, 5)

    def test_grid_mismatch_is_error(self):
        labels = {0: "normal", 900: "normal"}
        verdict = verdict_from_flags({0: False})
        with pytest.raises(ValueError):
            confusion(verdict, labels, "hmm")

    def test_unknown_source_is_error(self):
        with pytest.raises(ValueError):
            confusion(verdict_from_flags({0: False}), {0: "normal"}, "svm")

    def test_invariant_under_reordering(self):
        labels = {t: ("normal" if t % 1800 else "ap_shutdown") for t in range(0, 9000, 900)}
        flags = {t: (t % 2700 == 0) for t in labels}
        a = confusion(verdict_from_flags(flags), labels, "hmm")
        reordered = verdict_from_flags(dict(reversed(list(flags.items()))))
        b = confusion(reordered, labels, "hmm")
        assert a == b


class TestMetrics:
    def test_tpr_ten_of_fourteen(self):
        m = metrics(ConfusionCounts(tp=10, fp=0, tn=0, fn=4))
        assert m.tpr == pytest.approx(0.714, abs=5e-4)

    def test_tpr_three_of_three(self):
        m = metrics(ConfusionCounts(tp=3, fp=0, tn=1, fn=0))
        assert m.tpr == 1.0

    def test_f1_hand_oracle(self):
        m = metrics(ConfusionCounts(tp=3, fp=1, tn=95, fn=1))
        assert m.f1 == pytest.approx(2 * 3 / (6 + 1 + 1), abs=1e-12)

    def test_fpr_plus_tnr_is_one(self):
        m = metrics(ConfusionCounts(tp=5, fp=7, tn=13, fn=2))
        assert m.fpr + m.tnr == pytest.approx(1.0, abs=1e-12)

    def test_zero_denominators_reported_absent(self):
        m = metrics(ConfusionCounts(tp=0, fp=0, tn=10, fn=0))
        assert m.tpr is None
        assert m.f1 is None
        assert m.fpr == 0.0

    def test_f1_zero_when_no_true_positives(self):
        m = metrics(ConfusionCounts(tp=0, fp=3, tn=10, fn=2))
        assert m.f1 == 0.0

    def test_empty_counts_rejected(self):
        with pytest.raises(ValueError):
            metrics(ConfusionCounts(0, 0, 0, 0))


class TestFormatRate:
    def test_zero_detected(self):
        assert format_rate(0, 3) == "0% (0/3)"

    def test_all_detected(self):
        assert format_rate(3, 3) == "100% (3/3)"

    def test_truncated_decimal(self):
        assert format_rate(4, 14) == "28.5% (4/14)"
        assert format_rate(17, 23) == "73.9% (17/23)"
        assert format_rate(6, 17) == "35.2% (6/17)"


def manifest_for_patterns():
    labels_a = [[0, "normal"], [900, "ap_shutdown"], [1800, "ap_shutdown"], [2700, "jam_low_interval"]]
    labels_b = [[0, "heavy_usage_single"], [900, "normal"], [1800, "normal"], [2700, "normal"]]
    days = [
        CorpusDay(
            name="day_000",
            file="day_000.csv",
            date="2015-11-02",
            day_start=0,
            abnormal=True,
            scenarios=(),
            labels=tuple((int(t), l) for t, l in labels_a),
        ),
        CorpusDay(
            name="day_001",
            file="day_001.csv",
            date="2015-11-03",
            day_start=0,
            abnormal=True,
            scenarios=(),
            labels=tuple((int(t), l) for t, l in labels_b),
        ),
    ]
    return CorpusManifest(seed=0, ap="AP1", profile={}, days=days, per_kind_slot_totals={})


class TestPerPatternRates:
    def test_rates_join_labels_with_flags(self):
        manifest = manifest_for_patterns()
        verdicts = {
            "day_000": verdict_from_flags({0: False, 900: True, 1800: False, 2700: False}),
            "day_001": verdict_from_flags({0: True, 900: False, 1800: False, 2700: False}),
        }
        rates = {r.kind: r for r in per_pattern_rates(verdicts, manifest, "hmm")}
        assert rates["ap_shutdown"].detected == 1
        assert rates["ap_shutdown"].total == 2
        assert rates["jam_low_interval"].detected == 0
        assert rates["heavy_usage_single"].detected == 1

    def test_weighted_rates_recover_overall_tpr(self):
        manifest = manifest_for_patterns()
        verdicts = {
            "day_000": verdict_from_flags({0: False, 900: True, 1800: True, 2700: False}),
            "day_001": verdict_from_flags({0: True, 900: False, 1800: False, 2700: False}),
        }
        rates = per_pattern_rates(verdicts, manifest, "hmm")
        detected = sum(r.detected for r in rates)
        total = sum(r.total for r in rates)
        counts = ConfusionCounts(0, 0, 0, 0)
        for name in verdicts:
            day = next(d for d in manifest.days if d.name == name)
            counts = counts + confusion(verdicts[name], day.label_map(), "hmm")
        assert metrics(counts).tpr == pytest.approx(detected / total, abs=1e-12)


class TestSweepMonotonicity:
    def test_adding_flags_never_lowers_fpr_or_tpr(self):
        labels = {t: ("normal" if t % 2700 else "jam_high_interval") for t in range(0, 18000, 900)}
        base_flags = {t: False for t in labels}
        grown = dict(base_flags)
        prev_fpr = prev_tpr = 0.0
        for t in sorted(labels):
            grown[t] = True
            m = metrics(confusion(verdict_from_flags(grown), labels, "hmm"))
            assert m.fpr >= prev_fpr - 1e-12
            assert m.tpr is None or m.tpr >= prev_tpr - 1e-12
            prev_fpr = m.fpr
            if m.tpr is not None:
                prev_tpr = m.tpr


class TestRenderers:
    def test_detection_markdown_layout(self):
        counts = ConfusionCounts(tp=1, fp=2, tn=17, fn=0)
        row = DetectionRow(dataset="Normal test days", threshold=0.6, counts=counts, metric_set=metrics(counts))
        text = render_detection_markdown("GMM", [row])
        assert "| Data - Threshold | FPR | TNR | TPR | ACC | F1 |" in text
        assert "Normal test days (threshold 0.6)" in text

    def test_detection_csv_has_counts_and_ratios(self):
        counts = ConfusionCounts(tp=1, fp=2, tn=17, fn=0)
        rows = render_detection_csv_rows(
            [DetectionRow("Anomalous test days", -10.0, counts, metrics(counts))]
        )
        assert rows[0][:6] == ["dataset", "threshold", "tp", "fp", "tn", "fn"]
        assert rows[1][2] == "1"

    def test_pattern_markdown_uses_display_names(self):
        rates = [PatternRate("ap_shutdown", 6, 17), PatternRate("jam_low_interval", 4, 14)]
        text = render_pattern_markdown([("HMM (threshold -10)", rates)])
        assert "AP Power Off" in text
        assert "35.2% (6/17)" in text
        assert "28.5% (4/14)" in text
