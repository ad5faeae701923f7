import io
import math

import numpy as np
import pytest

from apusage.detect import (
    FLAG_GMM_OUTLIER,
    FLAG_HMM_LOW_LOGLIK,
    FLAG_RARE_TRANSITION,
    PipelineMismatchError,
    SLOT_CSV_COLUMNS,
    compare_models,
    merge_day_verdicts,
    score_day_gmm,
    score_day_hmm,
    write_slot_csv,
)
from apusage.features import FeatureSeries
from apusage.gmm import GmmModel
from apusage.hmm import HmmModel, generate


def series_from(values, fingerprint=None, start=0):
    values = np.atleast_2d(np.asarray(values, dtype=float))
    slots = start + 900 * np.arange(values.shape[0])
    return FeatureSeries(ap="AP1", slot_starts=slots, values=values, fingerprint=fingerprint)


def symmetric_three_component_model():
    # Equal-weight unit-covariance components at the corners of an
    # equilateral triangle around the origin.
    angles = [0.0, 2 * math.pi / 3, 4 * math.pi / 3]
    means = 6.0 * np.array([[math.cos(a), math.sin(a)] for a in angles])
    return GmmModel(
        weights=np.full(3, 1 / 3),
        means=means,
        covariances=np.stack([np.eye(2)] * 3),
    )


def simple_hmm():
    return HmmModel(
        pi=[0.6, 0.4],
        a=[[0.85, 0.15], [0.2, 0.8]],
        means=[[-1.0, 0.0], [1.5, 0.5]],
        covariances=[np.eye(2) * 0.8, np.eye(2) * 1.2],
    )


class TestScoreDayGmm:
    def test_slots_at_component_means_are_unflagged(self):
        model = symmetric_three_component_model()
        verdict = score_day_gmm(model, series_from(model.means), threshold=0.6)
        assert all(not s.flags for s in verdict.slots)
        assert all(s.gmm_max_responsibility > 0.99 for s in verdict.slots)

    def test_centroid_point_gets_one_third_and_flag(self):
        model = symmetric_three_component_model()
        verdict = score_day_gmm(model, series_from([[0.0, 0.0]]), threshold=0.6)
        (slot,) = verdict.slots
        assert slot.gmm_max_responsibility == pytest.approx(1 / 3, abs=1e-9)
        assert FLAG_GMM_OUTLIER in slot.flags

    def test_threshold_sweep_never_removes_flags(self):
        rng = np.random.default_rng(0)
        model = symmetric_three_component_model()
        series = series_from(rng.normal(0, 4, size=(60, 2)))
        flagged = {}
        for threshold in (0.6, 0.7, 0.8):
            verdict = score_day_gmm(model, series, threshold=threshold)
            flagged[threshold] = set(verdict.flagged_slots(FLAG_GMM_OUTLIER))
        assert flagged[0.6] <= flagged[0.7] <= flagged[0.8]

    def test_bad_threshold_rejected(self):
        model = symmetric_three_component_model()
        with pytest.raises(ValueError):
            score_day_gmm(model, series_from([[0.0, 0.0]]), threshold=1.5)

    def test_day_total_is_sum_of_point_logliks(self):
        from apusage.gmm import per_point_loglik

        model = symmetric_three_component_model()
        series = series_from(np.random.default_rng(1).normal(size=(10, 2)))
        verdict = score_day_gmm(model, series)
        assert verdict.gmm_total == pytest.approx(per_point_loglik(model, series.values).sum(), abs=1e-9)


class TestScoreDayHmm:
    def test_self_generated_series_rarely_flagged(self):
        model = simple_hmm()
        obs, _ = generate(model, 2000, seed=5)
        verdict = score_day_hmm(model, series_from(obs), step_threshold=-10.0, diagnostics=False)
        rate = sum(bool(s.flags) for s in verdict.slots) / len(verdict.slots)
        assert rate < 0.05

    def test_forced_outlier_is_flagged_with_large_mahalanobis(self):
        model = simple_hmm()
        obs, _ = generate(model, 30, seed=6)
        obs[10] = model.means[0] + 10.0 * np.array([1.0, 1.0])  # ~10 sigma away
        verdict = score_day_hmm(model, series_from(obs), step_threshold=-10.0)
        slot = verdict.slots[10]
        assert FLAG_HMM_LOW_LOGLIK in slot.flags
        assert slot.mahalanobis > 8.0

    def test_day_total_equals_increment_sum(self):
        model = simple_hmm()
        obs, _ = generate(model, 40, seed=7)
        verdict = score_day_hmm(model, series_from(obs))
        assert verdict.hmm_total == pytest.approx(
            sum(s.hmm_step_loglik for s in verdict.slots), abs=1e-9
        )

    def test_day_threshold_rule(self):
        model = simple_hmm()
        obs, _ = generate(model, 20, seed=8)
        series = series_from(obs)
        verdict = score_day_hmm(model, series, day_threshold=0.0)
        assert verdict.hmm_abnormal is True  # log-likelihood is negative here
        verdict = score_day_hmm(model, series, day_threshold=verdict.hmm_total - 1.0)
        assert verdict.hmm_abnormal is False  # total >= threshold means normal

    def test_rare_transition_flags_destination_slot(self):
        model = HmmModel(
            pi=[1.0, 0.0],
            a=[[0.999, 0.001], [0.001, 0.999]],
            means=[[-5.0, 0.0], [5.0, 0.0]],
            covariances=[np.eye(2), np.eye(2)],
        )
        obs = np.vstack([np.tile([-5.0, 0.0], (10, 1)), np.tile([5.0, 0.0], (10, 1))])
        verdict = score_day_hmm(model, series_from(obs), step_threshold=-50.0)
        flagged = verdict.flagged_slots(FLAG_RARE_TRANSITION)
        assert flagged == [int(verdict.slots[10].slot_start)]
        assert any(f.reason == "rare_taken" for f in verdict.transition_flags)

    def test_scoring_is_pure(self):
        model = simple_hmm()
        obs, _ = generate(model, 25, seed=9)
        series = series_from(obs)
        a = score_day_hmm(model, series)
        b = score_day_hmm(model, series)
        assert a == b


class TestFingerprint:
    def test_mismatch_is_error(self):
        model = symmetric_three_component_model()
        model.fingerprint = "model-fp"
        series = series_from([[0.0, 0.0]], fingerprint="other-fp")
        with pytest.raises(PipelineMismatchError):
            score_day_gmm(model, series)

    def test_model_without_fingerprint_rejects_fingerprinted_series(self):
        model = simple_hmm()
        series = series_from([[0.0, 0.0]], fingerprint="abc")
        with pytest.raises(PipelineMismatchError):
            score_day_hmm(model, series)

    def test_matching_fingerprints_pass(self):
        model = symmetric_three_component_model()
        model.fingerprint = "same"
        verdict = score_day_gmm(model, series_from([[0.0, 0.0]], fingerprint="same"))
        assert len(verdict.slots) == 1


class TestMergeAndCsv:
    def _verdicts(self):
        gmm_model = symmetric_three_component_model()
        hmm_model = simple_hmm()
        obs, _ = generate(hmm_model, 12, seed=10)
        series = series_from(obs)
        return (
            score_day_gmm(gmm_model, series),
            score_day_hmm(hmm_model, series),
        )

    def test_merge_unions_fields(self):
        g, h = self._verdicts()
        merged = merge_day_verdicts(g, h)
        assert merged.gmm_total == g.gmm_total
        assert merged.hmm_total == h.hmm_total
        for slot, gs, hs in zip(merged.slots, g.slots, h.slots):
            assert slot.gmm_max_responsibility == gs.gmm_max_responsibility
            assert slot.hmm_step_loglik == hs.hmm_step_loglik
            assert slot.flags == gs.flags | hs.flags

    def test_slot_csv_header_fixed(self):
        g, h = self._verdicts()
        buf = io.StringIO()
        write_slot_csv([merge_day_verdicts(g, h)], buf)
        header = buf.getvalue().splitlines()[0]
        assert header == ",".join(SLOT_CSV_COLUMNS)

    def test_merge_rejects_different_grids(self):
        g, h = self._verdicts()
        h.slots = h.slots[:-1]
        with pytest.raises(ValueError):
            merge_day_verdicts(g, h)


class TestCompareModels:
    def _setup(self):
        gmm_model = symmetric_three_component_model()
        hmm_model = simple_hmm()
        rng = np.random.default_rng(11)
        train = [series_from(generate(hmm_model, 20, seed=20 + i)[0]) for i in range(3)]
        shifted = [series_from(rng.normal(30.0, 1.0, size=(20, 2)))]
        return gmm_model, hmm_model, train, shifted

    def test_identical_runs_identical_entries(self):
        gmm_model, hmm_model, train, shifted = self._setup()
        t1 = compare_models(gmm_model, hmm_model, train, {"shifted": shifted})
        t2 = compare_models(gmm_model, hmm_model, train, {"shifted": shifted})
        assert t1.rows == t2.rows

    def test_own_data_beats_shifted_data(self):
        gmm_model, hmm_model, train, shifted = self._setup()
        table = compare_models(gmm_model, hmm_model, train, {"shifted": shifted})
        rows = dict((label, (g, h)) for label, g, h in table.rows)
        train_g, train_h = rows["The same train data"]
        shifted_g, shifted_h = rows["Test data (shifted)"]
        # Per-observation comparison: the train group has 3x the rows.
        assert train_g / 60 > shifted_g / 20
        assert train_h / 60 > shifted_h / 20

    def test_markdown_orientation(self):
        gmm_model, hmm_model, train, shifted = self._setup()
        table = compare_models(gmm_model, hmm_model, train, {"shifted": shifted})
        md = table.to_markdown()
        assert "The same train data" in md
        assert md.splitlines()[0].startswith("| Test data LLVs | GMM | HMM |")
