import json

import pytest

from apusage.cli import build_parser, main
from apusage.simulate import CorpusManifest


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_corpus")
    code = main(["simulate", "--seed", "7", "--out", str(out)])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def eval_dir(tmp_path_factory, corpus_dir):
    out = tmp_path_factory.mktemp("cli_eval")
    code = main(["evaluate", "--corpus", str(corpus_dir), "--out", str(out), "--seed", "7"])
    assert code == 0
    return out


def test_simulate_writes_corpus(corpus_dir):
    manifest = CorpusManifest.load(corpus_dir / "manifest.json")
    assert len(manifest.days) == 30
    assert (corpus_dir / "day_000.csv").exists()


def test_evaluate_writes_reports_and_figures(eval_dir):
    for rel in (
        "reports/gmm_detection.md",
        "reports/gmm_detection.csv",
        "reports/hmm_detection.md",
        "reports/hmm_detection.csv",
        "reports/pattern_rates.md",
        "reports/pattern_rates.csv",
        "reports/comparison.md",
        "reports/day_likelihoods.csv",
        "models/pipeline.json",
        "models/gmm.json",
        "models/hmm.json",
        "verdicts/slots.csv",
        "figures/day_likelihoods_gmm.png",
        "figures/day_likelihoods_hmm.png",
    ):
        assert (eval_dir / rel).exists(), rel


def test_full_pipeline_determinism(tmp_path, corpus_dir, eval_dir):
    again = tmp_path / "again"
    code = main(["evaluate", "--corpus", str(corpus_dir), "--out", str(again), "--seed", "7"])
    assert code == 0
    for rel in (
        "reports/gmm_detection.csv",
        "reports/hmm_detection.csv",
        "reports/pattern_rates.csv",
        "reports/pattern_rates.md",
        "reports/comparison.csv",
        "reports/day_likelihoods.csv",
        "verdicts/slots.csv",
        "models/gmm.json",
        "models/hmm.json",
    ):
        assert (again / rel).read_bytes() == (eval_dir / rel).read_bytes(), rel


def test_simulate_determinism(tmp_path, corpus_dir):
    again = tmp_path / "corpus_again"
    assert main(["simulate", "--seed", "7", "--out", str(again)]) == 0
    assert (again / "manifest.json").read_bytes() == (corpus_dir / "manifest.json").read_bytes()
    assert (again / "day_005.csv").read_bytes() == (corpus_dir / "day_005.csv").read_bytes()


def test_ingest_featurize_stats(tmp_path, corpus_dir):
    out = tmp_path / "ingest"
    assert main(["ingest", "--trace", str(corpus_dir / "day_000.csv"), "--out", str(out)]) == 0
    assert (out / "records.csv").exists()
    assert (out / "sessions.json").exists()
    assert (out / "parse_issues.csv").read_text().strip() == "line,reason"

    fout = tmp_path / "features"
    assert main(["featurize", "--trace", str(corpus_dir / "day_000.csv"), "--out", str(fout)]) == 0
    features = (fout / "features.csv").read_text().splitlines()
    assert features[0].startswith("ap,slot_start,user_count,session_count,connection_duration")
    assert len(features) > 40  # window defaults to the slot-aligned trace span
    assert (fout / "correlation.csv").exists()
    assert (fout / "correlation.png").exists()

    sout = tmp_path / "stats"
    assert main(["stats", "--trace", str(corpus_dir / "day_000.csv"), "--out", str(sout)]) == 0
    assert (sout / "sessions_per_user_hourly_cdf.csv").exists()
    assert (sout / "per_ap_daily_duration_cdf.csv").exists()


def test_train_and_score_roundtrip(tmp_path, corpus_dir):
    fout = tmp_path / "features"
    assert (
        main(
            [
                "featurize",
                "--trace",
                str(corpus_dir / "day_000.csv"),
                "--out",
                str(fout),
                "--working-hours",
            ]
        )
        == 0
    )
    mdir = tmp_path / "models"
    assert (
        main(
            [
                "train-gmm",
                "--features",
                str(fout / "features.csv"),
                "--out",
                str(mdir),
                "--seed",
                "1",
            ]
        )
        == 0
    )
    assert (
        main(
            [
                "train-hmm",
                "--features",
                str(fout / "features.csv"),
                "--out",
                str(mdir),
                "--pipeline",
                str(mdir / "pipeline.json"),
                "--seed",
                "1",
            ]
        )
        == 0
    )
    sdir = tmp_path / "scored"
    assert (
        main(
            [
                "score",
                "--trace",
                str(corpus_dir / "day_001.csv"),
                "--pipeline",
                str(mdir / "pipeline.json"),
                "--gmm",
                str(mdir / "gmm.json"),
                "--hmm",
                str(mdir / "hmm.json"),
                "--out",
                str(sdir),
                "--working-hours",
            ]
        )
        == 0
    )
    slots = (sdir / "slots.csv").read_text().splitlines()
    assert slots[0] == "slot_start,gmm_resp,hmm_ll,mahalanobis,flags"
    assert len(slots) == 41  # 40 working-hour slots + header
    projections = (sdir / "projections.csv").read_text().splitlines()
    assert projections[0] == "ap,slot_start,pc1,pc2,pc3"
    assert len(projections) == 41


def test_score_threshold_monotonicity(tmp_path, corpus_dir, eval_dir):
    pipeline = eval_dir / "models" / "pipeline.json"
    gmm_model = eval_dir / "models" / "gmm.json"

    def flags_at(threshold):
        out = tmp_path / f"score_{threshold}"
        code = main(
            [
                "score",
                "--trace",
                str(corpus_dir / "day_003.csv"),
                "--pipeline",
                str(pipeline),
                "--gmm",
                str(gmm_model),
                "--out",
                str(out),
                "--working-hours",
                "--gmm-threshold",
                str(threshold),
            ]
        )
        assert code == 0
        flagged = set()
        for line in (out / "slots.csv").read_text().splitlines()[1:]:
            cells = line.split(",")
            if "gmm_outlier" in cells[-1]:
                flagged.add(cells[0])
        return flagged

    assert flags_at(0.6) <= flags_at(0.8)


def test_compare_outputs_table(tmp_path, corpus_dir):
    out = tmp_path / "cmp"
    assert main(["compare", "--corpus", str(corpus_dir), "--out", str(out), "--seed", "7"]) == 0
    text = (out / "comparison.md").read_text()
    assert "The same train data" in text
    assert "Test data (abnormal days)" in text


def test_missing_input_fails_with_message(tmp_path, capsys):
    code = main(["evaluate", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_train_hmm_defaults_match_stated_setup():
    parser = build_parser()
    args = parser.parse_args(["train-hmm", "--features", "f.csv", "--out", "o"])
    from apusage.cli import _build_config

    config = _build_config(args)
    assert config.hmm_states == 3
    assert config.hmm_max_iter == 20
    assert config.hmm_tol == 1e-6


def test_config_file_with_flag_override(tmp_path, corpus_dir):
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps({"seed": 3, "hmm_states": 2}))
    parser = build_parser()
    args = parser.parse_args(
        [
            "evaluate",
            "--corpus",
            str(corpus_dir),
            "--out",
            str(tmp_path / "out"),
            "--config",
            str(config_path),
            "--seed",
            "9",
        ]
    )
    from apusage.cli import _build_config

    config = _build_config(args)
    assert config.seed == 9  # flag wins
    assert config.hmm_states == 2  # file value kept

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bogus_field": 1}))
    args = parser.parse_args(
        ["evaluate", "--corpus", str(corpus_dir), "--out", str(tmp_path / "out2"), "--config", str(bad)]
    )
    with pytest.raises(ValueError):
        _build_config(args)
