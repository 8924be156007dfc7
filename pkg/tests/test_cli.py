"""Command line workflow: synth -> preprocess -> train -> evaluate -> report."""

import json

import pytest
from click.testing import CliRunner

from valence_gan.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


def run(runner, workdir, *args):
    result = runner.invoke(main, ["--workdir", str(workdir), *args],
                           catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


@pytest.fixture(scope="module")
def small_corpus(runner, workdir):
    """A reduced corpus so CLI round trips stay fast."""
    run(runner, workdir, "synth", "--out", "corpus", "--clips-per-speaker", "5",
        "--unlabeled", "6", "--min-duration", "1.0", "--max-duration", "1.5")
    return workdir / "corpus" / "manifest.jsonl"


@pytest.fixture(scope="module")
def config_file(workdir):
    path = workdir / "config.json"
    path.write_text(json.dumps({
        "model": {"crop_width": 64, "filter_size": 2, "num_filters": 32,
                  "batch_size": 64, "learning_rate": 1e-3},
        "max_epochs": 2,
    }))
    return path


class TestSynth:
    def test_writes_corpus_tree(self, small_corpus, workdir):
        assert small_corpus.exists()
        assert (workdir / "corpus" / "wavs").is_dir()
        assert (workdir / "corpus" / "transcripts").is_dir()


class TestPreprocess:
    def test_writes_cache(self, runner, workdir, small_corpus):
        result = run(runner, workdir, "preprocess",
                     "--manifest", "corpus/manifest.jsonl", "--out", "cache")
        assert "cached" in result.output
        assert (workdir / "cache" / "stats.json").exists()
        assert list((workdir / "cache").glob("*.vgs"))


class TestTrain:
    def test_writes_checkpoint_losses_and_report(self, runner, workdir,
                                                 small_corpus, config_file):
        run(runner, workdir, "train", "BasicCNN",
            "--manifest", "corpus/manifest.jsonl", "--cache", "cache",
            "--config", str(config_file), "--fold", "1", "--out", "train_out")
        out = workdir / "train_out"
        assert (out / "losses.csv").read_text().startswith("step,l_d,l_g,l_val,l_act")
        assert (out / "checkpoint" / "manifest.json").exists()
        payload = json.loads((out / "fold_report.json").read_text())
        assert payload["model"] == "BasicCNN"
        assert payload["fold_report"]["fold"] == 1


class TestEvaluate:
    def test_report_json_shape(self, runner, workdir, small_corpus, config_file):
        result = run(runner, workdir, "evaluate", "BasicCNN",
                     "--manifest", "corpus/manifest.jsonl", "--cache", "cache",
                     "--config", str(config_file), "--seed", "3",
                     "--out", "report.json")
        assert "acc5=" in result.output
        payload = json.loads((workdir / "report.json").read_text())
        assert payload["model"] == "BasicCNN"
        assert len(payload["folds"]) == 5
        assert set(payload["aggregate"]) == {"acc5", "acc3", "rho"}

    def test_identical_seeds_are_byte_identical(self, runner, workdir,
                                                small_corpus, config_file):
        run(runner, workdir, "evaluate", "BasicCNN",
            "--manifest", "corpus/manifest.jsonl", "--cache", "cache",
            "--config", str(config_file), "--seed", "3", "--out", "report2.json")
        assert (workdir / "report.json").read_bytes() == \
            (workdir / "report2.json").read_bytes()


class TestReport:
    def test_renders_tables_and_figures(self, runner, workdir, small_corpus,
                                        config_file):
        result = run(runner, workdir, "report", "report.json", "--out", "report_out")
        assert "Accuracy (5 class)" in result.output
        out = workdir / "report_out"
        assert (out / "metrics.csv").exists()
        assert (out / "confusion.svg").exists()


class TestSearch:
    def test_writes_trials_and_best_config(self, runner, workdir, small_corpus):
        run(runner, workdir, "search", "BasicCNN",
            "--manifest", "corpus/manifest.jsonl", "--cache", "cache",
            "--trials", "2", "--epochs", "1", "--seed", "0", "--out", "trials.csv")
        lines = (workdir / "trials.csv").read_text().splitlines()
        assert lines[0].startswith("kind,crop_width")
        assert len(lines) == 3
        best = json.loads((workdir / "trials_best.json").read_text())
        assert best["model"]["kind"] == "BasicCNN"


class TestErrors:
    def test_missing_manifest_exits_with_machine_readable_error(self, runner, workdir):
        result = runner.invoke(main, ["--workdir", str(workdir), "evaluate",
                                      "BasicCNN", "--manifest", "missing.jsonl"])
        assert result.exit_code == 2
        err = json.loads(result.output.strip().splitlines()[-1])
        assert "type" in err and "error" in err

    def test_invalid_config_exits_nonzero(self, runner, workdir, small_corpus):
        bad = workdir / "bad.json"
        bad.write_text(json.dumps({"model": {"crop_width": 100}}))
        result = runner.invoke(main, ["--workdir", str(workdir), "evaluate",
                                      "BasicCNN", "--manifest", "corpus/manifest.jsonl",
                                      "--config", str(bad)])
        assert result.exit_code == 2
        err = json.loads(result.output.strip().splitlines()[-1])
        assert err["type"] == "ConfigError"
