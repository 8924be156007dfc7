"""Report rendering: metric tables, confusion tables, CSVs, and figures."""

import numpy as np
import pytest

from valence_gan import reporting


@pytest.fixture
def payload():
    confusion = np.eye(5).tolist()
    return {
        "model": "BasicCNN",
        "aggregate": {"acc5": 1.0, "acc3": 1.0, "rho": 0.5},
        "folds": [{
            "fold": 1, "acc5": 1.0, "acc3": 1.0, "rho": 0.5,
            "confusion5": confusion,
            "losses": ["0,,,1.5,", "1,,,0.9,"],
        }],
    }


class TestTables:
    def test_perfect_accuracy_prints_100(self):
        table = reporting.format_metrics_table(
            [{"model": "BasicCNN", "acc5": 1.0, "acc3": 1.0, "rho": 0.5}])
        assert "100.00%" in table
        assert "BasicCNN" in table
        assert "0.5000" in table

    def test_missing_rho_prints_na(self):
        table = reporting.format_metrics_table(
            [{"model": "BasicCNN", "acc5": 0.5, "acc3": 0.5, "rho": None}])
        assert "n/a" in table

    def test_confusion_table_has_all_class_names(self):
        table = reporting.format_confusion_table(np.eye(5))
        for name in reporting.CLASS_NAMES:
            assert name in table

    def test_metrics_csv(self, tmp_path):
        reporting.write_metrics_csv(
            tmp_path / "m.csv",
            [{"model": "BasicCNN", "acc5": 0.25, "acc3": 0.5, "rho": None}])
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "model,acc5,acc3,rho"
        assert lines[1] == "BasicCNN,0.250000,0.500000,"


class TestLossParsing:
    def test_missing_columns_become_nan(self):
        steps, series = reporting.parse_loss_rows(["0,,,1.5,", "1,0.2,0.3,1.0,0.9"])
        assert steps == [0, 1]
        assert np.isnan(series["l_d"][0])
        assert series["l_val"][1] == pytest.approx(1.0)


class TestRender:
    def test_writes_figures_and_csv(self, payload, tmp_path):
        metrics_txt, confusion_txt, written = reporting.render_report(
            payload, tmp_path / "out")
        names = {p.name for p in written}
        assert "metrics.csv" in names
        assert "confusion.svg" in names
        assert "loss_fold1.svg" in names
        assert "100.00%" in metrics_txt
        for p in written:
            assert p.exists() and p.stat().st_size > 0

    def test_svg_output_is_vector(self, payload, tmp_path):
        _, _, written = reporting.render_report(payload, tmp_path / "out")
        svg = next(p for p in written if p.name == "confusion.svg")
        assert svg.read_text(errors="ignore").lstrip().startswith("<?xml")
