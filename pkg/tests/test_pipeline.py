import csv

import numpy as np
import pytest

from modsoh.data_model import FeatureTable, read_feature_table
from modsoh.errors import EmptyOutputError, SplitError, ValidationError
from modsoh.featext import ExtractionConfig
from modsoh.featsel import read_selection
from modsoh.pipeline import (
    GATE_REASON,
    PipelineConfig,
    cmd_eval,
    cmd_extract,
    cmd_pipeline,
    cmd_select,
    cmd_synth,
    cmd_train,
    crossval,
    error_histogram,
    fold_indices,
    mi_matrices,
    usable_columns,
)
from modsoh.synthgen import AgingSpec

SMALL = AgingSpec(n_modules=4, n_checkpoints=10)
ARTIFACTS = {"dataset.csv", "ground_truth.csv", "features.csv", "features_mask.csv", "skipped.csv",
             "mi.csv", "cmi.csv", "selection.csv", "removed.csv", "crossval.csv",
             "metric_vs_features.csv", "model.json", "metrics.csv", "error_histogram.csv",
             "predictions.csv", "report.txt"}


def cv_inversions(rmse, flat=0.10):
    """Increases of more than ``flat`` (relative) along a CV curve."""
    rmse = np.asarray(rmse)
    return int(np.count_nonzero(rmse[1:] > (1 + flat) * rmse[:-1]))


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return out, cmd_pipeline(PipelineConfig(out, aging=SMALL))


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestFolds:
    def test_partition(self):
        parts = fold_indices(23, 5, 0)
        assert sorted(np.concatenate(parts).tolist()) == list(range(23))
        assert [len(p) for p in parts] == [5, 5, 5, 4, 4]

    def test_seeded(self):
        a, b = fold_indices(30, 5, 4), fold_indices(30, 5, 4)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
        assert any(not np.array_equal(x, y) for x, y in zip(a, fold_indices(30, 5, 5)))

    def test_too_small(self):
        with pytest.raises(SplitError):
            fold_indices(9, 5, 0)
        with pytest.raises(SplitError):
            fold_indices(20, 1, 0)


@pytest.fixture(scope="module")
def table():
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(60, 3))
    soh = 0.85 + 0.1 * x[:, 0] + 0.03 * x[:, 1] + 0.002 * rng.standard_normal(60)
    return FeatureTable(("a", "b", "c"), x, soh)


class TestCrossval:
    def test_single_cell_grid(self, table):
        rows = crossval(table, ["a", "b", "c"], [2], [1.0])
        assert len(rows) == 1
        assert len(rows[0].fold_rmse) == len(rows[0].fold_n_rv) == 5

    def test_grid_shape_and_order(self, table):
        rows = crossval(table, ["a", "b", "c"], [1, 2], [0.5, 2.0], folds=3)
        assert [(r.n_features, r.rho_factor) for r in rows] == [(1, 0.5), (1, 2.0), (2, 0.5), (2, 2.0)]

    def test_deterministic(self, table):
        assert crossval(table, ["a", "b"], [1, 2], seed=3) == crossval(table, ["a", "b"], [1, 2], seed=3)

    def test_threads_do_not_change_results(self, table):
        assert crossval(table, ["a", "b"], [1, 2], threads=3) == crossval(table, ["a", "b"], [1, 2])

    def test_informative_feature_count(self, table):
        rows = crossval(table, ["a", "b", "c"], [1, 2, 3])
        assert rows[1].rmse < rows[0].rmse
        assert cv_inversions([r.rmse for r in rows]) <= 1

    def test_bad_grids(self, table):
        with pytest.raises(ValidationError):
            crossval(table, ["a"], [2])
        with pytest.raises(ValidationError):
            crossval(table, ["a"], [])


class TestStages:
    def test_synth_extract_select_train_eval(self, tmp_path):
        cmd_synth(tmp_path, AgingSpec(n_modules=2, n_checkpoints=10))
        result, gated = cmd_extract(tmp_path / "dataset.csv", tmp_path / "f.csv", tmp_path / "m.csv",
                                    skipped_out=tmp_path / "s.csv")
        assert result.table.n_rows == 20 and gated.skipped == []
        cmd_select(tmp_path / "f.csv", tmp_path / "sel.csv", tmp_path / "rem.csv")
        ranking = read_selection(tmp_path / "sel.csv")
        assert ranking
        model = cmd_train(tmp_path / "f.csv", tmp_path / "sel.csv", tmp_path / "model.json")
        assert model.feature_names == tuple(ranking[:2])
        metrics = cmd_eval(tmp_path / "model.json", tmp_path / "f.csv", tmp_path / "metrics.csv",
                           tmp_path / "hist.csv")
        assert 0.0 <= metrics["coverage_997"] <= 1.0
        counts = [int(r["count"]) for r in _csv(tmp_path / "hist.csv")]
        assert sum(counts) == 20

    def test_gate_skips_everything(self, tmp_path):
        cmd_synth(tmp_path, AgingSpec(n_modules=1, n_checkpoints=3))
        with pytest.raises(EmptyOutputError, match=GATE_REASON):
            cmd_extract(tmp_path / "dataset.csv", tmp_path / "f.csv", tmp_path / "m.csv", gate=10_000)
        assert not (tmp_path / "f.csv").exists()

    def test_gate_counts_reconcile(self, small_dataset):
        from modsoh.pipeline import extract_table

        profiles = small_dataset[0]
        # these profiles carry 25 to 27 samples within 25 mV of the peak
        result, gated = extract_table(profiles, ExtractionConfig(), gate=26)
        assert len(gated.skipped) == 7
        assert result.table.n_rows + len(gated.skipped) == len(profiles)
        assert all(reason == GATE_REASON for _, reason in gated.skipped)

    def test_usable_columns(self):
        rows = np.array([[1.0, 2.0, np.nan], [1.0, 3.0, np.nan], [1.0, 4.0, 5.0]])
        table, dropped = usable_columns(FeatureTable(("k", "v", "m"), rows, np.ones(3)))
        assert table.feature_names == ("v",)
        assert dropped == ["k", "m"]

    def test_mi_matrix(self, small_extraction):
        table, _ = usable_columns(small_extraction.table)
        mi, cmi = mi_matrices(table.select(table.feature_names[:3]))
        assert mi.shape == (4, 4) and cmi.shape == (3, 3)
        np.testing.assert_array_equal(mi, mi.T)
        np.testing.assert_array_equal(cmi, cmi.T)

    def test_histogram_conserves(self):
        err = np.random.default_rng(0).normal(size=37)
        counts, edges = error_histogram(err)
        assert counts.sum() == 37 and len(edges) == len(counts) + 1

    def test_eval_empty(self, tmp_path, small_run):
        out, _ = small_run
        table = read_feature_table(out / "features.csv")
        from modsoh.data_model import write_feature_table

        write_feature_table(table.take(np.array([], dtype=int)), tmp_path / "empty.csv")
        with pytest.raises(ValidationError):
            cmd_eval(out / "model.json", tmp_path / "empty.csv", tmp_path / "m.csv")


class TestPipeline:
    def test_artifacts(self, small_run):
        out, rep = small_run
        assert {p.name for p in out.iterdir()} == ARTIFACTS
        assert rep.n_profiles == 40
        assert rep.n_train + rep.n_test + rep.n_skipped == rep.n_profiles

    def test_metrics_file(self, small_run):
        out, rep = small_run
        values = {r["metric"]: float(r["value"]) for r in _csv(out / "metrics.csv")}
        assert values["rmse"] == pytest.approx(rep.metrics["rmse"], rel=1e-15)
        assert 0.0 <= values["coverage_997"] <= 1.0

    def test_histogram_sums_to_test_size(self, small_run):
        out, rep = small_run
        assert sum(int(r["count"]) for r in _csv(out / "error_histogram.csv")) == rep.n_test

    def test_predictions_interval(self, small_run):
        out, rep = small_run
        rows = _csv(out / "predictions.csv")
        assert len(rows) == rep.n_test
        for r in rows:
            m, s = float(r["soh_mean"]), float(r["soh_sigma"])
            assert float(r["lower_3sigma"]) == pytest.approx(m - 3 * s)
            assert float(r["upper_3sigma"]) == pytest.approx(m + 3 * s)

    def test_cv_trend(self, small_run):
        _, rep = small_run
        assert cv_inversions([r.rmse for r in rep.cv]) <= 1

    def test_report_lists_ranking(self, small_run):
        out, rep = small_run
        text = (out / "report.txt").read_text()
        for name in rep.selected:
            assert name in text
        assert f"profiles skipped   {rep.n_skipped}" in text

    def test_rerun_byte_identical(self, small_run, tmp_path):
        out, _ = small_run
        cmd_pipeline(PipelineConfig(tmp_path, aging=SMALL))
        for name in sorted(ARTIFACTS):
            assert (tmp_path / name).read_bytes() == (out / name).read_bytes(), name

    def test_gate_failure_leaves_nothing(self, tmp_path):
        with pytest.raises(EmptyOutputError) as info:
            cmd_pipeline(PipelineConfig(tmp_path, aging=AgingSpec(n_modules=1, n_checkpoints=3),
                                        gate=10_000))
        assert info.value.stage == "extract"
        assert list(tmp_path.iterdir()) == []

    def test_too_many_features(self, tmp_path):
        with pytest.raises(ValidationError, match="n_features"):
            cmd_pipeline(PipelineConfig(tmp_path, aging=SMALL, n_features=99))
        assert list(tmp_path.iterdir()) == []

    def test_config_checks(self, tmp_path):
        with pytest.raises(ValidationError):
            PipelineConfig(tmp_path, n_features=0)
        with pytest.raises(ValidationError):
            PipelineConfig(tmp_path, gate=-1)
