import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from modsoh.data_model import (
    FeatureTable,
    QVProfile,
    SplitSpec,
    clean_samples,
    invert_prediction,
    ks_two_sample,
    load_dataset,
    read_feature_table,
    split,
    split_indices,
    standardize_apply,
    standardize_fit,
    standardize_invert,
    write_dataset,
    write_feature_table,
)
from modsoh.errors import (
    ConstantColumnError,
    ParameterMismatchError,
    ProfileTooShortError,
    SchemaError,
    SplitError,
    ValidationError,
)

HEADER = "source_id,cycle,capacity_ah,voltage_v,temperature_c,c_rate,soh\n"


def _rows(sid, cycle, n=10, soh=0.95):
    return "".join(f"{sid},{cycle},{0.5 * i},{3.5 + 0.05 * i},25,0.5,{soh}\n" for i in range(n))


class TestQVProfile:
    def test_rejects_short_profile(self):
        with pytest.raises(ProfileTooShortError):
            QVProfile(np.arange(7.0), np.arange(7.0), 25.0, 0.5)

    def test_rejects_non_increasing_voltage(self):
        v = np.linspace(3.5, 4.0, 10)
        v[4] = v[3]
        with pytest.raises(ValidationError):
            QVProfile(np.arange(10.0), v, 25.0, 0.5)

    def test_rejects_label_out_of_range(self):
        with pytest.raises(ValidationError):
            QVProfile(np.arange(10.0), np.linspace(3.5, 4, 10), 25.0, 0.5, soh_label=1.3)

    def test_arrays_are_read_only(self):
        p = QVProfile(np.arange(10.0), np.linspace(3.5, 4, 10), 25.0, 0.5)
        with pytest.raises(ValueError):
            p.voltage_samples[0] = 0.0


class TestLoadDataset:
    def test_two_profiles(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text(HEADER + _rows("A", 0) + _rows("A", 1, soh=0.9))
        profiles = load_dataset(path)
        assert [p.key for p in profiles] == [("A", 0), ("A", 1)]
        for p in profiles:
            assert np.all(np.diff(p.voltage_samples) > 0)
        assert profiles[1].soh_label == 0.9

    def test_voltage_decreasing_row_dropped(self, tmp_path):
        # fixture scanned by hand: the sixth row dips below its predecessor
        lines = _rows("A", 0, n=10).splitlines()
        fields = lines[5].split(",")
        fields[3] = "3.52"
        lines[5] = ",".join(fields)
        path = tmp_path / "d.csv"
        path.write_text(HEADER + "\n".join(lines) + "\n")
        (p,) = load_dataset(path)
        assert len(p) == 9
        assert p.n_dropped == 1
        assert 3.52 not in p.voltage_samples

    def test_empty_file(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("")
        with pytest.raises(SchemaError):
            load_dataset(path)

    def test_missing_column(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("source_id,cycle,capacity_ah,voltage_v\nA,0,0,3.5\n")
        with pytest.raises(SchemaError, match="temperature_c"):
            load_dataset(path)

    def test_too_short_lists_source(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text(HEADER + _rows("A", 0) + _rows("B", 0, n=5))
        with pytest.raises(ProfileTooShortError, match="B/0"):
            load_dataset(path)

    def test_custom_schema(self, tmp_path):
        path = tmp_path / "d.csv"
        text = (HEADER + _rows("A", 0)).replace("voltage_v", "V")
        path.write_text(text)
        (p,) = load_dataset(path, {"voltage": "V"})
        np.testing.assert_allclose(p.voltage_samples[:2], [3.5, 3.55])

    def test_duplicate_voltage_collapsed_to_mean(self):
        q, v, dropped = clean_samples([0.0, 1.0, 3.0, 4.0], [3.5, 3.6, 3.6, 3.7])
        np.testing.assert_allclose(q, [0.0, 2.0, 4.0])
        np.testing.assert_allclose(v, [3.5, 3.6, 3.7])
        assert dropped == 1

    def test_write_read_round_trip(self, tmp_path, small_dataset):
        profiles = small_dataset[0][:3]
        write_dataset(profiles, tmp_path / "d.csv")
        back = load_dataset(tmp_path / "d.csv")
        for a, b in zip(profiles, back):
            np.testing.assert_array_equal(a.capacity_samples, b.capacity_samples)
            np.testing.assert_array_equal(a.voltage_samples, b.voltage_samples)
            assert a.soh_label == b.soh_label


def _table(rows, labels=None, names=None):
    rows = np.asarray(rows, dtype=float)
    names = names or [f"f{j}" for j in range(rows.shape[1])]
    return FeatureTable(names, rows, labels)


class TestStandardization:
    def test_sample_std_convention(self):
        # hand computation: mean 2, sample std sqrt(((1)^2 + 0 + 1^2) / 2) = 1
        t = standardize_fit(_table([[1.0], [2.0], [3.0]]))
        np.testing.assert_allclose(t.rows[:, 0], [-1.0, 0.0, 1.0], atol=1e-15)
        assert t.standardization.x_std[0] == 1.0

    def test_population_std_would_differ(self):
        col = np.array([1.0, 2.0, 3.0])
        np.testing.assert_allclose((col - 2) / np.std(col), [-1.2247449, 0, 1.2247449], atol=1e-7)

    def test_fitting_set_moments(self):
        rng = np.random.default_rng(1)
        t = standardize_fit(_table(rng.normal(5, 3, (50, 4)), rng.uniform(0.8, 1, 50)))
        np.testing.assert_allclose(t.rows.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(t.rows.std(axis=0, ddof=1), 1.0, atol=1e-9)
        assert abs(t.labels.mean()) <= 1e-9

    def test_refit_is_idempotent(self):
        rng = np.random.default_rng(2)
        raw = _table(rng.normal(size=(20, 3)))
        once = standardize_fit(raw)
        fresh = standardize_fit(_table(once.rows))
        np.testing.assert_allclose(fresh.rows, once.rows, atol=1e-12)

    def test_constant_column_named(self):
        with pytest.raises(ConstantColumnError, match="f1"):
            standardize_fit(_table([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]))

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        raw = _table(rng.normal(10, 4, (30, 5)), rng.uniform(0.8, 1.0, 30))
        back = standardize_invert(standardize_fit(raw))
        np.testing.assert_allclose(back.rows, raw.rows, rtol=1e-12, atol=0)
        np.testing.assert_allclose(back.labels, raw.labels, rtol=1e-12, atol=0)

    def test_train_params_on_test_set(self):
        rng = np.random.default_rng(4)
        train = standardize_fit(_table(rng.normal(size=(40, 2))))
        test = standardize_apply(_table(rng.normal(1.0, 1.0, (40, 2))), train.standardization)
        assert np.all(np.abs(test.rows.mean(axis=0)) > 1e-3)

    def test_mismatched_columns(self):
        t = standardize_fit(_table([[1.0, 2.0], [2.0, 1.0], [3.0, 5.0]]))
        other = _table([[1.0], [2.0]], names=["g"])
        with pytest.raises(ParameterMismatchError):
            standardize_apply(other, t.standardization)

    def test_invert_prediction_scales_sigma_only(self):
        t = standardize_fit(_table([[1.0], [2.0], [4.0]], [0.9, 0.95, 1.0]))
        p = t.standardization
        mean, sigma = invert_prediction([0.0, 1.0], [0.5, 0.5], p)
        np.testing.assert_allclose(mean, [p.y_mean, p.y_mean + p.y_std])
        np.testing.assert_allclose(sigma, [0.5 * p.y_std] * 2)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 30), st.integers(1, 4), st.integers(0, 2**32 - 1))
    def test_round_trip_property(self, n, d, seed):
        rng = np.random.default_rng(seed)
        raw = _table(rng.normal(0, 10, (n, d)) + rng.normal(0, 100, d))
        back = standardize_invert(standardize_fit(raw))
        np.testing.assert_allclose(back.rows, raw.rows, rtol=1e-12, atol=1e-12)


class TestFeatureTable:
    def test_duplicate_names(self):
        with pytest.raises(ValidationError):
            FeatureTable(("a", "a"), np.zeros((2, 2)))

    def test_mask_follows_nan(self):
        t = FeatureTable(("a", "b"), [[1.0, np.nan], [2.0, 3.0]])
        np.testing.assert_array_equal(t.mask, [[True, False], [True, True]])
        np.testing.assert_array_equal(t.complete_rows(), [1])

    def test_infinite_rejected(self):
        with pytest.raises(ValidationError):
            FeatureTable(("a",), [[np.inf], [1.0]])

    def test_csv_round_trip(self, tmp_path):
        t = FeatureTable(("a", "b"), [[1.5, np.nan], [2.0, 1e-17]], [0.9, 1.0],
                         keys=(("M0", 0), ("M0", 1)))
        write_feature_table(t, tmp_path / "f.csv", tmp_path / "m.csv")
        back = read_feature_table(tmp_path / "f.csv")
        np.testing.assert_array_equal(back.rows, t.rows)
        np.testing.assert_array_equal(back.mask, t.mask)
        np.testing.assert_array_equal(back.labels, t.labels)
        assert back.keys == t.keys
        assert (tmp_path / "m.csv").read_text().splitlines()[1] == "M0,0,1,0"


class TestSplit:
    def test_eight_two(self):
        t = _table(np.arange(10.0)[:, None])
        a, b = split(t, SplitSpec(0.8, seed=7))
        a2, b2 = split(t, SplitSpec(0.8, seed=7))
        assert (a.n_rows, b.n_rows) == (8, 2)
        np.testing.assert_array_equal(a.rows, a2.rows)
        np.testing.assert_array_equal(b.rows, b2.rows)

    def test_fixed_count_sizes(self):
        tr, te = split_indices(81216, SplitSpec(mode="fixed-count", count=4060))
        assert (len(tr), len(te)) == (4060, 77156)

    def test_fraction_one_is_error(self):
        with pytest.raises(SplitError):
            split_indices(10, SplitSpec(1.0))

    def test_unknown_mode(self):
        with pytest.raises(SplitError):
            SplitSpec(mode="stratified")

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 200), st.floats(0.05, 0.95), st.integers(0, 1000))
    def test_partition(self, n, frac, seed):
        spec = SplitSpec(frac, seed)
        try:
            tr, te = split_indices(n, spec)
        except SplitError:
            return
        assert len(np.intersect1d(tr, te)) == 0
        np.testing.assert_array_equal(np.union1d(tr, te), np.arange(n))


class TestKolmogorovSmirnov:
    def test_identical(self):
        stat, p = ks_two_sample([1, 2, 3, 4, 5], [1, 2, 3, 4, 5])
        assert stat == 0.0
        assert p == 1.0

    def test_shifted_uniforms(self):
        rng = np.random.default_rng(0)
        a, b = rng.uniform(0, 1, 500), rng.uniform(0.5, 1.5, 500)
        stat, _ = ks_two_sample(a, b)
        # direct ECDF oracle over a fine grid
        grid = np.linspace(-0.1, 1.6, 20001)
        direct = np.max(np.abs((a[:, None] <= grid).mean(0) - (b[:, None] <= grid).mean(0)))
        assert stat >= 0.4
        assert stat == pytest.approx(direct, abs=2e-3)

    def test_statistic_and_limit_p_value(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=300), rng.normal(0.2, 1, size=200)
        stat, p = ks_two_sample(a, b)
        ref = stats.ks_2samp(a, b, method="asymp")
        assert stat == pytest.approx(ref.statistic, abs=1e-15)
        # p-value oracle: the limiting Kolmogorov series, summed by hand
        lam = np.sqrt(300 * 200 / 500) * stat
        k = np.arange(1, 101)
        series = 2 * np.sum((-1.0) ** (k - 1) * np.exp(-2 * k * k * lam * lam))
        assert p == pytest.approx(series, rel=1e-10)

    def test_calibration(self):
        passes = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            passes += ks_two_sample(rng.normal(size=1000), rng.normal(size=1000))[1] > 0.01
        assert passes >= 95

    def test_empty(self):
        with pytest.raises(ValidationError):
            ks_two_sample([], [1.0])
