import io

import numpy as np
import pytest

from lifespan_gamm.data import (Categorical, LongitudinalDataset, load_dataset, parse_date,
                                schema_for, standardize_covariate, write_dataset)
from lifespan_gamm.errors import (ConsistencyError, DegenerateCovariateError, ParseError,
                                  SchemaError)


def _csv(text):
    return io.StringIO(text)


class TestDerivedColumns:
    def test_time_since_baseline(self):
        d = LongitudinalDataset.from_columns(["a"] * 3, [16.0, 10.0, 12.5], [46, 40, 42.5], [1, 2, 3])
        np.testing.assert_array_equal(d.time, [0.0, 2.5, 6.0])
        np.testing.assert_array_equal(d.baseline_age, [10.0] * 3)

    def test_birth_date(self):
        d = LongitudinalDataset.from_columns(["a"], [30.0], [2010.0], [1.0])
        assert d.birth_date[0] == 1980.0

    def test_rows_grouped_in_first_appearance_order(self):
        d = LongitudinalDataset.from_columns(["b", "a", "b"], [20, 5, 10], [30, 15, 20], [1, 2, 3])
        assert list(d.participant_id) == ["b", "b", "a"]
        assert list(d.participant_index) == ["b", "a"]
        np.testing.assert_array_equal(d.timepoints_per_participant, [2, 1])

    def test_same_day_repeat_kept(self):
        d = LongitudinalDataset.from_columns(["a", "a"], [40.0, 40.0], [50.0, 50.0], [1.0, 1.1])
        assert d.n_rows == 2
        np.testing.assert_array_equal(d.time, [0.0, 0.0])

    def test_inconsistent_birth_date_rejected(self):
        with pytest.raises(ConsistencyError):
            LongitudinalDataset.from_columns(["a", "a"], [10.0, 12.0], [20.0, 23.0], [1, 2])

    def test_nonpositive_age_rejected(self):
        with pytest.raises(ParseError, match="row 1"):
            LongitudinalDataset.from_columns(["a"], [0.0], [1.0], [1.0])

    def test_baseline_rows(self):
        d = LongitudinalDataset.from_columns(["a", "a", "b"], [10, 12, 30], [20, 22, 40], [1, 2, 3])
        b = d.baseline_rows()
        assert b.n_rows == 2 and np.all(b.time == 0)


class TestLoad:
    def test_missing_column_named(self):
        with pytest.raises(SchemaError, match="outcome"):
            load_dataset(_csv("participant_id,age,date\na,1,2\n"))

    def test_non_numeric_age_reports_row(self):
        with pytest.raises(ParseError, match="row 3"):
            load_dataset(_csv("participant_id,age,date,outcome\na,1,2,3\na,x,3,4\n"))

    def test_iso_dates(self):
        d = load_dataset(_csv("participant_id,age,date,outcome\na,30,1971-01-01,1\n"))
        assert d.date[0] == pytest.approx(365 / 365.25, abs=1e-12)
        assert parse_date("1970-01-01") == 0.0

    def test_categorical_covariate_label_encoded(self):
        d = load_dataset(_csv("participant_id,age,date,outcome,sex\na,30,40,1,F\nb,31,41,2,M\n"))
        assert isinstance(d["sex"], Categorical)
        assert list(d["sex"].labels) == ["F", "M"]

    def test_empty_input(self):
        with pytest.raises(SchemaError):
            load_dataset(_csv(""))

    def test_full_scale_shape(self):
        rng = np.random.default_rng(0)
        m = np.ones(2017, dtype=int)
        extra = rng.choice(2017, 4352 - 2017, replace=True)
        np.add.at(m, extra, 1)
        pid = np.repeat(np.arange(2017), m)
        age0 = np.repeat(rng.uniform(4, 90, 2017), m)
        t = np.concatenate([np.r_[0.0, np.sort(rng.uniform(0, 12, k - 1))] for k in m])
        date = np.repeat(rng.uniform(30, 40, 2017), m) + t
        d = LongitudinalDataset.from_columns(pid, age0 + t, date, rng.normal(size=pid.size))
        assert (d.n_participants, d.n_rows) == (2017, 4352)

    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        pid = np.repeat(["p1", "p2", "p3"], 2)
        age = np.repeat(rng.uniform(5, 80, 3), 2) + np.tile([0.0, 1.0 / 3.0], 3)
        date = age + np.repeat(rng.uniform(-60, -40, 3), 2)
        cov = {"icv": rng.normal(size=6), "site": Categorical(np.array([0, 0, 1, 1, 0, 0]), ("A", "B"))}
        d = LongitudinalDataset.from_columns(pid, age, date, rng.normal(size=6), cov)
        write_dataset(d, tmp_path / "d.csv")
        e = load_dataset(tmp_path / "d.csv", schema_for(d))
        for name in ("age", "date", "outcome", "time", "birth_date", "icv"):
            np.testing.assert_array_equal(e[name], d[name])
        assert list(e["site"].labels) == list(d["site"].labels)


class TestStandardize:
    def _ds(self, values):
        n = len(values)
        return LongitudinalDataset.from_columns([str(i) for i in range(n)], np.full(n, 20.0),
                                                np.full(n, 30.0), np.zeros(n), {"x": np.asarray(values, float)})

    def test_small_column(self):
        d = standardize_covariate(self._ds([1, 2, 3]), "x")
        np.testing.assert_allclose(d["x"], [-1, 0, 1], atol=1e-15)
        assert d.standardization["x"] == (2.0, 1.0)

    def test_constant_column(self):
        with pytest.raises(DegenerateCovariateError):
            standardize_covariate(self._ds([5, 5]), "x")

    def test_normal_column_moments(self):
        x = np.random.default_rng(2).normal(100, 15, 1000)
        z = standardize_covariate(self._ds(x), "x")["x"]
        assert abs(z.mean()) < 1e-12
        assert abs(z.std(ddof=1) - 1) < 1e-12
