import numpy as np
import pytest

from rarefx.core import (
    CATEGORICAL,
    CONTINUOUS,
    CausalEstimate,
    ColumnSchema,
    Dataset,
    DataValidationError,
    GpsMatrix,
    SchemaError,
    design_matrix,
    group_sizes,
    load_dataset,
    nearest_rank,
    save_dataset,
    schema_for,
)

from helpers import random_dataset


def write_csv(path, text):
    path.write_text(text)
    return path


SCHEMA_2COV = ColumnSchema(
    treatment="w",
    outcome="y",
    covariates=(("x1", CONTINUOUS), ("x2", CONTINUOUS)),
)


class TestLoadDataset:
    def test_three_row_csv(self, tmp_path):
        p = write_csv(tmp_path / "d.csv", "x1,x2,w,y\n0.1,2.0,1,0\n0.2,1.0,2,1\n0.3,0.5,3,0\n")
        d = load_dataset(p, SCHEMA_2COV)
        assert d.n == 3
        assert d.n_treatments == 3
        assert d.n_covariates == 2

    def test_outcome_value_two_rejected(self, tmp_path):
        p = write_csv(tmp_path / "d.csv", "x1,x2,w,y\n0.1,2.0,1,0\n0.2,1.0,2,2\n0.3,0.5,3,0\n")
        with pytest.raises(DataValidationError, match="0/1"):
            load_dataset(p, SCHEMA_2COV)

    def test_missing_column_is_schema_error(self, tmp_path):
        p = write_csv(tmp_path / "d.csv", "x1,w,y\n0.1,1,0\n")
        with pytest.raises(SchemaError, match="x2"):
            load_dataset(p, SCHEMA_2COV)

    def test_absent_treatment_label_rejected(self, tmp_path):
        p = write_csv(tmp_path / "d.csv", "x1,x2,w,y\n0.1,2.0,1,0\n0.2,1.0,3,1\n")
        with pytest.raises(DataValidationError, match="absent"):
            load_dataset(p, SCHEMA_2COV)

    def test_non_numeric_cell_rejected(self, tmp_path):
        p = write_csv(tmp_path / "d.csv", "x1,x2,w,y\nfoo,2.0,1,0\n0.2,1.0,2,1\n")
        with pytest.raises(DataValidationError, match="non-numeric"):
            load_dataset(p, SCHEMA_2COV)

    def test_categorical_recode_contiguous(self, tmp_path):
        schema = ColumnSchema("w", "y", (("c", CATEGORICAL),))
        p = write_csv(tmp_path / "d.csv", "c,w,y\n9,1,0\n2,2,1\n5,1,0\n9,2,1\n")
        d = load_dataset(p, schema)
        assert d.X[:, 0].tolist() == [3.0, 1.0, 2.0, 3.0]

    def test_demo_dataset_shape_and_ratio(self, demo_dir):
        from rarefx.cli import _read_schema

        schema = _read_schema(demo_dir / "schema.txt")
        d = load_dataset(demo_dir / "dataset.csv", schema, demo_dir / "truth.csv")
        manifest = dict(
            line.split("=", 1) for line in (demo_dir / "manifest.txt").read_text().splitlines()
        )
        assert d.n == int(manifest["n"])
        recorded = [int(s) for s in manifest["group_sizes"].split(":")]
        assert group_sizes(d).tolist() == recorded
        target = np.array([396, 6582, 5002]) / 11980.0
        shares = group_sizes(d) / d.n
        assert np.abs(shares - target).max() < 0.01
        assert d.truth.shape == (d.n, 3)


class TestGroupSizes:
    def test_basic(self):
        d = Dataset(X=np.zeros((4, 1)), kinds=(CONTINUOUS,), W=[1, 2, 3, 3], Y=[0, 1, 0, 1])
        assert group_sizes(d).tolist() == [1, 1, 2]

    def test_single_group(self):
        d = Dataset(X=np.zeros((3, 1)), kinds=(CONTINUOUS,), W=[1, 1, 1], Y=[0, 1, 0])
        assert group_sizes(d).tolist() == [3]

    def test_sizes_sum_to_n(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            d = random_dataset(rng, n=int(rng.integers(5, 80)))
            assert group_sizes(d).sum() == d.n


class TestRoundTrip:
    @pytest.mark.parametrize("seed", range(5))
    def test_save_load_identity(self, tmp_path, seed):
        rng = np.random.default_rng(seed)
        d = random_dataset(rng, n=40, with_truth=True)
        save_dataset(d, tmp_path / "d.csv", tmp_path / "t.csv")
        back = load_dataset(tmp_path / "d.csv", schema_for(d), tmp_path / "t.csv")
        assert np.array_equal(back.X, d.X)
        assert back.kinds == d.kinds
        assert np.array_equal(back.W, d.W)
        assert np.array_equal(back.Y, d.Y)
        assert np.array_equal(back.truth, d.truth)
        assert back.names == d.names


def test_observed_outcome_rate_matches_truth():
    # simulated at scale: per-group outcome rate within 3 MC standard
    # errors of the group-mean of the truth matrix
    from rarefx import dgp

    coeffs = dgp.load_coefficients("I", "1")
    config = dgp.scenario_config("I", "1", seed=123, n=100_000)
    d = dgp.generate_dataset(config, coeffs)
    for w in (1, 2, 3):
        mask = d.W == w
        p = d.truth[mask, w - 1].mean()
        se = np.sqrt(p * (1 - p) / mask.sum())
        assert abs(d.Y[mask].mean() - p) < 3 * se


class TestDatasetValidation:
    def test_rejects_missing_values(self):
        with pytest.raises(DataValidationError, match="non-finite"):
            Dataset(X=np.array([[np.nan], [1.0]]), kinds=(CONTINUOUS,), W=[1, 2], Y=[0, 1])

    def test_rejects_truth_outside_unit_interval(self):
        with pytest.raises(DataValidationError, match="truth"):
            Dataset(
                X=np.zeros((2, 1)),
                kinds=(CONTINUOUS,),
                W=[1, 2],
                Y=[0, 1],
                truth=np.array([[0.5, 1.5], [0.2, 0.3]]),
            )

    def test_arrays_are_immutable(self):
        d = random_dataset(np.random.default_rng(0))
        with pytest.raises(ValueError):
            d.X[0, 0] = 1.0
        with pytest.raises(ValueError):
            d.W[0] = 2


class TestGpsMatrix:
    def test_rows_must_sum_to_one(self):
        with pytest.raises(DataValidationError, match="sum"):
            GpsMatrix(np.array([[0.5, 0.4], [0.5, 0.5]]))

    def test_entries_strictly_inside_unit_interval(self):
        with pytest.raises(DataValidationError, match="strictly"):
            GpsMatrix(np.array([[1.0, 0.0], [0.5, 0.5]]))

    def test_from_raw_clamps_and_renormalizes(self):
        g = GpsMatrix.from_raw(np.array([[0.0, 0.0, 1.0], [0.2, 0.3, 0.5]]))
        assert g.probs.min() > 0.0
        assert g.probs.max() < 1.0
        assert np.abs(g.probs.sum(axis=1) - 1.0).max() < 1e-12

    def test_observed_picks_own_treatment(self):
        g = GpsMatrix(np.array([[0.2, 0.3, 0.5], [0.1, 0.6, 0.3]]))
        assert g.observed(np.array([3, 2])).tolist() == [0.5, 0.6]


class TestDesignMatrix:
    def test_reference_coding(self):
        d = Dataset(
            X=np.array([[0.5, 1.0], [1.5, 2.0], [2.5, 3.0], [0.0, 2.0]]),
            kinds=(CONTINUOUS, CATEGORICAL),
            W=[1, 2, 1, 2],
            Y=[0, 1, 0, 1],
            names=("x", "c"),
        )
        m, labels = design_matrix(d)
        assert labels == ["x", "c=2", "c=3"]
        assert m[:, 1].tolist() == [0.0, 1.0, 0.0, 1.0]
        assert m[:, 2].tolist() == [0.0, 0.0, 1.0, 0.0]
        mi, labels_i = design_matrix(d, intercept=True)
        assert labels_i[0] == "intercept"
        assert np.array_equal(mi[:, 0], np.ones(4))


class TestCausalEstimate:
    def test_rejects_equal_pair(self):
        with pytest.raises(ValueError):
            CausalEstimate(pair=(1, 1), estimand="RD", point=0.0, method="m", n_used=5)

    def test_rr_must_be_positive(self):
        with pytest.raises(ValueError):
            CausalEstimate(pair=(1, 2), estimand="RR", point=0.0, method="m", n_used=5)

    def test_interval_must_bracket_point(self):
        with pytest.raises(ValueError):
            CausalEstimate(
                pair=(1, 2), estimand="RD", point=0.5, method="m", n_used=5,
                interval=(0.6, 0.7),
            )


class TestNearestRank:
    def test_one_to_hundred(self):
        values = np.arange(1.0, 101.0)
        assert nearest_rank(values, 0.05) == 5.0
        assert nearest_rank(values, 0.95) == 95.0

    def test_extremes(self):
        values = np.array([3.0, 1.0, 2.0])
        assert nearest_rank(values, 0.0) == 1.0
        assert nearest_rank(values, 1.0) == 3.0
