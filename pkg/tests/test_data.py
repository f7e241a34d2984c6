import numpy as np
import pytest

from placenet.data import (
    Dataset,
    MultiCategoryPointSet,
    load_dataset,
    save_dataset,
    validate_distance_matrix,
)
from placenet.errors import DataValidationError


def write_dataset_dir(tmp_path, sample_rows, categories="A,B", place_types="PT1",
                      matrix="1\n1.0\n", threshold="1.0"):
    (tmp_path / "dist.txt").write_text(matrix)
    lines = [
        f"categories: {categories}",
        f"place_types: {place_types}",
        "distance_matrix: dist.txt",
        f"threshold: {threshold}",
    ]
    for sid, pt, label, rows in sample_rows:
        fname = f"{sid}.csv"
        (tmp_path / fname).write_text(
            "category,x,y\n" + "".join(f"{c},{x},{y}\n" for c, x, y in rows)
        )
        lines.append(f"{sid},{pt},{label},{fname}")
    manifest = tmp_path / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return str(manifest)


class TestPointSet:
    def test_normalizes_min_corner_to_origin(self):
        s = MultiCategoryPointSet(
            "a", 0, 0, np.array([0, 0]), np.array([[3.0, 5.0], [4.0, 7.0]])
        )
        assert s.locations.min(axis=0).tolist() == [0.0, 0.0]
        np.testing.assert_allclose(s.locations, [[0.0, 0.0], [1.0, 2.0]])

    def test_normalization_idempotent(self):
        rng = np.random.default_rng(1)
        s1 = MultiCategoryPointSet("a", 0, 0, rng.integers(0, 2, 6), rng.normal(size=(6, 2)))
        s2 = MultiCategoryPointSet("a", 0, 0, s1.categories, s1.locations)
        assert np.array_equal(s1.locations, s2.locations)
        assert np.array_equal(s1.categories, s2.categories)

    def test_canonical_order_is_input_order_free(self):
        rng = np.random.default_rng(2)
        cats = rng.integers(0, 3, 10)
        locs = rng.uniform(0, 5, (10, 2))
        s1 = MultiCategoryPointSet("a", 0, 0, cats, locs)
        perm = rng.permutation(10)
        s2 = MultiCategoryPointSet("a", 0, 0, cats[perm], locs[perm])
        assert s1 == s2

    def test_rejects_single_point(self):
        with pytest.raises(DataValidationError, match="at least 2"):
            MultiCategoryPointSet("one", 0, 0, np.array([0]), np.array([[0.0, 0.0]]))

    def test_rejects_nan(self):
        with pytest.raises(DataValidationError, match="non-finite"):
            MultiCategoryPointSet(
                "bad", 0, 0, np.array([0, 0]), np.array([[0.0, np.nan], [1.0, 1.0]])
            )

    def test_immutable_arrays(self):
        s = MultiCategoryPointSet(
            "a", 0, 0, np.array([0, 1]), np.array([[0.0, 0.0], [1.0, 1.0]])
        )
        with pytest.raises(ValueError):
            s.locations[0, 0] = 5.0


class TestDistanceMatrix:
    def test_valid_three_types(self):
        # place-types 1..3 steps apart with selection radius 3
        m = validate_distance_matrix([[1, 2, 3], [2, 1, 2], [3, 2, 1]], threshold=3)
        assert m.num_place_types == 3
        assert m.distance(0, 2) == 3.0
        assert m.threshold == 3.0

    def test_single_place_type(self):
        m = validate_distance_matrix([[1.0]], threshold=1)
        assert m.num_place_types == 1

    def test_asymmetry_rejected(self):
        with pytest.raises(DataValidationError, match="symmetric"):
            validate_distance_matrix([[1, 2], [3, 1]], threshold=1)

    def test_bad_diagonal_rejected(self):
        with pytest.raises(DataValidationError, match="diagonal"):
            validate_distance_matrix([[0, 2], [2, 0]], threshold=1)

    def test_entry_below_one_rejected(self):
        with pytest.raises(DataValidationError, match=">= 1"):
            validate_distance_matrix([[1, 0.5], [0.5, 1]], threshold=1)

    def test_random_matrices_accepted_iff_invariants_hold(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            n = int(rng.integers(1, 5))
            m = rng.uniform(0.5, 4.0, (n, n))
            if rng.random() < 0.5:
                m = (m + m.T) / 2.0
            if rng.random() < 0.5:
                np.fill_diagonal(m, 1.0)
            ok = (
                np.array_equal(m, m.T)
                and np.all(np.diagonal(m) == 1.0)
                and np.all(m >= 1.0)
            )
            if ok:
                validate_distance_matrix(m, threshold=1.0)
            else:
                with pytest.raises(DataValidationError):
                    validate_distance_matrix(m, threshold=1.0)


class TestLoadDataset:
    def test_minimal_manifest(self, tmp_path):
        manifest = write_dataset_dir(
            tmp_path,
            [("s1", "PT1", 0, [("A", 0.0, 0.0), ("B", 1.0, 0.0), ("A", 0.0, 1.0)])],
        )
        data = load_dataset(manifest)
        assert len(data.samples) == 1
        assert data.num_categories == 2
        assert data.samples[0].num_points == 3

    def test_nan_coordinate_names_sample(self, tmp_path):
        manifest = write_dataset_dir(
            tmp_path,
            [("badsample", "PT1", 0, [("A", 0.0, 0.0), ("B", "nan", 1.0)])],
        )
        with pytest.raises(DataValidationError, match="badsample"):
            load_dataset(manifest)

    def test_unknown_category_names_sample(self, tmp_path):
        manifest = write_dataset_dir(
            tmp_path, [("s1", "PT1", 0, [("Z", 0.0, 0.0), ("A", 1.0, 0.0)])]
        )
        with pytest.raises(DataValidationError, match="s1.*Z"):
            load_dataset(manifest)

    def test_unknown_place_type(self, tmp_path):
        manifest = write_dataset_dir(
            tmp_path, [("s1", "PT9", 0, [("A", 0.0, 0.0), ("A", 1.0, 0.0)])]
        )
        with pytest.raises(DataValidationError, match="PT9"):
            load_dataset(manifest)

    def test_too_few_points(self, tmp_path):
        manifest = write_dataset_dir(tmp_path, [("tiny", "PT1", 0, [("A", 0.0, 0.0)])])
        with pytest.raises(DataValidationError, match="tiny"):
            load_dataset(manifest)

    def test_missing_sample_file(self, tmp_path):
        manifest = write_dataset_dir(tmp_path, [])
        with open(manifest, "a") as fh:
            fh.write("ghost,PT1,0,ghost.csv\n")
        with pytest.raises(DataValidationError, match="ghost"):
            load_dataset(manifest)

    def test_paper_scale_sample_counts(self, tmp_path):
        # 81 + 145 + 103 samples across three place-types
        rng = np.random.default_rng(0)
        rows = []
        for pt, count in (("PT1", 81), ("PT2", 145), ("PT3", 103)):
            for i in range(count):
                pts = [
                    ("A", float(rng.uniform()), float(rng.uniform())),
                    ("B", float(rng.uniform()), float(rng.uniform())),
                ]
                rows.append((f"{pt}_{i}", pt, i % 2, pts))
        manifest = write_dataset_dir(
            tmp_path, rows, categories="A,B", place_types="PT1,PT2,PT3",
            matrix="3\n1 2 3\n2 1 2\n3 2 1\n", threshold="3",
        )
        data = load_dataset(manifest)
        assert len(data.samples) == 329


class TestRoundTrip:
    def test_save_load_identical(self, tmp_path, tiny_dataset):
        out = tmp_path / "d1"
        manifest = save_dataset(tiny_dataset, str(out))
        reloaded = load_dataset(manifest)
        assert reloaded.category_names == tiny_dataset.category_names
        assert reloaded.place_type_names == tiny_dataset.place_type_names
        assert reloaded.distance_matrix == tiny_dataset.distance_matrix
        assert len(reloaded.samples) == len(tiny_dataset.samples)
        for a, b in zip(reloaded.samples, tiny_dataset.samples):
            assert a == b

    def test_second_save_byte_identical(self, tmp_path, tiny_dataset):
        out1, out2 = tmp_path / "d1", tmp_path / "d2"
        save_dataset(tiny_dataset, str(out1))
        save_dataset(load_dataset(str(out1 / "manifest.txt")), str(out2))
        files1 = sorted(p.relative_to(out1) for p in out1.rglob("*") if p.is_file())
        files2 = sorted(p.relative_to(out2) for p in out2.rglob("*") if p.is_file())
        assert files1 == files2
        for rel in files1:
            assert (out1 / rel).read_bytes() == (out2 / rel).read_bytes()


class TestDatasetValidation:
    def test_duplicate_sample_ids_rejected(self, tiny_dataset):
        dup = (tiny_dataset.samples[0], tiny_dataset.samples[0])
        with pytest.raises(DataValidationError, match="duplicate"):
            Dataset(
                tiny_dataset.category_names,
                tiny_dataset.place_type_names,
                dup,
                tiny_dataset.distance_matrix,
            )

    def test_matrix_size_must_match_vocab(self, tiny_dataset):
        with pytest.raises(DataValidationError, match="matrix"):
            Dataset(
                tiny_dataset.category_names,
                ("PT1",),
                (),
                tiny_dataset.distance_matrix,
            )
