import numpy as np
import pytest

from retinarisk.dataset import (
    Dataset,
    ManifestError,
    downsample_mask,
    load_dataset,
    metadata_vector,
    quantize,
    read_biomarkers,
    read_manifest,
)
from retinarisk.preprocess import PreprocessConfig
from retinarisk.synthdata import MANIFEST_HEADER, CohortConfig, gen_cohort

PCFG = PreprocessConfig(target_size=8)


@pytest.fixture
def cohort_dir(tmp_path):
    gen_cohort(CohortConfig(n=10, render_size=32, seed=2), tmp_path)
    return tmp_path


def rewrite_row(path, row_index, column, value):
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    cells = lines[row_index].split(",")
    cells[header.index(column)] = value
    lines[row_index] = ",".join(cells)
    path.write_text("\n".join(lines) + "\n")


class TestMetadata:
    def test_scaling(self):
        np.testing.assert_allclose(metadata_vector(54.0, 10.0), [0.5, 0.25])

    def test_clamped(self):
        np.testing.assert_array_equal(metadata_vector(5.0, 80.0), [0.0, 1.0])


class TestHelpers:
    def test_quantize_is_idempotent(self):
        img = np.random.default_rng(0).random((5, 5, 3))
        q = quantize(img)
        np.testing.assert_array_equal(quantize(q), q)
        assert np.max(np.abs(q - img)) <= 0.5 / 255 + 1e-12

    def test_downsample_mask_keeps_small_lesions(self):
        mask = np.zeros((32, 32), dtype=bool)
        mask[10, 10] = True
        assert downsample_mask(mask, 8).any()


class TestManifest:
    def test_round_trip(self, cohort_dir):
        recs = read_manifest(cohort_dir / "manifest.csv")
        assert len(recs) == 10
        assert recs[0].image.shape == (32, 32, 3)
        assert recs[0].mask is not None
        assert {s.biomarker.value for s in recs[0].series} == {"hba1c", "retinal_thickness", "vegf"}

    def test_dataset_fields(self, cohort_dir):
        data = load_dataset(cohort_dir / "manifest.csv", PCFG)
        assert len(data) == 10
        assert data.images.shape == (10, 8, 8, 3)
        assert data.meta.shape == (10, 2)
        assert data.masks.shape == (10, 8, 8)
        assert data.has_risk and data.has_survival

    def test_grade_only_rows(self, cohort_dir):
        path = cohort_dir / "manifest.csv"
        for col in ("risk", "progression_months", "event"):
            rewrite_row(path, 1, col, "")
        data = load_dataset(path, PCFG)
        assert np.isnan(data.risks[0]) and np.isnan(data.times[0]) and data.events[0] == -1
        assert not data.has_risk and not data.has_survival

    @pytest.mark.parametrize("column,value,fragment", [("grade", "7", "row 3"), ("grade", "x", "row 3"),
                                                       ("risk", "1.5", "row 3"), ("age", "", "row 3"),
                                                       ("event", "2", "row 3")])
    def test_bad_row_names_row_number(self, cohort_dir, column, value, fragment):
        path = cohort_dir / "manifest.csv"
        rewrite_row(path, 2, column, value)
        with pytest.raises(ManifestError, match=fragment):
            read_manifest(path, load_images=False)

    def test_missing_image_names_path(self, cohort_dir):
        (cohort_dir / "images" / "P00004.png").unlink()
        with pytest.raises(FileNotFoundError, match="P00004.png"):
            read_manifest(cohort_dir / "manifest.csv")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.csv"):
            read_manifest(tmp_path / "nope.csv")

    def test_missing_columns(self, cohort_dir):
        path = cohort_dir / "manifest.csv"
        path.write_text("patient_id,grade\nP00000,1\n")
        with pytest.raises(ManifestError, match="missing columns"):
            read_manifest(path)

    def test_unknown_biomarker(self, cohort_dir):
        path = cohort_dir / "biomarkers.csv"
        lines = path.read_text().splitlines()
        lines[1] = lines[1].replace("hba1c", "ldl")
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ManifestError, match="row 2"):
            read_biomarkers(path)

    def test_header_constant(self):
        assert MANIFEST_HEADER[:3] == ["patient_id", "image_path", "grade"]


class TestDataset:
    def test_subset_and_batch(self, cohort_dir):
        data = load_dataset(cohort_dir / "manifest.csv", PCFG)
        sub = data.subset([3, 1])
        assert sub.ids == [data.ids[3], data.ids[1]]
        batch = sub.batch()
        assert batch.size == 2 and batch.graphs.batch_size == 2

    def test_from_records_matches_disk(self, cohort_dir):
        recs = gen_cohort(CohortConfig(n=10, render_size=32, seed=2))
        mem = Dataset.from_records(recs, PCFG)
        disk = load_dataset(cohort_dir / "manifest.csv", PCFG)
        np.testing.assert_array_equal(mem.images, disk.images)
        np.testing.assert_allclose(mem.risks, disk.risks, rtol=1e-15)
