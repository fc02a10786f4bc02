import numpy as np
import pytest
from scipy import stats

from retinarisk.fusion import stratify_risk
from retinarisk.synthdata import (
    GRADE_NAMES,
    LESION_COUNTS,
    CohortConfig,
    gen_biomarkers,
    gen_cohort,
    gen_fundus,
    lesion_count,
    write_cohort,
)
from retinarisk.temporal_graph import Biomarker


@pytest.fixture(scope="module")
def audit_cohort():
    return gen_cohort(CohortConfig(n=1000, render_size=16, seed=11))


def baselines(cfg, n, grade=0, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n):
        series = {s.biomarker: s for s in gen_biomarkers(grade, cfg, rng)}
        rows.append([series[m].values[0] for m in Biomarker])
    return np.array(rows)


class TestBiomarkers:
    def test_baselines_converge_to_parameters(self):
        cfg = CohortConfig()
        base = baselines(cfg, 10_000)
        for col, (mu, sd) in enumerate((cfg.hba1c, cfg.thickness, cfg.vegf)):
            se = sd / np.sqrt(base.shape[0])
            assert abs(base[:, col].mean() - mu) < 3 * se
        assert abs(base[:, 0].mean() - 7.0) < 0.05
        assert abs(base[:, 1].mean() - 250.0) < 0.6

    def test_zero_sigma_gives_exact_means(self):
        cfg = CohortConfig(hba1c=(7.0, 0.0), thickness=(250.0, 0.0), vegf=(100.0, 0.0))
        base = baselines(cfg, 20)
        np.testing.assert_array_equal(base, np.tile([7.0, 250.0, 100.0], (20, 1)))

    def test_visit_schedule(self):
        series = gen_biomarkers(2, CohortConfig(visits=5), np.random.default_rng(0))
        for s in series:
            np.testing.assert_array_equal(s.months, [0, 6, 12, 18, 24])

    def test_drift_direction_follows_grade(self):
        cfg = CohortConfig(noise=(0.0, 0.0, 0.0))
        s = {x.biomarker: x for x in gen_biomarkers(3, cfg, np.random.default_rng(0))}
        assert np.all(np.diff(s[Biomarker.HBA1C].values) > 0)
        assert np.all(np.diff(s[Biomarker.RETINAL_THICKNESS].values) < 0)
        flat = {x.biomarker: x for x in gen_biomarkers(0, cfg, np.random.default_rng(0))}
        assert np.ptp(flat[Biomarker.HBA1C].values) == 0.0

    def test_same_seed_same_series(self):
        a = gen_biomarkers(4, CohortConfig(), np.random.default_rng(5))
        b = gen_biomarkers(4, CohortConfig(), np.random.default_rng(5))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.values, y.values)

    def test_bad_grade(self):
        with pytest.raises(ValueError):
            gen_biomarkers(5, CohortConfig(), np.random.default_rng(0))


class TestFundus:
    def test_grade_zero_has_empty_mask(self):
        for seed in range(5):
            _, mask = gen_fundus(0, 64, np.random.default_rng(seed))
            assert not mask.any()

    @pytest.mark.parametrize("grade", [1, 2, 3, 4])
    def test_lesions_present_from_grade_one(self, grade):
        for seed in range(5):
            _, mask = gen_fundus(grade, 64, np.random.default_rng(seed))
            assert mask.any()

    def test_grade_four_has_more_lesions_than_grade_one(self):
        assert sum(LESION_COUNTS[4]) > sum(LESION_COUNTS[1])
        for seed in range(10):
            n4 = lesion_count(gen_fundus(4, 64, np.random.default_rng(seed))[1])
            n1 = lesion_count(gen_fundus(1, 64, np.random.default_rng(seed))[1])
            assert n4 > n1

    @pytest.mark.parametrize("size", [16, 32, 64])
    def test_mask_inside_disc_and_image_range(self, size):
        img, mask = gen_fundus(4, size, np.random.default_rng(1))
        c = (size - 1) / 2.0
        yy, xx = np.mgrid[0:size, 0:size]
        disc = np.hypot(yy - c, xx - c) < 0.46 * size
        assert not np.any(mask & ~disc)
        assert img.shape == (size, size, 3) and img.min() >= 0.0 and img.max() <= 1.0
        assert np.all(img[~disc] == 0.0)

    def test_too_small(self):
        with pytest.raises(ValueError):
            gen_fundus(1, 15, np.random.default_rng(0))


class TestCohort:
    def test_one_hot_prior(self):
        recs = gen_cohort(CohortConfig(n=25, priors=(0, 0, 1, 0, 0), render_size=16))
        assert {r.grade for r in recs} == {2}

    def test_record_invariants(self, audit_cohort):
        for r in audit_cohort:
            assert r.grade in range(5)
            assert 0.0 <= r.risk <= 1.0
            assert r.progression_months > 0
            assert r.event in (0, 1)
            assert r.mask.any() == (r.grade >= 1)

    def test_risk_shortens_time(self, audit_cohort):
        rho = stats.spearmanr([r.risk for r in audit_cohort],
                              [r.progression_months for r in audit_cohort]).statistic
        assert rho < -0.5

    def test_tier_mix_and_censoring(self, audit_cohort):
        tiers = [stratify_risk(r.risk).value for r in audit_cohort]
        share = {t: tiers.count(t) / len(tiers) for t in ("low", "medium", "high")}
        assert abs(share["low"] - 0.50) < 0.10
        assert abs(share["medium"] - 0.35) < 0.10
        assert abs(share["high"] - 0.15) < 0.10
        censored = np.mean([r.event == 0 for r in audit_cohort])
        assert abs(censored - 0.2) < 0.05

    def test_priors_respected(self, audit_cohort):
        counts = np.bincount([r.grade for r in audit_cohort], minlength=5) / len(audit_cohort)
        np.testing.assert_allclose(counts, CohortConfig().priors, atol=0.05)

    def test_written_files_are_byte_identical(self, tmp_path):
        cfg = CohortConfig(n=12, seed=7, render_size=32)
        gen_cohort(cfg, tmp_path / "a")
        gen_cohort(cfg, tmp_path / "b")
        for rel in ("manifest.csv", "biomarkers.csv", "images/P00003.png", "masks/P00003.png"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_manifest_rows(self, tmp_path):
        recs = gen_cohort(CohortConfig(n=9, render_size=16))
        manifest = write_cohort(recs, tmp_path)
        lines = manifest.read_text().splitlines()
        assert lines[0] == "patient_id,image_path,grade,risk,progression_months,event,age,diabetes_years"
        assert len(lines) == 1 + 9
        assert len(list((tmp_path / "images").glob("*.png"))) == 9

    def test_names(self):
        assert GRADE_NAMES == ("No DR", "Mild", "Moderate", "Severe", "Proliferative")

    @pytest.mark.parametrize("kwargs", [{"n": 0}, {"priors": (0.5, 0.5, 0.1, 0, 0)},
                                        {"hba1c": (7.0, -1.0)}, {"censor_fraction": 1.0}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            CohortConfig(**kwargs)
