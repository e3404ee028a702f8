import math

import numpy as np
import pytest
from scipy import stats

from deepmss.phantom import PhantomSpec, generate_cohort, planted_risk, write_cohort
from deepmss.volio import load_cohort


class TestPlantedRisk:
    def test_zero_coefficients(self):
        assert planted_risk(123.0, 9.0, (0.0, 0.0)) == 0.0

    def test_linear_in_intensity(self):
        r1 = planted_risk(50.0, 2.0, (0.0, 1.0))
        r2 = planted_risk(50.0, 4.0, (0.0, 1.0))
        assert r2 == pytest.approx(2 * r1)

    def test_hand_value(self):
        assert planted_risk(math.e, 2.0, (1.0, 1.0)) == pytest.approx(3.0)

    def test_monotone(self):
        base = planted_risk(100.0, 3.0, (1.0, 1.0))
        assert planted_risk(200.0, 3.0, (1.0, 1.0)) > base
        assert planted_risk(100.0, 4.0, (1.0, 1.0)) > base

    def test_zero_volume_rejected(self):
        with pytest.raises(ValueError):
            planted_risk(0.0, 1.0, (1.0, 1.0))


class TestGenerateCohort:
    def test_deterministic(self):
        spec = PhantomSpec(n_patients=4, seed=7)
        c1, t1 = generate_cohort(spec)
        c2, t2 = generate_cohort(spec)
        assert t1 == t2
        for a, b in zip(c1.records, c2.records):
            np.testing.assert_array_equal(a.pet.data, b.pet.data)
            np.testing.assert_array_equal(a.ct.data, b.ct.data)
            np.testing.assert_array_equal(a.mask.data, b.mask.data)
            assert a.survival == b.survival

    def test_masks_nonempty_and_inside_bounds(self):
        cohort, _ = generate_cohort(PhantomSpec(n_patients=10, seed=1))
        for rec in cohort.records:
            m = rec.mask.data
            assert m.sum() > 0
            # no lesion voxel touches the boundary
            assert m[0, :, :].sum() == 0 and m[-1, :, :].sum() == 0
            assert m[:, 0, :].sum() == 0 and m[:, -1, :].sum() == 0
            assert m[:, :, 0].sum() == 0 and m[:, :, -1].sum() == 0

    def test_pet_signal_planted(self):
        cohort, _ = generate_cohort(PhantomSpec(n_patients=10, seed=2))
        for rec in cohort.records:
            inside = rec.pet.data[rec.mask.data > 0].mean()
            outside = rec.pet.data[rec.mask.data == 0].mean()
            assert inside > outside

    def test_risk_anticorrelates_with_uncensored_time(self):
        spec = PhantomSpec(n_patients=100, seed=3, noise_std=0.02, censor_rate=0.0,
                           risk_coefficients=(1.0, 1.0))
        cohort, truths = generate_cohort(spec)
        risks = [t["planted_risk"] for t in truths]
        times = [r.survival.time for r in cohort.records]
        rho = stats.spearmanr(risks, times).statistic
        assert rho <= -0.8

    def test_censor_fraction_close_to_rate(self):
        spec = PhantomSpec(n_patients=1000, size_vox=(32, 32, 32),
                           lesion_radius_range=(3.0, 6.0), seed=4, censor_rate=0.3)
        cohort, _ = generate_cohort(spec)
        frac = np.mean([not r.survival.event for r in cohort.records])
        assert abs(frac - 0.3) <= 0.05

    def test_censored_time_below_event_time(self):
        cohort, truths = generate_cohort(PhantomSpec(n_patients=50, seed=5, censor_rate=0.5))
        truth_by_id = {t["patient_id"]: t for t in truths}
        n_censored = 0
        for rec in cohort.records:
            t_event = truth_by_id[rec.patient_id]["true_event_time"]
            if rec.survival.event:
                assert rec.survival.time == pytest.approx(t_event)
            else:
                n_censored += 1
                assert 0 < rec.survival.time < t_event
        assert n_censored > 0

    def test_split_assignment_80_20(self):
        cohort, _ = generate_cohort(PhantomSpec(n_patients=100, seed=6))
        n_test = len(cohort.test_records())
        assert n_test == 20
        assert len(cohort.train_records()) == 80
        assert cohort.fold_labels() == [f"train{k}" for k in range(5)]

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            PhantomSpec(n_patients=1)
        with pytest.raises(ValueError):
            PhantomSpec(censor_rate=1.0)
        with pytest.raises(ValueError):
            PhantomSpec(size_vox=(10, 10, 10), lesion_radius_range=(4.0, 9.0))


class TestManifestRoundTrip:
    def test_write_then_load_matches(self, tmp_path):
        spec = PhantomSpec(n_patients=5, seed=8)
        cohort, truths = generate_cohort(spec)
        manifest = write_cohort(cohort, truths, tmp_path / "cohort")
        loaded = load_cohort(manifest)
        assert len(loaded.records) == 5
        assert loaded.split_assignments == cohort.split_assignments
        assert loaded.clinical_names == ["marker", "site"]
        for orig, back in zip(cohort.records, loaded.records):
            assert back.patient_id == orig.patient_id
            np.testing.assert_array_equal(back.pet.data, orig.pet.data)
            np.testing.assert_array_equal(back.ct.data, orig.ct.data)
            np.testing.assert_array_equal(back.mask.data, orig.mask.data)
            assert back.crop_center == pytest.approx(orig.crop_center)
            assert back.survival.time == pytest.approx(orig.survival.time)
            assert back.survival.event == orig.survival.event
            assert float(back.clinical_raw["marker"]) == pytest.approx(
                float(orig.clinical_raw["marker"])
            )

    def test_write_byte_identical_across_runs(self, tmp_path):
        spec = PhantomSpec(n_patients=3, seed=9)
        for name in ("a", "b"):
            cohort, truths = generate_cohort(spec)
            write_cohort(cohort, truths, tmp_path / name)
        a_manifest = (tmp_path / "a" / "manifest.csv").read_bytes()
        b_manifest = (tmp_path / "b" / "manifest.csv").read_bytes()
        assert a_manifest == b_manifest
        a_gt = (tmp_path / "a" / "ground_truth.csv").read_bytes()
        assert a_gt == (tmp_path / "b" / "ground_truth.csv").read_bytes()
        for vol in sorted((tmp_path / "a" / "volumes").iterdir()):
            twin = tmp_path / "b" / "volumes" / vol.name
            assert vol.read_bytes() == twin.read_bytes(), vol.name
