"""Synthetic PET/CT cohort generator with a planted prognostic signal.

Each patient gets an axis-aligned ellipsoidal lesion at a random interior
location: hot on PET, hyperdense on CT, labelled in the mask. Survival
time decays exponentially with a planted risk score built from lesion
volume and PET intensity, so a working pipeline can recover the ordering.
Everything is deterministic given the spec seed (per-patient sub-seeds
allow order-independent generation).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .survmath import SurvivalLabel
from .volio import Cohort, PatientRecord, VolumeGrid

CT_BACKGROUND_HU = 40.0
PET_BACKGROUND = 1.0


@dataclass(frozen=True)
class PhantomSpec:
    n_patients: int = 100
    size_vox: tuple[int, int, int] = (48, 48, 48)
    lesion_radius_range: tuple[float, float] = (4.0, 9.0)  # semi-axes, mm
    pet_intensity_range: tuple[float, float] = (3.0, 8.0)
    ct_lesion_offset_range: tuple[float, float] = (40.0, 120.0)  # HU above background
    noise_std: float = 0.1  # PET additive noise
    censor_rate: float = 0.3
    risk_coefficients: tuple[float, float] = (1.0, 0.5)  # (log-volume, intensity)
    horizon: float = 1825.0
    seed: int = 0
    # plumbing knobs beyond the core contract
    ct_noise_hu: float = 12.0
    survival_noise_sigma: float = 0.2
    marker_noise: float = 0.25
    test_fraction: float = 0.2
    n_folds: int = 5

    def __post_init__(self):
        if self.n_patients < 2:
            raise ValueError("need at least 2 patients")
        if not 0 <= self.censor_rate < 1:
            raise ValueError(f"censor_rate must lie in [0, 1), got {self.censor_rate}")
        lo, hi = self.lesion_radius_range
        if not (0 < lo <= hi):
            raise ValueError(f"bad lesion_radius_range {self.lesion_radius_range}")
        if 2 * hi + 4 > min(self.size_vox):
            raise ValueError(
                f"lesions up to {hi} mm cannot fit inside {self.size_vox} voxels"
            )
        if not self.horizon > 0:
            raise ValueError("horizon must be > 0")


def planted_risk(lesion_volume: float, pet_peak: float, coeffs: tuple[float, float]) -> float:
    """risk = w_vol * log(volume) + w_int * pet_peak."""
    if not lesion_volume > 0:
        raise ValueError(f"lesion volume must be > 0, got {lesion_volume}")
    return float(coeffs[0] * np.log(lesion_volume) + coeffs[1] * pet_peak)


def _ellipsoid_mask(shape, center, semi_axes) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, semi_axes):
        acc = acc + ((g - c) / r) ** 2
    return (acc <= 1.0).astype(np.uint8)


def _generate_patient(spec: PhantomSpec, index: int):
    rng = np.random.default_rng((spec.seed, index))
    shape = spec.size_vox

    semi = rng.uniform(*spec.lesion_radius_range, size=3)
    margin = semi.max() + 2.0
    center = np.array([rng.uniform(margin, n - 1 - margin) for n in shape])
    mask = _ellipsoid_mask(shape, center, semi)

    pet_intensity = float(rng.uniform(*spec.pet_intensity_range))
    ct_offset = float(rng.uniform(*spec.ct_lesion_offset_range))

    pet = np.full(shape, PET_BACKGROUND, dtype=np.float64)
    pet[mask > 0] = pet_intensity
    pet += rng.normal(0.0, spec.noise_std, size=shape)

    ct = np.full(shape, CT_BACKGROUND_HU, dtype=np.float64)
    ct[mask > 0] += ct_offset
    ct += rng.normal(0.0, spec.ct_noise_hu, size=shape)

    volume_mm3 = float(mask.sum())  # 1 mm isotropic voxels
    risk = planted_risk(volume_mm3, pet_intensity, spec.risk_coefficients)
    t_event = spec.horizon * np.exp(-risk) * rng.lognormal(0.0, spec.survival_noise_sigma)
    t_event = float(np.clip(t_event, 1e-6, spec.horizon))

    censored = rng.uniform() < spec.censor_rate
    if censored:
        t_obs = float(max(rng.uniform(0.0, t_event), 1e-9))
    else:
        t_obs = t_event

    marker = risk + float(rng.normal(0.0, spec.marker_noise))
    site = "A" if rng.uniform() < 0.5 else "B"

    pid = f"PH{index:04d}"
    record = PatientRecord(
        patient_id=pid,
        pet=VolumeGrid(pet.astype(np.float32), (1.0, 1.0, 1.0)),
        ct=VolumeGrid(ct.astype(np.float32), (1.0, 1.0, 1.0)),
        mask=VolumeGrid(mask, (1.0, 1.0, 1.0)),
        crop_center=tuple(float(c) for c in center),
        survival=SurvivalLabel(time=t_obs, event=not censored),
        clinical_raw={"marker": repr(marker), "site": site},
    )
    truth = {"patient_id": pid, "planted_risk": risk, "true_event_time": t_event}
    return record, truth


def generate_cohort(spec: PhantomSpec) -> tuple[Cohort, list[dict]]:
    """Generate the cohort plus a ground-truth table of planted risks."""
    records, truths = [], []
    for i in range(spec.n_patients):
        record, truth = _generate_patient(spec, i)
        records.append(record)
        truths.append(truth)

    split_rng = np.random.default_rng((spec.seed, 1 << 20))
    order = split_rng.permutation(spec.n_patients)
    n_test = int(round(spec.n_patients * spec.test_fraction))
    splits = {}
    fold = 0
    for rank, idx in enumerate(order):
        pid = records[idx].patient_id
        if rank < n_test:
            splits[pid] = "test"
        else:
            splits[pid] = f"train{fold % spec.n_folds}"
            fold += 1
    cohort = Cohort(records, splits, clinical_names=["marker", "site"])
    return cohort, truths


CLINICAL_DECLARATIONS = {"marker": "continuous", "site": "categorical:A|B"}


def write_cohort(cohort: Cohort, truths: list[dict], out_dir) -> Path:
    """Write NIfTI volumes + manifest.csv + ground_truth.csv; returns the
    manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(exist_ok=True)

    clin_cols = [f"clin_{n}" for n in cohort.clinical_names]
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["patient_id", "split", "pet_path", "ct_path", "mask_path",
             "center_x", "center_y", "center_z", "time", "event"] + clin_cols
        )
        for rec in cohort.records:
            pid = rec.patient_id
            rec.pet.save(vol_dir / f"{pid}_pet.nii.gz")
            rec.ct.save(vol_dir / f"{pid}_ct.nii.gz")
            mask_rel = ""
            if rec.mask is not None:
                rec.mask.save(vol_dir / f"{pid}_mask.nii.gz")
                mask_rel = f"volumes/{pid}_mask.nii.gz"
            cx, cy, cz = (
                (repr(c) for c in rec.crop_center) if rec.crop_center else ("", "", "")
            )
            writer.writerow(
                [pid, cohort.split_assignments[pid],
                 f"volumes/{pid}_pet.nii.gz", f"volumes/{pid}_ct.nii.gz", mask_rel,
                 cx, cy, cz, repr(rec.survival.time), int(rec.survival.event)]
                + [rec.clinical_raw.get(n, "") for n in cohort.clinical_names]
            )

    with open(out_dir / "ground_truth.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["patient_id", "planted_risk", "true_event_time"])
        for t in truths:
            writer.writerow([t["patient_id"], repr(t["planted_risk"]), repr(t["true_event_time"])])
    return manifest
