"""Volume I/O, cohort manifests, geometric preprocessing and augmentation.

A VolumeGrid is a 3D scalar field with per-axis voxel spacing (mm) and a
physical origin; ``data[i, j, k]`` sits at ``origin + index * spacing``.
Preprocessing follows resample -> crop -> normalize, so intensity
statistics are computed on exactly the region the model sees.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import niftiio
from .errors import EncodingError, GeometryError, LoadError, SchemaError
from .survmath import SurvivalLabel

CT_CLIP = 1024.0
PET_STD_FLOOR = 1e-6
CT_PAD = -1024.0
PET_PAD = 0.0
MASK_PAD = 0
HOTSPOT_FRACTION = 0.001  # brightest PET fraction used for the crop-center fallback

_SPLIT_RE = re.compile(r"^(train\d+|test)$")


@dataclass
class VolumeGrid:
    """3D scalar field with physical geometry."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise GeometryError(f"volume must be 3D, got shape {self.data.shape}")
        if any(d < 1 for d in self.data.shape):
            raise GeometryError(f"degenerate volume shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if any(s <= 0 for s in self.spacing):
            raise GeometryError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def index_to_physical(self, index) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(index, dtype=float) * np.asarray(self.spacing)

    def physical_to_index(self, point) -> np.ndarray:
        return (np.asarray(point, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def save(self, path) -> None:
        niftiio.write_nifti(path, self.data, self.spacing, self.origin)


def load_volume(path) -> VolumeGrid:
    data, spacing, origin = niftiio.read_nifti(path)
    return VolumeGrid(data, spacing, origin)


# ---------------------------------------------------------------------------
# clinical indicators

@dataclass(frozen=True)
class IndicatorSpec:
    name: str
    kind: str  # "continuous" | "categorical"
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise SchemaError(f"indicator {self.name}: unknown kind {self.kind!r}")
        if self.kind == "categorical" and len(self.categories) < 2:
            raise SchemaError(f"indicator {self.name}: needs >= 2 categories")


@dataclass
class ClinicalSchema:
    """Ordered indicator declarations plus (after fit) training z-score stats."""

    indicators: tuple[IndicatorSpec, ...]
    stats: dict[str, tuple[float, float]] = field(default_factory=dict)

    @classmethod
    def from_declarations(cls, decls: dict[str, str]) -> "ClinicalSchema":
        """Build from config-style declarations, e.g.
        {"age": "continuous", "gender": "categorical:M|F"}."""
        specs = []
        for name, decl in decls.items():
            decl = decl.strip()
            if decl == "continuous":
                specs.append(IndicatorSpec(name, "continuous"))
            elif decl.startswith("categorical:"):
                cats = tuple(c.strip() for c in decl.split(":", 1)[1].split("|"))
                specs.append(IndicatorSpec(name, "categorical", cats))
            else:
                raise SchemaError(f"indicator {name}: bad declaration {decl!r}")
        return cls(tuple(specs))

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.indicators]

    def fit(self, raw_rows: list[dict]) -> "ClinicalSchema":
        """Compute continuous-indicator mean/std over non-missing training values."""
        stats = {}
        for spec in self.indicators:
            if spec.kind != "continuous":
                continue
            vals = [float(r[spec.name]) for r in raw_rows if r.get(spec.name, "") != ""]
            if vals:
                mean = float(np.mean(vals))
                std = float(np.std(vals))
            else:
                mean, std = 0.0, 0.0
            stats[spec.name] = (mean, max(std, 1e-12))
        self.stats = stats
        return self


@dataclass
class ClinicalVector:
    """Encoded indicators, one entry per model-input column."""

    names: list[str]
    values: np.ndarray
    missing_flags: np.ndarray
    kinds: list[str]
    indicator: list[str]  # originating indicator per column

    def __post_init__(self):
        n = len(self.names)
        if not (len(self.values) == len(self.missing_flags) == len(self.kinds) == len(self.indicator) == n):
            raise SchemaError("clinical vector fields must have equal length")

    def model_input(self) -> np.ndarray:
        """Values plus one missing flag per indicator, as floats."""
        flags = []
        seen = []
        for ind, miss in zip(self.indicator, self.missing_flags):
            if ind not in seen:
                seen.append(ind)
                flags.append(float(miss))
        return np.concatenate([np.asarray(self.values, dtype=float), np.asarray(flags)])


def encode_clinical(raw_row: dict, schema: ClinicalSchema) -> ClinicalVector:
    """Encode one manifest row of raw indicator strings.

    Continuous values are z-scored with the schema's fitted training stats;
    categorical values become full one-hot groups. Missing values ("") give
    an all-zero encoding with the missing flag set.
    """
    names, values, missing, kinds, origin = [], [], [], [], []
    for spec in schema.indicators:
        raw = str(raw_row.get(spec.name, "")).strip()
        is_missing = raw == ""
        if spec.kind == "continuous":
            if is_missing:
                val = 0.0
            else:
                if spec.name not in schema.stats:
                    raise SchemaError(f"indicator {spec.name}: schema not fitted")
                try:
                    x = float(raw)
                except ValueError:
                    raise EncodingError(f"indicator {spec.name}: non-numeric value {raw!r}")
                mean, std = schema.stats[spec.name]
                val = (x - mean) / std
            names.append(spec.name)
            values.append(val)
            missing.append(is_missing)
            kinds.append("continuous")
            origin.append(spec.name)
        else:
            if not is_missing and raw not in spec.categories:
                raise EncodingError(
                    f"indicator {spec.name}: unknown category {raw!r} "
                    f"(expected one of {list(spec.categories)})"
                )
            for cat in spec.categories:
                names.append(f"{spec.name}={cat}")
                values.append(0.0 if is_missing else float(raw == cat))
                missing.append(is_missing)
                kinds.append("categorical")
                origin.append(spec.name)
    return ClinicalVector(names, np.asarray(values), np.asarray(missing, dtype=bool), kinds, origin)


# ---------------------------------------------------------------------------
# cohort

@dataclass
class PatientRecord:
    patient_id: str
    pet: VolumeGrid
    ct: VolumeGrid
    mask: VolumeGrid | None
    crop_center: tuple[float, float, float] | None
    survival: SurvivalLabel
    clinical_raw: dict[str, str] = field(default_factory=dict)
    clinical: ClinicalVector | None = None


@dataclass
class Cohort:
    records: list[PatientRecord]
    split_assignments: dict[str, str]
    clinical_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        ids = [r.patient_id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise SchemaError(f"duplicate patient_id(s): {dupes}")
        missing = [i for i in ids if i not in self.split_assignments]
        if missing:
            raise SchemaError(f"records without split label: {missing}")

    def subset(self, split_predicate) -> list[PatientRecord]:
        return [r for r in self.records if split_predicate(self.split_assignments[r.patient_id])]

    def train_records(self) -> list[PatientRecord]:
        return self.subset(lambda s: s.startswith("train"))

    def test_records(self) -> list[PatientRecord]:
        return self.subset(lambda s: s == "test")

    def fold_labels(self) -> list[str]:
        return sorted({s for s in self.split_assignments.values() if s.startswith("train")})


MANIFEST_FIXED_COLUMNS = [
    "patient_id",
    "split",
    "pet_path",
    "ct_path",
    "mask_path",
    "center_x",
    "center_y",
    "center_z",
    "time",
    "event",
]


def load_cohort(manifest_path) -> Cohort:
    """Load a cohort from a manifest CSV (paths resolved relative to it).

    Every referenced volume is opened and validated; schema violations name
    the offending row/patient.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise LoadError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    with open(manifest_path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        missing_cols = [c for c in MANIFEST_FIXED_COLUMNS if c not in header]
        if missing_cols:
            raise SchemaError(f"manifest missing required columns: {missing_cols}")
        clin_cols = [c for c in header if c.startswith("clin_")]
        rows = list(reader)

    records = []
    splits = {}
    seen = set()
    for lineno, row in enumerate(rows, start=2):
        pid = (row["patient_id"] or "").strip()
        if not pid:
            raise SchemaError(f"row {lineno}: empty patient_id")
        if pid in seen:
            raise SchemaError(f"duplicate patient_id {pid!r} (row {lineno})")
        seen.add(pid)

        split = (row["split"] or "").strip()
        if not _SPLIT_RE.match(split):
            raise SchemaError(f"row {lineno} ({pid}): bad split label {split!r}")

        try:
            time = float(row["time"])
        except (TypeError, ValueError):
            raise SchemaError(f"row {lineno} ({pid}): non-numeric time {row['time']!r}")
        if not time > 0:
            raise SchemaError(f"row {lineno} ({pid}): survival time must be > 0, got {time}")
        event_raw = (row["event"] or "").strip()
        if event_raw not in ("0", "1"):
            raise SchemaError(f"row {lineno} ({pid}): event must be 0 or 1, got {event_raw!r}")

        def _load(col):
            rel = (row[col] or "").strip()
            if not rel:
                return None
            try:
                return load_volume(base / rel)
            except LoadError as exc:
                raise LoadError(f"row {lineno} ({pid}), column {col}: {exc}") from exc

        pet = _load("pet_path")
        ct = _load("ct_path")
        if pet is None or ct is None:
            raise SchemaError(f"row {lineno} ({pid}): pet_path and ct_path are required")
        mask = _load("mask_path")

        centers = [(row[c] or "").strip() for c in ("center_x", "center_y", "center_z")]
        if all(centers):
            crop_center = tuple(float(c) for c in centers)
        elif any(centers):
            raise SchemaError(f"row {lineno} ({pid}): center_x/y/z must all be given or all empty")
        else:
            crop_center = None

        clinical_raw = {c[len("clin_"):]: (row[c] or "").strip() for c in clin_cols}
        records.append(
            PatientRecord(
                patient_id=pid,
                pet=pet,
                ct=ct,
                mask=mask,
                crop_center=crop_center,
                survival=SurvivalLabel(time=time, event=event_raw == "1"),
                clinical_raw=clinical_raw,
            )
        )
        splits[pid] = split
    return Cohort(records, splits, clinical_names=[c[len("clin_"):] for c in clin_cols])


# ---------------------------------------------------------------------------
# geometric preprocessing

def resample_isotropic(v: VolumeGrid, target_mm: float, interpolation: str = "trilinear") -> VolumeGrid:
    """Resample to isotropic voxels of target_mm via trilinear interpolation.

    Output axis length = round(input_length * input_spacing / target_mm);
    the origin is preserved, so physical extent changes by less than one
    voxel. Use interpolation="nearest" for label volumes.
    """
    if not target_mm > 0:
        raise GeometryError(f"target spacing must be > 0, got {target_mm}")
    if interpolation not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    in_shape = v.shape
    out_shape = tuple(
        max(int(round(n * s / target_mm)), 1) for n, s in zip(in_shape, v.spacing)
    )
    if v.spacing == (target_mm,) * 3 and out_shape == in_shape:
        return VolumeGrid(v.data.copy(), v.spacing, v.origin)
    # output index m maps to input index m * target / spacing along each axis
    coords = np.meshgrid(
        *[np.arange(n) * target_mm / s for n, s in zip(out_shape, v.spacing)],
        indexing="ij",
    )
    order = 1 if interpolation == "trilinear" else 0
    data = ndimage.map_coordinates(
        v.data.astype(np.float32, copy=False), coords, order=order, mode="nearest"
    )
    if interpolation == "nearest":
        data = data.astype(v.data.dtype)
    return VolumeGrid(data, (target_mm,) * 3, v.origin)


def crop_or_pad(v: VolumeGrid, center, size_vox, pad_value: float) -> VolumeGrid:
    """Extract a size_vox window whose central voxel is the voxel nearest the
    physical point `center`; regions outside the volume read pad_value."""
    size_vox = tuple(int(s) for s in size_vox)
    if any(s <= 0 for s in size_vox):
        raise GeometryError(f"crop size must be positive, got {size_vox}")
    idx = v.physical_to_index(center)
    for a in range(3):
        if not (0 <= idx[a] <= v.shape[a] - 1):
            raise GeometryError(
                f"crop center {tuple(float(c) for c in center)} lies outside the volume "
                f"extent on axis {a}"
            )
    c_idx = np.round(idx).astype(int)
    start = c_idx - np.array(size_vox) // 2
    out = np.full(size_vox, pad_value, dtype=v.data.dtype)
    src_lo = np.maximum(start, 0)
    src_hi = np.minimum(start + np.array(size_vox), v.shape)
    dst_lo = src_lo - start
    dst_hi = dst_lo + (src_hi - src_lo)
    if np.all(src_hi > src_lo):
        out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = v.data[
            src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]
        ]
    new_origin = tuple(v.origin[a] + start[a] * v.spacing[a] for a in range(3))
    return VolumeGrid(out, v.spacing, new_origin)


def normalize_ct(v: VolumeGrid) -> VolumeGrid:
    """Clip to [-1024, 1024] and scale into [-1, 1]."""
    data = np.clip(v.data.astype(np.float32), -CT_CLIP, CT_CLIP) / CT_CLIP
    return VolumeGrid(data, v.spacing, v.origin)


def normalize_pet(v: VolumeGrid) -> VolumeGrid:
    """Z-score over the whole volume, with a floored std so constant volumes
    map to zero instead of blowing up."""
    data = v.data.astype(np.float64)
    std = float(data.std())
    if std < PET_STD_FLOOR:
        out = np.zeros_like(data)
    else:
        out = (data - data.mean()) / std
    return VolumeGrid(out.astype(np.float32), v.spacing, v.origin)


def hotspot_center(pet: VolumeGrid, fraction: float = HOTSPOT_FRACTION) -> tuple[float, float, float]:
    """Physical centroid of the brightest `fraction` of PET voxels."""
    data = pet.data
    thresh = np.quantile(data, 1.0 - fraction)
    coords = np.argwhere(data >= thresh)
    centroid_idx = coords.mean(axis=0)
    return tuple(float(x) for x in pet.index_to_physical(centroid_idx))


def mask_centroid(mask: VolumeGrid) -> tuple[float, float, float] | None:
    coords = np.argwhere(mask.data > 0.5)
    if coords.size == 0:
        return None
    return tuple(float(x) for x in mask.index_to_physical(coords.mean(axis=0)))


def preprocess_record(
    record: PatientRecord,
    crop_size: tuple[int, int, int],
    target_mm: float = 1.0,
) -> tuple[VolumeGrid, VolumeGrid, VolumeGrid | None]:
    """resample -> crop around the tumor -> normalize, for one patient.

    Crop center priority: manifest center, then mask centroid, then the PET
    hotspot centroid fallback.
    """
    pet = resample_isotropic(record.pet, target_mm)
    ct = resample_isotropic(record.ct, target_mm)
    mask = None
    if record.mask is not None:
        mask = resample_isotropic(record.mask, target_mm, interpolation="nearest")

    center = record.crop_center
    if center is None and mask is not None:
        center = mask_centroid(mask)
    if center is None:
        center = hotspot_center(pet)

    pet = crop_or_pad(pet, center, crop_size, PET_PAD)
    ct = crop_or_pad(ct, center, crop_size, CT_PAD)
    if mask is not None:
        mask = crop_or_pad(mask, center, crop_size, MASK_PAD)
    return normalize_pet(pet), normalize_ct(ct), mask


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AffineParams:
    """Rotation (degrees per axis), isotropic scale, translation (voxels)."""

    rotations: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)


def sample_affine_params(
    rng: np.random.Generator,
    rotate_deg: float = 10.0,
    scale_range: tuple[float, float] = (0.9, 1.1),
    translate_vox: float = 10.0,
) -> AffineParams:
    rot = tuple(rng.uniform(-rotate_deg, rotate_deg) for _ in range(3))
    scale = float(rng.uniform(scale_range[0], scale_range[1]))
    trans = tuple(rng.uniform(-translate_vox, translate_vox) for _ in range(3))
    return AffineParams(rot, scale, trans)


def _rotation_matrix(rotations_deg) -> np.ndarray:
    rx, ry, rz = np.deg2rad(rotations_deg)
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def apply_affine(v: VolumeGrid, params: AffineParams, order: int, fill: float) -> VolumeGrid:
    """Rotate/scale about the volume center, then translate, in index space."""
    if params == AffineParams():
        return VolumeGrid(v.data.copy(), v.spacing, v.origin)
    fwd = _rotation_matrix(params.rotations) * params.scale
    inv = np.linalg.inv(fwd)
    center = (np.array(v.shape, dtype=float) - 1) / 2
    offset = center - inv @ (center + np.array(params.translation, dtype=float))
    data = ndimage.affine_transform(
        v.data.astype(np.float32, copy=False),
        inv,
        offset=offset,
        order=order,
        mode="constant",
        cval=fill,
    )
    if order == 0:
        data = data.astype(v.data.dtype)
    return VolumeGrid(data, v.spacing, v.origin)


def crop_at(v: VolumeGrid, offset: tuple[int, int, int], size: tuple[int, int, int]) -> VolumeGrid:
    sl = tuple(slice(o, o + s) for o, s in zip(offset, size))
    new_origin = tuple(v.origin[a] + offset[a] * v.spacing[a] for a in range(3))
    return VolumeGrid(v.data[sl].copy(), v.spacing, new_origin)


def augment(
    pet: VolumeGrid,
    ct: VolumeGrid,
    mask: VolumeGrid | None,
    rng_seed: int,
    crop_size: tuple[int, int, int] = (112, 112, 112),
    rotate_deg: float = 10.0,
    scale_range: tuple[float, float] = (0.9, 1.1),
    translate_vox: float = 10.0,
    fill: tuple[float, float, float] = (PET_PAD, -1.0, MASK_PAD),
    params: AffineParams | None = None,
    crop_offset: tuple[int, int, int] | None = None,
):
    """One shared random affine transform + one shared random crop.

    Images are interpolated trilinearly, masks with nearest-neighbor.
    Deterministic given rng_seed; `params`/`crop_offset` may be injected to
    pin the transform (tests, visualization). `fill` values apply to
    already-normalized pet/ct/mask volumes.
    """
    if pet.shape != ct.shape or (mask is not None and mask.shape != pet.shape):
        raise GeometryError("augment inputs must share one grid")
    if any(c > n for c, n in zip(crop_size, pet.shape)):
        raise GeometryError(f"crop size {crop_size} exceeds input shape {pet.shape}")
    rng = np.random.default_rng(rng_seed)
    if params is None:
        params = sample_affine_params(rng, rotate_deg, scale_range, translate_vox)
    if crop_offset is None:
        crop_offset = tuple(
            int(rng.integers(0, n - c + 1)) for n, c in zip(pet.shape, crop_size)
        )

    pet_t = apply_affine(pet, params, order=1, fill=fill[0])
    ct_t = apply_affine(ct, params, order=1, fill=fill[1])
    mask_t = apply_affine(mask, params, order=0, fill=fill[2]) if mask is not None else None

    pet_t = crop_at(pet_t, crop_offset, crop_size)
    ct_t = crop_at(ct_t, crop_offset, crop_size)
    if mask_t is not None:
        mask_t = crop_at(mask_t, crop_offset, crop_size)
    return pet_t, ct_t, mask_t
