"""Two-stage training orchestration: segmentation pretraining (Stage-I),
radiomics bridging, survival fine-tuning (Stage-II), validation,
checkpointing, cross-validation and evaluation.

All randomness flows from one master seed through tagged sub-seeds, so a
run is reproducible end to end in deterministic mode.
"""

from __future__ import annotations

import csv
import hashlib
import os
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import dmssnet, radstats, segmath, survmath, volio
from .dmssnet import Checkpoint, DMSSNet, ModelConfig, build_model, transfer_weights
from .errors import ConfigError, DataError, NumericFault, UndefinedMetricError
from .volio import Cohort, PatientRecord, VolumeGrid

STRATEGIES = ("ssl", "stl_surv", "stl_seg")
DETERMINISTIC_ENV = "DEEPMSS_DETERMINISTIC"


def derive_seed(master: int, *tags) -> int:
    """Stable sub-seed from (master seed, purpose tags)."""
    text = "|".join([str(master)] + [str(t) for t in tags])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") % (2 ** 63)


def deterministic_mode_requested() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "") == "1"


@dataclass(frozen=True)
class StageSchedule:
    iterations: int
    lr_milestones: tuple[tuple[int, float], ...]  # (start_iteration, lr), ascending

    def __post_init__(self):
        if self.iterations <= 0:
            raise ConfigError(f"iterations must be > 0, got {self.iterations}")
        starts = [m[0] for m in self.lr_milestones]
        if not starts or starts[0] != 0:
            raise ConfigError("lr_milestones must start at iteration 0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError(f"lr drops must come at increasing iterations, got {starts}")

    def lr_at(self, iteration: int) -> float:
        lr = self.lr_milestones[0][1]
        for start, value in self.lr_milestones:
            if iteration >= start:
                lr = value
        return lr


@dataclass(frozen=True)
class TrainConfig:
    stage1: StageSchedule = StageSchedule(10000, ((0, 1e-4), (4000, 5e-5), (8000, 1e-5)))
    stage2: StageSchedule = StageSchedule(10000, ((0, 5e-5), (4000, 1e-5), (8000, 1e-6)))
    batch_size: int = 2
    val_every: int = 200
    augment: bool = True
    strategy: str = "ssl"
    use_radiomics: bool = True
    use_clinical: bool = True
    radiomics_source: str = "predicted"  # "predicted" | "ground_truth"
    freeze_encoder: bool = False
    seed: int = 0
    target_mm: float = 1.0
    preprocess_size: tuple[int, int, int] = (160, 160, 160)
    train_crop: tuple[int, int, int] = (112, 112, 112)
    deterministic: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.radiomics_source not in ("predicted", "ground_truth"):
            raise ConfigError(f"bad radiomics_source {self.radiomics_source!r}")
        if self.batch_size < 1 or self.batch_size % 2:
            raise ConfigError(
                f"batch_size must be even for censored/uncensored pairing, got {self.batch_size}"
            )
        if self.val_every <= 0:
            raise ConfigError(f"val_every must be > 0, got {self.val_every}")

    @classmethod
    def desk_profile(cls, seed: int = 0, **overrides) -> "TrainConfig":
        """Small-everything profile: 48^3 crops, 800+800 iterations, LR drops
        at the same 40%/80% marks as the full schedule."""
        defaults = dict(
            stage1=StageSchedule(800, ((0, 1e-4), (320, 5e-5), (640, 1e-5))),
            stage2=StageSchedule(800, ((0, 5e-5), (320, 1e-5), (640, 1e-6))),
            preprocess_size=(48, 48, 48),
            train_crop=(48, 48, 48),
            seed=seed,
        )
        defaults.update(overrides)
        return cls(**defaults)

    @classmethod
    def paper_profile(cls, seed: int = 0, **overrides) -> "TrainConfig":
        return cls(seed=seed, **overrides)


def apply_determinism(cfg: TrainConfig) -> None:
    if cfg.deterministic or deterministic_mode_requested():
        torch.use_deterministic_algorithms(True, warn_only=True)


# ---------------------------------------------------------------------------
# data preparation

@dataclass
class PreparedPatient:
    record: PatientRecord
    pet: VolumeGrid
    ct: VolumeGrid
    mask: VolumeGrid | None


def prepare_cohort(cohort: Cohort, cfg: TrainConfig) -> dict[str, PreparedPatient]:
    prepared = {}
    for rec in cohort.records:
        pet, ct, mask = volio.preprocess_record(rec, cfg.preprocess_size, cfg.target_mm)
        prepared[rec.patient_id] = PreparedPatient(rec, pet, ct, mask)
    return prepared


def split_ids(cohort: Cohort, fold: str):
    """(train, validation, test) patient ids for one validation fold label."""
    labels = cohort.fold_labels()
    if fold not in labels:
        raise DataError(f"unknown fold {fold!r}; cohort has {labels}")
    train, val, test = [], [], []
    for rec in cohort.records:
        s = cohort.split_assignments[rec.patient_id]
        if s == "test":
            test.append(rec.patient_id)
        elif s == fold:
            val.append(rec.patient_id)
        else:
            train.append(rec.patient_id)
    overlap = (set(train) | set(val)) & set(test)
    if overlap:
        raise DataError(f"train/validation overlaps test split: {sorted(overlap)}")
    return train, val, test


def build_batch_stream(records: list[PatientRecord], rng_seed: int, batch_size: int = 2):
    """Infinite stream of patient-id batches pairing censored with
    uncensored samples (half/half per batch). Falls back to uniform
    sampling with a warning when one stratum is empty."""
    censored = [r.patient_id for r in records if not r.survival.event]
    uncensored = [r.patient_id for r in records if r.survival.event]
    rng = np.random.default_rng(rng_seed)
    if not censored or not uncensored:
        warnings.warn(
            "cohort lacks a censored or uncensored stratum; "
            "falling back to uniform batch sampling"
        )
        everyone = [r.patient_id for r in records]
        while True:
            yield [everyone[rng.integers(len(everyone))] for _ in range(batch_size)]
    while True:
        batch = []
        for _ in range(batch_size // 2):
            batch.append(censored[rng.integers(len(censored))])
            batch.append(uncensored[rng.integers(len(uncensored))])
        yield batch


def _training_volumes(prep: PreparedPatient, cfg: TrainConfig, aug_seed: int):
    if cfg.augment:
        return volio.augment(prep.pet, prep.ct, prep.mask, aug_seed, crop_size=cfg.train_crop)
    offset = tuple((n - c) // 2 for n, c in zip(prep.pet.shape, cfg.train_crop))
    pet = volio.crop_at(prep.pet, offset, cfg.train_crop)
    ct = volio.crop_at(prep.ct, offset, cfg.train_crop)
    mask = volio.crop_at(prep.mask, offset, cfg.train_crop) if prep.mask is not None else None
    return pet, ct, mask


def _stack(grids: list[VolumeGrid]) -> torch.Tensor:
    return torch.from_numpy(
        np.stack([np.ascontiguousarray(g.data, dtype=np.float32) for g in grids])
    )[:, None]


def _survival_nll(s_pred: torch.Tensor, survived: torch.Tensor, event_at: torch.Tensor,
                  eps: float = survmath.DEFAULT_EPS) -> torch.Tensor:
    """Batch mean of the per-patient interval-survival negative
    log-likelihood (same formula as survmath.survival_loss)."""
    surv_term = 1.0 + survived * (s_pred - 1.0)
    evt_term = 1.0 - event_at * s_pred
    per_patient = -(
        torch.log(torch.clamp(surv_term, min=eps))
        + torch.log(torch.clamp(evt_term, min=eps))
    ).sum(dim=1)
    return per_patient.mean()


# ---------------------------------------------------------------------------
# aux features (radiomics + clinical)

def predict_mask(model: DMSSNet, prep: PreparedPatient, threshold: float = 0.5) -> VolumeGrid:
    probs = dmssnet.forward_segmentation(model, prep.pet, prep.ct)
    return VolumeGrid(segmath.binarize(probs[0], threshold), prep.pet.spacing, prep.pet.origin)


def bridge_radiomics(
    seg_model: DMSSNet | None,
    prepared: dict[str, PreparedPatient],
    train_ids: list[str],
    cfg: TrainConfig,
    external_features: dict[str, radstats.FeatureVector] | None = None,
) -> tuple[dict[str, np.ndarray], radstats.SelectionResult]:
    """Extract radiomics per patient (Stage-I predicted masks by default),
    run LASSO-Cox selection on the training ids only, and return the
    standardized selected-feature vector for every patient."""
    raw: dict[str, radstats.FeatureVector] = {}
    names = None
    for pid, prep in prepared.items():
        if external_features is not None:
            if pid not in external_features:
                raise radstats.CoverageError(f"external features missing patient {pid}")
            vec = external_features[pid]
        else:
            mask = None
            if cfg.radiomics_source == "predicted" and seg_model is not None:
                mask = predict_mask(seg_model, prep)
                if mask.data.sum() == 0:
                    mask = None
            if mask is None:
                mask = prep.mask
            if mask is None or mask.data.sum() == 0:
                warnings.warn(
                    f"patient {pid}: no usable mask for radiomics, using zero features"
                )
                vec = None
            else:
                vec = radstats.extract_builtin_features(prep.pet, prep.ct, mask)
        if vec is not None:
            names = vec.names
        raw[pid] = vec
    if names is None:
        raise DataError("no patient produced radiomics features")
    zero = radstats.FeatureVector(names, np.zeros(len(names)))
    raw = {pid: (vec if vec is not None else zero) for pid, vec in raw.items()}

    X_train = np.stack([raw[pid].values for pid in train_ids])
    labels_train = [prepared[pid].record.survival for pid in train_ids]
    selection = radstats.lasso_cox_select(
        X_train, labels_train, feature_names=names,
        cv_seed=derive_seed(cfg.seed, "lasso_cv"),
    )
    sel_idx = [names.index(n) for n in selection.selected_names]
    vectors = {}
    for pid, vec in raw.items():
        z = selection.standardize(vec.values[None])[0]
        vectors[pid] = z[sel_idx]
    return vectors, selection


def _fit_clinical(cohort: Cohort, train_ids: list[str],
                  declarations: dict[str, str] | None) -> volio.ClinicalSchema | None:
    if declarations is None or not declarations:
        return None
    schema = volio.ClinicalSchema.from_declarations(declarations)
    by_id = {r.patient_id: r for r in cohort.records}
    schema.fit([by_id[pid].clinical_raw for pid in train_ids])
    return schema


@dataclass
class AuxProvider:
    """Per-patient auxiliary input vector (selected radiomics + clinical)."""

    radiomics: dict[str, np.ndarray] | None
    selection: radstats.SelectionResult | None
    schema: volio.ClinicalSchema | None
    clinical: dict[str, np.ndarray] | None
    dim: int = field(init=False)

    def __post_init__(self):
        dim = 0
        if self.radiomics:
            dim += len(next(iter(self.radiomics.values())))
        if self.clinical:
            dim += len(next(iter(self.clinical.values())))
        self.dim = dim

    def vector(self, pid: str) -> np.ndarray:
        parts = []
        if self.radiomics is not None:
            parts.append(self.radiomics[pid])
        if self.clinical is not None:
            parts.append(self.clinical[pid])
        if not parts:
            return np.zeros(0)
        return np.concatenate(parts).astype(np.float32)

    def payload(self, cfg: TrainConfig) -> dict:
        """Plain-dict snapshot stored in the Stage-II checkpoint."""
        out = {
            "use_radiomics": self.radiomics is not None,
            "use_clinical": self.clinical is not None,
            "radiomics_source": cfg.radiomics_source,
            "radiomics": None,
            "clinical": None,
        }
        if self.selection is not None:
            out["radiomics"] = {
                "feature_names": list(self.selection.feature_names),
                "selected": list(self.selection.selected_names),
                "mean": [float(x) for x in self.selection.mean],
                "std": [float(x) for x in self.selection.std],
                "coefficients": [float(x) for x in self.selection.coefficients],
                "lambda": float(self.selection.lambda_),
                "cv_c_index": float(self.selection.cv_c_index),
            }
        if self.schema is not None:
            decls = {}
            for spec in self.schema.indicators:
                if spec.kind == "continuous":
                    decls[spec.name] = "continuous"
                else:
                    decls[spec.name] = "categorical:" + "|".join(spec.categories)
            out["clinical"] = {
                "declarations": decls,
                "stats": {k: [float(v[0]), float(v[1])] for k, v in self.schema.stats.items()},
            }
        return out


def build_aux_provider(
    cohort: Cohort,
    prepared: dict[str, PreparedPatient],
    train_ids: list[str],
    cfg: TrainConfig,
    seg_model: DMSSNet | None,
    clinical_declarations: dict[str, str] | None,
    external_features: dict[str, radstats.FeatureVector] | None = None,
) -> AuxProvider:
    radiomics = selection = None
    if cfg.use_radiomics:
        radiomics, selection = bridge_radiomics(
            seg_model, prepared, train_ids, cfg, external_features
        )
    schema = clinical_vectors = None
    if cfg.use_clinical:
        schema = _fit_clinical(cohort, train_ids, clinical_declarations)
        if schema is not None:
            clinical_vectors = {
                r.patient_id: volio.encode_clinical(r.clinical_raw, schema).model_input()
                for r in cohort.records
            }
    return AuxProvider(radiomics, selection, schema, clinical_vectors)


def aux_from_payload(
    payload: dict | None,
    prep: PreparedPatient,
    seg_model: DMSSNet | None,
) -> np.ndarray:
    """Rebuild one patient's aux vector from a checkpoint payload (used by
    predict/evaluate on cohorts the trainer never saw)."""
    if not payload:
        return np.zeros(0, dtype=np.float32)
    parts = []
    rad = payload.get("radiomics")
    if payload.get("use_radiomics") and rad is not None:
        mask = None
        if payload.get("radiomics_source") == "predicted" and seg_model is not None:
            mask = predict_mask(seg_model, prep)
            if mask.data.sum() == 0:
                mask = None
        if mask is None:
            mask = prep.mask
        if mask is None or mask.data.sum() == 0:
            warnings.warn(f"patient {prep.record.patient_id}: no usable mask, zero radiomics")
            values = np.zeros(len(rad["feature_names"]))
        else:
            vec = radstats.extract_builtin_features(prep.pet, prep.ct, mask)
            if vec.names != rad["feature_names"]:
                raise DataError("radiomics feature names diverge from checkpoint")
            values = vec.values
        z = (values - np.asarray(rad["mean"])) / np.asarray(rad["std"])
        idx = [rad["feature_names"].index(n) for n in rad["selected"]]
        parts.append(z[idx])
    clin = payload.get("clinical")
    if payload.get("use_clinical") and clin is not None:
        schema = volio.ClinicalSchema.from_declarations(clin["declarations"])
        schema.stats = {k: (v[0], v[1]) for k, v in clin["stats"].items()}
        parts.append(volio.encode_clinical(prep.record.clinical_raw, schema).model_input())
    if not parts:
        return np.zeros(0, dtype=np.float32)
    return np.concatenate(parts).astype(np.float32)


# ---------------------------------------------------------------------------
# training loops

@dataclass
class TrainLogRow:
    iteration: int
    stage: str
    loss: float
    lr: float
    val_metric: float | None

    def as_csv_row(self):
        val = "" if self.val_metric is None else repr(self.val_metric)
        return [self.iteration, self.stage, repr(self.loss), repr(self.lr), val]


def write_train_log(rows: list[TrainLogRow], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "stage", "loss", "lr", "val_metric"])
        for row in rows:
            writer.writerow(row.as_csv_row())


def _validate_dsc(model: DMSSNet, prepared, val_ids) -> float:
    scores = []
    for pid in val_ids:
        prep = prepared[pid]
        if prep.mask is None:
            continue
        pred = predict_mask(model, prep)
        scores.append(segmath.dsc_metric(pred.data, prep.mask.data))
    if not scores:
        raise DataError("validation DSC needs at least one mask")
    return float(np.mean(scores))


def _validate_cindex(model: DMSSNet, prepared, val_ids, scheme, aux: AuxProvider | None):
    times, labels = [], []
    for pid in val_ids:
        prep = prepared[pid]
        vec = aux.vector(pid) if aux is not None else None
        pred = dmssnet.forward_survival(model, prep.pet, prep.ct, aux=vec, scheme=scheme)
        times.append(survmath.predict_time(pred))
        labels.append(prep.record.survival)
    return survmath.c_index(times, labels)


def _train_stage(
    model: DMSSNet,
    stage: str,
    prepared: dict[str, PreparedPatient],
    train_ids: list[str],
    val_ids: list[str],
    schedule: StageSchedule,
    cfg: TrainConfig,
    scheme: survmath.IntervalScheme | None = None,
    aux: AuxProvider | None = None,
) -> tuple[dict, float | None, int, list[TrainLogRow]]:
    """Shared loop for both stages; returns (best state_dict, best metric,
    best iteration, log rows)."""
    torch.manual_seed(derive_seed(cfg.seed, stage, "torch"))
    train_records = [prepared[pid].record for pid in train_ids]
    stream = build_batch_stream(
        train_records, derive_seed(cfg.seed, stage, "batches"), cfg.batch_size
    )
    optimizer = torch.optim.Adam(model.parameters(), lr=schedule.lr_at(0))

    disc_labels = {}
    if stage == "surv":
        for pid in set(train_ids):
            lab = survmath.make_labels(prepared[pid].record.survival, scheme)
            disc_labels[pid] = (
                torch.from_numpy(lab.survived.astype(np.float32)),
                torch.from_numpy(lab.event_at.astype(np.float32)),
            )

    best_state, best_metric, best_iter = None, None, -1
    rows: list[TrainLogRow] = []
    for it in range(schedule.iterations):
        lr = schedule.lr_at(it)
        for group in optimizer.param_groups:
            group["lr"] = lr

        pids = next(stream)
        pets, cts, masks = [], [], []
        for slot, pid in enumerate(pids):
            aug_seed = derive_seed(cfg.seed, stage, "aug", it, slot)
            pet, ct, mask = _training_volumes(prepared[pid], cfg, aug_seed)
            pets.append(pet)
            cts.append(ct)
            masks.append(mask)

        model.train()
        pet_t, ct_t = _stack(pets), _stack(cts)
        if stage == "seg":
            out = model(pet_t, ct_t)
            mask_t = _stack(masks)
            loss = segmath.seg_loss(out["seg"], mask_t, channel_axis=1)
        else:
            aux_t = None
            if aux is not None and aux.dim > 0:
                aux_t = torch.from_numpy(np.stack([aux.vector(pid) for pid in pids]))
            out = model(pet_t, ct_t, aux=aux_t)
            survived = torch.stack([disc_labels[pid][0] for pid in pids])
            event_at = torch.stack([disc_labels[pid][1] for pid in pids])
            loss = _survival_nll(out["surv"], survived, event_at) + model.surv_head_l2()

        if not torch.isfinite(loss):
            raise NumericFault(
                f"non-finite loss at iteration {it} (stage {stage}, batch {pids})"
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        val_metric = None
        if (it + 1) % cfg.val_every == 0 or it + 1 == schedule.iterations:
            if stage == "seg":
                val_metric = _validate_dsc(model, prepared, val_ids)
            else:
                try:
                    val_metric = _validate_cindex(model, prepared, val_ids, scheme, aux)
                except UndefinedMetricError as exc:
                    warnings.warn(f"validation C-index undefined at iteration {it + 1}: {exc}")
            if val_metric is not None and (best_metric is None or val_metric > best_metric):
                best_metric = val_metric
                best_iter = it + 1
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        rows.append(TrainLogRow(it + 1, stage, float(loss), lr, val_metric))

    if best_state is None:  # no validation point ever succeeded
        best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        best_iter = schedule.iterations
    return best_state, best_metric, best_iter, rows


def run_stage1(
    model: DMSSNet,
    prepared: dict[str, PreparedPatient],
    train_ids: list[str],
    val_ids: list[str],
    cfg: TrainConfig,
) -> tuple[Checkpoint, list[TrainLogRow]]:
    """Segmentation pretraining; returns the highest-validation-DSC
    checkpoint."""
    for pid in train_ids:
        if prepared[pid].mask is None:
            raise DataError(f"patient {pid} has no mask; Stage-I needs segmentation targets")
    apply_determinism(cfg)
    state, metric, it, rows = _train_stage(
        model, "seg", prepared, train_ids, val_ids, cfg.stage1, cfg
    )
    ckpt = Checkpoint(
        config=model.config,
        state_dict=state,
        stage="seg",
        meta={"best_val_dsc": metric, "best_iteration": it, "seed": cfg.seed},
    )
    return ckpt, rows


def run_stage2(
    stage1_ckpt: Checkpoint | None,
    model_config: ModelConfig,
    prepared: dict[str, PreparedPatient],
    train_ids: list[str],
    val_ids: list[str],
    cfg: TrainConfig,
    aux: AuxProvider | None,
) -> tuple[Checkpoint, list[TrainLogRow]]:
    """Survival fine-tuning. With a Stage-I checkpoint the backbone is
    transferred bit-for-bit; otherwise (single-task survival) the model
    starts from fresh initialization."""
    apply_determinism(cfg)
    aux_dim = aux.dim if aux is not None else 0
    cfg2 = ModelConfig.from_dict({**model_config.to_dict(), "aux_feature_dim": aux_dim})
    if stage1_ckpt is not None:
        model = transfer_weights(stage1_ckpt, cfg2, seed=derive_seed(cfg.seed, "stage2_init"))
    else:
        model = build_model(cfg2, seed=derive_seed(cfg.seed, "stage2_init"))
    if cfg.freeze_encoder:
        for name, p in model.named_parameters():
            if name.startswith(("b_pet.", "b_ct.", "b_fuse.", "fusion_gates.", "pc_convs.")):
                p.requires_grad_(False)

    train_times = [prepared[pid].record.survival.time for pid in train_ids]
    scheme = survmath.make_intervals(train_times, cfg2.n_intervals)

    state, metric, it, rows = _train_stage(
        model, "surv", prepared, train_ids, val_ids, cfg.stage2, cfg, scheme=scheme, aux=aux
    )
    ckpt = Checkpoint(
        config=cfg2,
        state_dict=state,
        stage="surv",
        interval_scheme=scheme,
        feature_stats=aux.payload(cfg) if aux is not None else None,
        meta={"best_val_cindex": metric, "best_iteration": it, "seed": cfg.seed},
    )
    return ckpt, rows


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvaluationReport:
    fold: str
    c_index: float | None
    dsc_mean: float | None
    per_patient: dict[str, dict]
    gate_stats: list[dict] | None = None

    def to_text(self) -> str:
        lines = [f"fold: {self.fold}"]
        lines.append(f"c_index: {'undefined' if self.c_index is None else f'{self.c_index:.4f}'}")
        lines.append(f"dsc_mean: {'n/a' if self.dsc_mean is None else f'{self.dsc_mean:.4f}'}")
        if self.gate_stats:
            lines.append("gate mean w_fuse per level: " + ", ".join(
                f"L{row['level']}={row['mean_w_fuse']:.3f}" for row in self.gate_stats
            ))
        lines.append(f"patients: {len(self.per_patient)}")
        for pid in sorted(self.per_patient):
            row = self.per_patient[pid]
            dsc = "" if row.get("dsc") is None else f" dsc={row['dsc']:.4f}"
            pt = row.get("pred_time")
            pts = "" if pt is None else f" pred_time={pt:.2f}"
            lines.append(
                f"  {pid}: time={row['time']:.2f} event={int(row['event'])}{pts}{dsc}"
            )
        return "\n".join(lines) + "\n"

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["key", "value"])
            writer.writerow(["fold", self.fold])
            writer.writerow(["c_index", "" if self.c_index is None else repr(self.c_index)])
            writer.writerow(["dsc_mean", "" if self.dsc_mean is None else repr(self.dsc_mean)])
            if self.gate_stats:
                for row in self.gate_stats:
                    writer.writerow([f"gate_mean_w_fuse_L{row['level']}", repr(row["mean_w_fuse"])])
            writer.writerow([])
            writer.writerow(["patient_id", "time", "event", "pred_time", "dsc"])
            for pid in sorted(self.per_patient):
                row = self.per_patient[pid]
                writer.writerow([
                    pid,
                    repr(row["time"]),
                    int(row["event"]),
                    "" if row.get("pred_time") is None else repr(row["pred_time"]),
                    "" if row.get("dsc") is None else repr(row["dsc"]),
                ])

    @classmethod
    def from_csv(cls, path) -> "EvaluationReport":
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        head = {}
        gate_stats = []
        i = 1
        while i < len(rows) and rows[i]:
            key, value = rows[i][0], rows[i][1]
            if key.startswith("gate_mean_w_fuse_L"):
                level = int(key.rsplit("L", 1)[1])
                gate_stats.append(
                    {"level": level, "mean_w_fuse": float(value), "mean_w_pc": 1.0 - float(value)}
                )
            else:
                head[key] = value
            i += 1
        per_patient = {}
        for row in rows[i + 2:]:
            if not row:
                continue
            pid, time, event, pred_time, dsc = row
            per_patient[pid] = {
                "time": float(time),
                "event": bool(int(event)),
                "pred_time": float(pred_time) if pred_time else None,
                "dsc": float(dsc) if dsc else None,
            }
        return cls(
            fold=head["fold"],
            c_index=float(head["c_index"]) if head.get("c_index") else None,
            dsc_mean=float(head["dsc_mean"]) if head.get("dsc_mean") else None,
            per_patient=per_patient,
            gate_stats=gate_stats or None,
        )


def evaluate(
    ckpts: list[Checkpoint],
    prepared: dict[str, PreparedPatient],
    ids: list[str],
    fold: str = "single",
    with_gate_stats: bool = True,
) -> EvaluationReport:
    """Metrics over a cohort subset. Segmentation-stage checkpoints supply
    DSC (mean across checkpoints) and gate statistics; survival-stage
    checkpoints supply predicted times (ensembled by mean) and C-index."""
    if not ids:
        raise DataError("evaluate needs a non-empty subset")
    seg_ckpts = [c for c in ckpts if c.stage == "seg"]
    surv_ckpts = [c for c in ckpts if c.stage == "surv"]
    per_patient = {
        pid: {
            "time": prepared[pid].record.survival.time,
            "event": prepared[pid].record.survival.event,
            "pred_time": None,
            "dsc": None,
        }
        for pid in ids
    }

    dsc_mean = None
    gate_stats = None
    if seg_ckpts:
        seg_models = [c.build_model() for c in seg_ckpts]
        per_model_dsc = []
        for model in seg_models:
            scores = {}
            for pid in ids:
                prep = prepared[pid]
                if prep.mask is None:
                    continue
                pred = predict_mask(model, prep)
                scores[pid] = segmath.dsc_metric(pred.data, prep.mask.data)
            if scores:
                per_model_dsc.append(scores)
        if per_model_dsc:
            for pid in ids:
                vals = [s[pid] for s in per_model_dsc if pid in s]
                if vals:
                    per_patient[pid]["dsc"] = float(np.mean(vals))
            dsc_mean = float(np.mean([
                v["dsc"] for v in per_patient.values() if v["dsc"] is not None
            ]))
        if with_gate_stats and seg_models and seg_models[0].config.fusion_mode == "data_driven":
            pairs = [(prepared[pid].pet, prepared[pid].ct) for pid in ids]
            gate_stats = dmssnet.export_gate_statistics(seg_models[0], pairs)

    c_idx = None
    if surv_ckpts:
        # pair each survival checkpoint with its fold's segmentation
        # checkpoint when counts line up (masks for radiomics), else share
        paired = len(seg_ckpts) == len(surv_ckpts)
        all_times = []
        for i, ckpt in enumerate(surv_ckpts):
            model = ckpt.build_model()
            seg_model = None
            if seg_ckpts:
                seg_model = (seg_ckpts[i] if paired else seg_ckpts[0]).build_model()
            times = []
            for pid in ids:
                prep = prepared[pid]
                vec = aux_from_payload(ckpt.feature_stats, prep, seg_model)
                pred = dmssnet.forward_survival(
                    model, prep.pet, prep.ct, aux=vec, scheme=ckpt.interval_scheme
                )
                times.append(survmath.predict_time(pred))
            all_times.append(times)
        mean_times = np.mean(np.asarray(all_times), axis=0)
        for pid, t in zip(ids, mean_times):
            per_patient[pid]["pred_time"] = float(t)
        labels = [prepared[pid].record.survival for pid in ids]
        try:
            c_idx = survmath.c_index(mean_times, labels)
        except UndefinedMetricError:
            warnings.warn("C-index undefined on this subset (reported as undefined)")

    return EvaluationReport(
        fold=fold, c_index=c_idx, dsc_mean=dsc_mean,
        per_patient=per_patient, gate_stats=gate_stats,
    )


# ---------------------------------------------------------------------------
# fold orchestration

@dataclass
class FoldResult:
    fold: str
    seg_ckpt: Checkpoint | None
    surv_ckpt: Checkpoint | None
    selection: radstats.SelectionResult | None
    log_rows: list[TrainLogRow]
    report: EvaluationReport | None = None


def train_fold(
    cohort: Cohort,
    prepared: dict[str, PreparedPatient],
    model_config: ModelConfig,
    cfg: TrainConfig,
    fold: str,
    clinical_declarations: dict[str, str] | None = None,
    external_features: dict[str, radstats.FeatureVector] | None = None,
) -> FoldResult:
    """Run the configured strategy for one validation fold."""
    train_ids, val_ids, _ = split_ids(cohort, fold)
    rows: list[TrainLogRow] = []

    seg_ckpt = None
    if cfg.strategy in ("ssl", "stl_seg"):
        model = build_model(model_config, seed=derive_seed(cfg.seed, "stage1_init"))
        seg_ckpt, seg_rows = run_stage1(model, prepared, train_ids, val_ids, cfg)
        rows += seg_rows
    if cfg.strategy == "stl_seg":
        return FoldResult(fold, seg_ckpt, None, None, rows)

    effective = cfg
    if cfg.strategy == "stl_surv" and cfg.use_radiomics and cfg.radiomics_source == "predicted":
        # no Stage-I model exists; fall back to ground-truth masks
        effective = replace(cfg, radiomics_source="ground_truth")

    aux = None
    if cfg.use_radiomics or cfg.use_clinical:
        seg_model = seg_ckpt.build_model() if seg_ckpt is not None else None
        aux = build_aux_provider(
            cohort, prepared, train_ids, effective, seg_model,
            clinical_declarations, external_features,
        )
    surv_ckpt, surv_rows = run_stage2(
        seg_ckpt if cfg.strategy == "ssl" else None,
        model_config, prepared, train_ids, val_ids, effective, aux,
    )
    rows += surv_rows
    selection = aux.selection if aux is not None else None
    return FoldResult(fold, seg_ckpt, surv_ckpt, selection, rows)


def cross_validate(
    cohort: Cohort,
    model_config: ModelConfig,
    cfg: TrainConfig,
    folds: list[str] | None = None,
    clinical_declarations: dict[str, str] | None = None,
) -> tuple[list[FoldResult], EvaluationReport]:
    """Train every fold, evaluate each on the held-out test split, and
    ensemble the per-fold predictions (mean predicted time)."""
    prepared = prepare_cohort(cohort, cfg)
    folds = folds or cohort.fold_labels()
    _, _, test_ids = split_ids(cohort, folds[0])
    if not test_ids:
        raise DataError("cohort has no test split")
    results = []
    for fold in folds:
        result = train_fold(
            cohort, prepared, model_config, cfg, fold,
            clinical_declarations=clinical_declarations,
        )
        ckpts = [c for c in (result.seg_ckpt, result.surv_ckpt) if c is not None]
        result.report = evaluate(ckpts, prepared, test_ids, fold=fold)
        results.append(result)

    ensemble_ckpts = []
    for r in results:
        ensemble_ckpts += [c for c in (r.seg_ckpt, r.surv_ckpt) if c is not None]
    ensemble_report = evaluate(ensemble_ckpts, prepared, test_ids, fold="ensemble")
    return results, ensemble_report
