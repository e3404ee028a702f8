import numpy as np
import pytest
import torch

from deepmss import survmath
from deepmss.dmssnet import ModelConfig
from deepmss.errors import ConfigError, DataError, NumericFault
from deepmss.phantom import CLINICAL_DECLARATIONS, PhantomSpec, generate_cohort
from deepmss.pipeline import (
    EvaluationReport,
    StageSchedule,
    TrainConfig,
    _survival_nll,
    build_aux_provider,
    build_batch_stream,
    bridge_radiomics,
    cross_validate,
    derive_seed,
    evaluate,
    prepare_cohort,
    run_stage1,
    run_stage2,
    split_ids,
    train_fold,
)
from deepmss.dmssnet import build_model
from deepmss.survmath import DiscreteLabels, SurvivalLabel


MICRO_MODEL = ModelConfig(levels=3, base_width=2, n_intervals=4, dropout_rate=0.0)


def micro_train_config(**overrides):
    defaults = dict(
        stage1=StageSchedule(8, ((0, 1e-3), (4, 5e-4))),
        stage2=StageSchedule(8, ((0, 1e-3),)),
        val_every=4,
        preprocess_size=(32, 32, 32),
        train_crop=(24, 24, 24),
        seed=7,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


@pytest.fixture(scope="module")
def micro_cohort():
    spec = PhantomSpec(
        n_patients=12, size_vox=(32, 32, 32), lesion_radius_range=(3.0, 6.0),
        seed=42, censor_rate=0.3, test_fraction=0.25, n_folds=2,
    )
    return generate_cohort(spec)[0]


@pytest.fixture(scope="module")
def micro_prepared(micro_cohort):
    return prepare_cohort(micro_cohort, micro_train_config())


class TestSchedules:
    def test_paper_stage1_lr_values(self):
        sched = TrainConfig().stage1
        assert sched.lr_at(0) == 1e-4
        assert sched.lr_at(3999) == 1e-4
        assert sched.lr_at(4000) == 5e-5
        assert sched.lr_at(7999) == 5e-5
        assert sched.lr_at(8000) == 1e-5
        assert sched.lr_at(9999) == 1e-5

    def test_paper_stage2_lr_values(self):
        sched = TrainConfig().stage2
        assert sched.lr_at(0) == 5e-5
        assert sched.lr_at(4000) == 1e-5
        assert sched.lr_at(8000) == 1e-6

    def test_bad_milestones_rejected(self):
        with pytest.raises(ConfigError):
            StageSchedule(10, ((5, 1e-4),))
        with pytest.raises(ConfigError):
            StageSchedule(10, ((0, 1e-4), (3, 1e-5), (3, 1e-6)))

    def test_odd_batch_size_rejected(self):
        with pytest.raises(ConfigError):
            micro_train_config(batch_size=3)

    def test_unknown_strategy_rejected(self):
        with pytest.raises(ConfigError):
            micro_train_config(strategy="joint")


class TestBatchStream:
    def _records(self, n_censored, n_uncensored):
        recs = []
        cohort, _ = generate_cohort(PhantomSpec(
            n_patients=n_censored + n_uncensored, size_vox=(24, 24, 24),
            lesion_radius_range=(3.0, 5.0), seed=1, censor_rate=0.0,
        ))
        for i, rec in enumerate(cohort.records):
            event = i >= n_censored
            rec.survival = SurvivalLabel(rec.survival.time, event)
            recs.append(rec)
        return recs

    def test_every_batch_pairs_strata(self):
        records = self._records(3, 3)
        censored = {r.patient_id for r in records if not r.survival.event}
        stream = build_batch_stream(records, rng_seed=0)
        for _ in range(100):
            batch = next(stream)
            assert len(batch) == 2
            assert sum(pid in censored for pid in batch) == 1

    def test_all_uncensored_falls_back_with_warning(self):
        records = self._records(0, 4)
        with pytest.warns(UserWarning, match="stratum"):
            stream = build_batch_stream(records, rng_seed=0)
            batch = next(stream)
        assert len(batch) == 2

    def test_same_seed_same_sequence(self):
        records = self._records(2, 4)
        a = build_batch_stream(records, rng_seed=5)
        b = build_batch_stream(records, rng_seed=5)
        seq_a = [next(a) for _ in range(50)]
        seq_b = [next(b) for _ in range(50)]
        assert seq_a == seq_b


class TestSurvivalNLLTorch:
    def test_matches_numpy_reference(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = int(rng.integers(2, 10))
            k = int(rng.integers(1, n + 1))
            event = bool(rng.integers(0, 2))
            survived = np.array([1 if j < k else 0 for j in range(1, n + 1)], dtype=float)
            event_at = np.array([1 if (event and j == k) else 0 for j in range(1, n + 1)], dtype=float)
            pred = rng.uniform(0.01, 0.99, size=n)
            expected = survmath.survival_loss(pred, DiscreteLabels(survived, event_at))
            got = _survival_nll(
                torch.tensor(pred)[None],
                torch.tensor(survived)[None],
                torch.tensor(event_at)[None],
            )
            assert float(got) == pytest.approx(expected, rel=1e-9)

    def test_batch_mean(self):
        pred = torch.tensor([[0.8, 0.4], [0.5, 0.5]])
        survived = torch.tensor([[1.0, 0.0], [1.0, 1.0]])
        event_at = torch.tensor([[0.0, 1.0], [0.0, 0.0]])
        a = _survival_nll(pred[:1], survived[:1], event_at[:1])
        b = _survival_nll(pred[1:], survived[1:], event_at[1:])
        both = _survival_nll(pred, survived, event_at)
        assert float(both) == pytest.approx((float(a) + float(b)) / 2, rel=1e-6)


class TestSplits:
    def test_partitions_disjoint_and_cover(self, micro_cohort):
        train, val, test = split_ids(micro_cohort, "train0")
        ids = {r.patient_id for r in micro_cohort.records}
        assert set(train) | set(val) | set(test) == ids
        assert not (set(train) & set(val))
        assert not (set(train) & set(test))
        assert not (set(val) & set(test))

    def test_unknown_fold(self, micro_cohort):
        with pytest.raises(DataError):
            split_ids(micro_cohort, "train9")

    def test_derive_seed_stable_and_distinct(self):
        assert derive_seed(1, "a", 2) == derive_seed(1, "a", 2)
        assert derive_seed(1, "a", 2) != derive_seed(1, "a", 3)
        assert derive_seed(1, "a") != derive_seed(2, "a")


class TestStage1:
    def test_checkpoint_and_log(self, micro_cohort, micro_prepared):
        cfg = micro_train_config()
        train_ids, val_ids, _ = split_ids(micro_cohort, "train0")
        model = build_model(MICRO_MODEL, seed=1)
        ckpt, rows = run_stage1(model, micro_prepared, train_ids, val_ids, cfg)
        assert ckpt.stage == "seg"
        assert ckpt.meta["best_val_dsc"] is not None
        assert len(rows) == 8
        val_iters = [r.iteration for r in rows if r.val_metric is not None]
        assert val_iters == [4, 8]
        assert rows[0].lr == 1e-3 and rows[-1].lr == 5e-4

    def test_missing_masks_rejected(self, micro_cohort, micro_prepared):
        cfg = micro_train_config()
        train_ids, val_ids, _ = split_ids(micro_cohort, "train0")
        stripped = {
            pid: type(p)(p.record, p.pet, p.ct, None) for pid, p in micro_prepared.items()
        }
        model = build_model(MICRO_MODEL, seed=1)
        with pytest.raises(DataError, match="mask"):
            run_stage1(model, stripped, train_ids, val_ids, cfg)

    def test_nan_loss_aborts_with_context(self, micro_cohort, micro_prepared, monkeypatch):
        cfg = micro_train_config()
        train_ids, val_ids, _ = split_ids(micro_cohort, "train0")
        model = build_model(MICRO_MODEL, seed=1)
        monkeypatch.setattr(
            "deepmss.pipeline.segmath.seg_loss",
            lambda *a, **k: torch.tensor(float("nan"), requires_grad=True),
        )
        with pytest.raises(NumericFault, match="iteration 0"):
            run_stage1(model, micro_prepared, train_ids, val_ids, cfg)


class TestBridge:
    def _stage1(self, micro_cohort, micro_prepared, cfg):
        train_ids, val_ids, _ = split_ids(micro_cohort, "train0")
        model = build_model(MICRO_MODEL, seed=1)
        ckpt, _ = run_stage1(model, micro_prepared, train_ids, val_ids, cfg)
        return ckpt, train_ids, val_ids

    def test_selection_deterministic(self, micro_cohort, micro_prepared):
        cfg = micro_train_config()
        ckpt, train_ids, _ = self._stage1(micro_cohort, micro_prepared, cfg)
        model = ckpt.build_model()
        v1, sel1 = bridge_radiomics(model, micro_prepared, train_ids, cfg)
        v2, sel2 = bridge_radiomics(model, micro_prepared, train_ids, cfg)
        assert sel1.selected_names == sel2.selected_names
        assert sel1.lambda_ == sel2.lambda_
        for pid in v1:
            np.testing.assert_array_equal(v1[pid], v2[pid])

    def test_ground_truth_source(self, micro_cohort, micro_prepared):
        cfg = micro_train_config(radiomics_source="ground_truth")
        train_ids, _, _ = split_ids(micro_cohort, "train0")
        vectors, selection = bridge_radiomics(None, micro_prepared, train_ids, cfg)
        assert set(vectors) == set(micro_prepared)
        assert len(selection.feature_names) == 26

    def test_aux_provider_dims(self, micro_cohort, micro_prepared):
        cfg = micro_train_config(use_radiomics=False)
        train_ids, _, _ = split_ids(micro_cohort, "train0")
        aux = build_aux_provider(
            micro_cohort, micro_prepared, train_ids, cfg, None, CLINICAL_DECLARATIONS
        )
        # marker (1) + site one-hot (2) + 2 missing flags
        assert aux.dim == 5
        assert aux.selection is None
        vec = aux.vector(train_ids[0])
        assert vec.shape == (5,)

    def test_payload_round_trip_dims(self, micro_cohort, micro_prepared):
        cfg = micro_train_config(radiomics_source="ground_truth")
        train_ids, _, _ = split_ids(micro_cohort, "train0")
        aux = build_aux_provider(
            micro_cohort, micro_prepared, train_ids, cfg, None, CLINICAL_DECLARATIONS
        )
        from deepmss.pipeline import aux_from_payload

        payload = aux.payload(cfg)
        pid = train_ids[0]
        rebuilt = aux_from_payload(payload, micro_prepared[pid], None)
        np.testing.assert_allclose(rebuilt, aux.vector(pid), rtol=1e-6)


class TestStage2AndFolds:
    def test_ssl_fold_runs_and_reports(self, micro_cohort, micro_prepared):
        cfg = micro_train_config()
        result = train_fold(
            micro_cohort, micro_prepared, MICRO_MODEL, cfg, "train0",
            clinical_declarations=CLINICAL_DECLARATIONS,
        )
        assert result.seg_ckpt is not None and result.seg_ckpt.stage == "seg"
        assert result.surv_ckpt is not None and result.surv_ckpt.stage == "surv"
        assert result.surv_ckpt.interval_scheme is not None
        assert result.surv_ckpt.feature_stats["use_radiomics"] is True
        assert result.selection is not None
        stages = {r.stage for r in result.log_rows}
        assert stages == {"seg", "surv"}

    def test_scheme_fit_on_training_times_only(self, micro_cohort, micro_prepared):
        cfg = micro_train_config(use_radiomics=False, use_clinical=False)
        train_ids, val_ids, _ = split_ids(micro_cohort, "train0")
        ckpt, _ = run_stage2(
            None, MICRO_MODEL, micro_prepared, train_ids, val_ids, cfg, None
        )
        times = [micro_prepared[pid].record.survival.time for pid in train_ids]
        expected = survmath.make_intervals(times, MICRO_MODEL.n_intervals)
        assert ckpt.interval_scheme.boundaries == expected.boundaries

    def test_stl_seg_skips_stage2(self, micro_cohort, micro_prepared):
        cfg = micro_train_config(strategy="stl_seg")
        result = train_fold(micro_cohort, micro_prepared, MICRO_MODEL, cfg, "train0")
        assert result.seg_ckpt is not None
        assert result.surv_ckpt is None

    def test_stl_surv_without_stage1(self, micro_cohort, micro_prepared):
        cfg = micro_train_config(strategy="stl_surv", use_clinical=False)
        result = train_fold(
            micro_cohort, micro_prepared, MICRO_MODEL, cfg, "train0",
            clinical_declarations=CLINICAL_DECLARATIONS,
        )
        assert result.seg_ckpt is None
        assert result.surv_ckpt is not None
        # predicted-mask source silently falls back to ground truth
        assert result.surv_ckpt.feature_stats["radiomics_source"] == "ground_truth"

    def test_fold_determinism(self, micro_cohort, micro_prepared):
        cfg = micro_train_config(use_radiomics=False, use_clinical=False, deterministic=True)
        r1 = train_fold(micro_cohort, micro_prepared, MICRO_MODEL, cfg, "train0")
        r2 = train_fold(micro_cohort, micro_prepared, MICRO_MODEL, cfg, "train0")
        l1 = [(row.iteration, row.loss, row.val_metric) for row in r1.log_rows]
        l2 = [(row.iteration, row.loss, row.val_metric) for row in r2.log_rows]
        assert l1 == l2


class TestEvaluate:
    @pytest.fixture(scope="class")
    def fold_result(self, micro_cohort, micro_prepared):
        cfg = micro_train_config()
        return train_fold(
            micro_cohort, micro_prepared, MICRO_MODEL, cfg, "train0",
            clinical_declarations=CLINICAL_DECLARATIONS,
        )

    def test_report_fields_and_internal_oracle(self, micro_cohort, micro_prepared, fold_result):
        _, _, test_ids = split_ids(micro_cohort, "train0")
        report = evaluate(
            [fold_result.seg_ckpt, fold_result.surv_ckpt], micro_prepared, test_ids
        )
        assert set(report.per_patient) == set(test_ids)
        assert report.dsc_mean is not None and 0.0 <= report.dsc_mean <= 1.0
        assert report.gate_stats is not None and len(report.gate_stats) == MICRO_MODEL.levels
        times = [report.per_patient[pid]["pred_time"] for pid in test_ids]
        labels = [micro_prepared[pid].record.survival for pid in test_ids]
        try:
            expected = survmath.c_index(times, labels)
            assert report.c_index == expected
        except survmath.UndefinedMetricError:
            assert report.c_index is None

    def test_csv_round_trip_lossless(self, micro_cohort, micro_prepared, fold_result, tmp_path):
        _, _, test_ids = split_ids(micro_cohort, "train0")
        report = evaluate(
            [fold_result.seg_ckpt, fold_result.surv_ckpt], micro_prepared, test_ids
        )
        path = tmp_path / "report.csv"
        report.to_csv(path)
        back = EvaluationReport.from_csv(path)
        assert back.fold == report.fold
        assert back.c_index == report.c_index
        assert back.dsc_mean == report.dsc_mean
        assert back.per_patient == report.per_patient
        got = {(r["level"], r["mean_w_fuse"]) for r in back.gate_stats}
        want = {(r["level"], round(r["mean_w_fuse"], 17)) for r in report.gate_stats}
        assert got == want

    def test_empty_subset_rejected(self, micro_prepared, fold_result):
        with pytest.raises(DataError):
            evaluate([fold_result.seg_ckpt], micro_prepared, [])


class TestCrossValidate:
    def test_two_folds_and_ensemble(self, micro_cohort):
        cfg = micro_train_config(use_radiomics=False, use_clinical=False)
        results, ensemble = cross_validate(micro_cohort, MICRO_MODEL, cfg)
        assert len(results) == 2
        assert {r.fold for r in results} == {"train0", "train1"}
        for r in results:
            assert r.report is not None
        assert ensemble.fold == "ensemble"
        # ensemble predicted time is the mean of the per-fold predictions
        pid = next(iter(ensemble.per_patient))
        fold_times = [r.report.per_patient[pid]["pred_time"] for r in results]
        assert ensemble.per_patient[pid]["pred_time"] == pytest.approx(
            float(np.mean(fold_times)), rel=1e-6
        )

    def test_ensemble_of_identical_models_equals_single(self, micro_cohort, micro_prepared):
        cfg = micro_train_config(use_radiomics=False, use_clinical=False)
        result = train_fold(micro_cohort, micro_prepared, MICRO_MODEL, cfg, "train0")
        _, _, test_ids = split_ids(micro_cohort, "train0")
        single = evaluate([result.seg_ckpt, result.surv_ckpt], micro_prepared, test_ids)
        doubled = evaluate(
            [result.seg_ckpt, result.surv_ckpt, result.seg_ckpt, result.surv_ckpt],
            micro_prepared, test_ids,
        )
        assert doubled.c_index == single.c_index
        assert doubled.dsc_mean == single.dsc_mean
