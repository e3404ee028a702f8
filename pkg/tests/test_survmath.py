import numpy as np
import pytest

from deepmss.errors import DegenerateIntervalError, ShapeMismatchError, UndefinedMetricError
from deepmss.survmath import (
    DiscreteLabels,
    IntervalScheme,
    PredictedSurvival,
    SurvivalLabel,
    c_index,
    make_intervals,
    make_labels,
    predict_time,
    survival_loss,
    survival_loss_grad,
)


class TestMakeIntervals:
    def test_even_counts_integers_1_to_20(self):
        times = list(range(1, 21))
        scheme = make_intervals(times, 10)
        b = scheme.boundaries
        assert len(b) == 11
        # oracle: count times falling in (q_{k-1}, q_k] directly
        for k in range(1, 11):
            count = sum(1 for t in times if b[k - 1] < t <= b[k])
            assert count == 2, f"interval {k} has {count} samples"

    def test_median_boundary_n2(self):
        scheme = make_intervals([1, 2, 3, 4], 2)
        assert scheme.boundaries == (0.0, 2.5, 4.0)
        np.testing.assert_allclose(scheme.durations, [2.5, 1.5])

    def test_identical_times_degenerate(self):
        with pytest.raises(DegenerateIntervalError):
            make_intervals([5.0] * 10, 4)

    def test_too_few_times(self):
        with pytest.raises(DegenerateIntervalError):
            make_intervals([1.0, 2.0], 5)

    def test_durations_sum_to_last_boundary(self):
        rng = np.random.default_rng(0)
        times = rng.uniform(1, 100, size=50)
        scheme = make_intervals(times, 10)
        assert scheme.boundaries[0] == 0.0
        assert scheme.durations.sum() == pytest.approx(scheme.boundaries[-1])


def _label_rule_oracle(n, k_event, event):
    """Direct transcription: intervals before the outcome interval get 1 in
    the survived vector; the outcome interval gets 1 in the event vector
    only when the event was observed."""
    survived = [1 if j < k_event else 0 for j in range(1, n + 1)]
    event_at = [1 if (event and j == k_event) else 0 for j in range(1, n + 1)]
    return survived, event_at


class TestMakeLabels:
    @pytest.fixture
    def scheme5(self):
        return IntervalScheme((0.0, 10.0, 20.0, 30.0, 40.0, 50.0))

    def test_event_interval_3(self, scheme5):
        lab = make_labels(SurvivalLabel(time=25.0, event=True), scheme5)
        assert lab.survived.tolist() == [1, 1, 0, 0, 0]
        assert lab.event_at.tolist() == [0, 0, 1, 0, 0]

    def test_censored_interval_3(self, scheme5):
        lab = make_labels(SurvivalLabel(time=25.0, event=False), scheme5)
        assert lab.survived.tolist() == [1, 1, 0, 0, 0]
        assert lab.event_at.tolist() == [0, 0, 0, 0, 0]

    def test_event_first_interval(self, scheme5):
        lab = make_labels(SurvivalLabel(time=5.0, event=True), scheme5)
        assert lab.survived.tolist() == [0, 0, 0, 0, 0]
        assert lab.event_at.tolist() == [1, 0, 0, 0, 0]

    def test_boundary_time_belongs_to_lower_interval(self, scheme5):
        assert scheme5.interval_of(10.0) == 1
        assert scheme5.interval_of(10.0 + 1e-9) == 2

    def test_time_beyond_last_boundary_clamps(self, scheme5):
        lab = make_labels(SurvivalLabel(time=99.0, event=True), scheme5)
        assert lab.survived.tolist() == [1, 1, 1, 1, 0]
        assert lab.event_at.tolist() == [0, 0, 0, 0, 1]

    def test_exhaustive_rule_match_up_to_n5(self):
        for n in range(2, 6):
            scheme = IntervalScheme(tuple(float(10 * j) for j in range(n + 1)))
            for k in range(1, n + 1):
                t = 10.0 * k - 5.0
                for event in (True, False):
                    lab = make_labels(SurvivalLabel(time=t, event=event), scheme)
                    surv_ref, evt_ref = _label_rule_oracle(n, k, event)
                    assert lab.survived.tolist() == surv_ref, (n, k, event)
                    assert lab.event_at.tolist() == evt_ref, (n, k, event)


class TestSurvivalLoss:
    def test_near_perfect_prediction_near_zero(self):
        lab = DiscreteLabels(np.array([1, 1, 0]), np.array([0, 0, 0]))
        loss = survival_loss(np.array([1 - 1e-12, 1 - 1e-12, 0.3]), lab)
        assert loss == pytest.approx(0.0, abs=1e-9)

    def test_hand_derived_scalar_case(self):
        lab = DiscreteLabels(np.array([1, 0]), np.array([0, 1]))
        loss = survival_loss(np.array([0.8, 0.4]), lab)
        # -(ln 0.8 + ln 0.6), evaluated by hand
        assert loss == pytest.approx(0.733969, abs=1e-5)

    def test_clamp_keeps_loss_finite(self):
        lab = DiscreteLabels(np.array([1, 0]), np.array([0, 0]))
        loss = survival_loss(np.array([0.0, 0.5]), lab, eps=1e-7)
        assert np.isfinite(loss)
        assert loss == pytest.approx(-np.log(1e-7))

    def test_nonnegative_on_random_inputs(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = rng.integers(2, 12)
            k = rng.integers(1, n + 1)
            event = bool(rng.integers(0, 2))
            surv = np.array([1 if j < k else 0 for j in range(1, n + 1)])
            evt = np.array([1 if (event and j == k) else 0 for j in range(1, n + 1)])
            pred = rng.uniform(1e-4, 1 - 1e-4, size=n)
            assert survival_loss(pred, DiscreteLabels(surv, evt)) >= 0

    def test_shape_mismatch(self):
        lab = DiscreteLabels(np.array([1, 0]), np.array([0, 1]))
        with pytest.raises(ShapeMismatchError):
            survival_loss(np.array([0.5, 0.5, 0.5]), lab)

    def test_minimizer_matches_labels(self):
        # unconstrained minimum pushes survived intervals -> 1, event interval -> 0
        lab = DiscreteLabels(np.array([1, 1, 0, 0]), np.array([0, 0, 1, 0]))
        p = np.full(4, 0.5)
        for _ in range(8000):
            p -= 0.01 * survival_loss_grad(p, lab)
            p = np.clip(p, 1e-6, 1 - 1e-6)
        assert p[0] > 0.999 and p[1] > 0.999
        assert p[2] < 0.001
        # unconstrained component stays put
        assert p[3] == pytest.approx(0.5, abs=1e-6)


class TestGradient:
    def test_matches_central_differences(self):
        rng = np.random.default_rng(42)
        h = 1e-6
        for _ in range(200):
            n = int(rng.integers(2, 15))
            k = int(rng.integers(1, n + 1))
            event = bool(rng.integers(0, 2))
            surv = np.array([1 if j < k else 0 for j in range(1, n + 1)])
            evt = np.array([1 if (event and j == k) else 0 for j in range(1, n + 1)])
            lab = DiscreteLabels(surv, evt)
            # keep away from clamp boundaries
            pred = rng.uniform(0.05, 0.95, size=n)
            grad = survival_loss_grad(pred, lab)
            for i in range(n):
                up = pred.copy()
                dn = pred.copy()
                up[i] += h
                dn[i] -= h
                fd = (survival_loss(up, lab) - survival_loss(dn, lab)) / (2 * h)
                if abs(fd) < 1e-12:
                    assert abs(grad[i]) < 1e-8
                else:
                    assert abs(grad[i] - fd) / abs(fd) < 1e-4

    def test_zero_gradient_in_clamped_region(self):
        lab = DiscreteLabels(np.array([1, 0]), np.array([0, 0]))
        g = survival_loss_grad(np.array([1e-9, 0.5]), lab, eps=1e-7)
        assert g[0] == 0.0
        assert g[1] == 0.0


class TestPredictTime:
    def test_all_ones_telescopes_to_horizon(self):
        scheme = IntervalScheme((0.0, 10.0, 30.0, 60.0))
        pred = PredictedSurvival(np.ones(3), scheme)
        assert predict_time(pred) == pytest.approx(60.0)

    def test_hand_derived_case(self):
        scheme = IntervalScheme((0.0, 10.0, 20.0))
        pred = PredictedSurvival(np.array([0.5, 0.5]), scheme)
        assert predict_time(pred) == pytest.approx(7.5)

    def test_vanishing_probabilities(self):
        scheme = IntervalScheme((0.0, 10.0, 20.0))
        pred = PredictedSurvival(np.array([1e-12, 1e-12]), scheme)
        assert predict_time(pred) < 1e-10

    def test_monotone_in_each_component(self):
        rng = np.random.default_rng(3)
        scheme = IntervalScheme((0.0, 5.0, 9.0, 20.0, 31.0))
        for _ in range(20):
            p = rng.uniform(0.05, 0.95, size=4)
            base = predict_time(PredictedSurvival(p, scheme))
            for i in range(4):
                q = p.copy()
                q[i] = min(q[i] + 0.01, 0.999)
                assert predict_time(PredictedSurvival(q, scheme)) > base


def _c_index_oracle(preds, times, events):
    """Independent vectorized pair enumeration."""
    preds = np.asarray(preds, float)
    times = np.asarray(times, float)
    events = np.asarray(events, bool)
    comparable = (times[:, None] < times[None, :]) & events[:, None]
    concordant = comparable & (preds[:, None] < preds[None, :])
    tied = comparable & (preds[:, None] == preds[None, :])
    n_comp = comparable.sum()
    if n_comp == 0:
        return None
    return (concordant.sum() + 0.5 * tied.sum()) / n_comp


class TestCIndex:
    def test_perfect_ordering(self):
        labels = [SurvivalLabel(t, True) for t in (1.0, 2.0, 3.0, 4.0)]
        assert c_index([1.0, 2.0, 3.0, 4.0], labels) == 1.0

    def test_hand_derived_one_third(self):
        labels = [
            SurvivalLabel(1.0, True),
            SurvivalLabel(2.0, True),
            SurvivalLabel(3.0, False),
        ]
        assert c_index([3.0, 1.0, 2.0], labels) == pytest.approx(1.0 / 3.0)

    def test_all_censored_undefined(self):
        labels = [SurvivalLabel(t, False) for t in (1.0, 2.0, 3.0)]
        with pytest.raises(UndefinedMetricError):
            c_index([1.0, 2.0, 3.0], labels)

    def test_matches_independent_oracle_on_random_data(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            n = int(rng.integers(2, 51))
            # integer times/preds to provoke ties
            times = rng.integers(1, 10, size=n).astype(float)
            events = rng.integers(0, 2, size=n).astype(bool)
            preds = rng.integers(0, 8, size=n).astype(float)
            labels = [SurvivalLabel(t, bool(e)) for t, e in zip(times, events)]
            expected = _c_index_oracle(preds, times, events)
            if expected is None:
                with pytest.raises(UndefinedMetricError):
                    c_index(preds, labels)
            else:
                assert c_index(preds, labels) == expected

    def test_antisymmetry_without_ties(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            n = 20
            times = rng.permutation(n).astype(float) + 1
            events = rng.integers(0, 2, size=n).astype(bool)
            if not events.any():
                events[0] = True
            preds = rng.permutation(n).astype(float)
            labels = [SurvivalLabel(t, bool(e)) for t, e in zip(times, events)]
            c = c_index(preds, labels)
            c_neg = c_index(-preds, labels)
            assert c + c_neg == pytest.approx(1.0)


class TestSchemeSerialization:
    def test_text_round_trip(self):
        scheme = make_intervals(np.random.default_rng(5).uniform(1, 50, 40), 8)
        again = IntervalScheme.from_text(scheme.to_text())
        assert again.boundaries == scheme.boundaries
