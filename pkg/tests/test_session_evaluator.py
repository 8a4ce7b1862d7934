import numpy as np
import pandas as pd
import pytest

from behavior_dnn.core.errors import ConfigurationError, InputError
from behavior_dnn.core.session_evaluator import (accuracy, aggregate_session, classify, emit_trajectory,
                                                 fit_threshold, score_session, session_scores,
                                                 threshold_candidates)


class TestAggregate:
    def test_examples(self):
        assert aggregate_session([0.5, 0.5]) == pytest.approx(0.5, abs=1e-12)
        assert aggregate_session([0.9, 0.1]) == pytest.approx(0.3, abs=1e-12)

    def test_zero_is_clamped(self):
        assert aggregate_session([0.0, 0.5]) == pytest.approx(np.sqrt(1e-6 * 0.5), rel=1e-12)

    def test_empty(self):
        with pytest.raises(InputError):
            aggregate_session([])

    def test_strictly_increasing_inside_clamp(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            q = rng.uniform(0.01, 0.9, int(rng.integers(1, 40)))
            bumped = q.copy()
            k = int(rng.integers(len(q)))
            bumped[k] += rng.uniform(0.01, 0.09)
            assert aggregate_session(bumped) > aggregate_session(q)

    def test_properties_on_random_vectors(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            q = rng.uniform(0.0, 1.0, int(rng.integers(1, 40)))
            value = aggregate_session(q)
            clamped = np.clip(q, 1e-6, 1 - 1e-6)
            assert abs(aggregate_session(rng.permutation(q)) - value) <= 1e-12
            assert clamped.min() <= value <= clamped.max()
            assert value <= clamped.mean() + 1e-12
            bumped = q.copy()
            k = int(rng.integers(len(q)))
            bumped[k] = min(1.0, bumped[k] + rng.uniform(0.0, 0.5))
            assert aggregate_session(bumped) >= value - 1e-12


def scanned_candidates(scores):
    ordered = sorted(set(scores))
    candidates = [ordered[0] / 2.0]
    for lo, hi in zip(ordered, ordered[1:]):
        candidates.append((lo + hi) / 2.0)
    candidates.append((ordered[-1] + 1.0) / 2.0)
    return candidates


class TestThreshold:
    def test_separable(self):
        model = fit_threshold([(0.2, 0), (0.4, 0), (0.6, 1), (0.8, 1)])
        assert model.threshold == pytest.approx(0.5)
        assert model.training_error == 0.0
        assert classify(0.55, model) == 1
        assert classify(0.5, model) == 0

    def test_candidates_include_sentinels(self):
        candidates = threshold_candidates([0.4, 0.2, 0.2])
        np.testing.assert_allclose(candidates, [0.1, 0.3, 0.7])

    def test_single_class(self):
        with pytest.raises(ConfigurationError):
            fit_threshold([(0.2, 1), (0.3, 1)])

    def test_minimum_over_exhaustive_candidates(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(2, 51))
            scores = rng.uniform(0.0, 1.0, n)
            labels = rng.integers(0, 2, n)
            labels[0], labels[1] = 0, 1
            model = fit_threshold(list(zip(scores, labels)))
            candidates = scanned_candidates(scores.tolist())
            errors = [sum(int(q > t) != y for q, y in zip(scores, labels)) / n for t in candidates]
            assert model.training_error == pytest.approx(min(errors))
            assert model.threshold == pytest.approx(candidates[errors.index(min(errors))])

    def test_accuracy(self):
        assert accuracy([1, 0, 1, 1], [1, 0, 0, 1]) == 0.75
        with pytest.raises(InputError):
            accuracy([], [])


class TestTrajectory:
    def test_three_codes(self, tmp_path):
        times = np.arange(5.0)
        scores = {code: score_session("s1", np.linspace(0.1, 0.9, 5) * (k + 1) / 3, times)
                  for k, code in enumerate(["acceptance", "blame", "negativity"])}
        path = tmp_path / "trajectory.csv"
        emit_trajectory(scores, path)
        table = pd.read_csv(path)
        assert list(table.columns) == ["time", "acceptance", "blame", "negativity"]
        assert len(table) == 5
        assert table["time"].is_monotonic_increasing

    def test_missing_times_are_blank(self, tmp_path):
        scores = {"a": score_session("s1", [0.2, 0.4], [0.0, 1.0]),
                  "b": score_session("s1", [0.6], [1.0])}
        path = tmp_path / "trajectory.csv"
        emit_trajectory(scores, path)
        assert path.read_text().splitlines()[1] == "0.0,0.2,"

    def test_repeated_times_rejected(self, tmp_path):
        scores = {"a": score_session("s1", [0.2, 0.4], [1.0, 1.0])}
        with pytest.raises(InputError):
            emit_trajectory(scores, tmp_path / "t.csv")


def test_session_scores_groups_by_session():
    scores = session_scores([0.5, 0.5, 0.9, 0.1], ["a", "a", "b", "b"], [0.0, 1.0, 1.0, 0.0])
    assert scores["a"].aggregate == pytest.approx(0.5)
    assert scores["b"].aggregate == pytest.approx(0.3)
    np.testing.assert_array_equal(scores["b"].frame_times, [0.0, 1.0])
    np.testing.assert_array_equal(scores["b"].frame_scores, [0.1, 0.9])
