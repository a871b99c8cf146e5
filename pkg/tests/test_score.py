import math

import numpy as np
import pytest

from netcal.score import (
    EULER_GAMMA, FeatureMode, IsolationForest, ScorerModel, ScoringConfig, average_path_length, detect,
    featurize, fit, nearest_rank_threshold,
)
from netcal.persist import CorruptFileError, VersionError


def test_average_path_length_values():
    assert average_path_length(0) == 0.0
    assert average_path_length(1) == 0.0
    assert average_path_length(2) == 1.0
    harmonic = sum(1.0 / i for i in range(1, 256))
    # the ln + gamma form tracks the exact harmonic sum to O(1/n)
    assert abs(average_path_length(256) - (2 * harmonic - 2 * 255 / 256)) < 0.01
    assert average_path_length(3) == pytest.approx(2 * (math.log(2) + EULER_GAMMA) - 4 / 3)


def test_nearest_rank_threshold():
    scores = np.arange(1, 101, dtype=float)
    assert nearest_rank_threshold(scores, 0.01) == 99
    assert nearest_rank_threshold(scores, 0.5) == 50
    assert nearest_rank_threshold([0.3], 0.2) == 0.3
    with pytest.raises(ValueError):
        nearest_rank_threshold([], 0.1)


def test_scores_in_unit_interval_and_outlier_higher():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(500, 3))
    forest = IsolationForest.fit(X, tree_count=50, subsample_size=128, seed=1)
    s = forest.score(np.vstack([X[:20], [[8.0, 8.0, 8.0]]]))
    assert np.all((s > 0) & (s < 1))
    assert s[-1] > s[:-1].max()


def test_identical_training_points_score_identically():
    X = np.ones((10, 2))
    forest = IsolationForest.fit(X, tree_count=10, subsample_size=8)
    s = forest.score(np.array([[1.0, 1.0], [5.0, -3.0], [0.0, 0.0]]))
    assert np.all(s == s[0])


def test_isolation_monotone_in_distance_1d():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(256, 1))
    forest = IsolationForest.fit(X, tree_count=200, subsample_size=256, seed=0)
    s = forest.score(np.array([[0.0], [2.0], [4.0], [8.0]]))
    assert np.all(np.diff(s) >= 0)


def test_featurize_modes():
    v = np.array([3.0, 4.0])
    np.testing.assert_array_equal(featurize(v, FeatureMode.RAW), v)
    assert featurize(v, FeatureMode.PAIRCOS, reference=v[None]) == pytest.approx([1.0])
    assert featurize(v, FeatureMode.PAIRCOS, reference=np.array([[-4.0, 3.0]])) == pytest.approx([0.0])
    with pytest.raises(ValueError):
        featurize(v, FeatureMode.PAIRCOS)


def test_self_scored_flag_rate_matches_contamination():
    X = np.random.default_rng(3).normal(size=(2000, 4))
    model = fit(X, ScoringConfig(contamination=0.025, tree_count=50))
    det = detect(model, X)
    assert det.flagged_fraction <= 0.025
    assert det.flagged_fraction >= 0.02


def test_detect_empty():
    model = fit(np.random.default_rng(0).normal(size=(20, 2)), ScoringConfig(tree_count=5))
    det = detect(model, np.empty((0, 2)))
    assert len(det.scores) == 0 and det.flagged_fraction == 0.0


def test_with_contamination_reuses_forest():
    X = np.random.default_rng(4).normal(size=(300, 3))
    m = fit(X, ScoringConfig(contamination=0.005, tree_count=20))
    m2 = m.with_contamination(0.1)
    assert m2.forest is m.forest and m2.threshold < m.threshold


@pytest.mark.parametrize("mode", ["raw", "paircos"])
def test_scorer_round_trip(tmp_path, mode):
    X = np.random.default_rng(5).normal(size=(100, 6))
    m = fit(X, ScoringConfig(feature_mode=mode, tree_count=10, reference_size=8))
    m.save(tmp_path / "s.npz")
    back = ScorerModel.load(tmp_path / "s.npz")
    np.testing.assert_array_equal(back.score_embeddings(X), m.score_embeddings(X))
    assert back.threshold == m.threshold


def test_scorer_corrupt_and_version(tmp_path):
    m = fit(np.random.default_rng(0).normal(size=(30, 2)), ScoringConfig(tree_count=3))
    path = tmp_path / "s.npz"
    m.save(path)
    path.write_bytes(path.read_bytes()[:100])
    with pytest.raises(CorruptFileError):
        ScorerModel.load(path)
    import netcal.score as score_mod
    orig = score_mod.SCORER_VERSION
    try:
        score_mod.SCORER_VERSION = 0
        m.save(path)
    finally:
        score_mod.SCORER_VERSION = orig
    with pytest.raises(VersionError):
        ScorerModel.load(path)
