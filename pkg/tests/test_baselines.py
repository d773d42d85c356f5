import math

import numpy as np
import pytest

from millstream.baselines import (
    AutoencoderDetector,
    IsolationForest,
    LocalOutlierFactor,
    evaluate_on_stream,
)
from millstream.core import SegmentDescriptor, SegmentKind


def oracle_lof(x, k):
    """Direct transcription of the reachability-density definition."""
    n = x.shape[0]
    d = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    neigh = np.argsort(d, axis=1)[:, :k]
    k_dist = np.take_along_axis(d, neigh, axis=1)[:, -1]
    lrd = np.empty(n)
    for i in range(n):
        reach = np.maximum(d[i, neigh[i]], k_dist[neigh[i]])
        lrd[i] = 1.0 / reach.mean()
    lof = np.empty(n)
    for i in range(n):
        lof[i] = lrd[neigh[i]].mean() / lrd[i]
    return lof


def test_isolation_forest_flags_far_outlier():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1.0, 1.0, size=(400, 2))
    forest = IsolationForest(n_trees=50, subsample=128, seed=1).fit(x)
    inlier_scores = forest.score(x)
    outlier = forest.score(np.array([[10.0, 10.0]]))[0]
    assert outlier > np.quantile(inlier_scores, 0.99)


def test_isolation_forest_deterministic():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 3))
    a = IsolationForest(seed=7).fit(x).score(x)
    b = IsolationForest(seed=7).fit(x).score(x)
    assert np.array_equal(a, b)


def test_isolation_forest_single_point_training():
    forest = IsolationForest(n_trees=5, seed=0).fit(np.array([[1.0, 2.0]]))
    scores = forest.score(np.array([[1.0, 2.0], [50.0, 50.0]]))
    assert np.all(np.isfinite(scores))


def test_isolation_forest_degenerate_identical_points():
    x = np.ones((50, 2))
    forest = IsolationForest(n_trees=10, seed=0).fit(x)
    scores = forest.score(x)
    assert np.allclose(scores, scores[0])
    assert np.all(forest.classify(x) == 0)


def test_lof_matches_direct_formula():
    rng = np.random.default_rng(2)
    x = np.vstack([rng.normal(size=(9, 2)), [[6.0, 6.0]]])
    lof = LocalOutlierFactor(k=3).fit(x)
    want = oracle_lof(x, 3)
    # training-set scores under self-exclusion reproduce the textbook values
    idx, dist = lof._neighbours(x, exclude_self=True)
    got = lof._lof_from_neighbours(idx, dist)
    assert np.allclose(got, want, atol=1e-10)


def test_lof_uniform_cluster_near_one():
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(300, 2))
    lof = LocalOutlierFactor(k=10).fit(x)
    inner = x[
        (x[:, 0] > 0.3) & (x[:, 0] < 0.7) & (x[:, 1] > 0.3) & (x[:, 1] < 0.7)
    ]
    scores = lof.score(inner)
    assert np.all(np.abs(scores - 1.0) < 0.25)


def test_lof_reference_order_invariance():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(60, 2))
    q = rng.normal(size=(10, 2))
    a = LocalOutlierFactor(k=5).fit(x).score(q)
    b = LocalOutlierFactor(k=5).fit(x[rng.permutation(60)]).score(q)
    assert np.allclose(a, b, atol=1e-10)


def test_lof_degenerate_identical_points():
    x = np.ones((20, 3))
    lof = LocalOutlierFactor(k=4).fit(x)
    scores = lof.score(x)
    assert np.all(np.isfinite(scores))
    assert np.allclose(scores, scores[0])


def test_autoencoder_separates_far_points():
    rng = np.random.default_rng(5)
    x = rng.normal(0.0, 0.1, size=(200, 1))
    ae = AutoencoderDetector(hidden=2, epochs=300, seed=0).fit(x)
    near = ae.score(rng.normal(0.0, 0.1, size=(50, 1))).mean()
    far = ae.score(np.full((50, 1), 5.0)).mean()
    assert far > near


def test_autoencoder_deterministic():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(100, 3))
    a = AutoencoderDetector(epochs=50, seed=3).fit(x).score(x)
    b = AutoencoderDetector(epochs=50, seed=3).fit(x).score(x)
    assert np.array_equal(a, b)


def test_score_at_threshold_is_not_flagged():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(100, 2))
    for detector in (
        IsolationForest(n_trees=20, seed=0).fit(x),
        LocalOutlierFactor(k=5).fit(x),
        AutoencoderDetector(epochs=30, seed=0).fit(x),
    ):
        scores = detector.score(x)
        detector.threshold = float(scores[13])
        assert detector.classify(x[13 : 14])[0] == 0


def test_training_median_point_not_flagged():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(300, 2))
    median_point = np.median(x, axis=0)[None, :]
    for detector in (
        IsolationForest(contamination=0.2, seed=0).fit(x),
        LocalOutlierFactor(contamination=0.2).fit(x),
        AutoencoderDetector(contamination=0.2, epochs=150, seed=0).fit(x),
    ):
        assert detector.classify(median_point)[0] == 0


def test_unfitted_detectors_raise():
    for detector in (IsolationForest(), LocalOutlierFactor(), AutoencoderDetector()):
        with pytest.raises(RuntimeError):
            detector.score(np.zeros((1, 2)))


def seg(seg_id, start, end, kind=SegmentKind.TARGET_PRODUCT):
    return SegmentDescriptor(start, end, kind, 3.0, 1.0, 900.0, segment_id=seg_id)


class _FixedDetector:
    def __init__(self, flags):
        self.flags = np.asarray(flags, dtype=int)

    def classify(self, x):
        return self.flags[: x.shape[0]]


def test_evaluate_all_zero_scores():
    x = np.zeros((10, 1))
    labels = np.array([0, 1] * 5)
    out = evaluate_on_stream(_FixedDetector(np.zeros(10)), x, labels, [seg(0, 0, 10)])
    assert out[0].flagged_rate == 0.0
    assert out[0].recall == 0.0


def test_evaluate_perfect_oracle():
    x = np.zeros((10, 1))
    labels = np.array([0, 1] * 5)
    out = evaluate_on_stream(_FixedDetector(labels), x, labels, [seg(0, 0, 10)])
    assert out[0].recall == 1.0
    assert out[0].precision == 1.0


def test_evaluate_segment_out_of_range():
    with pytest.raises(ValueError):
        evaluate_on_stream(_FixedDetector(np.zeros(5)), np.zeros((5, 1)), np.zeros(5), [seg(0, 0, 9)])
