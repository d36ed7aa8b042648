import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcprobe.classifier import (
    ClassifierConfig,
    LinearClassifier,
    Side,
    TokenDataset,
    accuracy,
    balanced_sample,
    mask_for_training,
    predict_side,
    train_classifier,
)
from mcprobe.errors import DimensionMismatch, EmptyClass, EmptyDataset, FormatError, NonFiniteEmbedding
from mcprobe.projection import orthonormalize, project_nullspace_batch


def two_clouds(n=500, dim=16, sep=3.0, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((2 * n, dim))
    X[:n, 0] += sep
    X[n:, 0] -= sep
    y = np.r_[np.ones(n), -np.ones(n)].astype(int)
    return TokenDataset(X, y)


def perceptron_accuracy(X, y, epochs=50, seed=0):
    # independent oracle: averaged perceptron with bias
    rng = np.random.default_rng(seed)
    Xb = np.c_[X, np.ones(len(X))]
    w = np.zeros(Xb.shape[1])
    avg = np.zeros_like(w)
    for _ in range(epochs):
        for i in rng.permutation(len(X)):
            if y[i] * (Xb[i] @ w) <= 0:
                w += y[i] * Xb[i]
            avg += w
    return float(np.mean(np.sign(Xb @ avg) == y))


class TestBalancedSample:
    def test_min_rule(self):
        X = np.zeros((1600, 2))
        y = np.r_[np.ones(1000), -np.ones(600)].astype(int)
        out = balanced_sample(TokenDataset(X, y), seed=0)
        assert out.class_counts() == (600, 600)

    def test_balanced_input_is_subset(self):
        d = two_clouds(50)
        out = balanced_sample(d, seed=1)
        assert out.class_counts() == (50, 50)
        rows = {tuple(r) for r in d.embeddings}
        assert all(tuple(r) in rows for r in out.embeddings)

    def test_deterministic(self):
        X = np.arange(300, dtype=float).reshape(-1, 1)
        y = np.r_[np.ones(200), -np.ones(100)].astype(int)
        a = balanced_sample(TokenDataset(X, y), seed=7)
        b = balanced_sample(TokenDataset(X, y), seed=7)
        np.testing.assert_array_equal(a.embeddings, b.embeddings)

    def test_no_replacement_and_cap(self):
        X = np.arange(300, dtype=float).reshape(-1, 1)
        y = np.r_[np.ones(200), -np.ones(100)].astype(int)
        out = balanced_sample(TokenDataset(X, y), seed=3, max_per_class=40)
        assert out.class_counts() == (40, 40)
        assert len(np.unique(out.embeddings)) == 80

    def test_empty_class(self):
        with pytest.raises(EmptyClass):
            balanced_sample(TokenDataset(np.zeros((3, 2)), [1, 1, 1]), seed=0)


class TestTrain:
    def test_clouds_match_perceptron_oracle(self):
        d = two_clouds()
        clf = train_classifier(d)
        assert clf.train_accuracy >= 0.99
        assert abs(clf.train_accuracy - perceptron_accuracy(d.embeddings, d.labels)) <= 0.01

    def test_projected_single_signal_drops_to_chance(self):
        d = two_clouds(seed=5)
        basis = orthonormalize([np.eye(16)[0]])
        erased = d.with_embeddings(project_nullspace_batch(d.embeddings, basis))
        assert train_classifier(erased).train_accuracy <= 0.60

    def test_duplicated_pair(self):
        X = np.array([[1.0, 0], [1.0, 0], [-1.0, 0], [-1.0, 0]])
        clf = train_classifier(TokenDataset(X, [1, 1, -1, -1]))
        assert clf.direction[0] > 0
        assert clf.train_accuracy == 1.0

    def test_deterministic_bitwise(self):
        d = two_clouds(100, seed=2)
        cfg = ClassifierConfig(epochs=20, seed=11)
        a, b = train_classifier(d, cfg), train_classifier(d, cfg)
        assert a.direction.tobytes() == b.direction.tobytes() and a.bias == b.bias

    def test_too_few_examples(self):
        with pytest.raises(EmptyClass):
            train_classifier(TokenDataset(np.zeros((3, 2)), [1, 1, -1]))

    def test_non_finite(self):
        X = np.ones((4, 2))
        X[0, 0] = np.nan
        with pytest.raises(NonFiniteEmbedding):
            train_classifier(TokenDataset(X, [1, 1, -1, -1]))

    def test_training_accuracy_at_least_half_on_balanced_data(self):
        rng = np.random.default_rng(9)
        X = rng.standard_normal((200, 4))
        y = np.r_[np.ones(100), -np.ones(100)].astype(int)
        assert train_classifier(TokenDataset(X, y), ClassifierConfig(epochs=30)).train_accuracy >= 0.5


class TestMasking:
    def test_exact_count(self):
        d = TokenDataset(np.zeros((100, 2)), np.r_[np.ones(50), -np.ones(50)].astype(int))
        assert mask_for_training(d, 0.15, seed=0).masked_flags.sum() == 15

    @pytest.mark.parametrize("rate,expected", [(0.0, 0), (1.0, 100)])
    def test_extremes(self, rate, expected):
        d = TokenDataset(np.zeros((100, 2)), np.r_[np.ones(50), -np.ones(50)].astype(int))
        assert mask_for_training(d, rate, seed=0).masked_flags.sum() == expected

    def test_swaps_in_mask_states_and_keeps_labels(self):
        X = np.zeros((20, 3))
        M = np.ones((20, 3))
        y = np.r_[np.ones(10), -np.ones(10)].astype(int)
        out = mask_for_training(TokenDataset(X, y, mask_embeddings=M), 0.25, seed=4)
        np.testing.assert_array_equal(out.embeddings[out.masked_flags], 1.0)
        np.testing.assert_array_equal(out.embeddings[~out.masked_flags], 0.0)
        np.testing.assert_array_equal(out.labels, y)

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            mask_for_training(TokenDataset(np.zeros((2, 1)), [1, -1]), 1.5, seed=0)


class TestPredict:
    clf = LinearClassifier(np.array([1.0, 0.0]), 0.0, 1.0, 0)

    def test_l1(self):
        p = predict_side(self.clf, (3, 4))
        assert p.label.side is Side.L1 and p.raw_score == 3.0 and not p.boundary

    def test_l2(self):
        p = predict_side(self.clf, (-3, 4))
        assert p.label.side is Side.L2 and p.raw_score == -3.0

    def test_boundary(self):
        p = predict_side(self.clf, (0, 4))
        assert p.label.side is Side.L2 and p.boundary

    def test_mismatch(self):
        with pytest.raises(DimensionMismatch):
            predict_side(self.clf, (1, 2, 3))


class TestAccuracy:
    def test_separable(self):
        d = two_clouds(100, sep=10, seed=1)
        assert accuracy(train_classifier(d), d) == 1.0

    def test_flipped_labels(self):
        d = two_clouds(100, sep=1, seed=3)
        clf = train_classifier(d, ClassifierConfig(epochs=20))
        flipped = TokenDataset(d.embeddings, -d.labels)
        assert accuracy(clf, flipped) == pytest.approx(1 - accuracy(clf, d))

    def test_random_labels_near_half(self):
        rng = np.random.default_rng(12)
        X = rng.standard_normal((20000, 8))
        y = rng.choice([1, -1], 20000)
        clf = LinearClassifier(rng.standard_normal(8), 0.0, 0.0, 0)
        assert abs(accuracy(clf, TokenDataset(X, y)) - 0.5) <= 0.05

    def test_empty(self):
        with pytest.raises(EmptyDataset):
            accuracy(TestPredict.clf, TokenDataset(np.zeros((0, 2)), np.zeros(0, int)))


def test_save_load_round_trip(tmp_path):
    clf = train_classifier(two_clouds(50, dim=4), ClassifierConfig(epochs=5, seed=3))
    path = tmp_path / "clf.json"
    clf.save(path)
    assert set(json.loads(path.read_text())) == {"dim", "direction", "bias", "train_accuracy", "seed"}
    back = LinearClassifier.load(path)
    np.testing.assert_array_equal(back.direction, clf.direction)
    assert (back.bias, back.train_accuracy, back.seed) == (clf.bias, clf.train_accuracy, clf.seed)


def test_load_rejects_bad_record(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"dim": 3, "direction": [1, 2], "bias": 0, "train_accuracy": 1, "seed": 0}))
    with pytest.raises(FormatError):
        LinearClassifier.load(path)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 100), st.integers(0, 1000))
def test_scale_covariance(c, seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(5)
    b = float(rng.standard_normal())
    X = rng.standard_normal((40, 5))
    base = np.sign(LinearClassifier(w, b, 0, 0).decision(X))
    scaled = np.sign(LinearClassifier(w, b * c, 0, 0).decision(X * c))
    np.testing.assert_array_equal(base, scaled)
