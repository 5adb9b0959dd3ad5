import itertools
import math

import numpy as np
import pytest
from sklearn.metrics import average_precision_score

from sepal.exceptions import ConfigurationError, UsageError
from sepal.model import (FeatureGrid, Prediction, PredictionBatch, ScorerParams, average_precision,
                         evaluate_map, forward, init_params, loss, loss_and_grad, predict_batch, sigmoid,
                         train)
from sepal.scoremap import PoolConfig, PoolMode, weldon_pool, wildcat_class_pool, wildcat_spatial_pool


def zero_params(c, d, pool=None):
    pool = pool or PoolConfig(k_top=1, k_bot=1)
    m = pool.maps_per_class
    return ScorerParams(np.zeros((c * m, d)), np.zeros(c * m), pool)


class TestForward:
    def test_zero_model_is_maximally_unsure(self):
        x = FeatureGrid("a", np.random.default_rng(0).normal(size=(2, 2, 3)))
        pred = forward(zero_params(4, 3), x)
        np.testing.assert_array_equal(pred.probs, np.full(4, 0.5))
        np.testing.assert_array_equal(pred.separation, np.zeros(4))

    def test_bias_only_model(self):
        params = zero_params(2, 3)
        params.bias[:] = [1.5, -0.5]
        pred = forward(params, FeatureGrid("a", np.ones((2, 2, 3))))
        np.testing.assert_allclose(pred.probs, sigmoid([1.5, -0.5]), rtol=0, atol=1e-15)
        np.testing.assert_array_equal(pred.separation, np.zeros(2))

    def test_saturating_logits_stay_inside_the_unit_interval(self):
        probs = sigmoid(np.array([40.0, 800.0, -800.0]))
        assert np.all(probs > 0.0) and np.all(probs < 1.0)
        params = zero_params(2, 3)
        params.bias[:] = [50.0, -50.0]
        pred = forward(params, FeatureGrid("a", np.ones((2, 2, 3))))
        assert pred.probs[0] < 1.0
        assert pred.probs[1] > 0.0

    def test_matches_composed_weldon_pipeline(self):
        rng = np.random.default_rng(1)
        pool = PoolConfig(k_top=1, k_bot=1)
        for _ in range(20):
            params = ScorerParams(rng.normal(size=(3, 5)), rng.normal(size=3), pool)
            grid = rng.normal(size=(2, 2, 5))
            pred = forward(params, FeatureGrid("a", grid))
            maps = np.einsum("hwd,cd->chw", grid, params.weight) + params.bias[:, None, None]
            for c in range(3):
                summary = weldon_pool(maps[c], pool)
                assert pred.scores[c] == pytest.approx(summary.class_score, abs=1e-12)
                assert pred.separation[c] == pytest.approx(summary.separation, abs=1e-12)
                assert pred.probs[c] == pytest.approx(1 / (1 + math.exp(-summary.class_score)), abs=1e-12)

    def test_matches_composed_wildcat_pipeline(self):
        rng = np.random.default_rng(2)
        pool = PoolConfig(k_top=2, k_bot=1, alpha=0.6, mode=PoolMode.WILDCAT, maps_per_class=2)
        params = ScorerParams(rng.normal(size=(6, 4)), rng.normal(size=6), pool)
        grid = rng.normal(size=(3, 2, 4))
        pred = forward(params, FeatureGrid("a", grid))
        raw = np.einsum("hwd,cd->chw", grid, params.weight) + params.bias[:, None, None]
        class_maps = wildcat_class_pool(raw, 2)
        for c in range(3):
            summary = wildcat_spatial_pool(class_maps[c], pool)
            assert pred.scores[c] == pytest.approx(summary.class_score, abs=1e-12)
            assert pred.separation[c] == pytest.approx(summary.separation, abs=1e-12)

    def test_confidences_stay_inside_unit_interval(self):
        rng = np.random.default_rng(3)
        params = ScorerParams(rng.normal(size=(4, 3)), rng.normal(size=4), PoolConfig())
        batch = predict_batch(params, rng.normal(size=(10, 4, 4, 3)), [f"s{i}" for i in range(10)])
        assert np.all((batch.probs > 0) & (batch.probs < 1))

    def test_class_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        params = ScorerParams(rng.normal(size=(4, 3)), rng.normal(size=4), PoolConfig())
        perm = np.array([2, 0, 3, 1])
        permuted = ScorerParams(params.weight[perm], params.bias[perm], params.pool)
        features = rng.normal(size=(5, 3, 3, 3))
        ids = list("abcde")
        a = predict_batch(params, features, ids)
        b = predict_batch(permuted, features, ids)
        np.testing.assert_allclose(b.probs, a.probs[:, perm], rtol=0, atol=1e-12)
        np.testing.assert_allclose(b.separation, a.separation[:, perm], rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            forward(zero_params(2, 3), FeatureGrid("a", np.zeros((2, 2, 4))))
        with pytest.raises(ConfigurationError):
            FeatureGrid("a", np.zeros((2, 2)))

    def test_batch_rows_and_stack(self):
        rng = np.random.default_rng(5)
        params = init_params(3, 2, PoolConfig(), seed=0, scale=1.0)
        batch = predict_batch(params, rng.normal(size=(3, 4, 4, 2)), ["x", "y", "z"])
        rows = [batch.row(i) for i in range(len(batch))]
        assert isinstance(rows[0], Prediction)
        restacked = PredictionBatch.stack(rows)
        assert restacked.sample_ids == ("x", "y", "z")
        np.testing.assert_array_equal(restacked.probs, batch.probs)


class TestLoss:
    def test_uniform_confidence_gives_ln2(self):
        pred = Prediction("a", np.full(3, 0.5), None, np.zeros(3))
        assert loss(pred, [1, 0, 1]) == pytest.approx(math.log(2), abs=1e-12)

    def test_clamped_perfect_prediction(self):
        pred = Prediction("a", np.array([1.0, 0.0]), None, np.zeros(2))
        assert loss(pred, [1, 0]) == pytest.approx(-math.log(1 - 1e-7), rel=1e-9)

    def test_joint_class_permutation(self):
        probs = np.array([0.2, 0.7, 0.9])
        labels = np.array([0, 1, 0])
        perm = [2, 0, 1]
        a = loss(Prediction("a", probs, None, probs), labels)
        b = loss(Prediction("a", probs[perm], None, probs), labels[perm])
        assert a == pytest.approx(b, abs=1e-15)


def tie_free_instance(rng, pool, c=2, d=3, n=3, h=2, w=3, gap=1e-3):
    m = pool.maps_per_class
    while True:
        params = ScorerParams(rng.normal(0, 0.5, size=(c * m, d)), rng.normal(0, 0.5, size=c * m), pool)
        features = rng.normal(size=(n, h, w, d))
        cells = features.reshape(n, h * w, d)
        raw = cells @ params.weight.T + params.bias
        maps = raw.reshape(n, h * w, c, m).mean(axis=-1)
        ordered = np.sort(maps, axis=1)
        if np.min(np.diff(ordered, axis=1)) > gap:
            labels = rng.integers(0, 2, size=(n, c))
            return params, features, labels


@pytest.mark.parametrize("pool", [
    PoolConfig(k_top=2, k_bot=1),
    PoolConfig(k_top=1, k_bot=2, alpha=0.4, mode=PoolMode.WILDCAT, maps_per_class=2),
])
def test_loss_gradient_matches_finite_differences(pool):
    rng = np.random.default_rng(21)
    h = 1e-5
    for _ in range(50):
        params, features, labels = tie_free_instance(rng, pool)
        _, g_w, g_b = loss_and_grad(params, features, labels)

        def value(weight, bias):
            return loss_and_grad(ScorerParams(weight, bias, pool), features, labels)[0]

        num_w = np.zeros_like(params.weight)
        for idx in np.ndindex(params.weight.shape):
            up, down = params.weight.copy(), params.weight.copy()
            up[idx] += h
            down[idx] -= h
            num_w[idx] = (value(up, params.bias) - value(down, params.bias)) / (2 * h)
        num_b = np.zeros_like(params.bias)
        for j in range(len(params.bias)):
            up, down = params.bias.copy(), params.bias.copy()
            up[j] += h
            down[j] -= h
            num_b[j] = (value(params.weight, up) - value(params.weight, down)) / (2 * h)

        np.testing.assert_allclose(g_w, num_w, rtol=1e-4, atol=1e-9)
        np.testing.assert_allclose(g_b, num_b, rtol=1e-4, atol=1e-9)


class TestTrain:
    def _problem(self):
        rng = np.random.default_rng(8)
        features = rng.normal(size=(24, 3, 3, 4))
        labels = (features[:, :, :, 0].max(axis=(1, 2)) > 1.0).astype(np.uint8)[:, None]
        return features, labels

    def test_same_seed_is_bit_identical(self):
        features, labels = self._problem()
        init = init_params(1, 4, PoolConfig(), seed=1)
        a = train(init, features, labels, epochs=3, seed=5, batch_size=5)
        b = train(init, features, labels, epochs=3, seed=5, batch_size=5)
        np.testing.assert_array_equal(a.weight, b.weight)
        np.testing.assert_array_equal(a.bias, b.bias)

    def test_does_not_touch_the_input_params(self):
        features, labels = self._problem()
        init = init_params(1, 4, PoolConfig(), seed=1)
        before = init.weight.copy()
        train(init, features, labels, epochs=2)
        np.testing.assert_array_equal(init.weight, before)

    @pytest.mark.parametrize("epochs,lr", [(0, 0.1), (3, 0.0)])
    def test_no_update_cases(self, epochs, lr):
        features, labels = self._problem()
        init = init_params(1, 4, PoolConfig(), seed=2)
        out = train(init, features, labels, epochs=epochs, lr=lr)
        np.testing.assert_array_equal(out.weight, init.weight)
        np.testing.assert_array_equal(out.bias, init.bias)

    def test_loss_goes_down(self, tiny_dataset):
        rows = tiny_dataset.indices(tiny_dataset.split_ids("train"))
        features = tiny_dataset.features[rows]
        labels = tiny_dataset.labels[rows]
        init = init_params(tiny_dataset.n_classes, features.shape[-1], PoolConfig(), seed=0)
        trained = train(init, features, labels, epochs=30, seed=0, batch_size=8)
        assert loss_and_grad(trained, features, labels)[0] < loss_and_grad(init, features, labels)[0]

    def test_empty_labeled_set(self):
        with pytest.raises(UsageError):
            train(init_params(1, 4, PoolConfig(), seed=0), np.zeros((0, 3, 3, 4)), np.zeros((0, 1)), 1)


def brute_force_ap(scores, labels, ids):
    """All-pairs recomputation: rank of i = 1 + number of samples ordered before it."""
    n = len(scores)
    before = lambda j, i: scores[j] > scores[i] or (scores[j] == scores[i] and ids[j] < ids[i])  # noqa: E731
    precisions = []
    for i in range(n):
        if labels[i]:
            above = [j for j in range(n) if before(j, i)]
            hits = 1 + sum(labels[j] for j in above)
            precisions.append(hits / (len(above) + 1))
    return sum(precisions) / len(precisions)


class TestAveragePrecision:
    def test_hand_example(self):
        assert average_precision([0.9, 0.8, 0.7], [1, 0, 1], ["a", "b", "c"]) == pytest.approx(5 / 6)

    def test_perfect_and_reversed(self):
        ids = list("abcd")
        assert average_precision([4, 3, 2, 1], [1, 1, 0, 0], ids) == 1.0
        assert average_precision([1, 2, 3, 4], [1, 1, 0, 0], ids) < 1.0

    def test_ties_go_to_the_lower_id(self):
        assert average_precision([0.5, 0.5], [0, 1], ["b", "a"]) == 1.0
        assert average_precision([0.5, 0.5], [1, 0], ["b", "a"]) == 0.5

    def test_exhaustive_against_brute_force(self):
        rng = np.random.default_rng(0)
        for n in range(1, 9):
            ids = [f"s{i}" for i in rng.permutation(n)]
            scores = rng.integers(0, 3, size=n).astype(float)
            for pattern in itertools.product((0, 1), repeat=n):
                if not any(pattern):
                    continue
                assert average_precision(scores, pattern, ids) == pytest.approx(
                    brute_force_ap(scores, pattern, ids), abs=1e-12)

    def test_agrees_with_sklearn_without_ties(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(2, 30))
            scores = rng.normal(size=n)
            labels = rng.integers(0, 2, size=n)
            if not labels.any():
                labels[0] = 1
            ids = [f"s{i:02d}" for i in range(n)]
            assert average_precision(scores, labels, ids) == pytest.approx(
                average_precision_score(labels, scores), abs=1e-12)

    def test_needs_a_positive(self):
        with pytest.raises(UsageError):
            average_precision([0.1, 0.2], [0, 0], ["a", "b"])


def identity_scorer(c):
    """1x1 grids whose single cell holds the class logits directly."""
    return ScorerParams(np.eye(c), np.zeros(c), PoolConfig(k_top=1, k_bot=1, allow_overlap=True))


class TestEvaluateMap:
    def test_exhaustive_small_eval_sets(self):
        rng = np.random.default_rng(2)
        params = identity_scorer(3)
        for n in range(1, 5):
            ids = [f"e{i}" for i in range(n)]
            logits = rng.integers(-1, 2, size=(n, 3)).astype(float)
            features = logits[:, None, None, :]
            for flat in itertools.product((0, 1), repeat=3 * n):
                labels = np.array(flat).reshape(n, 3)
                if not labels.any():
                    continue
                result = evaluate_map(params, features, labels, ids)
                probs = sigmoid(logits)
                expected = {j: brute_force_ap(probs[:, j], labels[:, j], ids)
                            for j in range(3) if labels[:, j].any()}
                assert sorted(result.per_class) == sorted(expected)
                assert result.excluded == [j for j in range(3) if j not in expected]
                assert result.mean_ap == pytest.approx(np.mean(list(expected.values())), abs=1e-12)

    def test_random_eight_sample_sets(self):
        rng = np.random.default_rng(3)
        params = identity_scorer(3)
        ids = [f"e{i}" for i in range(8)]
        for _ in range(300):
            logits = rng.integers(-2, 3, size=(8, 3)).astype(float)
            labels = rng.integers(0, 2, size=(8, 3))
            labels[0] = 1
            result = evaluate_map(params, logits[:, None, None, :], labels, ids)
            probs = sigmoid(logits)
            expected = np.mean([brute_force_ap(probs[:, j], labels[:, j], ids) for j in range(3)])
            assert result.mean_ap == pytest.approx(expected, abs=1e-12)

    def test_perfect_ranking(self):
        logits = np.array([[3.0, -3.0], [-3.0, 3.0], [-2.0, -2.0]])
        labels = np.array([[1, 0], [0, 1], [0, 0]])
        result = evaluate_map(identity_scorer(2), logits[:, None, None, :], labels, ["a", "b", "c"])
        assert result.mean_ap == 1.0

    def test_empty_eval_set(self):
        with pytest.raises(UsageError):
            evaluate_map(identity_scorer(2), np.zeros((0, 1, 1, 2)), np.zeros((0, 2)), [])

    def test_excluded_classes_are_logged(self):
        from sepal.GlobalLogger import GlobalLogger
        labels = np.array([[1, 0], [0, 0]])
        result = evaluate_map(identity_scorer(2), np.zeros((2, 1, 1, 2)), labels, ["a", "b"])
        assert result.excluded == [1]
        assert any("excludes classes" in line for line in GlobalLogger.get_instance().get_memory_logs(level="WARNING"))
