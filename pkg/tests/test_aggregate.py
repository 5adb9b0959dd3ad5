import random
import time

import pytest

from sepal.aggregate import SelectionRequest, adversarial_select, metric_agnostic, vote_select
from sepal.exceptions import UsageError
from sepal.metrics import MetricId, Ranking

METRICS = [MetricId.UNC, MetricId.ENT, MetricId.MM, MetricId.SEPMAX, MetricId.SEPMIN, MetricId.SEPSUM]


def rankings(*lists):
    return tuple(Ranking(METRICS[i], tuple(ids)) for i, ids in enumerate(lists))


def interpret_round_robin(lists, n):
    """Line-by-line reading of the round-robin pseudocode with 1-based cursors."""
    chosen = []
    idxs = [1] * len(lists)
    while len(chosen) < n:
        if all(idxs[t] > len(lists[t]) for t in range(len(lists))):
            break
        for t in range(len(lists)):
            if idxs[t] <= len(lists[t]):
                sample = lists[t][idxs[t] - 1]
                if sample not in chosen:
                    chosen.append(sample)
                idxs[t] += 1
            if len(chosen) >= n:
                break
    return chosen


class TestMetricAgnostic:
    def test_hand_executed_example(self):
        result = metric_agnostic(SelectionRequest(rankings("abc", "bde"), 3))
        assert result.sample_ids == ["a", "b", "d"]
        assert result.contributions == {"UNC": 2, "ENT": 1}

    def test_identical_rankings_collapse(self):
        result = metric_agnostic(SelectionRequest(rankings("abcdef", "abcdef", "abcdef"), 4))
        assert result.sample_ids == list("abcd")

    def test_disjoint_rankings_take_equal_shares(self):
        result = metric_agnostic(SelectionRequest(rankings("a1", "b1", "c1", "d1"), 4))
        assert result.sample_ids == ["a", "b", "c", "d"]
        result = metric_agnostic(SelectionRequest(rankings("abc", "def", "ghi"), 6))
        assert set(result.contributions.values()) == {2}

    def test_single_ranking_is_its_prefix(self):
        result = metric_agnostic(SelectionRequest(rankings("qwerty"), 3))
        assert result.sample_ids == list("qwe")

    def test_exhaustion_returns_a_short_result(self):
        result = metric_agnostic(SelectionRequest(rankings("ab", "ba", "b"), 5))
        assert result.sample_ids == ["a", "b"]

    def test_all_empty(self):
        assert metric_agnostic(SelectionRequest(rankings("", ""), 3)).sample_ids == []

    def test_n_must_be_positive(self):
        with pytest.raises(UsageError):
            SelectionRequest(rankings("ab"), 0)

    def test_matches_interpreter_on_random_instances(self):
        rng = random.Random(1234)
        universe = [f"s{i:02d}" for i in range(30)]
        start = time.perf_counter()
        for _ in range(1000):
            t = rng.randint(1, 6)
            lists = [rng.sample(universe, rng.randint(0, 20)) for _ in range(t)]
            n = rng.randint(1, 15)
            result = metric_agnostic(SelectionRequest(rankings(*lists), n))
            expected = interpret_round_robin(lists, n)
            assert result.sample_ids == expected
            union = set().union(*lists)
            assert len(result.sample_ids) == min(n, len(union))
            assert len(set(result.sample_ids)) == len(result.sample_ids)
            assert sum(result.contributions.values()) == len(result.sample_ids)

            truncated = metric_agnostic(SelectionRequest(rankings(*[lst[:n] for lst in lists]), n))
            assert truncated.sample_ids == result.sample_ids
        assert time.perf_counter() - start < 5.0


class TestVoteSelect:
    def test_hand_counted_example(self):
        result = vote_select(rankings("ab", "bc", "bd"), 2)
        assert result.sample_ids == ["b", "a"]
        assert result.vote_histogram == {1: 3, 3: 1}

    def test_unanimous_sample_goes_first(self):
        result = vote_select(rankings("xa", "bx", "cx"), 2)
        assert result.sample_ids[0] == "x"

    def test_disjoint_sets_give_single_votes(self):
        result = vote_select(rankings("ab", "cd"), 2)
        assert result.vote_histogram == {1: 4}
        assert result.sample_ids == ["a", "b"]

    def test_only_the_top_n_vote(self):
        result = vote_select(rankings("abz", "cdz"), 2)
        assert "z" not in result.sample_ids
        assert sum(result.vote_histogram.values()) == 4

    def test_histogram_sums_to_candidate_union(self):
        rng = random.Random(7)
        universe = [f"s{i:02d}" for i in range(25)]
        for _ in range(200):
            lists = [rng.sample(universe, rng.randint(1, 12)) for _ in range(rng.randint(1, 6))]
            n = rng.randint(1, 8)
            result = vote_select(rankings(*lists), n)
            union = set().union(*[lst[:n] for lst in lists])
            assert sum(result.vote_histogram.values()) == len(union)
            assert len(result.sample_ids) == min(n, len(union))


class TestAdversarialSelect:
    def test_count_order(self):
        assert adversarial_select({"a": 3, "b": 1, "c": 2}, 2).sample_ids == ["a", "c"]

    def test_equal_counts_fall_back_to_id_order(self):
        assert adversarial_select({"d": 1, "b": 1, "c": 1}, 2).sample_ids == ["b", "c"]

    def test_saturation(self):
        assert adversarial_select({"a": 1, "b": 2}, 5).sample_ids == ["b", "a"]

    def test_n_must_be_positive(self):
        with pytest.raises(UsageError):
            adversarial_select({"a": 1}, 0)
