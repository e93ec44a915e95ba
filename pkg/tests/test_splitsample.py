import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from coroseg.errors import ConfigError, DomainError, EmptyPopulationError
from coroseg.splitsample import (
    DatasetIndex,
    allocate_validation,
    class_frequency_scores,
    dataset_stats,
    format_split,
    format_stats_tsv,
    image_weights,
    index_from_masks,
    parse_split,
    stratified_split,
    weighted_sample,
)
from oracles import allocation_oracle


def _index_with_counts(counts, size=50):
    """One segment per image, ``counts[c]`` images of class ``c``."""
    images, iid = {}, 0
    for c, n in counts.items():
        for k in range(n):
            images[iid] = [(c, size + k)]
            iid += 1
    return DatasetIndex(images, tuple(sorted(counts)))


# --- stats ---

def test_stats_average_of_large_class():
    # 404 * 1610 = 650,440, so 184 segments carry one extra pixel
    idx = DatasetIndex({i: [(1, 1611 if i < 184 else 1610)] for i in range(404)}, (1,))
    row = dataset_stats(idx, 0)[1]
    assert row.total_pixels == 650624 and row.count == 404
    assert row.avg_size == 1610.46


def test_stats_singleton():
    row = dataset_stats(DatasetIndex({0: [(3, 3)]}), 10)[1]
    assert (row.min_size, row.max_size, row.avg_size) == (3, 3, 3.0)


def test_stats_two_segments():
    rows = dataset_stats(DatasetIndex({0: [(2, 10)], 1: [(2, 30)]}), [90, 70])
    bg, r = rows
    assert (r.avg_size, r.min_size, r.max_size) == (20.0, 10, 30)
    assert r.share_pct == pytest.approx(100 * 40 / 200)
    assert (bg.min_size, bg.max_size, bg.total_pixels) == (70, 90, 160)


def test_stats_empty_index():
    with pytest.raises(EmptyPopulationError):
        dataset_stats(DatasetIndex({}), 0)


def test_stats_tsv_columns():
    text = format_stats_tsv(dataset_stats(DatasetIndex({0: [(1, 4)]}), 5))
    lines = text.splitlines()
    assert lines[0].split("\t")[0] == "class_id"
    assert all(len(line.split("\t")) == 8 for line in lines)


def test_index_from_masks_counts_instances():
    m = np.zeros((10, 10), np.uint8)
    m[0:2, 0:2] = 4
    m[6:9, 6:9] = 4
    m[0, 8] = 7
    idx = index_from_masks({3: m})
    assert sorted(idx.images[3]) == [(4, 4), (4, 9), (7, 1)]


def test_zero_size_segment_rejected():
    with pytest.raises(DomainError):
        DatasetIndex({0: [(1, 0)]})


# --- allocation and split ---

def test_allocation_worked_example():
    assert allocate_validation({1: 20, 2: 80}, 25) == {1: 20, 2: 5}


def test_allocation_equal_counts_split_evenly():
    assert allocate_validation({1: 30, 2: 30}, 10) == {1: 5, 2: 5}


def test_allocation_tie_goes_to_lower_class():
    assert allocate_validation({1: 10, 2: 10}, 3) == {1: 2, 2: 1}


def test_allocation_absent_class_gets_nothing():
    assert allocate_validation({1: 10, 2: 0, 3: 10}, 4) == {1: 2, 2: 0, 3: 2}


def test_allocation_matches_rational_oracle_on_random_instances():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        C = int(rng.integers(1, 7))
        counts = {c: int(rng.integers(0, 60)) for c in range(1, C + 1)}
        V = int(rng.integers(0, 80))
        got = allocate_validation(counts, V)
        if any(counts.values()):
            assert sum(got.values()) == V
        assert got == allocation_oracle(counts, V)


@given(st.dictionaries(st.integers(1, 26), st.integers(1, 500), min_size=1, max_size=8), st.integers(0, 300))
def test_allocation_sums_and_nonnegative(counts, V):
    got = allocate_validation(counts, V)
    assert sum(got.values()) == V
    assert all(v >= 0 for v in got.values())


def test_split_small_segments_first():
    images = {i: [(1, 100 + i)] for i in range(10)}
    images[7] = [(1, 5)]
    images[3] = [(1, 8)]
    res = stratified_split(DatasetIndex(images, (1,)), V=2, size_threshold=10, seed=0)
    assert res.val_ids == [3, 7]


def test_split_all_large_uses_seeded_draws():
    idx = _index_with_counts({1: 20}, size=100)
    a = stratified_split(idx, 5, 10, seed=1)
    b = stratified_split(idx, 5, 10, seed=1)
    c = stratified_split(idx, 5, 10, seed=2)
    assert a.assignment == b.assignment
    assert len(a.val_ids) == 5
    assert a.val_ids != c.val_ids


def test_split_worked_example_counts():
    idx = _index_with_counts({1: 20, 2: 80})
    res = stratified_split(idx, 25, 1000, seed=3)
    assert res.plan.allocation == {1: 20, 2: 5}
    assert res.plan.proportions == {1: 5.0, 2: 1.25}
    assert len(res.val_ids) == 25


def test_split_multi_class_image_is_val_if_any_segment_is():
    idx = DatasetIndex({0: [(1, 3), (2, 500)], 1: [(2, 400)], 2: [(2, 450)], 3: [(1, 300)]}, (1, 2))
    res = stratified_split(idx, 1, 10, 0)
    assert res.assignment[0] == "val"


def test_split_clipping_warning():
    idx = DatasetIndex({0: [(1, 5)], **{i: [(2, 50)] for i in range(1, 20)}}, (1, 2))
    res = stratified_split(idx, 10, 10, 0)
    assert res.plan.allocation[1] == 1
    assert res.warnings and "clipped" in res.warnings[0]


@pytest.mark.parametrize("V", [0, 4])
def test_split_rejects_v_out_of_range(V):
    with pytest.raises(ConfigError):
        stratified_split(_index_with_counts({1: 4}), V, 10, 0)


def test_split_rejects_bad_threshold():
    with pytest.raises(ConfigError):
        stratified_split(_index_with_counts({1: 4}), 1, 0, 0)


def test_split_text_roundtrip():
    a = {3: "val", 1: "train", 2: "train"}
    text = format_split(a)
    assert text == "1\ttrain\n2\ttrain\n3\tval\n"
    assert parse_split(text) == a


def test_split_parse_rejects_garbage():
    with pytest.raises(DomainError):
        parse_split("1\ttest\n")


# --- weights ---

def test_scores_quarter_frequency():
    t = class_frequency_scores(_index_with_counts({1: 1, 2: 3}))
    assert t.frequency[1] == 0.25 and t.score[1] == 0.5


def test_scores_rare_class_counts():
    t = class_frequency_scores(_index_with_counts({1: 404, 2: 6180 - 404}, size=1))
    assert t.frequency[1] == pytest.approx(0.065372, abs=5e-7)
    assert t.score[1] == pytest.approx(0.255680, abs=5e-7)


def test_scores_single_class_and_exclusion():
    idx = DatasetIndex({0: [(2, 5)], 1: [(2, 6)]}, (1, 2))
    t = class_frequency_scores(idx)
    assert t.frequency == {2: 1.0} and t.score == {2: 1.0}
    assert t.excluded == [1]


@given(st.dictionaries(st.integers(1, 26), st.integers(0, 40), min_size=1, max_size=10))
def test_frequencies_sum_to_one(counts):
    if not any(counts.values()):
        return
    t = class_frequency_scores(_index_with_counts(counts))
    assert abs(sum(t.frequency.values()) - 1.0) < 1e-12


def test_image_weight_modes():
    # class 1 has F=1/4 (S=0.5), class 2 has F=1/16 (S=0.25)
    images = {0: [(1, 5), (2, 5)]}
    images.update({i: [(1, 5)] for i in range(1, 4)})
    images.update({i: [(3, 5)] for i in range(4, 15)})
    idx = DatasetIndex(images, (1, 2, 3))
    t = class_frequency_scores(idx)
    assert t.score[1] == 0.5 and t.score[2] == 0.25
    assert image_weights(idx, t, "intent")[0] == 4.0
    assert image_weights(idx, t, "as-written")[0] == 2.0
    for mode in ("intent", "as-written"):
        assert image_weights(idx, t, mode)[1] == 2.0


def test_image_weight_empty_image_defaults_to_one():
    idx = DatasetIndex({0: [(1, 5)], 1: []}, (1,))
    assert image_weights(idx, class_frequency_scores(idx))[1] == 1.0


def test_image_weight_bad_mode_and_missing_class():
    idx = DatasetIndex({0: [(1, 5)]}, (1,))
    t = class_frequency_scores(idx)
    with pytest.raises(ConfigError):
        image_weights(idx, t, "literal")
    other = DatasetIndex({0: [(2, 5)]}, (1, 2))
    with pytest.raises(DomainError):
        image_weights(other, t)


@given(st.lists(st.integers(1, 6), min_size=1, max_size=6, unique=True),
       st.lists(st.integers(1, 6), min_size=1, max_size=6, unique=True))
def test_intent_weight_monotone_in_class_set(base, extra):
    small = sorted(set(base))
    big = sorted(set(base) | set(extra))
    # background population so every class has a distinct frequency
    images = {0: [(c, 1) for c in small], 1: [(c, 1) for c in big]}
    iid = 2
    for c in range(1, 7):
        for _ in range(c * 3):
            images[iid] = [(c, 1)]
            iid += 1
    idx = DatasetIndex(images, tuple(range(1, 7)))
    w = image_weights(idx, class_frequency_scores(idx), "intent")
    assert w[1] >= w[0]


def test_sample_singleton():
    assert weighted_sample({"a": 1.0}, 20, 0) == ["a"] * 20


def test_sample_binomial_bound():
    draws = weighted_sample({0: 1.0, 1: 1.0}, 10_000, 123)
    assert abs(draws.count(0) - 5000) <= 3 * 50


def test_sample_proportional():
    draws = weighted_sample({0: 1.0, 1: 3.0}, 20_000, 5)
    sigma = math.sqrt(20_000 * 0.25 * 0.75)
    assert abs(draws.count(1) - 15_000) <= 3 * sigma


def test_sample_deterministic():
    w = {i: float(i + 1) for i in range(10)}
    assert weighted_sample(w, 50, 8) == weighted_sample(w, 50, 8)


def test_sample_errors():
    with pytest.raises(EmptyPopulationError):
        weighted_sample({}, 3, 0)
    with pytest.raises(DomainError):
        weighted_sample({0: 1.0, 1: 0.0}, 3, 0)
    with pytest.raises(ConfigError):
        weighted_sample({0: 1.0}, 0, 0)
