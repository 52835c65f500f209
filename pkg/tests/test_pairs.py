import itertools

import numpy as np
import pytest
from scipy import stats

from mvcl.errors import PairError
from mvcl.linalg import Rng
from mvcl.pairs import (
    LabeledView,
    PairSets,
    build_negative_pairs,
    build_positive_pairs,
    labeled_views,
    sample_pairs,
)


def brute_positives(views):
    out = set()
    for a, b in itertools.combinations(views, 2):
        if a.subject_id == b.subject_id and a.view != b.view:
            out.add((min(a.index, b.index), max(a.index, b.index)))
    return out


def brute_negatives(views):
    return {
        (min(a.index, b.index), max(a.index, b.index))
        for a, b in itertools.combinations(views, 2)
        if a.label != b.label
    }


def test_one_subject_three_pairs():
    assert build_positive_pairs(labeled_views([7], [0])) == [(0, 1), (1, 2), (0, 2)]


def test_no_subjects():
    assert build_positive_pairs([]) == []


def test_ten_subjects():
    lv = labeled_views(range(10), [0] * 10)
    pairs = build_positive_pairs(lv)
    assert len(pairs) == 30
    assert all(a // 3 == b // 3 for a, b in pairs)
    assert set(pairs) == brute_positives(lv)


def test_missing_or_duplicate_view():
    lv = labeled_views([0, 1], [0, 1])
    with pytest.raises(PairError):
        build_positive_pairs(lv[:-1])
    with pytest.raises(PairError):
        build_positive_pairs(lv + [LabeledView(1, "left", 1, 9)])
    with pytest.raises(PairError):
        LabeledView(0, "top", 0, 0)


def test_negatives_need_two_labels():
    with pytest.raises(PairError):
        build_negative_pairs(labeled_views(range(3), [2, 2, 2]), None)


def test_two_subjects_uncapped():
    pairs = build_negative_pairs(labeled_views([0, 1], [0, 1]), None)
    assert len(pairs) == 9
    assert all(a < 3 <= b for a, b in pairs)


def test_negatives_deterministic_and_capped():
    lv = labeled_views(range(12), [i % 4 for i in range(12)])
    a = build_negative_pairs(lv, 3, Rng(5))
    b = build_negative_pairs(lv, 3, Rng(5))
    assert a == b
    assert all(lv[x].label != lv[y].label for x, y in a)
    counts = np.zeros(36, dtype=int)
    chosen = build_negative_pairs(lv, 3, Rng(5))
    for x, y in chosen:
        counts[x] += 1
        counts[y] += 1
    # each anchor keeps 3 partners; partnerships from other anchors can only add
    assert counts.min() >= 3
    assert build_negative_pairs(lv, 3, Rng(6)) != a


@pytest.mark.parametrize("seed", range(40))
def test_small_sets_match_brute_force(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(2, 5))
    labels = r.integers(0, 3, size=n)
    if len(set(labels)) < 2:
        labels[0] = (labels[1] + 1) % 3
    lv = labeled_views(r.permutation(100)[:n], labels)
    assert set(build_positive_pairs(lv)) == brute_positives(lv)
    assert set(build_negative_pairs(lv, None)) == brute_negatives(lv)


def test_pairset_invariants():
    with pytest.raises(PairError):
        PairSets([(1, 1)], [], 3)
    with pytest.raises(PairError):
        PairSets([(0, 3)], [], 3)
    with pytest.raises(PairError):
        PairSets([(0, 1)], [(1, 0)], 3)


def test_sample_pairs_identity_and_determinism():
    lv = labeled_views(range(10), [i % 2 for i in range(10)])
    ps = PairSets(build_positive_pairs(lv), build_negative_pairs(lv, 4, Rng(0)), 30)
    assert sample_pairs(ps, 1000, 1000, Rng(1)) == ps
    a = sample_pairs(ps, 7, 5, Rng(2))
    assert a == sample_pairs(ps, 7, 5, Rng(2))
    assert len(a.positives) == 7 and len(a.negatives) == 5
    # order-stable: the subsample keeps the original relative order
    idx = [ps.positives.index(p) for p in a.positives]
    assert idx == sorted(idx)
    with pytest.raises(PairError):
        sample_pairs(ps, 0, 1, Rng(0))


def test_sample_pairs_uniform():
    ps = PairSets(build_positive_pairs(labeled_views(range(10), [0] * 10)), [], 30)
    counts = np.zeros(30)
    for seed in range(10_000):
        (p,) = sample_pairs(ps, 1, 1, Rng(seed)).positives
        counts[ps.positives.index(p)] += 1
    chi2 = float(((counts - counts.mean()) ** 2 / counts.mean()).sum())
    df = 29
    # within 4 sigma of the chi-square mean, and not rejected at the 1e-4 level
    assert abs(chi2 - df) <= 4 * np.sqrt(2 * df)
    assert stats.chi2.sf(chi2, df) > 1e-4
