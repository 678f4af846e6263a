from __future__ import annotations

import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scriptloc.errors import ConsistencyError, JoinError, SchemaError
from scriptloc.evalkit import (
    CorpusAnnotation,
    Event,
    ItemAnnotation,
    corpus_stats,
    f1_score,
    hungarian_match,
    lcs,
    lcs_length,
    localization_f1,
    script_precision_recall,
)
from scriptloc.vidcluster import StepLocalization


def annotate(K, sequences, length=2.0, gap=1.0):
    """Annotation whose item ``n`` performs ``sequences[n]`` back to back."""
    items = []
    for n, steps in enumerate(sequences):
        events, t = [], 0.0
        for k in steps:
            events.append(Event(k, t, t + length))
            t += length + gap
        items.append(ItemAnnotation(f"i{n}", tuple(events)))
    return CorpusAnnotation(K, tuple(items))


def localization(intervals):
    ids = tuple(f"i{n}" for n in range(len(intervals)))
    return StepLocalization(ids, [np.asarray(iv) for iv in intervals], None, 1.0, tuple(1.0 for _ in ids))


def brute_force_assignment(S):
    n_rows, n_cols = S.shape
    best = -np.inf
    if n_rows <= n_cols:
        for cols in itertools.permutations(range(n_cols), n_rows):
            best = max(best, sum(S[r, c] for r, c in enumerate(cols)))
    else:
        for rows in itertools.permutations(range(n_rows), n_cols):
            best = max(best, sum(S[r, c] for c, r in enumerate(rows)))
    return best


# -- statistics ---------------------------------------------------------------

def test_stats_single_swap():
    stats = corpus_stats(CorpusAnnotation(3, (ItemAnnotation("a", (Event(0, 0, 1), Event(2, 1, 2), Event(1, 2, 3))),)))
    assert stats.order_error == pytest.approx(1 / 3)
    assert stats.missing == 0.0
    assert stats.repetition == 0.0


def test_stats_two_items_with_repeat_and_missing():
    ann = annotate(4, [[0, 1, 1, 2], [2, 0]])
    stats = corpus_stats(ann)
    # l = (3, 1), u = (3, 2), g = (4, 2)
    assert stats.lcs_lengths == [3, 1]
    assert Fraction(stats.order_error).limit_denominator(100) == Fraction(1, 5)
    assert stats.missing == pytest.approx(3 / 8)
    assert stats.repetition == pytest.approx(1 / 6)


def test_stats_repeat_out_of_order():
    stats = corpus_stats(annotate(2, [[1, 0, 1]]))
    assert stats.order_error == pytest.approx(0.5)
    assert stats.missing == 0.0
    assert stats.repetition == pytest.approx(1 / 3)


def test_stats_undefined_without_events():
    stats = corpus_stats(CorpusAnnotation(2, (ItemAnnotation("a", ()),)))
    assert stats.order_error is None and stats.repetition is None
    assert stats.missing == 1.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.integers(0, 4), max_size=8), min_size=1, max_size=6))
def test_stats_bounded(seqs):
    stats = corpus_stats(annotate(5, seqs))
    assert 0.0 <= stats.missing <= 1.0
    if stats.order_error is not None:
        assert 0.0 <= stats.order_error < 1.0
        assert 0.0 <= stats.repetition < 1.0


def test_annotation_validates_steps():
    with pytest.raises(SchemaError):
        CorpusAnnotation(2, (ItemAnnotation("a", (Event(2, 0, 1),)),))
    with pytest.raises(SchemaError):
        CorpusAnnotation(2, (ItemAnnotation("a", (Event(0, 2, 1),)),))


# -- LCS ----------------------------------------------------------------------

@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(0, 3), max_size=7), st.lists(st.integers(0, 3), max_size=7))
def test_lcs_is_common_and_maximal(a, b):
    common = lcs(a, b)
    assert len(common) == lcs_length(a, b)

    def is_subseq(x, y):
        it = iter(y)
        return all(any(v == w for w in it) for v in x)

    assert is_subseq(common, a) and is_subseq(common, b)
    # no longer common subsequence exists among subsequences of a
    longest = max(
        (len(c) for r in range(len(a) + 1) for c in itertools.combinations(a, r) if is_subseq(c, b)),
        default=0,
    )
    assert longest == len(common)


# -- matching and F1 ----------------------------------------------------------

@settings(max_examples=80, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 99_999))
def test_hungarian_equals_brute_force(r, c, seed):
    S = np.random.default_rng(seed).integers(0, 5, size=(r, c)).astype(float)
    matching = hungarian_match(S)
    assert len(matching) == min(r, c)
    assert len({x for x, _ in matching}) == len({y for _, y in matching}) == len(matching)
    assert sum(S[x, y] for x, y in matching) == brute_force_assignment(S)


def test_hungarian_rejects_nonfinite():
    with pytest.raises(ConsistencyError):
        hungarian_match(np.array([[np.inf]]))


def test_worked_f1_example():
    # item 0 performs steps 0 and 1, item 1 only step 0; one of item 0's predictions misses
    ann = CorpusAnnotation(2, (
        ItemAnnotation("i0", (Event(0, 0.0, 2.0), Event(1, 4.0, 6.0))),
        ItemAnnotation("i1", (Event(0, 0.0, 2.0),)),
    ))
    rep = localization_f1(localization([[0, 8], [1, 8]]), ann)
    assert Fraction(rep.recall).limit_denominator(10) == Fraction(2, 3)
    assert Fraction(rep.precision).limit_denominator(10) == Fraction(1, 2)
    assert Fraction(rep.f1).limit_denominator(10) == Fraction(4, 7)
    assert f1_score(0.5, 2 / 3) == pytest.approx(4 / 7)


def test_relabel_invariance():
    rng = np.random.default_rng(3)
    ann = annotate(4, [list(rng.permutation(4)) for _ in range(6)], length=3.0, gap=0.0)
    preds = [np.sort(rng.choice(12, size=4, replace=False)) for _ in range(6)]
    base = localization_f1(localization(preds), ann)
    # relabeling predicted steps permutes the columns of every prediction
    for perm in itertools.permutations(range(4)):
        permuted = [iv[list(perm)] for iv in preds]
        rep = localization_f1(localization(permuted), ann)
        assert rep.f1 == base.f1 and rep.correct == base.correct


def test_given_mapping_mode():
    ann = annotate(2, [[0, 1]])
    loc = localization([[3, 0]])  # predicted step 0 sits on gt step 1 and vice versa
    assert localization_f1(loc, ann, "given-mapping", {0: 0, 1: 1}).correct == 0
    assert localization_f1(loc, ann, "given-mapping", {0: 1, 1: 0}).correct == 2
    assert localization_f1(loc, ann).correct == 2
    with pytest.raises(ConsistencyError):
        localization_f1(loc, ann, "given-mapping", {0: 5})


def test_midpoint_hit_rule():
    ann = CorpusAnnotation(1, (ItemAnnotation("i0", (Event(0, 2.0, 3.0),)),))
    assert localization_f1(localization([[2]]), ann).correct == 1  # midpoint 2.5
    assert localization_f1(localization([[3]]), ann).correct == 0  # midpoint 3.5


def test_f1_join_error():
    with pytest.raises(JoinError):
        localization_f1(localization([[0]]), CorpusAnnotation(1, (ItemAnnotation("other", ()),)))


# -- script recovery ----------------------------------------------------------

def test_script_precision_recall_swap():
    assert script_precision_recall(["A", "C", "B"], ["A", "B", "C"]) == pytest.approx((2 / 3, 2 / 3))


def test_script_precision_recall_with_equivalence():
    p, r = script_precision_recall(["x", "y", "z"], ["A", "B"], {"x": "A", "z": "B"})
    assert (p, r) == pytest.approx((2 / 3, 1.0))


def test_script_duplicates_count_once_in_recall():
    p, r = script_precision_recall(["A", "A", "B"], ["A", "B", "C"], {"A": "A", "B": "B"})
    assert p == pytest.approx(2 / 3) and r == pytest.approx(2 / 3)
