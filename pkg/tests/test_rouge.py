import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hiersum.rouge import corpus_rouge, lcs_length, rouge_l, rouge_n

from oracles import lcs_brute

words = st.lists(st.sampled_from("abcde"), max_size=8)


@pytest.mark.parametrize("fn,expected", [
    (lambda h, r: rouge_n(h, r, 1), 2 / 3),
    (lambda h, r: rouge_n(h, r, 2), 0.5),
    (rouge_l, 2 / 3),
])
def test_hand_examples(fn, expected):
    s = fn("a b d", "a b c")
    assert s.precision == s.recall == s.f1 == pytest.approx(expected, abs=1e-12)


def test_identity():
    assert rouge_l("x y z", "x y z").f1 == rouge_n("x y z", "x y z", 2).f1 == 1.0


def test_disjoint():
    assert rouge_l("a b", "c d").f1 == 0.0 and rouge_n("a b", "c d").f1 == 0.0


def test_prefix():
    s = rouge_l("a b", "a b c d")
    assert (s.precision, s.recall) == (1.0, 0.5)


def test_clipped_counts():
    assert rouge_n("a a a", "a", 1).precision == pytest.approx(1 / 3)


def test_case_folded():
    assert rouge_n("A B", "a b").f1 == 1.0


@pytest.mark.parametrize("hyp,ref", [("", "a"), ("a", ""), ("", "")])
def test_empty_inputs(hyp, ref):
    for s in (rouge_n(hyp, ref, 1), rouge_n(hyp, ref, 2), rouge_l(hyp, ref)):
        assert (s.precision, s.recall, s.f1) == (0.0, 0.0, 0.0)


def test_bad_n():
    with pytest.raises(ValueError):
        rouge_n("a", "a", 0)


def test_lcs_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a = list(rng.choice(list("abcd"), size=rng.integers(0, 13)))
        b = list(rng.choice(list("abcd"), size=rng.integers(0, 13)))
        assert lcs_length(a, b) == lcs_brute(a, b)


@given(words, words)
def test_f1_symmetry(h, r):
    for fn in (rouge_l, lambda x, y: rouge_n(x, y, 1), lambda x, y: rouge_n(x, y, 2)):
        a, b = fn(h, r), fn(r, h)
        assert a.f1 == pytest.approx(b.f1)
        assert (a.precision, a.recall) == pytest.approx((b.recall, b.precision))


@given(words, words, st.sampled_from("abcde"))
def test_appending_match_never_lowers_recall(h, r, tok):
    for fn in (rouge_l, lambda x, y: rouge_n(x, y, 1)):
        assert fn(h + [tok], r + [tok]).recall >= fn(h, r).recall - 1e-12


def test_corpus_rouge():
    out = corpus_rouge(["a b d", "x"], ["a b c", "x"])
    assert out["rouge1"] == pytest.approx((2 / 3 + 1) / 2)
    assert out["rougeL_precision"] == pytest.approx((2 / 3 + 1) / 2)
    with pytest.raises(ValueError):
        corpus_rouge(["a"], [])
