import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvfuse.metrics import (
    best_alignment,
    classification_metrics,
    count_chunks,
    lcs_length,
    meteor_core,
    parse_label,
    rouge_l,
    score_texts,
    tokenize,
)
from mvfuse.tokenizer import LABEL_NAMES

# ---------------------------------------------------------------- oracles


def brute_lcs(a, b):
    """Longest subsequence of ``a`` that is also a subsequence of ``b``, by enumeration."""

    def is_subseq(s, t):
        it = iter(t)
        return all(x in it for x in s)

    for k in range(len(a), -1, -1):
        for idx in itertools.combinations(range(len(a)), k):
            if is_subseq([a[i] for i in idx], b):
                return k
    return 0


def brute_alignment(cand, ref):
    """(max matches, min chunks) over every one-to-one exact-match alignment, by DFS."""
    best = (0, 0)

    def visit(i, used, pairs):
        nonlocal best
        if i == len(cand):
            if pairs:
                chunks = 1 + sum(1 for a, b in zip(pairs, pairs[1:]) if b != (a[0] + 1, a[1] + 1))
                if (len(pairs), -chunks) > (best[0], -best[1]):
                    best = (len(pairs), chunks)
            return
        visit(i + 1, used, pairs)
        for j, y in enumerate(ref):
            if y == cand[i] and j not in used:
                visit(i + 1, used | {j}, pairs + [(i, j)])

    visit(0, frozenset(), [])
    return best


def meteor_from_counts(m, chunks, n_cand, n_ref):
    P, R = m / n_cand, m / n_ref
    return 10 * P * R / (R + 9 * P) * (1 - 0.5 * (chunks / m) ** 3)


tokens = st.lists(st.sampled_from("abc"), min_size=0, max_size=6)

# ---------------------------------------------------------------- parse_label


@pytest.mark.parametrize(
    "text, expected",
    [
        ("Proficiency Level: Intermediate Expert.\nProficiency Commentary: fine.", 2),
        ("proficiency level:   novice", 0),
        ("PROFICIENCY LEVEL: late expert", 3),
        ("Proficiency Level: Early Expert", 1),
        ("The subject is skilled.", None),
        ("Proficiency Level: Expert", None),
        (b"Proficiency Level: Novice.", 0),
    ],
)
def test_parse_label_examples(text, expected):
    assert parse_label(text) == expected


def test_parse_label_first_occurrence_wins():
    assert parse_label("Proficiency Level: Novice. Proficiency Level: Late Expert") == 0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 3), st.text(alphabet="xyz .:\n", max_size=20), st.text(alphabet="xyz .:\n", max_size=20))
def test_parse_label_never_confuses_names(label, before, after):
    text = f"{before}Proficiency Level: {LABEL_NAMES[label]}{after}"
    assert parse_label(text) == label


# ---------------------------------------------------------------- classification


def test_classification_hand_example():
    res = classification_metrics([0, 0, 1, 2], [0, 1, 1, 3])
    assert res.accuracy == 0.5
    assert res.f1[0] == pytest.approx(2 / 3, abs=1e-15)
    assert res.f1[1] == pytest.approx(2 / 3, abs=1e-15)
    assert res.f1[2] == 0.0 and res.f1[3] == 0.0
    assert res.macro_f1 == pytest.approx(1 / 3, abs=1e-15)
    assert res.confusion == [[1, 0, 0, 0], [1, 1, 0, 0], [0, 0, 0, 0], [0, 0, 1, 0]]


def test_classification_perfect_and_shifted():
    gold = [0, 1, 2, 3] * 5
    assert classification_metrics(gold, gold).accuracy == 1.0
    assert classification_metrics(gold, gold).macro_f1 == 1.0
    shifted = [(g + 1) % 4 for g in gold]
    assert classification_metrics(shifted, gold).accuracy == 0.0


def test_parse_failures_count_as_wrong():
    res = classification_metrics([None, 1, None, 3], [0, 1, 2, 3])
    assert res.accuracy == 0.5
    assert res.accuracy_parsed == 1.0
    assert res.parse_failures == 2
    assert sum(map(sum, res.confusion)) + res.parse_failures == 4


def test_absent_class_warns():
    with pytest.warns(UserWarning, match="Late Expert"):
        classification_metrics([0, 1, 2], [0, 1, 2])


def test_classification_errors():
    with pytest.raises(ValueError):
        classification_metrics([], [])
    with pytest.raises(ValueError):
        classification_metrics([0], [0, 1])


# ---------------------------------------------------------------- rouge_l


def test_tokenize_strips_punctuation_and_case():
    assert tokenize("The Cat, sat.") == ["the", "cat", "sat"]


def test_rouge_identical():
    assert rouge_l("the cat sat", "the cat sat") == (1.0, 1.0, 1.0)


def test_rouge_hand_example():
    P, R, F = rouge_l("a b c d", "a c d")
    assert (P, R) == (0.75, 1.0)
    assert F == pytest.approx(6 / 7, abs=1e-15)


def test_rouge_disjoint_and_empty():
    assert rouge_l("x y", "a b") == (0.0, 0.0, 0.0)
    assert rouge_l("", "a b") == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        rouge_l("a", "")


def test_lcs_exhaustive_small_alphabet():
    # every pair of sequences over {a, b} up to length 4, plus sampled longer ones below
    seqs = [list(s) for n in range(5) for s in itertools.product("ab", repeat=n)]
    for a in seqs:
        for b in seqs:
            assert lcs_length(a, b) == brute_lcs(a, b)


@settings(max_examples=300, deadline=None)
@given(tokens, tokens)
def test_lcs_matches_enumeration(a, b):
    assert lcs_length(a, b) == brute_lcs(a, b)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from("xyz"), min_size=1, max_size=5), st.lists(st.sampled_from("ab"), min_size=1, max_size=5),
       st.lists(st.sampled_from("xyzab"), max_size=4))
def test_rouge_recall_monotone_when_appending_to_reference(cand, ref, extra):
    # disjoint candidate: appending words to the reference never lowers recall
    before = rouge_l(" ".join(cand), " ".join(ref))[1]
    after = rouge_l(" ".join(cand), " ".join(ref + extra))[1]
    assert after >= before


# ---------------------------------------------------------------- meteor_core


def test_meteor_identical_pair():
    assert abs(meteor_core("a b", "a b") - 0.9375) < 1e-12


def test_meteor_hand_example():
    f_mean = 10 * (2 / 3) / (1 + 9 * (2 / 3))
    assert abs(meteor_core("the cat sat", "the cat") - f_mean * 0.9375) < 1e-12
    assert round(meteor_core("the cat sat", "the cat"), 3) == 0.893


def test_meteor_zero_overlap_and_errors():
    assert meteor_core("x y", "a b") == 0.0
    assert meteor_core("", "a b") == 0.0
    with pytest.raises(ValueError):
        meteor_core("a", "")


def test_count_chunks():
    assert count_chunks([(0, 0), (1, 1), (2, 2)]) == 1
    assert count_chunks([(0, 1), (1, 0)]) == 2
    assert count_chunks([(2, 2), (0, 0), (1, 1)]) == 1


@settings(max_examples=150, deadline=None)
@given(tokens, tokens)
def test_alignment_matches_brute_force(cand, ref):
    assert best_alignment(cand, ref) == brute_alignment(cand, ref)


@settings(max_examples=100, deadline=None)
@given(tokens.filter(bool), tokens.filter(bool))
def test_meteor_matches_formula_from_brute_counts(cand, ref):
    m, ch = brute_alignment(cand, ref)
    expected = 0.0 if m == 0 else meteor_from_counts(m, ch, len(cand), len(ref))
    assert abs(meteor_core(" ".join(cand), " ".join(ref)) - expected) < 1e-12


def test_meteor_prefers_fewer_chunks_among_max_matches():
    # "a" can align to either ref position; the contiguous choice gives one chunk
    assert best_alignment(["a", "b"], ["a", "x", "a", "b"]) == (2, 1)


def test_scores_bounded():
    rng = np.random.default_rng(0)
    words = "the cat sat on a mat".split()
    for _ in range(50):
        c = " ".join(rng.choice(words, size=rng.integers(1, 6)))
        r = " ".join(rng.choice(words, size=rng.integers(1, 6)))
        assert 0.0 <= meteor_core(c, r) <= 1.0
        assert all(0.0 <= v <= 1.0 for v in rouge_l(c, r))


# ---------------------------------------------------------------- reports


def test_score_texts_bookkeeping():
    gold_texts = [f"Proficiency Level: {n}.\nProficiency Commentary: ok." for n in LABEL_NAMES]
    generated = [gold_texts[0].encode(), b"garbage", gold_texts[3].encode(), gold_texts[1].encode()]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = score_texts(generated, [0, 1, 2, 3], gold_texts)
    assert rep.n_samples == 4
    assert rep.parse_failures == 1
    assert sum(map(sum, rep.confusion)) + rep.parse_failures == rep.n_samples
    assert rep.accuracy == 0.25
    d = rep.to_dict()
    assert "generations" not in d and d["rouge_l"]["f1"] > 0
