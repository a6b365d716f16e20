import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prefixtune.metrics import REPORT_COLUMNS, bleu, evaluate, exact_match, lcs_length, report_csv, report_row, \
    rouge_l, rouge_n

WORDS = list("abcde")


# brute-force oracles: plain list scans, no Counter arithmetic


def grams(toks, n):
    return [tuple(toks[i:i + n]) for i in range(len(toks) - n + 1)]


def occurrences(g, toks):
    return sum(1 for h in grams(toks, len(g)) if h == g)


def oracle_bleu(cands, refsets, max_n=4):
    match, total = [0] * max_n, [0] * max_n
    clen = rlen = 0
    for c, refs in zip(cands, refsets):
        clen += len(c)
        rlen += sorted(refs, key=lambda r: (abs(len(r) - len(c)), len(r)))[0].__len__()
        for n in range(1, max_n + 1):
            for g in set(grams(c, n)):
                match[n - 1] += min(occurrences(g, c), max(occurrences(g, r) for r in refs))
            total[n - 1] += len(grams(c, n))
    used = [(m, t) for m, t in zip(match, total) if t]
    if not clen or any(m == 0 for m, _ in used):
        return 0.0
    geo = math.exp(sum(math.log(m / t) for m, t in used) / len(used))
    return geo * (1.0 if clen > rlen else math.exp(1 - rlen / clen))


def oracle_lcs(a, b):
    for k in range(len(a), 0, -1):
        for idx in itertools.combinations(range(len(a)), k):
            sub = [a[i] for i in idx]
            it = iter(b)
            if all(x in it for x in sub):
                return k
    return 0


def f1(o, c, r):
    return 0.0 if not o else 2 * (o / c) * (o / r) / (o / c + o / r)


def oracle_rouge_n(c, refs, n):
    if len(c) < n:
        return 0.0
    best = 0.0
    for r in refs:
        o = sum(min(occurrences(g, c), occurrences(g, r)) for g in set(grams(c, n)))
        best = max(best, f1(o, len(grams(c, n)), len(grams(r, n))) if grams(r, n) else 0.0)
    return best


def sentence(rng, lo=1, hi=8):
    return list(rng.choice(WORDS, size=rng.integers(lo, hi + 1)))


def test_metrics_match_brute_force_on_100_random_pairs():
    rng = np.random.default_rng(0)
    cands = [sentence(rng) for _ in range(100)]
    refs = [[sentence(rng) for _ in range(rng.integers(1, 4))] for _ in range(100)]
    for c, r in zip(cands, refs):
        assert abs(rouge_n(c, r, 1) - oracle_rouge_n(c, r, 1)) < 1e-9
        assert abs(rouge_n(c, r, 2) - oracle_rouge_n(c, r, 2)) < 1e-9
        assert abs(rouge_l(c, r) - max(f1(oracle_lcs(c, x), len(c), len(x)) for x in r)) < 1e-9
        assert abs(bleu([c], [r]) - oracle_bleu([c], [r])) < 1e-9
    assert abs(bleu(cands, refs) - oracle_bleu(cands, refs)) < 1e-9
    for k in range(0, 100, 10):
        assert abs(bleu(cands[k:k + 10], refs[k:k + 10]) - oracle_bleu(cands[k:k + 10], refs[k:k + 10])) < 1e-9


def test_hand_computed_bleu():
    # 1-gram 5/6, 2-gram 3/5, 3-gram 1/4, 4-gram 0/3 -> 0 without smoothing
    assert bleu(["the cat sat on the mat"], [["the cat is on the mat"]]) == 0.0
    # 3 tokens: orders 1..3 only, all exact -> 1
    assert bleu(["a b c"], [["a b c"]]) == pytest.approx(1.0)
    # brevity: candidate "a b" vs ref "a b c d": precisions 1, bp exp(1 - 2)
    assert bleu(["a b"], [["a b c d"]]) == pytest.approx(math.exp(-1.0))
    # closest reference length is chosen for the penalty
    assert bleu(["a b"], [["a b c d", "a b"]]) == pytest.approx(1.0)


def test_lcs_hand_case():
    assert lcs_length("ABCBDAB", "BDCABA") == 4
    assert lcs_length("", "abc") == 0
    assert rouge_l("a b c d", ["a x c y d"]) == pytest.approx(f1(3, 4, 5))


def test_short_candidate_rouge_and_exact_match():
    assert rouge_n("a", ["a b"], 2) == 0.0
    assert exact_match("a b", ["c", "a b"]) == 1.0
    assert exact_match("a b", ["a  b c"]) == 0.0


@given(st.lists(st.lists(st.sampled_from(WORDS), min_size=1, max_size=9), min_size=1, max_size=6))
@settings(max_examples=60, deadline=None)
def test_identical_outputs_score_one(sents):
    refs = [[s] for s in sents]
    r = evaluate(sents, refs)
    assert r.exact_match == 1.0 and r.rouge1 == pytest.approx(1.0) and r.rougeL == pytest.approx(1.0)
    assert r.bleu == pytest.approx(1.0)
    assert r.rouge2 == pytest.approx(sum(len(s) >= 2 for s in sents) / len(sents))


@given(st.lists(st.tuples(st.lists(st.sampled_from(WORDS), min_size=1, max_size=7),
                          st.lists(st.sampled_from(WORDS), min_size=1, max_size=7)), min_size=2, max_size=6),
       st.randoms(use_true_random=False))
@settings(max_examples=60, deadline=None)
def test_corpus_bleu_permutation_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = bleu([c for c, _ in pairs], [[r] for _, r in pairs])
    b = bleu([c for c, _ in shuffled], [[r] for _, r in shuffled])
    assert a == pytest.approx(b, abs=1e-12)
    assert 0.0 <= a <= 1.0


def test_errors():
    with pytest.raises(ValueError):
        bleu([], [])
    with pytest.raises(ValueError):
        bleu(["a"], [[]])
    with pytest.raises(ValueError):
        bleu(["a"], [["a"], ["b"]])
    with pytest.raises(ValueError):
        evaluate([], [])


def test_report_csv_is_deterministic():
    rows = [report_row(evaluate(["a b c"], [["a b c"]]), strategy="prefix", size=50)]
    text = report_csv(rows, ["strategy", "size"] + REPORT_COLUMNS)
    assert text == report_csv(rows, ["strategy", "size"] + REPORT_COLUMNS)
    assert text.splitlines()[1] == "prefix,50,1.000000,1.000000,1.000000,1.000000,1.000000,1"
