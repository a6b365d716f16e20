"""Corpus BLEU, ROUGE-N/L and exact match over whitespace-token sequences."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence


def _toks(s) -> tuple:
    return tuple(s.split()) if isinstance(s, str) else tuple(s)


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(c: int, refs: Sequence[tuple]) -> int:
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def bleu(candidates: Sequence, reference_sets: Sequence[Sequence], max_n: int = 4) -> float:
    """Corpus BLEU with clipped precisions and brevity penalty, no smoothing.

    An order with no candidate n-grams anywhere in the corpus (all candidates
    shorter than n) is left out of the geometric mean instead of zeroing it.
    """
    if not candidates:
        raise ValueError("empty candidate corpus")
    if len(candidates) != len(reference_sets):
        raise ValueError("need one reference set per candidate")
    match = [0] * max_n
    total = [0] * max_n
    c_len = r_len = 0
    for cand, refs in zip(candidates, reference_sets):
        cand = _toks(cand)
        refs = [_toks(r) for r in refs]
        if not refs:
            raise ValueError("empty reference set")
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), refs)
        for n in range(1, max_n + 1):
            cc = ngrams(cand, n)
            best: Counter = Counter()
            for r in refs:
                best |= ngrams(r, n)
            match[n - 1] += sum(min(k, best[g]) for g, k in cc.items())
            total[n - 1] += sum(cc.values())
    if c_len == 0:
        return 0.0
    logs = []
    for m, t in zip(match, total):
        if t == 0:
            continue
        if m == 0:
            return 0.0
        logs.append(math.log(m / t))
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(sum(logs) / len(logs))


def _f1(overlap: int, n_cand: int, n_ref: int) -> float:
    if overlap == 0 or n_cand == 0 or n_ref == 0:
        return 0.0
    p, r = overlap / n_cand, overlap / n_ref
    return 2 * p * r / (p + r)


def rouge_n(candidate, references: Sequence, n: int) -> float:
    """N-gram overlap F1, best over references; 0 when the candidate is shorter than n."""
    cand = _toks(candidate)
    if len(cand) < n:
        return 0.0
    cc = ngrams(cand, n)
    best = 0.0
    for ref in references:
        rc = ngrams(_toks(ref), n)
        overlap = sum((cc & rc).values())
        best = max(best, _f1(overlap, sum(cc.values()), sum(rc.values())))
    return best


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, references: Sequence) -> float:
    cand = _toks(candidate)
    best = 0.0
    for ref in references:
        ref = _toks(ref)
        best = max(best, _f1(lcs_length(cand, ref), len(cand), len(ref)))
    return best


def exact_match(candidate, references: Sequence) -> float:
    cand = _toks(candidate)
    return float(any(cand == _toks(r) for r in references))


@dataclass
class MetricReport:
    bleu: float
    rouge1: float
    rouge2: float
    rougeL: float
    exact_match: float
    count: int


REPORT_COLUMNS = ["bleu", "rouge1", "rouge2", "rougeL", "exact_match", "count"]


def evaluate(candidates: Sequence, reference_sets: Sequence[Sequence]) -> MetricReport:
    if not candidates:
        raise ValueError("nothing to evaluate")
    n = len(candidates)
    pairs = list(zip(candidates, reference_sets))
    return MetricReport(
        bleu=bleu(candidates, reference_sets),
        rouge1=sum(rouge_n(c, r, 1) for c, r in pairs) / n,
        rouge2=sum(rouge_n(c, r, 2) for c, r in pairs) / n,
        rougeL=sum(rouge_l(c, r) for c, r in pairs) / n,
        exact_match=sum(exact_match(c, r) for c, r in pairs) / n,
        count=n,
    )


def report_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items() if k in columns})
    return buf.getvalue()


def report_row(report: MetricReport, **extra) -> dict:
    return {**extra, **asdict(report)}
