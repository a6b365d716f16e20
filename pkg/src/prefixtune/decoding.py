"""Greedy and beam-search decoding.

A *scorer* is anything with ``start(conditioning) -> (logits, state)`` and
``step(state, token) -> (logits, state)``; :class:`~prefixtune.strategies.TunedModel`
is one, and the tests use tiny tabular models.  Logits are normalized here with
a log-softmax, so scorers may return unnormalized scores.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np


@dataclass(frozen=True)
class BeamConfig:
    beam_size: int = 5
    length_norm_alpha: float = 0.0
    max_decode_len: int = 48
    eos_token: int = 1

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.length_norm_alpha < 0:
            raise ValueError("length_norm_alpha must be >= 0")
        if self.max_decode_len < 1:
            raise ValueError("max_decode_len must be >= 1")


@dataclass
class DecodeResult:
    tokens: tuple  # generated ids, eos excluded
    logprob: float
    score: float
    finished: bool  # reached eos within max_decode_len


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def normalized(logprob: float, length: int, alpha: float) -> float:
    """Hypothesis score ``logprob / length**alpha``; ``length`` counts eos."""
    return logprob / (length ** alpha) if alpha else logprob


def greedy(scorer, conditioning, max_len: int = 48, eos_token: int = 1) -> DecodeResult:
    logits, state = scorer.start(conditioning)
    out, lp = [], 0.0
    for t in range(max_len):
        logp = log_softmax(logits)
        tok = int(np.argmax(logp))  # first maximum: lowest id on ties
        lp += float(logp[tok])
        if tok == eos_token:
            return DecodeResult(tuple(out), lp, lp, True)
        out.append(tok)
        if t + 1 < max_len:
            logits, state = scorer.step(state, tok)
    return DecodeResult(tuple(out), lp, lp, False)


@dataclass
class _Hyp:
    tokens: tuple
    logprob: float
    state: Any
    logits: Any


def beam_search(scorer, conditioning, cfg: BeamConfig = BeamConfig()) -> DecodeResult:
    """Beam search over ``score = logprob / len**alpha``.

    Each step expands every active hypothesis by every token and keeps the
    ``beam_size`` best candidates (ties: lexicographically smaller ids).
    Candidates ending in eos move to the finished pool; the rest stay active.
    An active hypothesis is pruned once even its most optimistic completion
    (same log-prob at the longest allowed length) cannot beat the best finished
    score, which keeps the search exact when the beam is wide enough.
    """
    alpha, eos = cfg.length_norm_alpha, cfg.eos_token
    logits, state = scorer.start(conditioning)
    active = [_Hyp((), 0.0, state, logits)]
    finished: list[tuple[float, tuple, float]] = []  # (score, tokens incl. eos, logprob)
    best_final = -np.inf
    for t in range(1, cfg.max_decode_len + 1):
        cands = []
        for h in active:
            logp = log_softmax(h.logits)
            for v in range(logp.shape[0]):
                lp = h.logprob + float(logp[v])
                cands.append((-normalized(lp, t, alpha), h.tokens + (v,), lp, h))
        cands.sort(key=lambda c: (c[0], c[1]))
        nxt = []
        for neg, toks, lp, h in cands[: cfg.beam_size]:
            if toks[-1] == eos:
                finished.append((-neg, toks, lp))
                best_final = max(best_final, -neg)
            else:
                nxt.append((toks, lp, h))
        if t == cfg.max_decode_len:
            active = [_Hyp(toks, lp, None, None) for toks, lp, _ in nxt]
            break
        active = []
        for toks, lp, h in nxt:
            if finished and normalized(lp, cfg.max_decode_len, alpha) < best_final:
                continue
            logits, state = scorer.step(h.state, toks[-1])
            active.append(_Hyp(toks, lp, state, logits))
        if not active:
            break
    if finished:
        finished.sort(key=lambda f: (-f[0], f[1]))
        score, toks, lp = finished[0]
        return DecodeResult(toks[:-1], lp, score, True)
    best = min(active, key=lambda h: (-normalized(h.logprob, len(h.tokens), alpha), h.tokens))
    return DecodeResult(best.tokens, best.logprob, normalized(best.logprob, len(best.tokens), alpha), False)


def decode_all(scorer, sources: Sequence, cfg: BeamConfig) -> list[tuple]:
    """Decode every source; beam size 1 takes the greedy path."""
    out = []
    for src in sources:
        if cfg.beam_size == 1:
            r = greedy(scorer, src, cfg.max_decode_len, cfg.eos_token)
        else:
            r = beam_search(scorer, src, cfg)
        out.append(r.tokens)
    return out
