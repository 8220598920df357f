"""Greedy and beam-search decoding over an abstract step function.

A step function maps ``(last_token, state)`` to ``(log_probs, new_state)``
where ``log_probs`` is a 1-D numpy array over the vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .errors import ConfigError

StepFn = Callable[[int, Any], tuple[np.ndarray, Any]]


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    state: Any = None
    finished: bool = False

    def normalized(self) -> float:
        return self.score / max(len(self.tokens) - 1, 1)


@dataclass
class DecodeResult:
    tokens: list[int]  # includes the start token, and the end token when finished
    score: float
    finished: bool
    beam: list[Hypothesis] = field(default_factory=list)


def greedy_decode(step_fn: StepFn, init_state, start: int, end: int, max_len: int) -> DecodeResult:
    """Append the argmax token (lowest index on ties) until ``end`` or ``max_len`` tokens."""
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    tokens, score, state = [start], 0.0, init_state
    for _ in range(max_len):
        logp, state = step_fn(tokens[-1], state)
        tok = int(np.argmax(logp))
        score += float(logp[tok])
        tokens.append(tok)
        if tok == end:
            return DecodeResult(tokens, score, True)
    return DecodeResult(tokens, score, False)


def _top_tokens(logp: np.ndarray, n: int) -> np.ndarray:
    # stable sort on -logp keeps the lower index first among ties
    return np.argsort(-logp, kind="stable")[:n]


def beam_decode(
    step_fn: StepFn,
    init_state,
    n: int,
    start: int,
    end: int,
    max_len: int,
    length_norm: bool = False,
    history: list | None = None,
) -> DecodeResult:
    """Beam search keeping ``n`` live hypotheses ranked by cumulative log-probability.

    Each live hypothesis is expanded by its ``n`` best tokens.  Expansions that
    emit ``end`` are retired to the finished pool; the best ``n`` of the rest
    form the next beam.  Ties rank the lower token index first, then the
    earlier expansion.  The best finished hypothesis wins; if none finished
    within ``max_len`` steps the best live one is returned unfinished.

    If ``history`` is a list, the live beam after every step is appended to it
    as ``[(tokens, score), ...]``.
    """
    if n < 1:
        raise ConfigError(f"beam width must be >= 1, got {n}")
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    rank = Hypothesis.normalized if length_norm else (lambda h: h.score)

    live = [Hypothesis([start], 0.0, init_state)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        candidates = []
        for hyp in live:
            logp, state = step_fn(hyp.tokens[-1], hyp.state)
            if n > logp.shape[-1]:
                raise ConfigError(f"beam width {n} exceeds vocabulary size {logp.shape[-1]}")
            for tok in _top_tokens(logp, n):
                tok = int(tok)
                candidates.append((hyp.score + float(logp[tok]), tok, len(candidates), hyp, state))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        live = []
        for score, tok, _, parent, state in candidates:
            if tok == end:
                finished.append(Hypothesis(parent.tokens + [tok], score, state, True))
            elif len(live) < n:
                live.append(Hypothesis(parent.tokens + [tok], score, state))
        if history is not None:
            history.append([(tuple(h.tokens), h.score) for h in live])
        if not live:
            break
        # scores only decrease as tokens append, so no live hypothesis can overtake
        if finished and not length_norm and max(h.score for h in finished) >= live[0].score:
            break

    if finished:
        pool = sorted(finished, key=lambda h: -rank(h))  # stable: earlier retirement wins ties
        best = pool[0]
        return DecodeResult(best.tokens, best.score, True, pool)
    best = live[0]
    return DecodeResult(best.tokens, best.score, False, live)


def decode(step_fn: StepFn, init_state, start: int, end: int, max_len: int, beam: int = 1, **kw):
    """Greedy for ``beam == 1``, beam search otherwise."""
    if beam == 1:
        return greedy_decode(step_fn, init_state, start, end, max_len)
    return beam_decode(step_fn, init_state, beam, start, end, max_len, **kw)
