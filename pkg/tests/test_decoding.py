import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mabicap.decoding import beam_decode, decode, greedy_decode
from mabicap.errors import ConfigError

START, END = 0, 1


class RandomModel:
    """Markov step function: log-probs depend on the last token and the step count."""

    def __init__(self, seed: int, vocab: int = 5, peaked: float = 2.0):
        g = np.random.default_rng(seed)
        self.table = g.normal(scale=peaked, size=(8, vocab, vocab))
        self.vocab = vocab

    def __call__(self, token, state):
        logits = self.table[min(state, 7), token]
        logp = logits - np.log(np.exp(logits - logits.max()).sum()) - logits.max()
        return logp, state + 1


def replay_score(model, tokens):
    state, total = 0, 0.0
    for prev, nxt in zip(tokens, tokens[1:]):
        logp, state = model(prev, state)
        total += logp[nxt]
    return total


def always(token, vocab=4):
    def step(_, state):
        logp = np.full(vocab, -10.0)
        logp[token] = 0.0
        return logp, state

    return step


# ---------------------------------------------------------------- greedy


def test_greedy_immediate_end():
    res = greedy_decode(always(END), None, START, END, 5)
    assert res.tokens == [START, END] and res.finished


def test_greedy_ties_take_lowest_index():
    res = greedy_decode(lambda t, s: (np.zeros(4), s), None, START, 3, 1)
    assert res.tokens == [START, 0] and not res.finished


def test_greedy_truncates_at_max_len():
    res = greedy_decode(always(2), None, START, END, 3)
    assert res.tokens == [START, 2, 2, 2] and not res.finished


def test_max_len_validated():
    with pytest.raises(ConfigError):
        greedy_decode(always(END), None, START, END, 0)


# ---------------------------------------------------------------- beam


@pytest.mark.parametrize("seed", range(20))
def test_beam_one_equals_greedy(seed):
    model = RandomModel(seed, vocab=6)
    g = greedy_decode(model, 0, START, END, 8)
    b = beam_decode(model, 0, 1, START, END, 8)
    assert b.tokens == g.tokens and b.finished == g.finished
    assert b.score == pytest.approx(g.score, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_full_width_two_steps_is_exhaustive(seed):
    V = 5
    model = RandomModel(seed, vocab=V)
    res = beam_decode(model, 0, V, START, END, 2)
    candidates = [[START, END]] + [[START, w, END] for w in range(V) if w != END]
    finished = {tuple(c): replay_score(model, c) for c in candidates}
    if finished:
        best = max(finished.values())
        assert res.finished
        assert res.score == pytest.approx(best, abs=1e-12)
        assert finished[tuple(res.tokens)] == pytest.approx(best, abs=1e-12)


def test_no_finish_returns_best_live_prefix():
    # width 3 never expands the near-impossible end token
    V = 4

    def never_end(token, state):
        logp = np.log(np.array([0.1, 1e-300, 0.5, 0.4]))
        return logp, state

    res = beam_decode(never_end, None, 3, START, END, 2)
    assert not res.finished
    all_prefixes = {
        (START, a, b): np.log([0.1, 1e-300, 0.5, 0.4])[a] + np.log([0.1, 1e-300, 0.5, 0.4])[b]
        for a, b in itertools.product(range(V), repeat=2)
        if END not in (a, b)
    }
    best = max(all_prefixes, key=all_prefixes.get)
    assert tuple(res.tokens) == best


def test_beam_width_checks():
    with pytest.raises(ConfigError):
        beam_decode(always(END), None, 0, START, END, 3)
    with pytest.raises(ConfigError):
        beam_decode(always(END, vocab=3), None, 4, START, END, 3)


def test_default_beam_width_is_three():
    from mabicap.config import Config

    assert Config().beam == 3
    from mabicap.cli import build_parser

    args = build_parser().parse_args(["caption", "--data", "d", "--checkpoint", "c"])
    assert args.beam == 3


@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 6))
def test_beam_bookkeeping(seed, n, max_len):
    model = RandomModel(seed, vocab=5)
    history = []
    res = beam_decode(model, 0, n, START, END, max_len, history=history)
    assert res.score == pytest.approx(replay_score(model, res.tokens), abs=1e-9)
    for step in history:
        scores = [s for _, s in step]
        assert len(step) <= n
        assert scores == sorted(scores, reverse=True)
        assert len({toks for toks, _ in step}) == len(step)
    for hyp in res.beam:
        if hyp.finished:
            assert hyp.tokens[-1] == END and END not in hyp.tokens[1:-1]


@given(st.integers(0, 10_000), st.integers(2, 5))
def test_log_probability_never_increases_along_a_hypothesis(seed, n):
    model = RandomModel(seed, vocab=5)
    history = []
    beam_decode(model, 0, n, START, END, 6, history=history)
    for prev_step, step in zip(history, history[1:]):
        parents = dict(prev_step)
        for toks, score in step:
            if toks[:-1] in parents:
                assert score <= parents[toks[:-1]]


def test_pruned_beam_can_finish_below_greedy():
    # the greedy path is pruned at width 2 and never re-enters the beam
    model = RandomModel(2009, vocab=5)
    g = greedy_decode(model, 0, START, END, 6)
    b = beam_decode(model, 0, 2, START, END, 6)
    assert g.finished and b.finished
    assert b.score < g.score


@given(st.integers(0, 10_000))
def test_full_width_beam_never_scores_below_greedy(seed):
    # at n = |V| with max_len 2 the search is exhaustive, so it dominates greedy
    model = RandomModel(seed, vocab=5)
    g = greedy_decode(model, 0, START, END, 2)
    b = beam_decode(model, 0, 5, START, END, 2)
    if g.finished:
        assert b.finished and b.score >= g.score - 1e-12


def test_length_norm_is_off_by_default():
    # START END scores log .5; START 2 END scores log .4 + log .7 (per token: higher)
    rows = {START: [0.05, 0.5, 0.4, 0.05], 2: [0.1, 0.7, 0.1, 0.1], 3: [0.1, 0.1, 0.1, 0.7]}

    def step(token, state):
        return np.log(np.array(rows[token])), state

    plain = beam_decode(step, None, 2, START, END, 3)
    normed = beam_decode(step, None, 2, START, END, 3, length_norm=True)
    assert plain.tokens == [START, END]
    assert plain.score == pytest.approx(np.log(0.5))
    assert normed.tokens == [START, 2, END]


def test_decode_dispatch():
    model = RandomModel(3)
    assert decode(model, 0, START, END, 5).tokens == greedy_decode(model, 0, START, END, 5).tokens
    assert decode(model, 0, START, END, 5, beam=3).tokens == beam_decode(model, 0, 3, START, END, 5).tokens
