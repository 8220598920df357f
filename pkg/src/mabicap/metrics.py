"""Caption metrics: BLEU-1..4, ROUGE-L, CIDEr and an exact-match METEOR.

All scores are reported on a 0-100 scale.  A corpus is a list of
``(candidate_tokens, [reference_tokens, ...])`` pairs.

CIDEr here is the plain TF-IDF cosine form (no Gaussian length penalty, no
clipping) averaged over n = 1..4 and multiplied by 100, so a perfect
candidate with distinctive n-grams scores 100.  METEOR* uses exact unigram
matches only and is not comparable with the synonym-aware tool.
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

from .errors import ConfigError

Tokens = Sequence[str]
Corpus = Sequence[tuple[Tokens, Sequence[Tokens]]]

ROUGE_BETA = 1.2
METEOR_ALPHA = 0.9
METEOR_GAMMA = 0.5
METEOR_EXP = 3.0


def _check(corpus: Corpus) -> None:
    if len(corpus) == 0:
        raise ConfigError("metric needs a nonempty corpus")
    for cand, refs in corpus:
        if len(refs) == 0:
            raise ConfigError("every corpus item needs at least one reference")


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------- BLEU


def bleu(corpus: Corpus, n_max: int = 4) -> list[float]:
    """Corpus BLEU-1..n_max with clipped counts and the closest-length brevity penalty."""
    _check(corpus)
    matches = [0] * n_max
    totals = [0] * n_max
    cand_len = ref_len = 0
    for cand, refs in corpus:
        cand_len += len(cand)
        # closest reference length, shorter one on ties
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, n_max + 1):
            counts = ngrams(cand, n)
            max_ref: Counter = Counter()
            for r in refs:
                for g, c in ngrams(r, n).items():
                    max_ref[g] = max(max_ref[g], c)
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)

    if cand_len == 0:
        return [0.0] * n_max
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    scores, log_sum = [], 0.0
    for k in range(n_max):
        if matches[k] == 0 or totals[k] == 0:
            # unsmoothed: one empty precision zeroes this and every higher order
            scores.extend([0.0] * (n_max - k))
            break
        log_sum += math.log(matches[k] / totals[k])
        scores.append(100.0 * bp * math.exp(log_sum / (k + 1)))
    return scores


# ---------------------------------------------------------------- ROUGE-L


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_item(cand: Tokens, refs: Sequence[Tokens], beta: float = ROUGE_BETA) -> float:
    best = 0.0
    for r in refs:
        lcs = lcs_length(cand, r)
        if lcs == 0:
            continue
        p, rec = lcs / len(cand), lcs / len(r)
        f = (1 + beta**2) * p * rec / (rec + beta**2 * p)
        best = max(best, f)
    return best


def rouge_l(corpus: Corpus) -> float:
    _check(corpus)
    return 100.0 * sum(rouge_l_item(c, r) for c, r in corpus) / len(corpus)


# ---------------------------------------------------------------- CIDEr


def _tfidf(tokens: Tokens, n: int, df: Counter, log_docs: float) -> dict:
    return {g: c * (log_docs - math.log(max(1.0, df[g]))) for g, c in ngrams(tokens, n).items()}


def _cosine(u: dict, v: dict) -> float:
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0 or nv == 0:
        return 0.0
    return sum(x * v.get(g, 0.0) for g, x in u.items()) / (nu * nv)


def cider_items(corpus: Corpus, n_max: int = 4) -> list[float]:
    """Per-item CIDEr; document frequencies come from the references."""
    _check(corpus)
    if len(corpus) < 2:
        raise ConfigError("CIDEr needs at least 2 items for document frequencies")
    log_docs = math.log(len(corpus))
    dfs = []
    for n in range(1, n_max + 1):
        df: Counter = Counter()
        for _, refs in corpus:
            df.update(set().union(*(ngrams(r, n) for r in refs)))
        dfs.append(df)
    out = []
    for cand, refs in corpus:
        per_n = []
        for n in range(1, n_max + 1):
            vc = _tfidf(cand, n, dfs[n - 1], log_docs)
            per_n.append(sum(_cosine(vc, _tfidf(r, n, dfs[n - 1], log_docs)) for r in refs) / len(refs))
        out.append(100.0 * sum(per_n) / n_max)
    return out


def cider(corpus: Corpus, n_max: int = 4) -> float:
    items = cider_items(corpus, n_max)
    return sum(items) / len(items)


# ---------------------------------------------------------------- METEOR*


def _align(cand: Tokens, ref: Tokens) -> list[tuple[int, int]]:
    """Exact-match alignment that prefers continuing the current chunk."""
    used = [False] * len(ref)
    pairs: list[tuple[int, int]] = []
    for i, w in enumerate(cand):
        nxt = pairs[-1][1] + 1 if pairs else None
        if nxt is not None and nxt < len(ref) and not used[nxt] and ref[nxt] == w:
            j = nxt
        else:
            j = next((k for k, r in enumerate(ref) if r == w and not used[k]), None)
            if j is None:
                continue
        used[j] = True
        pairs.append((i, j))
    return pairs


def _chunks(pairs: list[tuple[int, int]]) -> int:
    chunks = 0
    for k, (i, j) in enumerate(pairs):
        if k == 0 or i != pairs[k - 1][0] + 1 or j != pairs[k - 1][1] + 1:
            chunks += 1
    return chunks


def meteor_item(cand: Tokens, refs: Sequence[Tokens]) -> float:
    best = 0.0
    for r in refs:
        pairs = _align(cand, r)
        m = len(pairs)
        if m == 0:
            continue
        p, rec = m / len(cand), m / len(r)
        fmean = p * rec / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * rec)
        penalty = METEOR_GAMMA * (_chunks(pairs) / m) ** METEOR_EXP
        best = max(best, fmean * (1 - penalty))
    return best


def meteor_simple(corpus: Corpus) -> float:
    _check(corpus)
    return 100.0 * sum(meteor_item(c, r) for c, r in corpus) / len(corpus)


# ---------------------------------------------------------------- table row

COLUMNS = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR*", "ROUGE-L", "CIDEr")


def evaluate(corpus: Corpus) -> dict[str, float]:
    """All metrics keyed by column name, in table order."""
    b = bleu(corpus, 4)
    row = {f"BLEU-{k + 1}": b[k] for k in range(4)}
    row["METEOR*"] = meteor_simple(corpus)
    row["ROUGE-L"] = rouge_l(corpus)
    row["CIDEr"] = cider(corpus)
    return row
