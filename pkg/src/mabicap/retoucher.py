"""Cross-modal attentive decoder that rewrites the two pre-generated captions.

At each step the decoder attends over image regions (visual attention) and,
with a separate scorer, over the word embeddings of the forward and backward
sentences (semantic attention).  The previous word, the visual context and
the semantic context are concatenated into the LSTM input.

The embedding matrix and feature projection are borrowed from a trained
:class:`~mabicap.mabi.MabiNet` and stay frozen while this decoder trains.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .attentive_lstm import Attention, Linear, LSTMCell, Module, attend, word_dist
from .config import Config
from .decoding import decode
from .errors import ConfigError, DimensionError
from .mabi import MabiNet, Sentence, log_softmax
from .tensor import Tensor
from .vocab import END, START, UNK


@dataclass
class SemanticPool:
    tokens: list[int]
    vectors: Tensor  # [L, embed_dim]

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class RetouchResult:
    sentence: Sentence
    alphas: np.ndarray  # [steps, N]
    betas: np.ndarray  # [steps, L]
    pool_tokens: list[int] = field(default_factory=list)


class CrossModalDecoder(Module):
    def __init__(self, mabi: MabiNet, cfg: Config, rng: np.random.Generator | None):
        H, D, E, M = cfg.hidden, cfg.feat_dim, cfg.embed_dim, cfg.attention_hidden
        self.cfg = cfg
        self.att_v = Attention(H, D, M, rng)
        self.att_l = Attention(H, E, M, rng)
        self.cell = LSTMCell(E + D + E, H, rng)
        self.head = Linear(H, mabi.vocab_size, rng)
        # held in a tuple so named_parameters() skips the frozen shared modules
        self._frozen = (mabi,)

    @property
    def mabi(self) -> MabiNet:
        return self._frozen[0]

    @property
    def vocab_size(self) -> int:
        return self.mabi.vocab_size

    def embed_const(self, tokens) -> Tensor:
        """Frozen embeddings, no gradient path back into the shared matrix."""
        idx = np.asarray(tokens, dtype=np.int64)
        return Tensor(self.mabi.embedding.E.data[:, idx].T if idx.ndim else self.mabi.embedding.E.data[:, int(idx)])

    def project_const(self, features) -> Tensor:
        with T.no_grad():
            return self.mabi.proj(T.as_tensor(features))


def _clean(tokens: Sequence[int], vocab_size: int) -> list[int]:
    return [t if 0 <= t < vocab_size else UNK for t in tokens]


def build_pool(s_f: Sentence | Sequence[int], s_b: Sentence | Sequence[int], dec: CrossModalDecoder) -> SemanticPool:
    """Embeddings of ``<start> S_f <end> <start> S_b <end>`` in that order."""
    def wrap(s):
        toks = s.tokens if isinstance(s, Sentence) else list(s)
        return [START, *toks, END]

    toks = _clean(wrap(s_f) + wrap(s_b), dec.vocab_size)
    return SemanticPool(toks, dec.embed_const(toks))


def semantic_attend(h_prev: Tensor, pool: SemanticPool | Tensor, dec: CrossModalDecoder, keys=None, mask=None):
    vectors = pool.vectors if isinstance(pool, SemanticPool) else pool
    if vectors.shape[-2] == 0:
        raise DimensionError("semantic attention over an empty pool")
    return attend(h_prev, vectors, dec.att_l, keys=keys, mask=mask)


def decode_step(dec: CrossModalDecoder, x_prev: Tensor, a: Tensor, pool: Tensor, state,
                keys_v=None, keys_l=None, mask=None, semantic: bool = True):
    """One decoder step: (h, c, word distribution, alpha, beta)."""
    h_prev = state[0]
    z_v, alpha = attend(h_prev, a, dec.att_v, keys=keys_v)
    z_s, beta = semantic_attend(h_prev, pool, dec, keys=keys_l, mask=mask)
    if not semantic:
        z_s = Tensor(np.zeros(z_s.shape))
    h, c = dec.cell([x_prev, z_v, z_s], state)
    return h, c, word_dist(h, dec.head), alpha, beta


# ---------------------------------------------------------------- training


def _pad_pools(pools: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(p) for p in pools)
    toks = np.full((len(pools), width), END, dtype=np.int64)
    mask = np.zeros((len(pools), width), dtype=bool)
    for i, p in enumerate(pools):
        toks[i, : len(p)] = p
        mask[i, : len(p)] = True
    return toks, mask


def sequence_loss(dec: CrossModalDecoder, features, pools, targets) -> Tensor:
    """Summed NLL of equal-length ``targets`` [B, T+2] given pools (token lists)."""
    targets = np.asarray(targets, dtype=np.int64)
    a = dec.project_const(features)
    pool_toks, mask = _pad_pools(pools)
    pool_vec = Tensor(np.transpose(dec.mabi.embedding.E.data[:, pool_toks], (1, 2, 0)))
    keys_v = dec.att_v.keys(a)
    keys_l = dec.att_l.keys(pool_vec)
    state = dec.cell.initial_state(targets.shape[:-1])
    total = None
    for t in range(1, targets.shape[-1]):
        x_prev = dec.embed_const(targets[..., t - 1])
        h, c, p, _, _ = decode_step(dec, x_prev, a, pool_vec, state, keys_v, keys_l, mask)
        state = (h, c)
        term = T.nll_loss(p, targets[..., t])
        total = term if total is None else total + term
    return total


def batch_loss(dec: CrossModalDecoder, batch) -> Tensor:
    """Mean NLL over ``batch`` of ``(features, pool_tokens, target_tokens)``."""
    if not batch:
        raise ConfigError("retoucher training needs a nonempty batch")
    groups: dict[int, list[int]] = {}
    for i, (_, _, tgt) in enumerate(batch):
        groups.setdefault(len(tgt), []).append(i)
    total = None
    for length in sorted(groups):
        idx = groups[length]
        feats = np.stack([np.asarray(batch[i][0], dtype=np.float64) for i in idx])
        part = sequence_loss(dec, feats, [batch[i][1] for i in idx], [batch[i][2] for i in idx])
        total = part if total is None else total + part
    return total * (1.0 / len(batch))


def train_step(dec: CrossModalDecoder, batch, lr: float | None = None, optimizer=None) -> float:
    loss = batch_loss(dec, batch)
    T.backward(loss)
    if optimizer is None:
        T.sgd_update(dec.parameters(), lr)
    else:
        optimizer.step()
    return loss.item()


# ---------------------------------------------------------------- inference


def make_step_fn(dec: CrossModalDecoder, features, pool: SemanticPool):
    a = dec.project_const(features)
    with T.no_grad():
        keys_v = dec.att_v.keys(a)
        keys_l = dec.att_l.keys(pool.vectors)

    def step(token: int, state):
        with T.no_grad():
            h, c, _, _, _ = decode_step(dec, dec.embed_const(token), a, pool.vectors, state, keys_v, keys_l)
            logits = dec.head(h).data
        return log_softmax(logits), (h, c)

    return step, dec.cell.initial_state()


def retouch(dec: CrossModalDecoder, features, s_f, s_b, beam: int = 1, max_len: int | None = None,
            length_norm: bool = False) -> RetouchResult:
    """Final caption from the image and the two candidate sentences, with attention traces."""
    pool = build_pool(s_f, s_b, dec)
    step, state = make_step_fn(dec, features, pool)
    max_len = max_len or dec.cfg.max_len
    kw = {"length_norm": length_norm} if beam > 1 else {}
    res = decode(step, state, START, END, max_len, beam=beam, **kw)
    content = res.tokens[1:-1] if res.finished else res.tokens[1:]
    sentence = Sentence(content, truncated=not res.finished, score=res.score, beam=res.beam)
    alphas, betas = replay_attention(dec, features, pool, res.tokens)
    return RetouchResult(sentence, alphas, betas, pool.tokens)


def replay_attention(dec: CrossModalDecoder, features, pool: SemanticPool, tokens: Sequence[int]):
    """Per-step visual and semantic weights while feeding ``tokens`` back in."""
    a = dec.project_const(features)
    alphas, betas = [], []
    with T.no_grad():
        state = dec.cell.initial_state()
        for t in range(1, len(tokens)):
            h, c, _, alpha, beta = decode_step(dec, dec.embed_const(tokens[t - 1]), a, pool.vectors, state)
            state = (h, c)
            alphas.append(alpha.data)
            betas.append(beta.data)
    return np.array(alphas), np.array(betas)
