"""Mutual-aid bidirectional attentive LSTMs.

A forward LSTM reads the caption left to right and a backward LSTM reads it
right to left.  Two auxiliary LSTMs ("aid networks") learn to rebuild each
direction's hidden states from the other's:

* the forward aid network runs over ``h_f(1..t)`` and its output at ``t`` is
  pulled towards ``h_b(t-1)``;
* the backward aid network runs over ``h_b(T..t-1)`` and its output at ``t-1``
  is pulled towards ``h_f(t)``.

Training minimises ``L1 + lam * L2`` where ``L1`` is the two directions'
negative log-likelihood and ``L2`` the squared construction error.  At
inference the aid networks are unused; each direction decodes on its own.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .attentive_lstm import AttentiveLSTM, Embedding, Linear, LSTMCell, Module, embed, word_dist
from .config import Config
from .decoding import DecodeResult, decode
from .errors import ConfigError, FormatError
from .tensor import Tensor
from .vocab import END, START


@dataclass
class Sentence:
    """Decoded caption in reading order, sentinels stripped."""

    tokens: list[int]
    truncated: bool = False
    score: float = 0.0
    beam: list = field(default_factory=list)

    def with_sentinels(self) -> list[int]:
        return [START, *self.tokens, END]


@dataclass
class MabiTrace:
    """Hidden states and word distributions keyed by their time index.

    ``h_f`` and ``h_anf`` cover t = 1..T+1; ``h_b`` and ``h_anb`` cover
    t = 0..T.  ``p_f[t]`` and ``p_b[t]`` are the distributions for ``s(t)``.
    """

    T: int
    h_f: dict[int, Tensor]
    h_b: dict[int, Tensor]
    h_anf: dict[int, Tensor]
    h_anb: dict[int, Tensor]
    alpha_f: dict[int, Tensor]
    alpha_b: dict[int, Tensor]
    # stacked distributions: forward rows are t = 1..T+1, backward rows t = 0..T
    p_f_all: Tensor
    p_b_all: Tensor

    @property
    def p_f(self) -> dict[int, Tensor]:
        return {t: self.p_f_all[..., t - 1, :] for t in range(1, self.T + 2)}

    @property
    def p_b(self) -> dict[int, Tensor]:
        return {t: self.p_b_all[..., t, :] for t in range(0, self.T + 1)}


class MabiNet(Module):
    def __init__(self, vocab_size: int, raw_dim: int, cfg: Config, rng: np.random.Generator | None):
        H, D, E, M = cfg.hidden, cfg.feat_dim, cfg.embed_dim, cfg.attention_hidden
        self.vocab_size, self.raw_dim = vocab_size, raw_dim
        self.cfg = cfg
        self.embedding = Embedding(E, vocab_size, rng)
        self.proj = Linear(raw_dim, D, rng)
        self.fwd = AttentiveLSTM(E, D, H, M, rng)
        self.fwd_head = Linear(H, vocab_size, rng)
        self.bwd = AttentiveLSTM(E, D, H, M, rng)
        self.bwd_head = Linear(H, vocab_size, rng)
        self.an_f = LSTMCell(H, H, rng)
        self.an_b = LSTMCell(H, H, rng)

    @property
    def lam(self) -> float:
        return self.cfg.lam


def _check_sequence(tokens: np.ndarray) -> int:
    if tokens.ndim not in (1, 2) or tokens.shape[-1] < 3:
        raise FormatError(f"need <start> w1..wT <end> with T >= 1, got shape {tokens.shape}")
    if np.any(tokens[..., 0] != START) or np.any(tokens[..., -1] != END):
        raise FormatError("token sequence must begin with <start> and end with <end>")
    return tokens.shape[-1] - 2


def forward_pass(model: MabiNet, features, tokens) -> MabiTrace:
    """Run both directions and both aid networks over one sentence (or a batch).

    ``features`` is [N, D_raw] or [B, N, D_raw]; ``tokens`` the matching
    [T+2] or [B, T+2] integer array including both sentinels.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    T_ = _check_sequence(tokens)
    lead = tokens.shape[:-1]
    a = model.proj(T.as_tensor(features))
    x = {t: embed(tokens[..., t], model.embedding) for t in range(T_ + 2)}

    h_f, alpha_f = {}, {}
    keys = model.fwd.attention.keys(a)
    state = model.fwd.cell.initial_state(lead)
    for t in range(1, T_ + 2):
        h, c, alpha = model.fwd(x[t - 1], a, state, keys=keys)
        state = (h, c)
        h_f[t], alpha_f[t] = h, alpha

    h_b, alpha_b = {}, {}
    keys = model.bwd.attention.keys(a)
    state = model.bwd.cell.initial_state(lead)
    for t in range(T_ + 1, 0, -1):
        h, c, alpha = model.bwd(x[t], a, state, keys=keys)
        state = (h, c)
        h_b[t - 1], alpha_b[t - 1] = h, alpha

    # one head application over all steps instead of one per step
    time_axis = len(lead)
    p_f_all = word_dist(T.stack([h_f[t] for t in range(1, T_ + 2)], axis=time_axis), model.fwd_head)
    p_b_all = word_dist(T.stack([h_b[t] for t in range(0, T_ + 1)], axis=time_axis), model.bwd_head)

    h_anf = {}
    state = model.an_f.initial_state(lead)
    for t in range(1, T_ + 2):
        state = model.an_f(h_f[t], state)
        h_anf[t] = state[0]

    h_anb = {}
    state = model.an_b.initial_state(lead)
    for t in range(T_ + 1, 0, -1):
        state = model.an_b(h_b[t - 1], state)
        h_anb[t - 1] = state[0]

    return MabiTrace(T_, h_f, h_b, h_anf, h_anb, alpha_f, alpha_b, p_f_all, p_b_all)


def loss_l1(trace: MabiTrace, tokens, loss_range: str = "extended") -> Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    T_ = trace.T
    if loss_range == "extended":
        p_f, p_b = trace.p_f_all, trace.p_b_all
        fwd_targets, bwd_targets = tokens[..., 1 : T_ + 2], tokens[..., 0 : T_ + 1]
    else:
        # rows for t = 1..T in each stack
        p_f, p_b = trace.p_f_all[..., 0:T_, :], trace.p_b_all[..., 1 : T_ + 1, :]
        fwd_targets = bwd_targets = tokens[..., 1 : T_ + 1]
    return T.nll_loss(p_f, fwd_targets) + T.nll_loss(p_b, bwd_targets)


def l2_pairs(trace: MabiTrace) -> list[tuple[str, int, str, int]]:
    """Time-tagged (output, target) pairs compared by the construction loss."""
    pairs = []
    for t in range(1, trace.T + 1):
        pairs.append(("h_anb", t - 1, "h_f", t))
        pairs.append(("h_anf", t, "h_b", t - 1))
    return pairs


def loss_l2(trace: MabiTrace, stop_grad_targets: bool = False) -> Tensor:
    total = None
    for out_name, t_out, tgt_name, t_tgt in l2_pairs(trace):
        out = getattr(trace, out_name)[t_out]
        tgt = getattr(trace, tgt_name)[t_tgt]
        if stop_grad_targets:
            tgt = tgt.detach()
        term = T.squared_error(out, tgt)
        total = term if total is None else total + term
    return total


def loss_total(l1: Tensor, l2: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise ConfigError(f"lambda must be nonnegative, got {lam}")
    if lam == 0:
        return l1 + 0.0 * l2
    return l1 + lam * l2


def group_by_length(batch: Sequence[tuple[np.ndarray, Sequence[int]]]):
    """Stack equal-length sentences so each group runs as one tensor batch."""
    groups: dict[int, list[int]] = {}
    for i, (_, toks) in enumerate(batch):
        groups.setdefault(len(toks), []).append(i)
    for length in sorted(groups):
        idx = groups[length]
        feats = np.stack([np.asarray(batch[i][0], dtype=np.float64) for i in idx])
        toks = np.array([batch[i][1] for i in idx], dtype=np.int64)
        yield feats, toks


def batch_loss(model: MabiNet, batch) -> tuple[Tensor, float, float]:
    """Mean ``L_total`` over ``batch`` plus the mean L1 and L2 values."""
    if not batch:
        raise ConfigError("train_step needs a nonempty batch")
    cfg = model.cfg
    total, l1_sum, l2_sum = None, 0.0, 0.0
    for feats, toks in group_by_length(batch):
        trace = forward_pass(model, feats, toks)
        l1 = loss_l1(trace, toks, cfg.loss_range)
        l2 = loss_l2(trace, cfg.stop_grad_targets)
        part = loss_total(l1, l2, cfg.lam)
        total = part if total is None else total + part
        l1_sum += l1.item()
        l2_sum += l2.item()
    n = len(batch)
    return total * (1.0 / n), l1_sum / n, l2_sum / n


def clip_gradients(params: dict[str, Tensor], max_norm: float | None) -> float:
    norm = float(np.sqrt(sum(float((p.grad**2).sum()) for p in params.values() if p.grad is not None)))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def train_step(model: MabiNet, batch, lr: float | None = None, optimizer=None) -> dict[str, float]:
    """One update on the mean total loss of ``batch``; returns loss values.

    Without an ``optimizer`` this is a plain SGD step with ``lr``.
    """
    params = model.parameters() if optimizer is None else optimizer.params
    loss, l1, l2 = batch_loss(model, batch)
    T.backward(loss)
    clip_gradients(params, model.cfg.grad_clip)
    if optimizer is None:
        T.sgd_update(params, model.cfg.lr if lr is None else lr)
    else:
        optimizer.step()
    return {"loss": loss.item(), "l1": l1, "l2": l2}


# ---------------------------------------------------------------- inference


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _direction(model: MabiNet, forward: bool):
    if forward:
        return model.fwd, model.fwd_head, START, END
    return model.bwd, model.bwd_head, END, START


def make_step_fn(model: MabiNet, features, forward: bool = True):
    """Step function and initial state for decoding one direction."""
    block, head, _, _ = _direction(model, forward)
    with T.no_grad():
        a = model.proj(T.as_tensor(features))
        keys = block.attention.keys(a)

    def step(token: int, state):
        with T.no_grad():
            h, c, _ = block(embed(token, model.embedding), a, state, keys=keys)
            logits = head(h).data
        return log_softmax(logits), (h, c)

    return step, block.cell.initial_state()


def decode_direction(model: MabiNet, features, forward: bool, beam: int = 1, max_len: int | None = None,
                     length_norm: bool = False) -> Sentence:
    _, _, first, last = _direction(model, forward)
    step, state = make_step_fn(model, features, forward)
    max_len = max_len or model.cfg.max_len
    kw = {"length_norm": length_norm} if beam > 1 else {}
    res: DecodeResult = decode(step, state, first, last, max_len, beam=beam, **kw)
    content = res.tokens[1:-1] if res.finished else res.tokens[1:]
    if not forward:
        content = content[::-1]
    return Sentence(content, truncated=not res.finished, score=res.score, beam=res.beam)


def generate_pair(model: MabiNet, features, beam: int = 1, max_len: int | None = None,
                  length_norm: bool = False) -> tuple[Sentence, Sentence]:
    """Decode the forward sentence and the backward one (returned in reading order)."""
    s_f = decode_direction(model, features, True, beam, max_len, length_norm)
    s_b = decode_direction(model, features, False, beam, max_len, length_norm)
    return s_f, s_b


def attention_weights(model: MabiNet, features, sentence: Sentence, forward: bool = True) -> np.ndarray:
    """Per-step region weights [steps, N] obtained by replaying ``sentence``."""
    toks = sentence.with_sentinels()
    with T.no_grad():
        trace = forward_pass(model, features, toks)
    if forward:
        return np.stack([trace.alpha_f[t].data for t in sorted(trace.alpha_f)])
    return np.stack([trace.alpha_b[t].data for t in sorted(trace.alpha_b, reverse=True)])
