"""Attentive LSTM building blocks: embedding, soft attention, LSTM cell, output head.

Shapes follow numpy conventions.  Any leading dimensions on the hidden state
are batch dimensions, so the same code serves one sentence (``h: [H]``,
``a: [N, D]``) or a batch (``h: [B, H]``, ``a: [B, N, D]``).
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor

INIT_SCALE = 0.08
FORGET_BIAS = 1.0


def _uniform(rng: np.random.Generator | None, shape, scale: float, name: str) -> Tensor:
    if rng is None:
        data = np.zeros(shape)
    else:
        data = rng.uniform(-scale, scale, size=shape)
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Parameter container; subclasses hold Tensors and child Modules as attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + key + ".")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None


def _rows(x: Tensor, n_in: int) -> tuple[Tensor, tuple[int, ...]]:
    if x.shape[-1] != n_in:
        raise DimensionError(f"expected trailing extent {n_in}, got shape {x.shape}")
    lead = x.shape[:-1]
    return (x if x.ndim == 2 else x.reshape(-1, n_in)), lead


def _unrows(x: Tensor, lead: tuple[int, ...]) -> Tensor:
    return x if len(lead) == 1 else x.reshape(*lead, x.shape[-1])


class Linear(Module):
    """Affine map ``x @ W + b`` applied along the last axis."""

    def __init__(self, n_in: int, n_out: int, rng=None, scale: float = INIT_SCALE):
        self.n_in, self.n_out = n_in, n_out
        self.W = _uniform(rng, (n_in, n_out), scale, "W")
        self.b = _uniform(rng, (n_out,), scale, "b")

    def __call__(self, x: Tensor) -> Tensor:
        flat, lead = _rows(T.as_tensor(x), self.n_in)
        return _unrows(flat @ self.W + self.b, lead)


class Embedding(Module):
    """Word embedding matrix ``E`` of shape [embed_dim, vocab_size]."""

    def __init__(self, embed_dim: int, vocab_size: int, rng=None, scale: float = INIT_SCALE):
        self.embed_dim, self.vocab_size = embed_dim, vocab_size
        self.E = _uniform(rng, (embed_dim, vocab_size), scale, "E")

    def __call__(self, tokens) -> Tensor:
        return embed(tokens, self)


class Attention(Module):
    """Soft attention with a one-hidden-layer tanh perceptron scorer.

    The score of region ``i`` is ``w . tanh(W_h h + W_a a_i + b)``, i.e. an MLP
    over the concatenation ``[h, a_i]`` with its first weight matrix split in
    two so the region half can be computed once per sequence.
    """

    def __init__(self, query_dim: int, key_dim: int, hidden: int, rng=None, scale=INIT_SCALE):
        self.query_dim, self.key_dim, self.hidden = query_dim, key_dim, hidden
        self.W_h = _uniform(rng, (query_dim, hidden), scale, "W_h")
        self.W_a = _uniform(rng, (key_dim, hidden), scale, "W_a")
        self.b = _uniform(rng, (hidden,), scale, "b")
        self.w = _uniform(rng, (hidden, 1), scale, "w")

    def keys(self, a: Tensor) -> Tensor:
        """Query-independent half of the scorer for every region, [..., N, M]."""
        a = T.as_tensor(a)
        if a.ndim < 2 or a.shape[-2] == 0:
            raise DimensionError(f"attention needs a nonempty [.., N, D] set, got {a.shape}")
        flat, lead = _rows(a, self.key_dim)
        return _unrows(flat @ self.W_a + self.b, lead)

    def __call__(self, h_prev, a, keys=None, mask=None):
        return attend(h_prev, a, self, keys=keys, mask=mask)


class LSTMCell(Module):
    """Standard LSTM (forget gate, no peepholes) over a concatenated input."""

    def __init__(self, n_in: int, hidden: int, rng=None, scale=INIT_SCALE, forget_bias=FORGET_BIAS):
        self.n_in, self.hidden = n_in, hidden
        self.W = _uniform(rng, (n_in + hidden, 4 * hidden), scale, "W")
        self.b = _uniform(rng, (4 * hidden,), scale, "b")
        if rng is not None:
            self.b.data[hidden : 2 * hidden] = forget_bias

    def initial_state(self, batch: tuple[int, ...] = ()) -> tuple[Tensor, Tensor]:
        return Tensor(np.zeros((*batch, self.hidden))), Tensor(np.zeros((*batch, self.hidden)))

    def __call__(self, inputs, state):
        """One step; ``inputs`` is a tensor or a list concatenated in order."""
        if isinstance(inputs, Tensor):
            inputs = [inputs]
        h_prev, c_prev = state
        width = sum(t.shape[-1] for t in inputs)
        if width != self.n_in or h_prev.shape[-1] != self.hidden:
            raise DimensionError(
                f"LSTM cell expects input {self.n_in} and state {self.hidden}, "
                f"got {[t.shape for t in inputs]} and {h_prev.shape}"
            )
        H = self.hidden
        joint, lead = _rows(T.concat([*inputs, h_prev], axis=-1), self.n_in + H)
        pre = _unrows(joint @ self.W + self.b, lead)
        gates = T.sigmoid(pre[..., 0 : 3 * H])
        i, f, o = gates[..., 0:H], gates[..., H : 2 * H], gates[..., 2 * H : 3 * H]
        g = T.tanh(pre[..., 3 * H : 4 * H])
        c = f * c_prev + i * g
        h = o * T.tanh(c)
        return h, c


class AttentiveLSTM(Module):
    """LSTM step fed by the previous word and an attended image feature."""

    def __init__(self, embed_dim: int, feat_dim: int, hidden: int, att_hidden: int, rng=None):
        self.attention = Attention(hidden, feat_dim, att_hidden, rng)
        self.cell = LSTMCell(embed_dim + feat_dim, hidden, rng)

    def __call__(self, x_prev, a, state, keys=None, mask=None):
        return lstma_step(x_prev, a, state, self, keys=keys, mask=mask)


# ---------------------------------------------------------------- operations


def embed(tokens, emb: Embedding) -> Tensor:
    """Column(s) of ``E``; an integer array of tokens gives rows [len, embed_dim]."""
    idx = np.asarray(tokens)
    if not np.issubdtype(idx.dtype, np.integer):
        raise IndexError(f"token indices must be integers, got {tokens!r}")
    if np.any(idx < 0) or np.any(idx >= emb.vocab_size):
        raise IndexError(f"token {tokens!r} outside vocabulary of size {emb.vocab_size}")
    return T.take_columns(emb.E, idx)


def attend(h_prev: Tensor, a, att: Attention, keys=None, mask=None) -> tuple[Tensor, Tensor]:
    """Attended feature ``z`` [..., D] and weights ``alpha`` [..., N]."""
    a = T.as_tensor(a)
    if keys is None:
        keys = att.keys(a)
    n = a.shape[-2]
    flat, lead = _rows(h_prev, att.query_dim)
    query = (flat @ att.W_h).reshape(*lead, 1, att.hidden)
    hidden = T.tanh(keys + query)
    scores = (hidden @ att.w).reshape(*lead, n)
    alpha = T.softmax(scores, axis=-1, mask=mask)
    z = (alpha.reshape(*lead, 1, n) @ a).reshape(*lead, a.shape[-1])
    return z, alpha


def lstm_step(x: Tensor, z: Tensor, state, cell: LSTMCell) -> tuple[Tensor, Tensor]:
    return cell([x, z], state)


def lstma_step(x_prev, a, state, block: AttentiveLSTM, keys=None, mask=None):
    """Attend with the previous hidden state, then advance the cell: (h, c, alpha)."""
    z, alpha = attend(state[0], a, block.attention, keys=keys, mask=mask)
    h, c = lstm_step(x_prev, z, state, block.cell)
    return h, c, alpha


def word_dist(h: Tensor, head: Linear) -> Tensor:
    return T.softmax(head(h), axis=-1)


def project_features(raw, proj: Linear) -> Tensor:
    """Map every region feature through the same affine layer."""
    return proj(T.as_tensor(raw))
