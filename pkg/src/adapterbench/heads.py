"""Downstream heads and their losses.

ASR uses one linear layer per frame trained with CTC; the blank symbol is the
last logit (index ``V``).  Classification tasks (speaker, emotion, intent)
use ``fc1 -> mean over time -> fc2``; the pooled ``fc1`` activation is the
speaker embedding.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import DTYPE, Tensor
from .nn import Linear, Module


class InfeasibleAlignment(ValueError):
    """Target cannot be emitted in the available number of frames."""


class AsrHead(Module):
    def __init__(self, d_in: int, vocab: int, rng=None):
        self.fc = Linear(d_in, vocab + 1, rng)
        self._vocab = vocab

    @property
    def d_in(self) -> int:
        return self.fc.d_in

    @property
    def vocab(self) -> int:
        return self._vocab

    @property
    def blank(self) -> int:
        return self._vocab

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc(x)


class ClsHead(Module):
    def __init__(self, d_in: int, hidden: int, n_out: int, rng=None):
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, n_out, rng)

    @property
    def d_in(self) -> int:
        return self.fc1.d_in

    @property
    def hidden(self) -> int:
        return self.fc1.d_out

    def embed(self, x: Tensor) -> Tensor:
        return ag.mean_rows(self.fc1(x))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.embed(x))


def asr_head_forward(head: AsrHead, features: Tensor) -> Tensor:
    return head(features)


def cls_head_forward(head: ClsHead, features: Tensor) -> Tensor:
    return head(features)


# ---------------------------------------------------------------------------
# CTC


def _lse(*xs: np.ndarray) -> np.ndarray:
    out = xs[0]
    for x in xs[1:]:
        out = np.logaddexp(out, x)
    return out


def _shift(a: np.ndarray, k: int) -> np.ndarray:
    """``a`` moved ``k`` places right (``k < 0``: left), padded with ``-inf``."""
    out = np.full_like(a, -np.inf)
    if abs(k) < a.size:
        if k >= 0:
            out[k:] = a[:a.size - k]
        else:
            out[:k] = a[-k:]
    return out


def min_ctc_frames(target: Sequence[int]) -> int:
    """Frames needed to emit ``target``: one per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _ctc_single(logp: np.ndarray, target: Sequence[int], blank: int):
    """Log-likelihood and per-frame label posteriors for one utterance."""
    n, n_sym = logp.shape
    target = [int(t) for t in target]
    if any(t < 0 or t >= n_sym or t == blank for t in target):
        raise ValueError(f"target labels must lie in [0, {n_sym}) and differ from blank {blank}")
    need = min_ctc_frames(target)
    if need > n:
        raise InfeasibleAlignment(f"target of length {len(target)} needs {need} frames, got {n}")
    ext = np.full(2 * len(target) + 1, blank, dtype=int)
    ext[1::2] = target
    S = ext.size
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    emit = logp[:, ext]  # n x S
    neg_inf = -np.inf

    alpha = np.full((n, S), neg_inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, n):
        prev = alpha[t - 1]
        one = _shift(prev, 1)
        two = np.where(skip, _shift(prev, 2), neg_inf)
        alpha[t] = _lse(prev, one, two) + emit[t]

    beta = np.full((n, S), neg_inf)
    beta[n - 1, S - 1] = emit[n - 1, S - 1]
    if S > 1:
        beta[n - 1, S - 2] = emit[n - 1, S - 2]
    skip_next = np.zeros(S, dtype=bool)
    skip_next[:-2] = skip[2:]
    for t in range(n - 2, -1, -1):
        nxt = beta[t + 1]
        one = _shift(nxt, -1)
        two = np.where(skip_next, _shift(nxt, -2), neg_inf)
        beta[t] = _lse(nxt, one, two) + emit[t]

    loglik = _lse(alpha[n - 1, S - 1], alpha[n - 1, S - 2]) if S > 1 else alpha[n - 1, 0]
    log_gamma = alpha + beta - emit - loglik
    post = np.zeros((n, n_sym))
    gamma = np.exp(log_gamma)
    for s in range(S):
        post[:, ext[s]] += gamma[:, s]
    return float(loglik), post


def ctc_loss(logits: Tensor, targets, blank: int | None = None) -> Tensor:
    """Negative log-probability of the target summed over all CTC alignments.

    ``logits`` is ``n x (V+1)`` with ``targets`` one label sequence, or
    ``B x n x (V+1)`` with ``targets`` a sequence of ``B`` label sequences;
    batched losses are averaged.  ``blank`` defaults to the last index.
    """
    batched = logits.ndim == 3
    x = logits.data if batched else logits.data[None]
    tgts = list(targets) if batched else [targets]
    if len(tgts) != x.shape[0]:
        raise ValueError(f"{len(tgts)} targets for a batch of {x.shape[0]}")
    blank = x.shape[-1] - 1 if blank is None else blank
    shifted = x - x.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    total = 0.0
    grads = np.zeros(x.shape, dtype=DTYPE)
    for i, tgt in enumerate(tgts):
        loglik, post = _ctc_single(logp[i], tgt, blank)
        total -= loglik
        grads[i] = np.exp(logp[i]) - post
    count = len(tgts)
    if not batched:
        grads = grads[0]

    def _bw(g):
        ag._accumulate(logits, float(g) * grads / count)

    return ag._node(np.asarray(total / count), (logits,), _bw)


def greedy_decode(logits: Tensor | np.ndarray, blank: int | None = None) -> list[int]:
    """Best-path decoding: frame argmax, merge repeats, drop blanks."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    blank = arr.shape[-1] - 1 if blank is None else blank
    best = arr.argmax(axis=-1)
    out = []
    prev = None
    for k in best:
        if k != prev and k != blank:
            out.append(int(k))
        prev = k
    return out


# ---------------------------------------------------------------------------
# cross-entropy


def cross_entropy_loss(logits: Tensor, label) -> Tensor:
    """``-log softmax(logits)[label]``; a ``B x C`` batch is averaged."""
    batched = logits.ndim == 2
    x = logits.data if batched else logits.data[None]
    labels = np.atleast_1d(np.asarray(label, dtype=int))
    C = x.shape[-1]
    if labels.shape[0] != x.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {x.shape[0]} logit rows")
    if np.any(labels < 0) or np.any(labels >= C):
        raise ValueError(f"label out of range for {C} classes: {labels.tolist()}")
    m = x.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))[:, 0]
    rows = np.arange(x.shape[0])
    losses = lse - x[rows, labels]
    B = x.shape[0]

    def _bw(g):
        p = np.exp(x - lse[:, None])
        p[rows, labels] -= 1.0
        ag._accumulate(logits, float(g) * (p if batched else p[0]) / B)

    return ag._node(np.asarray(losses.mean()), (logits,), _bw)


def extract_speaker_embedding(model, utterance: np.ndarray | Tensor) -> np.ndarray:
    """Pooled ``fc1`` activation of the classification head (``fc2`` omitted)."""
    head = getattr(model, "head", None)
    if not isinstance(head, ClsHead):
        raise ValueError("model has no classification head to take embeddings from")
    x = utterance if isinstance(utterance, Tensor) else Tensor(np.asarray(utterance))
    return head.embed(model.features(x)).data.copy()
