"""Shared sequence plumbing: batches, BiLSTM sentence encoders, classifiers,
and greedy / beam decoding over a step function."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import ops as T
from .autodiff.nn import BiLSTM, Embedding, Linear, Module, cross_entropy
from .autodiff.tensor import Tensor, no_grad
from .data import BOS_ID, EOS_ID, MASK_ID, PAD_ID, Vocab, batch_encode, pad_tokens


@dataclass
class Batch:
    """One minibatch in two layouts.

    ``tokens``/``tok_mask``: raw token ids (no BOS/EOS) for encoders.
    ``dec_in``/``dec_out``/``dec_mask``: teacher-forcing inputs (BOS + x) and
    targets (x + EOS) for decoders.
    """
    sentences: list[list[str]]
    labels: np.ndarray
    tokens: np.ndarray
    tok_mask: np.ndarray
    dec_in: np.ndarray
    dec_out: np.ndarray
    dec_mask: np.ndarray

    @property
    def size(self) -> int:
        return len(self.sentences)


def make_batch(sentences: Sequence[Sequence[str]], labels, vocab: Vocab, max_len: int | None = None) -> Batch:
    sentences = [list(s) for s in sentences]
    if max_len is not None:
        sentences = [s[:max_len] for s in sentences]
    width = max(len(s) for s in sentences) + 2
    ids, lengths, lab = batch_encode(sentences, vocab, width, labels)
    tokens, tok_mask = pad_tokens(sentences, vocab)
    dec_in = ids[:, :-1]
    dec_out = ids[:, 1:]
    dec_mask = (np.arange(width - 1)[None, :] < (lengths - 1)[:, None]).astype(np.float64)
    return Batch(sentences, lab, tokens, tok_mask, dec_in, dec_out, dec_mask)


def embed_steps(embedding: Embedding, ids: np.ndarray, scale: Tensor | np.ndarray | None = None) -> list[Tensor]:
    """Per-time-step embedded inputs; ``scale`` (B, T) multiplies each position."""
    emb = embedding(ids)
    if scale is not None:
        B, L = ids.shape
        emb = emb * (scale.reshape(B, L, 1) if isinstance(scale, Tensor) else scale[:, :, None])
    return [emb[:, t, :] for t in range(ids.shape[1])]


class BiLSTMClassifier(Module):
    """BiLSTM, concatenated final states, linear head to style logits."""

    def __init__(self, d_emb: int, d_hidden: int, num_styles: int, rng: np.random.Generator):
        self.rnn = BiLSTM(d_emb, d_hidden, rng)
        self.head = Linear(2 * d_hidden, num_styles, rng)

    def __call__(self, steps: list[Tensor], mask: np.ndarray) -> Tensor:
        _, final = self.rnn(steps, mask)
        return self.head(final)


class TextClassifier(Module):
    """Stand-alone style classifier with its own embedding table."""

    def __init__(self, vocab_size: int, d_emb: int, d_hidden: int, num_styles: int, rng: np.random.Generator):
        self.embedding = Embedding(vocab_size, d_emb, rng)
        self.body = BiLSTMClassifier(d_emb, d_hidden, num_styles, rng)

    def logits(self, tokens: np.ndarray, mask: np.ndarray) -> Tensor:
        return self.body(embed_steps(self.embedding, tokens), mask)

    def loss(self, batch: Batch) -> Tensor:
        return cross_entropy(self.logits(batch.tokens, batch.tok_mask), batch.labels).mean()

    def predict_proba(self, sentences, vocab: Vocab, batch_size: int = 256) -> np.ndarray:
        out = []
        with no_grad():
            for i in range(0, len(sentences), batch_size):
                chunk = [s if s else ["<unk>"] for s in sentences[i:i + batch_size]]
                tokens, mask = pad_tokens(chunk, vocab)
                out.append(T.softmax(self.logits(tokens, mask), axis=-1).data)
        return np.concatenate(out, axis=0)


# -- decoding -----------------------------------------------------------------------

StepFn = Callable[[np.ndarray, tuple], tuple[np.ndarray, tuple]]
BANNED = (PAD_ID, BOS_ID, MASK_ID)


def _log_probs(logits: np.ndarray, banned: Sequence[int]) -> np.ndarray:
    z = logits.copy()
    z[:, list(banned)] = -np.inf
    z -= z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def greedy_decode(step: StepFn, state: tuple, batch: int, max_len: int,
                  banned: Sequence[int] = BANNED) -> list[list[int]]:
    prev = np.full(batch, BOS_ID, dtype=np.int64)
    out = [[] for _ in range(batch)]
    done = np.zeros(batch, dtype=bool)
    for _ in range(max_len):
        logits, state = step(prev, state)
        nxt = np.argmax(_log_probs(logits, banned), axis=1)
        for i in np.flatnonzero(~done):
            if nxt[i] == EOS_ID:
                done[i] = True
            else:
                out[i].append(int(nxt[i]))
        if done.all():
            break
        prev = nxt
    return out


def _take_rows(state: tuple, rows: np.ndarray) -> tuple:
    return tuple(s[rows] for s in state)


def beam_decode(step: StepFn, state: tuple, width: int, max_len: int,
                banned: Sequence[int] = BANNED) -> list[int]:
    """Beam search for one sentence (``state`` rows = 1).  Scores are summed
    log-probabilities without length normalisation; ties resolve to the lower
    token id, as in greedy decoding."""
    if width < 1:
        raise ValueError("beam width must be >= 1")
    hyps: list[list[int]] = [[]]
    scores = np.zeros(1)
    prev = np.array([BOS_ID])
    finished: list[tuple[float, list[int]]] = []
    for _ in range(max_len):
        logits, state = step(prev, state)
        logp = _log_probs(logits, banned)
        cand = (scores[:, None] + logp).reshape(-1)
        order = np.argsort(-cand, kind="stable")[:width]
        V = logp.shape[1]
        new_hyps, new_scores, rows, toks = [], [], [], []
        for idx in order:
            if not np.isfinite(cand[idx]):
                continue
            r, tok = divmod(int(idx), V)
            if tok == EOS_ID:
                finished.append((float(cand[idx]), hyps[r]))
            else:
                new_hyps.append(hyps[r] + [tok])
                new_scores.append(cand[idx])
                rows.append(r)
                toks.append(tok)
        # stop once no live hypothesis can beat the best finished one
        if not new_hyps or (finished and max(f[0] for f in finished) >= max(new_scores)):
            break
        hyps, scores = new_hyps, np.array(new_scores)
        state = _take_rows(state, np.array(rows))
        prev = np.array(toks)
    else:
        finished.extend(zip(scores.tolist(), hyps))
    if not finished:
        finished.extend(zip(scores.tolist(), hyps))
    best = max(range(len(finished)), key=lambda i: (finished[i][0], -i))
    return finished[best][1]


def decode(step: StepFn, state: tuple, batch: int, max_len: int, beam: int | None = None) -> list[list[int]]:
    if beam is None:
        return greedy_decode(step, state, batch, max_len)
    return [beam_decode(step, _take_rows(state, np.array([i])), beam, max_len) for i in range(batch)]


def decode_length(max_train_len: int) -> int:
    return int(np.ceil(1.5 * max_train_len))
