"""Prototype-form model: binary token masks split a sentence into a content
prototype and a complementary style prototype.

Step 1 trains a rationale system (masker + style-prototype classifier).
Step 2 freezes the masker and trains one seq2seq infiller per style that
rebuilds the sentence from its collapsed content prototype.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import ops as T
from .autodiff.nn import (BiLSTM, BilinearAttention, Embedding, Linear, LSTMCell, Module,
                          cross_entropy, masked_fill_bias, run_lstm)
from .autodiff.optim import Adam, triangular_lr
from .autodiff.tensor import Tensor, no_grad
from .data import MASK, MASK_ID, Corpus, Vocab, pad_id_rows, pad_tokens
from .errors import NumericDomainError, ValidationError
from .seq import BiLSTMClassifier, decode, embed_steps, make_batch


@dataclass
class ProtoConfig:
    d_emb: int = 64
    d_mask: int = 64
    d_cls: int = 64
    d_infill: int = 128
    gamma: float = 1.0
    alpha: float = 0.150
    rat_lr: float = 1e-3
    cls_warmup_steps: int = 50     # classifier-only steps on full sentences before the masker trains
    base_lr: float = 1e-4
    max_lr: float = 1e-3
    cycle_steps: int = 200
    rat_epochs: int = 10
    infill_epochs: int = 30
    batch_size: int = 64
    max_len: int = 20


# -- masks and prototypes --------------------------------------------------------------

class Masker(Module):
    """BiLSTM over tokens, sigmoid head: l_t = sigma(W h_t + b)."""

    def __init__(self, vocab_size: int, d_emb: int, d_hidden: int, rng: np.random.Generator):
        self.embedding = Embedding(vocab_size, d_emb, rng)
        self.rnn = BiLSTM(d_emb, d_hidden, rng)
        self.head = Linear(2 * d_hidden, 1, rng)

    def soft(self, tokens: np.ndarray, mask: np.ndarray) -> Tensor:
        steps, _ = self.rnn(embed_steps(self.embedding, tokens), mask)
        H = T.stack(steps, axis=1)
        return T.sigmoid(self.head(H)).reshape(tokens.shape)


def mask_forward(masker: Masker, tokens: np.ndarray, mask: np.ndarray, soft: bool = False) -> tuple[Tensor, Tensor]:
    """Content mask c = 1(l > 0.5) forward with the gradient of l (straight-through).

    Returns (c, l).  With ``soft`` the returned c is l itself, which has the
    same parameter gradients for any objective linear in c.
    Padding positions are zero in c.
    """
    l = masker.soft(tokens, mask)
    c = l if soft else T.straight_through(l, 0.5)
    return c * mask, l


def split_prototypes(tokens: Sequence[str], content_mask: Sequence[int]) -> tuple[list[str], list[str]]:
    if len(tokens) != len(content_mask):
        raise ValidationError("mask and sentence lengths differ")
    content = [t if m else MASK for t, m in zip(tokens, content_mask)]
    style = [MASK if m else t for t, m in zip(tokens, content_mask)]
    return content, style


def collapse_mask_runs(tokens: Sequence[str]) -> list[str]:
    out: list[str] = []
    for t in tokens:
        if t == MASK and out and out[-1] == MASK:
            continue
        out.append(t)
    return out


class RationaleSystem(Module):
    def __init__(self, vocab_size: int, num_styles: int, cfg: ProtoConfig, rng: np.random.Generator):
        self.masker = Masker(vocab_size, cfg.d_emb, cfg.d_mask, rng)
        self.cls_embedding = Embedding(vocab_size, cfg.d_emb, rng)
        self.classifier = BiLSTMClassifier(cfg.d_emb, cfg.d_cls, num_styles, rng)

    def style_logits(self, tokens: np.ndarray, mask: np.ndarray, style_mask) -> Tensor:
        """Classifier on the full-length style prototype (masked positions embed to zero)."""
        return self.classifier(embed_steps(self.cls_embedding, tokens, style_mask), mask)


def rationale_loss(rat: RationaleSystem, tokens: np.ndarray, mask: np.ndarray, labels: np.ndarray,
                   gamma: float, alpha: float, soft: bool = False) -> tuple[Tensor, dict[str, float]]:
    """gamma * CE(y | style prototype) + alpha * mean_i (sum_t s_it / |x_i|)."""
    if alpha < 0 or gamma <= 0:
        raise ValidationError("need alpha >= 0 and gamma > 0")
    c, _ = mask_forward(rat.masker, tokens, mask, soft)
    s = (1.0 - c) * mask
    cls = gamma * cross_entropy(rat.style_logits(tokens, mask, s), labels).mean()
    lengths = mask.sum(axis=1)
    compact = alpha * (s.sum(axis=1) / lengths).mean()
    return cls + compact, {"cls": float(cls.data), "compact": float(compact.data)}


def rationale_warmup_loss(rat: RationaleSystem, tokens: np.ndarray, mask: np.ndarray, labels: np.ndarray,
                          gamma: float) -> tuple[Tensor, dict[str, float]]:
    """Classifier term with every token in the style prototype; the masker gets no gradient.

    Without this the compactness push turns every token into content before
    the classifier has learned anything, and an all-masked style prototype
    gives the classifier nothing to learn from afterwards.
    """
    cls = gamma * cross_entropy(rat.style_logits(tokens, mask, mask), labels).mean()
    return cls, {"cls": float(cls.data), "compact": 0.0}


def hard_masks(masker: Masker, sentences, vocab: Vocab, batch_size: int = 256) -> list[list[int]]:
    """Content masks (1 = content) as python lists, one per sentence."""
    out = []
    with no_grad():
        for i in range(0, len(sentences), batch_size):
            chunk = sentences[i:i + batch_size]
            tokens, mask = pad_tokens(chunk, vocab)
            c, _ = mask_forward(masker, tokens, mask)
            out.extend([[int(v) for v in row[:len(s)]] for row, s in zip(c.data, chunk)])
    return out


# -- infiller ---------------------------------------------------------------------------

class Seq2Seq(Module):
    """BiLSTM encoder over the collapsed prototype, LSTM decoder with bilinear attention."""

    def __init__(self, d_emb: int, d_hidden: int, vocab_size: int, rng: np.random.Generator):
        half = d_hidden // 2
        self.encoder = BiLSTM(d_emb, half, rng)
        self.bridge = Linear(2 * half, d_hidden, rng)
        self.cell = LSTMCell(d_emb, d_hidden, rng)
        self.attention = BilinearAttention(d_hidden, 2 * half, rng)
        self.out = Linear(d_hidden + 2 * half, vocab_size, rng)
        self.d_hidden = d_hidden

    def encode(self, embedding: Embedding, src: np.ndarray, src_mask: np.ndarray):
        steps, final = self.encoder(embed_steps(embedding, src), src_mask)
        memory = T.stack(steps, axis=1)
        h0 = T.tanh(self.bridge(final))
        return memory, self.attention.keys(memory), h0

    def logits(self, embedding: Embedding, src, src_mask, dec_in, dec_mask) -> Tensor:
        memory, keys, h = self.encode(embedding, src, src_mask)
        bias = masked_fill_bias(src_mask)
        c = Tensor(np.zeros(h.shape))
        outs = []
        for t, e in enumerate(embed_steps(embedding, dec_in)):
            h_new, c_new = self.cell(e, h, c)
            m = dec_mask[:, t:t + 1]
            if not m.all():
                h_new = h_new * m + h * (1.0 - m)
                c_new = c_new * m + c * (1.0 - m)
            h, c = h_new, c_new
            ctx, _ = self.attention(h, keys, memory, bias)
            outs.append(self.out(T.concat([h, ctx], axis=-1)))
        return T.stack(outs, axis=1)

    def step_fn(self, embedding: Embedding):
        def step(prev, state):
            h, c, memory, keys, bias = state
            h2, c2 = self.cell(embedding(prev), Tensor(h), Tensor(c))
            ctx, _ = self.attention(h2, Tensor(keys), Tensor(memory), bias)
            logits = self.out(T.concat([h2, ctx], axis=-1))
            return logits.data, (h2.data, c2.data, memory, keys, bias)
        return step


class Infiller(Module):
    """One seq2seq per style over a shared embedding table."""

    def __init__(self, vocab_size: int, num_styles: int, cfg: ProtoConfig, rng: np.random.Generator):
        self.embedding = Embedding(vocab_size, cfg.d_emb, rng)
        self.styles = [Seq2Seq(cfg.d_emb, cfg.d_infill, vocab_size, rng) for _ in range(num_styles)]


@dataclass
class InfillBatch:
    src: np.ndarray
    src_mask: np.ndarray
    dec_in: np.ndarray
    dec_out: np.ndarray
    dec_mask: np.ndarray
    labels: np.ndarray


def make_infill_batch(sentences, prototypes, labels, vocab: Vocab, max_len: int | None = None) -> InfillBatch:
    b = make_batch(sentences, labels, vocab, max_len)
    src, src_mask = pad_id_rows([vocab.encode(p) for p in prototypes])
    return InfillBatch(src, src_mask, b.dec_in, b.dec_out, b.dec_mask, b.labels)


def infill_loss(infiller: Infiller, batch: InfillBatch) -> tuple[Tensor, dict[str, float]]:
    """Mean over sentences of the token-sum NLL of x given its collapsed prototype."""
    total = None
    tokens = 0.0
    for y, s2s in enumerate(infiller.styles):
        rows = np.flatnonzero(batch.labels == y)
        if rows.size == 0:
            continue
        logits = s2s.logits(infiller.embedding, batch.src[rows], batch.src_mask[rows],
                            batch.dec_in[rows], batch.dec_mask[rows])
        B, L, V = logits.shape
        nll = cross_entropy(logits.reshape(B * L, V), batch.dec_out[rows].reshape(-1)).reshape(B, L)
        part = (nll * batch.dec_mask[rows]).sum()
        total = part if total is None else total + part
        tokens += float(batch.dec_mask[rows].sum())
    loss = total / len(batch.labels)
    return loss, {"infill": float(loss.data), "token_ce": float(total.data) / tokens}


def infill_decode(infiller: Infiller, prototypes, targets, vocab: Vocab, max_len: int,
                  beam: int | None = None, batch_size: int = 128) -> list[list[str]]:
    targets = np.asarray(targets)
    out: list[list[str] | None] = [None] * len(prototypes)
    with no_grad():
        for y in np.unique(targets):
            idx_all = np.flatnonzero(targets == y)
            s2s = infiller.styles[int(y)]
            for start in range(0, idx_all.size, batch_size):
                idx = idx_all[start:start + batch_size]
                src, src_mask = pad_id_rows([vocab.encode(prototypes[i]) for i in idx])
                memory, keys, h0 = s2s.encode(infiller.embedding, src, src_mask)
                state = (h0.data, np.zeros(h0.shape), memory.data, keys.data, masked_fill_bias(src_mask))
                ids = decode(s2s.step_fn(infiller.embedding), state, idx.size, max_len, beam)
                for i, seq in zip(idx, ids):
                    out[i] = vocab.decode(seq)
    return out


# -- system -------------------------------------------------------------------------------

def write_prototype_jsonl(path, sentences, content_masks) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for toks, m in zip(sentences, content_masks):
            content, _ = split_prototypes(toks, m)
            fh.write(json.dumps({"tokens": list(toks), "mask": list(m),
                                 "collapsed": collapse_mask_runs(content)}) + "\n")


class InfillStage:
    """Step-2 state shared by the prototype model and the attribution baselines."""

    def __init__(self, vocab: Vocab, num_styles: int, cfg: ProtoConfig, rng: np.random.Generator):
        self.vocab = vocab
        self.cfg = cfg
        self.infiller = Infiller(len(vocab), num_styles, cfg, rng)
        self.opt = Adam(self.infiller.parameters(), lr=cfg.base_lr)
        self.prototypes: list[list[str]] | None = None

    def step(self, corpus: Corpus, rows) -> dict[str, float]:
        b = make_infill_batch([corpus.sentences[i] for i in rows], [self.prototypes[i] for i in rows],
                              [corpus.labels[i] for i in rows], self.vocab, self.cfg.max_len)
        self.opt.lr = triangular_lr(self.opt.steps, self.cfg.base_lr, self.cfg.max_lr, self.cfg.cycle_steps)
        self.opt.zero_grad()
        loss, terms = infill_loss(self.infiller, b)
        if not np.isfinite(terms["infill"]):
            raise NumericDomainError("loss term 'infill' is not finite")
        loss.backward()
        self.opt.step()
        terms["lr"] = self.opt.lr
        return terms


def collapsed_prototypes(sentences, content_masks) -> list[list[str]]:
    return [collapse_mask_runs(split_prototypes(s, m)[0]) for s, m in zip(sentences, content_masks)]


def identity_fraction(content_masks, labels=None) -> dict:
    """Share of sentences whose content prototype is the whole sentence."""
    ident = np.array([all(m) for m in content_masks], dtype=float)
    out = {"overall": float(ident.mean()) if ident.size else 0.0}
    if labels is not None:
        labels = np.asarray(labels)
        for y in np.unique(labels):
            out[f"style{int(y)}"] = float(ident[labels == y].mean())
    return out


class PrototypeSystem:
    family = "prototype"

    def __init__(self, vocab: Vocab, num_styles: int, cfg: ProtoConfig, seed: int):
        rng = np.random.default_rng([seed, 2])
        self.vocab = vocab
        self.cfg = cfg
        self.num_styles = num_styles
        self.rat = RationaleSystem(len(vocab), num_styles, cfg, rng)
        self.rat_opt = Adam(self.rat.parameters(), lr=cfg.rat_lr)
        self.stage = InfillStage(vocab, num_styles, cfg, rng)
        self.max_decode = None
        self.warnings: list[str] = []

    @property
    def total_epochs(self) -> int:
        return self.cfg.rat_epochs + self.cfg.infill_epochs

    def phase(self, epoch: int) -> int:
        return 1 if epoch < self.cfg.rat_epochs else 2

    def set_decode_length(self, n: int) -> None:
        self.max_decode = n

    def begin_epoch(self, epoch: int, corpus: Corpus) -> None:
        if self.phase(epoch) == 2 and self.stage.prototypes is None:
            self.finish_rationale(corpus)

    def finish_rationale(self, corpus: Corpus) -> None:
        acc = rationale_accuracy(self.rat, corpus, self.vocab)
        majority = float(np.bincount(corpus.labels).max()) / len(corpus)
        if acc < majority:
            msg = f"style-prototype classifier accuracy {acc:.3f} is below the majority rate {majority:.3f}"
            self.warnings.append(msg)
            warnings.warn(msg, RuntimeWarning)
        self.content_masks = hard_masks(self.rat.masker, corpus.sentences, self.vocab)
        self.stage.prototypes = collapsed_prototypes(corpus.sentences, self.content_masks)

    def train_step(self, corpus: Corpus, rows, epoch: int, rng: np.random.Generator) -> dict[str, float]:
        if self.phase(epoch) == 1:
            b = make_batch([corpus.sentences[i] for i in rows], [corpus.labels[i] for i in rows],
                           self.vocab, self.cfg.max_len)
            self.rat_opt.zero_grad()
            if self.rat_opt.steps < self.cfg.cls_warmup_steps:
                loss, terms = rationale_warmup_loss(self.rat, b.tokens, b.tok_mask, b.labels, self.cfg.gamma)
            else:
                loss, terms = rationale_loss(self.rat, b.tokens, b.tok_mask, b.labels, self.cfg.gamma,
                                             self.cfg.alpha)
            for k, v in terms.items():
                if not np.isfinite(v):
                    raise NumericDomainError(f"loss term {k!r} is not finite")
            loss.backward()
            self.rat_opt.step()
            terms["total"] = float(loss.data)
            return terms
        return self.stage.step(corpus, rows)

    def content_masks_for(self, sentences) -> list[list[int]]:
        return hard_masks(self.rat.masker, sentences, self.vocab)

    def transfer(self, sentences, targets, beam: int | None = None) -> list[list[str]]:
        return transfer_prototype(self, sentences, targets, beam)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"rat/{k}": v for k, v in self.rat.state_dict().items()}
        out.update({f"ropt/{k}": v for k, v in self.rat_opt.state_dict().items()})
        out.update({f"infill/{k}": v for k, v in self.stage.infiller.state_dict().items()})
        out.update({f"iopt/{k}": v for k, v in self.stage.opt.state_dict().items()})
        return out

    def counters(self) -> dict:
        return {"ropt": self.rat_opt.steps, "iopt": self.stage.opt.steps}

    def load_arrays(self, arrays: dict, counters: dict) -> None:
        pick = lambda p: {k[len(p):]: v for k, v in arrays.items() if k.startswith(p)}
        self.rat.load_state_dict(pick("rat/"))
        self.rat_opt.load_state_dict(pick("ropt/"), counters["ropt"])
        self.stage.infiller.load_state_dict(pick("infill/"))
        self.stage.opt.load_state_dict(pick("iopt/"), counters["iopt"])
        self.stage.prototypes = None


def rationale_accuracy(rat: RationaleSystem, corpus: Corpus, vocab: Vocab, batch_size: int = 256) -> float:
    hits = 0
    with no_grad():
        for i in range(0, len(corpus), batch_size):
            chunk = corpus.sentences[i:i + batch_size]
            tokens, mask = pad_tokens(chunk, vocab)
            c, _ = mask_forward(rat.masker, tokens, mask)
            logits = rat.style_logits(tokens, mask, (1.0 - c.data) * mask)
            hits += int((logits.data.argmax(axis=1) == np.asarray(corpus.labels[i:i + batch_size])).sum())
    return hits / len(corpus)


def transfer_prototype(system, sentences, targets, beam: int | None = None) -> list[list[str]]:
    masks = system.content_masks_for(sentences)
    protos = collapsed_prototypes(sentences, masks)
    system.last_masks = masks
    max_len = system.max_decode or int(np.ceil(1.5 * system.cfg.max_len))
    return infill_decode(system.stage.infiller, protos, targets, system.vocab, max_len, beam)


def two_step_train(corpus: Corpus, vocab: Vocab, cfg: ProtoConfig, seed: int = 0, log=None) -> PrototypeSystem:
    """Both training steps end to end (no validation or checkpointing)."""
    from .data import epoch_rng, iterate_batches

    system = PrototypeSystem(vocab, corpus.num_styles, cfg, seed)
    system.set_decode_length(int(np.ceil(1.5 * corpus.max_length())))
    for epoch in range(system.total_epochs):
        system.begin_epoch(epoch, corpus)
        rng = epoch_rng(seed, epoch)
        for rows in iterate_batches(len(corpus), cfg.batch_size, rng):
            terms = system.train_step(corpus, rows, epoch, rng)
            if log is not None:
                log(epoch, terms)
    return system
