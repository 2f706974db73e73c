"""Delete-and-generate baselines: token salience from n-gram frequency ratios
or from an attention-pooling classifier (attention, gradient, integrated
gradients, LIME), a threshold turning scores into style masks, and the same
per-style infiller the prototype model uses."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import ops as T
from .autodiff.nn import BiLSTM, Embedding, Linear, Module, cross_entropy, masked_fill_bias
from .autodiff.optim import Adam
from .autodiff.tensor import Tensor, no_grad
from .data import Corpus, Vocab, pad_tokens
from .errors import NumericDomainError, ValidationError
from .prototype import InfillStage, ProtoConfig, collapsed_prototypes, identity_fraction, infill_decode
from .seq import make_batch

METHODS = ("frequency", "attention", "gradient", "integrated_gradients", "lime")


@dataclass
class AttributionScores:
    tokens: list[str]
    scores: np.ndarray
    method: str

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.tokens),):
            raise ValidationError("one score per token")
        if not np.all(np.isfinite(self.scores)):
            raise NumericDomainError("attribution scores must be finite")


# -- frequency ratios -----------------------------------------------------------------

@dataclass
class NgramStats:
    counts: list[Counter]
    max_n: int = 4
    smoothing: float = 1.0

    @classmethod
    def build(cls, corpus: Corpus, max_n: int = 4, smoothing: float = 1.0) -> "NgramStats":
        counts = [Counter() for _ in range(corpus.num_styles)]
        for sent, y in zip(corpus.sentences, corpus.labels):
            for n in range(1, max_n + 1):
                for i in range(len(sent) - n + 1):
                    counts[y][tuple(sent[i:i + n])] += 1
        return cls(counts, max_n, smoothing)

    def ratio(self, ngram: tuple, y: int) -> float:
        other = sum(c[ngram] for k, c in enumerate(self.counts) if k != y)
        return self.counts[y][ngram] / (other + self.smoothing)


def salience_frequency(stats: NgramStats, tokens: Sequence[str], y: int) -> AttributionScores:
    """Token score = max smoothed ratio over the n-grams (n <= max_n) covering it."""
    L = len(tokens)
    scores = np.zeros(L)
    for n in range(1, stats.max_n + 1):
        for i in range(L - n + 1):
            r = stats.ratio(tuple(tokens[i:i + n]), y)
            np.maximum(scores[i:i + n], r, out=scores[i:i + n])
    return AttributionScores(list(tokens), scores, "frequency")


# -- attention-pooling classifier ----------------------------------------------------

class AttnClassifier(Module):
    """BiLSTM states h_t, weights a = softmax(v . tanh(W h_t)), logits from sum_t a_t h_t."""

    def __init__(self, vocab_size: int, d_emb: int, d_hidden: int, num_styles: int, rng: np.random.Generator):
        self.embedding = Embedding(vocab_size, d_emb, rng)
        self.rnn = BiLSTM(d_emb, d_hidden, rng)
        self.proj = Linear(2 * d_hidden, 2 * d_hidden, rng)
        self.score = Linear(2 * d_hidden, 1, rng)
        self.head = Linear(2 * d_hidden, num_styles, rng)
        self.trained = False

    def forward_embedded(self, emb: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        """(logits, attention weights) from an embedded batch (B, T, d)."""
        steps, _ = self.rnn([emb[:, t, :] for t in range(emb.shape[1])], mask)
        H = T.stack(steps, axis=1)
        B, L, D = H.shape
        raw = self.score(T.tanh(self.proj(H))).reshape(B, L) + masked_fill_bias(mask)
        weights = T.softmax(raw, axis=-1)
        pooled = (weights.reshape(B, 1, L) @ H).reshape(B, D)
        return self.head(pooled), weights

    def forward(self, tokens: np.ndarray, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        return self.forward_embedded(self.embedding(tokens), mask)


def train_attn_classifier_step(clf: AttnClassifier, opt: Adam, tokens, mask, labels) -> float:
    opt.zero_grad()
    logits, _ = clf.forward(tokens, mask)
    loss = cross_entropy(logits, labels).mean()
    if not loss.is_valid():
        raise NumericDomainError("loss term 'attn_classifier' is not finite")
    loss.backward()
    opt.step()
    clf.trained = True
    return float(loss.data)


def _log_prob_target(clf: AttnClassifier, emb: Tensor, mask: np.ndarray, y: int) -> Tensor:
    logits, _ = clf.forward_embedded(emb, mask)
    return T.log_softmax(logits, axis=-1)[:, y]


def integrated_gradients(clf: AttnClassifier, ids: np.ndarray, y: int, steps: int = 20) -> tuple[np.ndarray, float]:
    """Signed per-dimension attributions (L, d) along the straight path from the
    zero-embedding baseline, midpoint Riemann sum; also returns f(x) - f(0)."""
    L = ids.size
    x = clf.embedding.weight.data[ids]                        # (L, d)
    alphas = (np.arange(steps) + 0.5) / steps
    path = Tensor(alphas[:, None, None] * x[None], requires_grad=True)
    mask = np.ones((steps, L))
    f = _log_prob_target(clf, path, mask, y).sum()
    f.backward()
    attr = x * path.grad.mean(axis=0)
    with no_grad():
        ends = Tensor(np.stack([x, np.zeros_like(x)]))
        fx, f0 = _log_prob_target(clf, ends, np.ones((2, L)), y).data
    return attr, float(fx - f0)


def lime_weights(predict, L: int, rng: np.random.Generator, samples: int = 200,
                 ridge: float = 1.0) -> np.ndarray:
    """Weighted ridge fit of predict(keep-mask) on the keep-mask.

    ``predict`` maps a (K, L) 0/1 array (1 = token kept) to K probabilities.
    Kernel exp(-D^2 / width^2) over the Hamming distance D to the full
    sentence, width 0.75 sqrt(L).
    """
    Z = rng.integers(0, 2, size=(samples, L)).astype(np.float64)
    Z[0] = 1.0
    empty = Z.sum(axis=1) == 0
    Z[empty, rng.integers(0, L, size=int(empty.sum()))] = 1.0
    p = np.asarray(predict(Z), dtype=np.float64)
    D = L - Z.sum(axis=1)
    width = 0.75 * np.sqrt(L)
    pi = np.exp(-(D ** 2) / width ** 2)
    X = np.hstack([np.ones((samples, 1)), Z])
    W = X * pi[:, None]
    reg = ridge * np.eye(L + 1)
    reg[0, 0] = 0.0                                            # intercept is not penalised
    coef = np.linalg.solve(X.T @ W + reg, W.T @ p)
    return coef[1:]


def attribution_scores(method: str, clf: AttnClassifier, tokens: Sequence[str], y: int, vocab: Vocab,
                       ig_steps: int = 20, lime_samples: int = 200, rng: np.random.Generator | None = None) -> AttributionScores:
    if method == "frequency":
        raise ValidationError("frequency scores come from salience_frequency")
    if method not in METHODS:
        raise ValidationError(f"unknown attribution method {method!r}")
    if not clf.trained:
        raise ValidationError("the attribution classifier has not been trained")
    ids = np.asarray(vocab.encode(tokens), dtype=np.int64)
    L = ids.size
    if method == "attention":
        with no_grad():
            _, w = clf.forward(ids[None], np.ones((1, L)))
        scores = w.data[0]
    elif method == "gradient":
        emb = Tensor(clf.embedding.weight.data[ids][None], requires_grad=True)
        _log_prob_target(clf, emb, np.ones((1, L)), y).sum().backward()
        scores = np.linalg.norm(emb.grad[0], axis=1)
    elif method == "integrated_gradients":
        attr, _ = integrated_gradients(clf, ids, y, ig_steps)
        scores = np.linalg.norm(attr, axis=1)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)

        def predict(Z):
            kept = [ids[z > 0] for z in Z]
            rows, mask = _pad(kept)
            with no_grad():
                logits, _ = clf.forward(rows, mask)
                return T.softmax(logits, axis=-1).data[:, y]

        scores = np.abs(lime_weights(predict, L, rng, lime_samples))
    return AttributionScores(list(tokens), scores, method)


def _pad(rows):
    T_ = max(len(r) for r in rows)
    ids = np.zeros((len(rows), T_), dtype=np.int64)
    mask = np.zeros((len(rows), T_))
    for i, r in enumerate(rows):
        ids[i, :len(r)] = r
        mask[i, :len(r)] = 1.0
    return ids, mask


def threshold_to_mask(scores, rule: str = "mean", tau: float | None = None) -> np.ndarray:
    """Style mask s (1 = style token).  ``mean``: score > sentence mean (strict);
    ``fixed``: score > tau."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise NumericDomainError("scores must be finite")
    if rule == "mean":
        return (scores > scores.mean()).astype(int)
    if rule == "fixed":
        if tau is None:
            raise ValidationError("fixed threshold needs tau")
        return (scores > tau).astype(int)
    raise ValidationError(f"unknown threshold rule {rule!r}")


def write_scores_jsonl(path, scored: Sequence[AttributionScores], style_masks) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s, m in zip(scored, style_masks):
            fh.write(json.dumps({"tokens": s.tokens, "method": s.method,
                                 "scores": [float(v) for v in s.scores], "mask": [int(v) for v in m]}) + "\n")


# -- pipeline ----------------------------------------------------------------------

@dataclass
class BaselineConfig:
    method: str = "frequency"
    ratio: float = 15.0
    smoothing: float = 1.0
    max_n: int = 4
    d_emb: int = 64
    d_hidden: int = 64
    cls_lr: float = 1e-3
    cls_epochs: int = 5
    ig_steps: int = 20
    lime_samples: int = 200
    infill: ProtoConfig = field(default_factory=ProtoConfig)


class BaselineSystem:
    """Scorer (frequency tables or a trained attention classifier), mean or
    fixed thresholding, then the prototype model's step-2 infiller."""

    family = "baseline"

    def __init__(self, vocab: Vocab, num_styles: int, cfg: BaselineConfig, seed: int):
        if cfg.method not in METHODS:
            raise ValidationError(f"unknown attribution method {cfg.method!r}")
        rng = np.random.default_rng([seed, 3])
        self.vocab = vocab
        self.cfg = cfg
        self.seed = seed
        self.num_styles = num_styles
        self.stats: NgramStats | None = None
        self.clf = AttnClassifier(len(vocab), cfg.d_emb, cfg.d_hidden, num_styles, rng)
        self.clf_opt = Adam(self.clf.parameters(), lr=cfg.cls_lr)
        self.stage = InfillStage(vocab, num_styles, cfg.infill, rng)
        self.max_decode = None
        self.content_masks: list[list[int]] | None = None
        self.identity: dict | None = None

    @property
    def scorer_epochs(self) -> int:
        return 0 if self.cfg.method == "frequency" else self.cfg.cls_epochs

    @property
    def total_epochs(self) -> int:
        return self.scorer_epochs + self.cfg.infill.infill_epochs

    def set_decode_length(self, n: int) -> None:
        self.max_decode = n

    def phase(self, epoch: int) -> int:
        return 1 if epoch < self.scorer_epochs else 2

    def begin_epoch(self, epoch: int, corpus: Corpus) -> None:
        if self.cfg.method == "frequency" and self.stats is None:
            self.stats = NgramStats.build(corpus, self.cfg.max_n, self.cfg.smoothing)
        if self.phase(epoch) == 2 and self.stage.prototypes is None:
            self.prepare_prototypes(corpus)

    def prepare_prototypes(self, corpus: Corpus) -> None:
        if self.cfg.method != "frequency":
            self.clf.trained = True
        self.content_masks = self.content_masks_for(corpus.sentences, corpus.labels)
        self.stage.prototypes = collapsed_prototypes(corpus.sentences, self.content_masks)
        self.identity = identity_fraction(self.content_masks, corpus.labels)

    def score(self, tokens, y: int, index: int = 0) -> AttributionScores:
        if self.cfg.method == "frequency":
            return salience_frequency(self.stats, tokens, y)
        return attribution_scores(self.cfg.method, self.clf, tokens, y, self.vocab, self.cfg.ig_steps,
                                  self.cfg.lime_samples, np.random.default_rng([self.seed, index]))

    def style_mask(self, scores: AttributionScores) -> np.ndarray:
        if self.cfg.method == "frequency":
            return threshold_to_mask(scores.scores, "fixed", self.cfg.ratio)
        return threshold_to_mask(scores.scores, "mean")

    def content_masks_for(self, sentences, labels) -> list[list[int]]:
        out = []
        for i, (s, y) in enumerate(zip(sentences, labels)):
            out.append([1 - int(v) for v in self.style_mask(self.score(s, int(y), i))])
        return out

    def train_step(self, corpus: Corpus, rows, epoch: int, rng) -> dict[str, float]:
        if self.phase(epoch) == 1:
            b = make_batch([corpus.sentences[i] for i in rows], [corpus.labels[i] for i in rows],
                           self.vocab, self.cfg.infill.max_len)
            return {"attn_cls": train_attn_classifier_step(self.clf, self.clf_opt, b.tokens, b.tok_mask, b.labels)}
        return self.stage.step(corpus, rows)

    def transfer(self, sentences, targets, beam: int | None = None, sources=None) -> list[list[str]]:
        """``sources`` are the source-style labels the scorer conditions on
        (defaults to the complement of the target in the two-style case)."""
        if sources is None:
            sources = [(int(t) + 1) % self.num_styles for t in targets]
        masks = self.content_masks_for(sentences, sources)
        self.last_masks = masks
        protos = collapsed_prototypes(sentences, masks)
        max_len = self.max_decode or int(np.ceil(1.5 * self.cfg.infill.max_len))
        return infill_decode(self.stage.infiller, protos, targets, self.vocab, max_len, beam)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"clf/{k}": v for k, v in self.clf.state_dict().items()}
        out.update({f"copt/{k}": v for k, v in self.clf_opt.state_dict().items()})
        out.update({f"infill/{k}": v for k, v in self.stage.infiller.state_dict().items()})
        out.update({f"iopt/{k}": v for k, v in self.stage.opt.state_dict().items()})
        return out

    def counters(self) -> dict:
        return {"copt": self.clf_opt.steps, "iopt": self.stage.opt.steps}

    def load_arrays(self, arrays: dict, counters: dict) -> None:
        pick = lambda p: {k[len(p):]: v for k, v in arrays.items() if k.startswith(p)}
        self.clf.load_state_dict(pick("clf/"))
        self.clf_opt.load_state_dict(pick("copt/"), counters["copt"])
        self.stage.infiller.load_state_dict(pick("infill/"))
        self.stage.opt.load_state_dict(pick("iopt/"), counters["iopt"])
        self.clf.trained = counters["copt"] > 0
        self.stage.prototypes = None


def baseline_pipeline(corpus: Corpus, test: Corpus, vocab: Vocab, cfg: BaselineConfig, seed: int = 0,
                      train_infiller: bool = True) -> dict:
    """Score, threshold, (optionally) train the infiller and transfer ``test``
    to the other style.  Returns outputs and identity-prototype fractions."""
    from .data import epoch_rng, iterate_batches

    system = BaselineSystem(vocab, corpus.num_styles, cfg, seed)
    system.set_decode_length(int(np.ceil(1.5 * corpus.max_length())))
    epochs = system.total_epochs if train_infiller else system.scorer_epochs
    for epoch in range(epochs):
        system.begin_epoch(epoch, corpus)
        rng = epoch_rng(seed, epoch)
        for rows in iterate_batches(len(corpus), cfg.infill.batch_size, rng):
            system.train_step(corpus, rows, epoch, rng)
    if system.stage.prototypes is None:
        system.begin_epoch(system.scorer_epochs, corpus)
    targets = [(y + 1) % corpus.num_styles for y in test.labels]
    outputs = system.transfer(test.sentences, targets, sources=test.labels) if train_infiller else None
    test_masks = system.last_masks if train_infiller else system.content_masks_for(test.sentences, test.labels)
    return {
        "system": system,
        "outputs": outputs,
        "identity_train": system.identity,
        "identity_test": identity_fraction(test_masks, test.labels),
    }
