"""Automatic metrics: style accuracy from an in-repo classifier, corpus BLEU,
Kneser-Ney trigram perplexity and their geometric-mean aggregate."""
from __future__ import annotations

import csv
import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff.optim import Adam
from .data import EOS, UNK, Corpus, Vocab, epoch_rng, iterate_batches
from .errors import NumericDomainError, ValidationError
from .seq import TextClassifier, make_batch


# -- BLEU -------------------------------------------------------------------------------

def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Sequence[str]], references, max_n: int = 4) -> float:
    """Corpus BLEU on a 0-100 scale.

    ``references[i]`` is either one token list or a list of token lists.
    Clipped n-gram matches and candidate n-gram totals are summed over the
    corpus; orders above one get add-one smoothing; the brevity penalty uses
    the closest reference length (shorter wins ties).
    """
    if len(candidates) == 0:
        raise ValidationError("no candidates")
    if len(references) != len(candidates):
        raise ValidationError("one reference set per candidate")
    matches = np.zeros(max_n)
    totals = np.zeros(max_n)
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        if refs and isinstance(refs[0], str):
            refs = [refs]
        cand = list(cand)
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            c = _ngrams(cand, n)
            best: Counter = Counter()
            for r in refs:
                best |= _ngrams(r, n)
            matches[n - 1] += sum(min(v, best[g]) for g, v in c.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if matches[0] == 0 or cand_len == 0:
        return 0.0
    log_p = [math.log(matches[0] / totals[0])]
    log_p += [math.log((matches[n] + 1) / (totals[n] + 1)) for n in range(1, max_n)]
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return 100.0 * bp * math.exp(sum(log_p) / max_n)


# -- Kneser-Ney ----------------------------------------------------------------------------

BOS_LM = "<s>"


@dataclass
class KneserNeyLM:
    """Interpolated Kneser-Ney with one absolute discount per order.

    The top order uses raw counts, lower orders continuation counts, and the
    unigram level interpolates with a uniform distribution over the
    vocabulary (which contains UNK), so every token gets mass.
    """
    order: int
    vocab: list[str]
    counts: list[dict]          # counts[k][(context, word)] for n-gram order k+1
    context_totals: list[dict]  # sum over words for each context
    context_types: list[dict]   # number of distinct followers for each context
    discounts: list[float]

    def __post_init__(self):
        self._vocab_set = set(self.vocab)
        self._cache: dict = {}

    def map(self, token: str) -> str:
        return token if token in self._vocab_set else UNK

    def prob(self, word: str, context: tuple) -> float:
        context = tuple(context)[-(self.order - 1):] if self.order > 1 else ()
        return self._prob(self.map(word), tuple(self.map(t) if t != BOS_LM else t for t in context))

    def _prob(self, word: str, context: tuple) -> float:
        k = len(context)
        key = (word, context)
        if key in self._cache:
            return self._cache[key]
        D = self.discounts[k]
        total = self.context_totals[k].get(context, 0)
        lower = 1.0 / len(self.vocab) if k == 0 else self._prob(word, context[1:])
        if total == 0:
            p = lower
        else:
            c = self.counts[k].get((context, word), 0)
            types = self.context_types[k][context]
            p = max(c - D, 0.0) / total + D * types / total * lower
        if len(self._cache) < 2_000_000:
            self._cache[key] = p
        return p

    def sentence_logprob(self, tokens: Sequence[str]) -> tuple[float, int]:
        seq = [BOS_LM] * (self.order - 1) + list(tokens) + [EOS]
        total = 0.0
        for i in range(self.order - 1, len(seq)):
            p = self.prob(seq[i], tuple(seq[i - self.order + 1:i]))
            if p <= 0:
                raise NumericDomainError(f"zero probability for {seq[i]!r}")
            total += math.log(p)
        return total, len(seq) - (self.order - 1)


def _discount(counts: dict) -> float:
    hist = Counter(counts.values())
    n1, n2 = hist.get(1, 0), hist.get(2, 0)
    if n1 == 0:
        return 0.5
    return n1 / (n1 + 2 * n2)


def kn_train(sentences: Sequence[Sequence[str]], order: int = 3) -> KneserNeyLM:
    if not sentences:
        raise ValidationError("empty LM training corpus")
    vocab = sorted({t for s in sentences for t in s} | {EOS, UNK})
    raw: dict = Counter()
    for s in sentences:
        seq = [BOS_LM] * (order - 1) + list(s) + [EOS]
        for i in range(order - 1, len(seq)):
            raw[(tuple(seq[i - order + 1:i]), seq[i])] += 1
    counts: list[dict] = [None] * order
    counts[order - 1] = dict(raw)
    # continuation counts: number of distinct left extensions of each lower-order n-gram
    for k in range(order - 2, -1, -1):
        cont: dict = Counter()
        for (ctx, w) in counts[k + 1]:
            cont[(ctx[1:], w)] += 1
        counts[k] = dict(cont)
    totals, types = [], []
    for k in range(order):
        t: dict = defaultdict(int)
        n: dict = defaultdict(int)
        for (ctx, w), c in counts[k].items():
            t[ctx] += c
            n[ctx] += 1
        totals.append(dict(t))
        types.append(dict(n))
    discounts = [_discount(counts[k]) for k in range(order)]
    return KneserNeyLM(order, vocab, counts, totals, types, discounts)


def kn_perplexity(lm: KneserNeyLM, sentences: Sequence[Sequence[str]]) -> float:
    if not sentences:
        raise ValidationError("no sentences to score")
    total, count = 0.0, 0
    for s in sentences:
        lp, n = lm.sentence_logprob(s)
        total += lp
        count += n
    return math.exp(-total / count)


# -- classifier ----------------------------------------------------------------------------

@dataclass
class EvalClassifier:
    model: TextClassifier
    vocab: Vocab
    valid_acc: float
    train_acc: float

    def predict(self, sentences) -> np.ndarray:
        return self.model.predict_proba(list(sentences), self.vocab).argmax(axis=1)


def train_eval_classifier(train: Corpus, valid: Corpus, vocab: Vocab, epochs: int = 3, seed: int = 0,
                          d_emb: int = 32, d_hidden: int = 32, batch_size: int = 32, lr: float = 3e-3) -> EvalClassifier:
    rng = np.random.default_rng([seed, 4])
    model = TextClassifier(len(vocab), d_emb, d_hidden, train.num_styles, rng)
    opt = Adam(model.parameters(), lr=lr)
    for epoch in range(epochs):
        erng = epoch_rng(seed + 7919, epoch)
        for rows in iterate_batches(len(train), batch_size, erng):
            b = make_batch([train.sentences[i] for i in rows], [train.labels[i] for i in rows], vocab)
            opt.zero_grad()
            loss = model.loss(b)
            loss.backward()
            opt.step()
    clf = EvalClassifier(model, vocab, 0.0, 0.0)
    clf.valid_acc = style_accuracy(clf, valid.sentences, valid.labels)
    clf.train_acc = style_accuracy(clf, train.sentences, train.labels)
    return clf


def save_eval_classifier(path, clf: EvalClassifier) -> None:
    from .autodiff.checkpoint import save_checkpoint

    m = clf.model
    meta = {"d_emb": int(m.embedding.weight.data.shape[1]), "d_hidden": m.body.rnn.d_hidden,
            "num_styles": int(m.body.head.weight.data.shape[1]), "valid_acc": clf.valid_acc, "train_acc": clf.train_acc}
    save_checkpoint(path, m.state_dict(), meta)


def load_eval_classifier(path, vocab: Vocab) -> EvalClassifier:
    from .autodiff.checkpoint import load_checkpoint

    arrays, meta = load_checkpoint(path)
    model = TextClassifier(len(vocab), meta["d_emb"], meta["d_hidden"], meta["num_styles"], np.random.default_rng(0))
    model.load_state_dict(arrays)
    return EvalClassifier(model, vocab, meta["valid_acc"], meta["train_acc"])


def style_accuracy(classifier: EvalClassifier, sentences, targets) -> float:
    if len(sentences) == 0:
        raise ValidationError("no sentences to classify")
    if len(sentences) != len(targets):
        raise ValidationError("one target label per sentence")
    pred = classifier.predict(sentences)
    return 100.0 * float(np.mean(pred == np.asarray(targets)))


# -- aggregate ----------------------------------------------------------------------------

def gm_score(acc: float, bleu_s: float, bleu_r: float, ppl: float) -> float:
    """(ACC * BLEU_s * BLEU_r / ln PPL) ** (1/4), percent-scale inputs."""
    for name, v in (("acc", acc), ("bleu_s", bleu_s), ("bleu_r", bleu_r)):
        if not v > 0:
            raise NumericDomainError(f"{name} must be > 0, got {v}")
    if not ppl > 1:
        raise NumericDomainError(f"ppl must be > 1, got {ppl}")
    return (acc * bleu_s * bleu_r / math.log(ppl)) ** 0.25


def safe_gm(acc, bleu_s, bleu_r, ppl) -> float:
    """GM, or 0 when some metric is at its floor (used for checkpoint ranking)."""
    try:
        return gm_score(acc, bleu_s, bleu_r, ppl)
    except NumericDomainError:
        return 0.0


@dataclass
class MetricsReport:
    system: str
    acc: float
    bleu_s: float
    bleu_r: float
    ppl: float
    gm: float
    identity_fraction: float | None = None
    classifier_valid_acc: float | None = None
    count: int = 0
    per_style: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


CSV_COLUMNS = ["system", "ACC", "BLEU_s", "BLEU_r", "PPL", "GM"]


def write_comparison_csv(path, reports: Sequence[MetricsReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in reports:
            w.writerow([r.system, f"{r.acc:.2f}", f"{r.bleu_s:.2f}", f"{r.bleu_r:.2f}", f"{r.ppl:.2f}", f"{r.gm:.2f}"])


def evaluate_run(system: str, outputs, sources: Corpus, targets, references, classifier: EvalClassifier,
                 lm: KneserNeyLM, identity: float | None = None) -> MetricsReport:
    """All metrics for transferred ``outputs`` of ``sources`` toward ``targets``.

    ``references`` may be None (BLEU_r is then reported as 0).
    """
    n = len(sources)
    if len(outputs) != n or len(targets) != n or (references is not None and len(references) != n):
        raise ValidationError(f"misaligned inputs: {len(outputs)} outputs for {n} sources")
    outputs = [list(o) for o in outputs]
    targets = np.asarray(targets)
    pred = classifier.predict(outputs)
    hit = pred == targets

    def block(rows):
        outs = [outputs[i] for i in rows]
        acc = 100.0 * float(hit[rows].mean())
        bs = bleu(outs, [sources.sentences[i] for i in rows])
        br = bleu(outs, [references[i] for i in rows]) if references is not None else 0.0
        ppl = kn_perplexity(lm, outs)
        return acc, bs, br, ppl

    acc, bs, br, ppl = block(np.arange(n))
    labels = np.asarray(sources.labels)
    per_style = {}
    for y in np.unique(labels):
        rows = np.flatnonzero(labels == y)
        a, b1, b2, p = block(rows)
        per_style[str(int(y))] = {"acc": a, "bleu_s": b1, "bleu_r": b2, "ppl": p, "count": int(rows.size)}
    return MetricsReport(system, acc, bs, br, ppl, safe_gm(acc, bs, br, ppl), identity,
                         classifier.valid_acc, n, per_style)
