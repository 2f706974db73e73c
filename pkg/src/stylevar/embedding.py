"""Embedding-form model: continuous content code c and style code s.

Encoder: shared BiLSTM, two linear heads on the concatenated final states.
Decoders: one LSTM per style, c concatenated to every input embedding and to
every hidden state before the output projection.  A linear classifier on s
supplies the classification term, and discriminators estimate the KL of the
aggregated content posterior to the N(0, I) prior.

The RS variant keeps one decoder fed with [s; c] and transfers with the mean
style code of the target style.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import ops as T
from .autodiff.nn import MLP, BiLSTM, Embedding, Linear, LSTMCell, Module, cross_entropy, run_lstm
from .autodiff.optim import Adam
from .autodiff.tensor import Tensor, no_grad
from .data import Corpus, Vocab
from .errors import NumericDomainError, ValidationError
from .seq import Batch, decode, embed_steps, make_batch


@dataclass
class TermToggles:
    use_recon: bool = True
    use_marginal_kl: bool = True   # term (3)
    use_js: bool = True            # term (4)
    use_cls: bool = True
    gamma: float = 1.0

    def __post_init__(self):
        if not self.use_recon:
            raise ValidationError("the reconstruction term is the base objective and cannot be disabled")
        if self.gamma < 0:
            raise ValidationError("gamma must be non-negative")

    @property
    def uses_kl(self) -> bool:
        return self.use_marginal_kl or self.use_js

    def label(self) -> str:
        parts = ["1"]
        if self.use_marginal_kl:
            parts.append("3")
        if self.use_js:
            parts.append("4")
        s = "+".join(parts)
        return s + ("+cls" if self.use_cls else "")


@dataclass
class EmbedConfig:
    d_emb: int = 64
    d_enc: int = 64
    d_c: int = 26
    d_s: int = 26
    d_dec: int = 128
    lr: float = 1e-3
    disc_lr: float = 5e-2
    disc_steps: int = 5
    batch_size: int = 64
    max_len: int = 20


def discriminator(d: int, rng: np.random.Generator) -> MLP:
    """MLP d -> 2d -> 1 with ReLU."""
    return MLP([d, 2 * d, 1], rng)


class StyleDecoder(Module):
    """LSTM decoder conditioned on a code vector at every step."""

    def __init__(self, d_emb: int, d_code: int, d_hidden: int, vocab_size: int, rng: np.random.Generator):
        self.cell = LSTMCell(d_emb + d_code, d_hidden, rng)
        self.out = Linear(d_hidden + d_code, vocab_size, rng)
        self.d_code = d_code

    def logits(self, embedding: Embedding, code: Tensor, dec_in: np.ndarray, mask: np.ndarray) -> Tensor:
        """Teacher-forced logits (B, T, V)."""
        steps = embed_steps(embedding, dec_in)
        inputs = [T.concat([e, code], axis=-1) for e in steps]
        hs, _ = run_lstm(self.cell, inputs, mask)
        H = T.stack(hs, axis=1)
        B, L = dec_in.shape
        code_rep = T.stack([code] * L, axis=1)
        return self.out(T.concat([H, code_rep], axis=-1))

    def step_fn(self, embedding: Embedding):
        def step(prev: np.ndarray, state: tuple):
            h, c, code = state
            x = T.concat([embedding(prev), Tensor(code)], axis=-1)
            h2, c2 = self.cell(x, Tensor(h), Tensor(c))
            logits = self.out(T.concat([h2, Tensor(code)], axis=-1))
            return logits.data, (h2.data, c2.data, code)
        return step


class EmbedModel(Module):
    def __init__(self, vocab_size: int, num_styles: int, cfg: EmbedConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.num_styles = num_styles
        self.embedding = Embedding(vocab_size, cfg.d_emb, rng)
        self.encoder = BiLSTM(cfg.d_emb, cfg.d_enc, rng)
        self.content_head = Linear(2 * cfg.d_enc, cfg.d_c, rng)
        self.style_head = Linear(2 * cfg.d_enc, cfg.d_s, rng)
        self.decoders = [StyleDecoder(cfg.d_emb, cfg.d_c, cfg.d_dec, vocab_size, rng) for _ in range(num_styles)]
        self.classifier = Linear(cfg.d_s, num_styles, rng)

    def generator_params(self) -> dict:
        return self.parameters()


class Discriminators(Module):
    """One discriminator per style plus a pooled one (marginal-only estimate)."""

    def __init__(self, d_c: int, num_styles: int, rng: np.random.Generator):
        self.per_style = [discriminator(d_c, rng) for _ in range(num_styles)]
        self.pooled = discriminator(d_c, rng)

    def style_logits(self, codes: Tensor, labels: np.ndarray) -> Tensor:
        """f_{y_i}(c_i) for every row."""
        out = None
        for y, d in enumerate(self.per_style):
            sel = (labels == y).astype(np.float64)
            if not sel.any():
                continue
            f = d(codes).reshape(-1) * sel
            out = f if out is None else out + f
        return out if out is not None else Tensor(np.zeros(len(labels)))


# -- encoder / decoder -------------------------------------------------------------

def encode_codes(model: Module, tokens: np.ndarray, mask: np.ndarray) -> tuple[Tensor, Tensor]:
    if tokens.shape[1] == 0 or not mask.any(axis=1).all():
        raise ValidationError("every sentence must contain at least one token")
    _, final = model.encoder(embed_steps(model.embedding, tokens), mask)
    return model.content_head(final), model.style_head(final)


def decode_logits(model: EmbedModel, c: Tensor, y: int, dec_in: np.ndarray, dec_mask: np.ndarray) -> Tensor:
    if not 0 <= y < model.num_styles:
        raise ValidationError(f"style {y} out of range")
    return model.decoders[y].logits(model.embedding, c, dec_in, dec_mask)


def token_sum_nll(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Per-sentence summed token negative log-likelihood (B,)."""
    B, L, V = logits.shape
    nll = cross_entropy(logits.reshape(B * L, V), targets.reshape(-1)).reshape(B, L)
    return (nll * mask).sum(axis=1)


def reconstruction(model: EmbedModel, c: Tensor, batch: Batch) -> Tensor:
    """Mean over the batch of the token-sum reconstruction NLL under each row's own decoder."""
    total = None
    for y in range(model.num_styles):
        rows = np.flatnonzero(batch.labels == y)
        if rows.size == 0:
            continue
        logits = decode_logits(model, c[rows], y, batch.dec_in[rows], batch.dec_mask[rows])
        part = token_sum_nll(logits, batch.dec_out[rows], batch.dec_mask[rows]).sum()
        total = part if total is None else total + part
    return total / batch.size


def kl_terms(codes: Tensor, labels: np.ndarray, discs, toggles: TermToggles) -> dict[str, Tensor]:
    """Adversarial estimates of terms (3) and (4).

    (3) KL(q(c) || p(c))            ~ mean f_pooled(c)
    (4) JS over styles              ~ mean f_y(c) - mean f_pooled(c)
    Together they give E_y KL(q(c|y) || p(c)) ~ mean f_y(c).
    ``discs`` needs ``pooled`` and ``style_logits`` (analytic stand-ins are fine).
    """
    out = {}
    if not toggles.uses_kl:
        return out
    pooled = discs.pooled(codes).reshape(-1).mean()
    if toggles.use_marginal_kl:
        out["marginal_kl"] = pooled
    if toggles.use_js:
        out["js"] = discs.style_logits(codes, labels).mean() - pooled
    return out


def embedding_total_loss(model: EmbedModel, batch: Batch, toggles: TermToggles, discs) -> tuple[Tensor, dict[str, float]]:
    """Loss and an exact per-term breakdown (disabled terms are simply absent)."""
    c, s = encode_codes(model, batch.tokens, batch.tok_mask)
    terms: dict[str, Tensor] = {"recon": reconstruction(model, c, batch)}
    if toggles.use_cls:
        terms["cls"] = toggles.gamma * cross_entropy(model.classifier(s), batch.labels).mean()
    terms.update(kl_terms(c, batch.labels, discs, toggles))
    total = None
    for v in terms.values():
        total = v if total is None else total + v
    return total, {k: float(v.data) for k, v in terms.items()}


def discriminator_loss(disc: Module, real: np.ndarray, fake: np.ndarray) -> Tensor:
    """Negated objective E_real log sigma(f) + E_fake log(1 - sigma(f))."""
    f_real = disc(Tensor(real)).reshape(-1)
    f_fake = disc(Tensor(fake)).reshape(-1)
    return T.softplus(-f_real).mean() + T.softplus(f_fake).mean()


def all_discriminator_loss(discs: Discriminators, codes: np.ndarray, labels: np.ndarray,
                           rng: np.random.Generator, toggles: TermToggles) -> Tensor:
    losses = []
    fake = rng.standard_normal(codes.shape)
    losses.append(discriminator_loss(discs.pooled, codes, fake))
    if toggles.use_js:
        for y, d in enumerate(discs.per_style):
            rows = labels == y
            if rows.any():
                fake_y = rng.standard_normal((int(rows.sum()), codes.shape[1]))
                losses.append(discriminator_loss(d, codes[rows], fake_y))
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return total


def _check_finite(values: dict[str, float]) -> None:
    for k, v in values.items():
        if not np.isfinite(v):
            raise NumericDomainError(f"loss term {k!r} is not finite")


# -- system wrapper ------------------------------------------------------------------

class EmbeddingSystem:
    """Model, discriminators, optimizers and the training step."""

    family = "embedding"

    def __init__(self, vocab: Vocab, num_styles: int, cfg: EmbedConfig, toggles: TermToggles, seed: int):
        rng = np.random.default_rng([seed, 1])
        self.vocab = vocab
        self.cfg = cfg
        self.toggles = toggles
        self.model = EmbedModel(len(vocab), num_styles, cfg, rng)
        self.discs = Discriminators(cfg.d_c, num_styles, rng)
        self.opt = Adam(self.model.parameters(), lr=cfg.lr)
        self.disc_opt = Adam(self.discs.parameters(), lr=cfg.disc_lr)
        self.max_decode = None

    def set_decode_length(self, n: int) -> None:
        self.max_decode = n

    def batch(self, corpus: Corpus, rows) -> Batch:
        return make_batch([corpus.sentences[i] for i in rows], [corpus.labels[i] for i in rows],
                          self.vocab, self.cfg.max_len)

    total_epochs = None

    def begin_epoch(self, epoch: int, corpus: Corpus) -> None:
        pass

    def disc_batches(self, corpus: Corpus, size: int, rng: np.random.Generator):
        """Codes (no gradient) and labels for ``disc_steps`` fresh minibatches."""
        rows = rng.integers(0, len(corpus), size=self.cfg.disc_steps * size)
        b = self.batch(corpus, rows)
        with no_grad():
            codes = [encode_codes(self.model, b.tokens, b.tok_mask)[i].data for i in (0, 1)]
        return [(codes[0][k * size:(k + 1) * size], codes[1][k * size:(k + 1) * size],
                 b.labels[k * size:(k + 1) * size]) for k in range(self.cfg.disc_steps)]

    def train_step(self, corpus: Corpus, rows, epoch: int, rng: np.random.Generator) -> dict[str, float]:
        batch = self.batch(corpus, rows)
        disc_data = self.disc_batches(corpus, len(rows), rng) if self.uses_discriminators() else []
        return adversarial_train_step(self, batch, disc_data, rng)

    def uses_discriminators(self) -> bool:
        return self.toggles.uses_kl

    def transfer(self, sentences, targets, beam: int | None = None) -> list[list[str]]:
        return transfer_embedding(self, sentences, targets, beam)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"model/{k}": v for k, v in self.model.state_dict().items()}
        out.update({f"disc/{k}": v for k, v in self.discs.state_dict().items()})
        out.update({f"opt/{k}": v for k, v in self.opt.state_dict().items()})
        out.update({f"dopt/{k}": v for k, v in self.disc_opt.state_dict().items()})
        return out

    def counters(self) -> dict:
        return {"opt": self.opt.steps, "dopt": self.disc_opt.steps}

    def load_arrays(self, arrays: dict, counters: dict) -> None:
        pick = lambda p: {k[len(p):]: v for k, v in arrays.items() if k.startswith(p)}
        self.model.load_state_dict(pick("model/"))
        self.discs.load_state_dict(pick("disc/"))
        self.opt.load_state_dict(pick("opt/"), counters["opt"])
        self.disc_opt.load_state_dict(pick("dopt/"), counters["dopt"])


def adversarial_train_step(system: EmbeddingSystem, batch: Batch, disc_data, rng: np.random.Generator) -> dict[str, float]:
    """One discriminator update per entry of ``disc_data`` (frozen codes, labels),
    then one generator update on ``batch``."""
    toggles = system.toggles
    log: dict[str, float] = {}
    for codes, _, labels in disc_data:
        system.disc_opt.zero_grad()
        dl = all_discriminator_loss(system.discs, codes, labels, rng, toggles)
        _check_finite({"discriminator": float(dl.data)})
        dl.backward()
        system.disc_opt.step()
        log["disc"] = float(dl.data)
    system.opt.zero_grad()
    system.discs.zero_grad()
    loss, terms = embedding_total_loss(system.model, batch, toggles, system.discs)
    _check_finite(terms)
    loss.backward()
    system.discs.zero_grad()
    log["grad_norm"] = float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in system.opt.params.values()
                                         if p.grad is not None)))
    system.opt.step()
    log.update(terms)
    log["total"] = float(loss.data)
    return log


def transfer_embedding(system, sentences, targets, beam: int | None = None,
                       batch_size: int = 128) -> list[list[str]]:
    """Decode p(x | c(x), y_target) for every sentence."""
    model = system.model
    max_len = system.max_decode or int(np.ceil(1.5 * system.cfg.max_len))
    targets = np.asarray(targets)
    out: list[list[str] | None] = [None] * len(sentences)
    with no_grad():
        for start in range(0, len(sentences), batch_size):
            idx = np.arange(start, min(start + batch_size, len(sentences)))
            b = make_batch([sentences[i] for i in idx], targets[idx], system.vocab, system.cfg.max_len)
            c, _ = encode_codes(model, b.tokens, b.tok_mask)
            for y in np.unique(targets[idx]):
                rows = np.flatnonzero(targets[idx] == y)
                dec = model.decoders[int(y)]
                H = dec.cell.d_hidden
                state = (np.zeros((rows.size, H)), np.zeros((rows.size, H)), c.data[rows])
                ids = decode(dec.step_fn(model.embedding), state, rows.size, max_len, beam)
                for r, seq in zip(rows, ids):
                    out[idx[r]] = system.vocab.decode(seq)
    return out


# -- RS baseline -------------------------------------------------------------------

class RsModel(Module):
    def __init__(self, vocab_size: int, num_styles: int, cfg: EmbedConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.num_styles = num_styles
        self.embedding = Embedding(vocab_size, cfg.d_emb, rng)
        self.encoder = BiLSTM(cfg.d_emb, cfg.d_enc, rng)
        self.content_head = Linear(2 * cfg.d_enc, cfg.d_c, rng)
        self.style_head = Linear(2 * cfg.d_enc, cfg.d_s, rng)
        self.decoder = StyleDecoder(cfg.d_emb, cfg.d_s + cfg.d_c, cfg.d_dec, vocab_size, rng)
        self.classifier = Linear(cfg.d_s, num_styles, rng)


class RsDiscriminators(Module):
    def __init__(self, d_c: int, d_s: int, rng: np.random.Generator):
        self.content = discriminator(d_c, rng)
        self.style = discriminator(d_s, rng)


def rs_objective(model: RsModel, batch: Batch, discs: RsDiscriminators, gamma: float) -> tuple[Tensor, dict[str, float]]:
    c, s = encode_codes(model, batch.tokens, batch.tok_mask)
    code = T.concat([s, c], axis=-1)
    logits = model.decoder.logits(model.embedding, code, batch.dec_in, batch.dec_mask)
    terms = {
        "recon": token_sum_nll(logits, batch.dec_out, batch.dec_mask).mean(),
        "kl_c": discs.content(c).reshape(-1).mean(),
        "kl_s": discs.style(s).reshape(-1).mean(),
    }
    if gamma > 0:
        terms["cls"] = gamma * cross_entropy(model.classifier(s), batch.labels).mean()
    total = None
    for v in terms.values():
        total = v if total is None else total + v
    return total, {k: float(v.data) for k, v in terms.items()}


class RsSystem(EmbeddingSystem):
    family = "rs"

    def __init__(self, vocab: Vocab, num_styles: int, cfg: EmbedConfig, gamma: float, seed: int):
        rng = np.random.default_rng([seed, 1])
        self.vocab = vocab
        self.cfg = cfg
        self.gamma = gamma
        self.model = RsModel(len(vocab), num_styles, cfg, rng)
        self.discs = RsDiscriminators(cfg.d_c, cfg.d_s, rng)
        self.opt = Adam(self.model.parameters(), lr=cfg.lr)
        self.disc_opt = Adam(self.discs.parameters(), lr=cfg.disc_lr)
        self.max_decode = None
        self.style_means: dict[int, np.ndarray] = {}
        self._train: Corpus | None = None

    def attach_corpus(self, corpus: Corpus) -> None:
        self._train = corpus
        self.style_means = {}

    def uses_discriminators(self) -> bool:
        return True

    def train_step(self, corpus: Corpus, rows, epoch: int, rng: np.random.Generator) -> dict[str, float]:
        self.style_means = {}
        batch = self.batch(corpus, rows)
        for c, s, _ in self.disc_batches(corpus, len(rows), rng):
            self.disc_opt.zero_grad()
            dl = (discriminator_loss(self.discs.content, c, rng.standard_normal(c.shape))
                  + discriminator_loss(self.discs.style, s, rng.standard_normal(s.shape)))
            _check_finite({"discriminator": float(dl.data)})
            dl.backward()
            self.disc_opt.step()
        self.opt.zero_grad()
        loss, terms = rs_objective(self.model, batch, self.discs, self.gamma)
        _check_finite(terms)
        loss.backward()
        self.discs.zero_grad()
        self.opt.step()
        terms["disc"] = float(dl.data)
        terms["total"] = float(loss.data)
        return terms

    def transfer(self, sentences, targets, beam: int | None = None) -> list[list[str]]:
        if self._train is None:
            raise ValidationError("attach a training corpus before RS transfer")
        return rs_transfer(self, sentences, targets, self._train, beam)


def mean_style_code(system: RsSystem, corpus: Corpus, y: int, batch_size: int = 256) -> np.ndarray:
    if y in system.style_means:
        return system.style_means[y]
    rows = [i for i, l in enumerate(corpus.labels) if l == y]
    if not rows:
        raise ValidationError(f"no training sentences of style {y}")
    total = np.zeros(system.cfg.d_s)
    with no_grad():
        for start in range(0, len(rows), batch_size):
            chunk = rows[start:start + batch_size]
            b = make_batch([corpus.sentences[i] for i in chunk], [y] * len(chunk), system.vocab, system.cfg.max_len)
            _, s = encode_codes(system.model, b.tokens, b.tok_mask)
            total += s.data.sum(axis=0)
    system.style_means[y] = total / len(rows)
    return system.style_means[y]


def rs_transfer(system: RsSystem, sentences, targets, corpus: Corpus, beam: int | None = None) -> list[list[str]]:
    model = system.model
    max_len = system.max_decode or int(np.ceil(1.5 * system.cfg.max_len))
    targets = np.asarray(targets)
    out: list[list[str] | None] = [None] * len(sentences)
    with no_grad():
        b = make_batch(sentences, targets, system.vocab, system.cfg.max_len)
        c, _ = encode_codes(model, b.tokens, b.tok_mask)
        for y in np.unique(targets):
            rows = np.flatnonzero(targets == y)
            s_bar = np.tile(mean_style_code(system, corpus, int(y)), (rows.size, 1))
            code = np.concatenate([s_bar, c.data[rows]], axis=1)
            H = model.decoder.cell.d_hidden
            state = (np.zeros((rows.size, H)), np.zeros((rows.size, H)), code)
            ids = decode(model.decoder.step_fn(model.embedding), state, rows.size, max_len, beam)
            for r, seq in zip(rows, ids):
                out[r] = system.vocab.decode(seq)
    return out


# -- latent dump and linear probes ----------------------------------------------------

@dataclass
class ProbeReport:
    content_train: float
    content_test: float
    style_train: float
    style_test: float
    majority: float

    def to_dict(self) -> dict:
        return asdict(self)


def latent_codes(system, corpus: Corpus, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    cs, ss = [], []
    with no_grad():
        for start in range(0, len(corpus), batch_size):
            rows = range(start, min(start + batch_size, len(corpus)))
            b = make_batch([corpus.sentences[i] for i in rows], [corpus.labels[i] for i in rows],
                           system.vocab, system.cfg.max_len)
            c, s = encode_codes(system.model, b.tokens, b.tok_mask)
            cs.append(c.data)
            ss.append(s.data)
    return np.concatenate(cs), np.concatenate(ss)


def linear_probe(features: np.ndarray, labels: np.ndarray, seed: int = 0, test_frac: float = 0.3) -> tuple[float, float]:
    """Train/test accuracy (percent) of a logistic-regression probe."""
    from sklearn.linear_model import LogisticRegression

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    cut = int(round(len(labels) * (1 - test_frac)))
    tr, te = order[:cut], order[cut:]
    clf = LogisticRegression(max_iter=2000)
    clf.fit(features[tr], labels[tr])
    return 100.0 * clf.score(features[tr], labels[tr]), 100.0 * clf.score(features[te], labels[te])


def dump_latents(system, corpus: Corpus, path=None, seed: int = 0) -> ProbeReport:
    c, s = latent_codes(system, corpus)
    y = np.asarray(corpus.labels)
    if path is not None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"c{i}" for i in range(c.shape[1])] + [f"s{i}" for i in range(s.shape[1])] + ["y"])
            for ci, si, yi in zip(c, s, y):
                w.writerow([f"{v:.8g}" for v in ci] + [f"{v:.8g}" for v in si] + [int(yi)])
    c_tr, c_te = linear_probe(c, y, seed)
    s_tr, s_te = linear_probe(s, y, seed)
    majority = 100.0 * np.bincount(y).max() / len(y)
    return ProbeReport(c_tr, c_te, s_tr, s_te, majority)
