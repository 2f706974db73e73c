import numpy as np
import pytest

from stylevar.autodiff.nn import LSTMCell, Linear, run_lstm
from stylevar.autodiff.tensor import Tensor, no_grad
from stylevar.autodiff import ops as T
from stylevar.data import SynthSpec, build_vocab, synth_generate
from stylevar.divergences import GaussianDiag, gaussian_kl_to_standard, optimal_log_ratio_gaussian
from stylevar.embedding import (Discriminators, EmbedConfig, EmbeddingSystem, EmbedModel, RsSystem, TermToggles,
                                adversarial_train_step, decode_logits, discriminator, discriminator_loss,
                                dump_latents, embedding_total_loss, encode_codes, kl_terms, mean_style_code,
                                rs_objective)
from stylevar.errors import ValidationError
from stylevar.seq import embed_steps, make_batch

SMALL = EmbedConfig(d_emb=8, d_enc=8, d_c=6, d_s=4, d_dec=12, batch_size=8)


@pytest.fixture(scope="module")
def task():
    data = synth_generate(SynthSpec(train_size=60, valid_size=10, test_size=10))
    tr = data.splits["train"]
    vocab = build_vocab(tr)
    rows = list(range(0, 60, 6))
    batch = make_batch([tr.sentences[i] for i in rows], [tr.labels[i] for i in rows], vocab)
    return data, vocab, batch


def test_default_dims_and_rates():
    cfg = EmbedConfig()
    assert (cfg.d_c, cfg.lr, cfg.disc_lr, cfg.disc_steps, cfg.batch_size) == (26, 1e-3, 5e-2, 5, 64)
    d = discriminator(26, np.random.default_rng(0))
    assert [l.weight.data.shape for l in d.layers] == [(26, 52), (52, 1)]


def test_toggles_contract():
    with pytest.raises(ValidationError):
        TermToggles(use_recon=False)
    with pytest.raises(ValidationError):
        TermToggles(gamma=-1.0)
    assert TermToggles().label() == "1+3+4+cls"
    assert TermToggles(use_js=False).label() == "1+3+cls"
    assert TermToggles(use_marginal_kl=False, use_js=False).label() == "1+cls"


def test_encode_shapes_bias_and_order(task):
    _, vocab, batch = task
    model = EmbedModel(len(vocab), 2, SMALL, np.random.default_rng(0))
    c, s = encode_codes(model, batch.tokens, batch.tok_mask)
    assert c.shape == (batch.size, SMALL.d_c) and s.shape == (batch.size, SMALL.d_s)
    model.content_head.weight.data[:] = 0.0
    model.content_head.bias.data[:] = np.arange(SMALL.d_c)
    c0, _ = encode_codes(model, batch.tokens, batch.tok_mask)
    assert np.allclose(c0.data, np.arange(SMALL.d_c))
    fresh = EmbedModel(len(vocab), 2, SMALL, np.random.default_rng(1))
    toks = batch.tokens[:1, :5].copy()
    swapped = toks.copy()
    swapped[0, [0, 3]] = swapped[0, [3, 0]]
    m = np.ones((1, 5))
    a = encode_codes(fresh, toks, m)[0].data
    b = encode_codes(fresh, swapped, m)[0].data
    assert not np.allclose(a, b)
    with pytest.raises(ValidationError):
        encode_codes(fresh, np.zeros((1, 0), dtype=int), np.zeros((1, 0)))


def test_decoder_with_zero_code_is_plain_lstm(task):
    _, vocab, batch = task
    rng = np.random.default_rng(2)
    model = EmbedModel(len(vocab), 2, SMALL, rng)
    dec = model.decoders[0]
    c = Tensor(np.zeros((batch.size, SMALL.d_c)))
    logits = decode_logits(model, c, 0, batch.dec_in, batch.dec_mask)
    assert logits.shape[:2] == batch.dec_in.shape
    # same LSTM without the code columns
    plain = LSTMCell(SMALL.d_emb, SMALL.d_dec, rng)
    plain.weight.data[...] = np.delete(dec.cell.weight.data, np.s_[SMALL.d_emb:SMALL.d_emb + SMALL.d_c], axis=0)
    plain.bias.data[...] = dec.cell.bias.data
    out = Linear(SMALL.d_dec, len(vocab), rng)
    out.weight.data[...] = dec.out.weight.data[:SMALL.d_dec]
    out.bias.data[...] = dec.out.bias.data
    hs, _ = run_lstm(plain, embed_steps(model.embedding, batch.dec_in), batch.dec_mask)
    ref = out(T.stack(hs, axis=1))
    assert np.allclose(logits.data, ref.data, atol=1e-12)
    with pytest.raises(ValidationError):
        decode_logits(model, c, 2, batch.dec_in, batch.dec_mask)


def test_gradient_reaches_code(task):
    _, vocab, batch = task
    model = EmbedModel(len(vocab), 2, SMALL, np.random.default_rng(3))
    c = Tensor(np.random.default_rng(0).normal(size=(batch.size, SMALL.d_c)), requires_grad=True)
    decode_logits(model, c, 1, batch.dec_in, batch.dec_mask).sum().backward()
    assert np.linalg.norm(c.grad) > 0


def test_loss_breakdown_and_toggles(task):
    _, vocab, batch = task
    model = EmbedModel(len(vocab), 2, SMALL, np.random.default_rng(4))
    discs = Discriminators(SMALL.d_c, 2, np.random.default_rng(5))
    full, terms = embedding_total_loss(model, batch, TermToggles(), discs)
    assert set(terms) == {"recon", "cls", "marginal_kl", "js"}
    assert float(full.data) == pytest.approx(sum(terms.values()), abs=1e-9)
    for off, key in [({"use_js": False}, "js"), ({"use_cls": False}, "cls")]:
        part, t2 = embedding_total_loss(model, batch, TermToggles(**off), discs)
        assert key not in t2
        assert float(part.data) == pytest.approx(float(full.data) - terms[key], abs=1e-9)
    ae, t_ae = embedding_total_loss(model, batch, TermToggles(use_marginal_kl=False, use_js=False, use_cls=False), discs)
    assert set(t_ae) == {"recon"} and float(ae.data) == pytest.approx(terms["recon"])
    # both KL terms together telescope to the per-style discriminators
    with no_grad():
        c, _ = encode_codes(model, batch.tokens, batch.tok_mask)
        per_style = discs.style_logits(c, batch.labels).data.mean()
    assert terms["marginal_kl"] + terms["js"] == pytest.approx(per_style, abs=1e-12)


def _grads(model, loss):
    model.zero_grad()
    loss.backward()
    return {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in model.parameters().items()}


def test_gamma_zero_matches_cls_off(task):
    _, vocab, batch = task
    model = EmbedModel(len(vocab), 2, SMALL, np.random.default_rng(6))
    discs = Discriminators(SMALL.d_c, 2, np.random.default_rng(7))
    a, _ = embedding_total_loss(model, batch, TermToggles(gamma=0.0), discs)
    ga = _grads(model, a)
    b, _ = embedding_total_loss(model, batch, TermToggles(use_cls=False), discs)
    gb = _grads(model, b)
    assert float(a.data) == pytest.approx(float(b.data), abs=1e-12)
    assert all(np.allclose(ga[k], gb[k], atol=1e-14) for k in ga)


class _AnalyticDisc:
    """Optimal discriminators for Gaussian codes: f = log q - log p."""

    def __init__(self, q):
        self.q = q

    def pooled(self, codes):
        return Tensor(optimal_log_ratio_gaussian(self.q, codes.data))

    def style_logits(self, codes, labels):
        return Tensor(optimal_log_ratio_gaussian(self.q, codes.data))


def test_kl_term_with_optimal_discriminator():
    q = GaussianDiag([0.8, -0.5, 0.0], [0.7, 1.2, 1.0])
    codes = Tensor(q.sample(200_000, np.random.default_rng(0)))
    labels = np.zeros(codes.shape[0], dtype=int)
    terms = kl_terms(codes, labels, _AnalyticDisc(q), TermToggles())
    assert float(terms["marginal_kl"].data) == pytest.approx(gaussian_kl_to_standard(q), abs=0.1)
    assert abs(float(terms["js"].data)) < 1e-12


def test_discriminator_indistinguishable_case():
    rng = np.random.default_rng(0)
    d = discriminator(4, rng)
    from stylevar.autodiff.optim import Adam
    opt = Adam(d.parameters(), lr=1e-3)
    losses = []
    for _ in range(2000):
        opt.zero_grad()
        loss = discriminator_loss(d, rng.standard_normal((64, 4)), rng.standard_normal((64, 4)))
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
    assert np.mean(losses[-200:]) == pytest.approx(2 * np.log(2), abs=0.15)


def test_schedule_counts(task):
    data, vocab, _ = task
    system = EmbeddingSystem(vocab, 2, SMALL, TermToggles(), seed=0)
    rng = np.random.default_rng(0)
    tr = data.splits["train"]
    log = system.train_step(tr, np.arange(8), 0, rng)
    assert system.disc_opt.steps == SMALL.disc_steps and system.opt.steps == 1
    assert {"disc", "grad_norm", "recon", "total"} <= set(log)
    quiet = EmbeddingSystem(vocab, 2, SMALL, TermToggles(use_marginal_kl=False, use_js=False), seed=0)
    quiet.train_step(tr, np.arange(8), 0, rng)
    assert quiet.disc_opt.steps == 0 and quiet.opt.steps == 1


def test_nan_loss_is_named(task):
    data, vocab, batch = task
    system = EmbeddingSystem(vocab, 2, SMALL, TermToggles(), seed=0)
    system.model.classifier.weight.data[0, 0] = np.nan
    from stylevar.errors import NumericDomainError
    with pytest.raises(NumericDomainError, match="cls"):
        adversarial_train_step(system, batch, [], np.random.default_rng(0))


def test_transfer_contracts(task):
    data, vocab, _ = task
    system = EmbeddingSystem(vocab, 2, SMALL, TermToggles(), seed=0)
    system.set_decode_length(8)
    te = data.splits["test"]
    greedy = system.transfer(te.sentences, [1 - y for y in te.labels])
    beam1 = system.transfer(te.sentences, [1 - y for y in te.labels], beam=1)
    assert greedy == beam1
    assert all(t not in ("<pad>", "<s>", "<mask>") for o in greedy for t in o)
    assert system.transfer(te.sentences, [1 - y for y in te.labels]) == greedy


def test_checkpoint_arrays_roundtrip(task):
    data, vocab, _ = task
    a = EmbeddingSystem(vocab, 2, SMALL, TermToggles(), seed=0)
    a.train_step(data.splits["train"], np.arange(8), 0, np.random.default_rng(0))
    b = EmbeddingSystem(vocab, 2, SMALL, TermToggles(), seed=9)
    b.load_arrays(a.arrays(), a.counters())
    assert all(np.array_equal(v, b.arrays()[k]) for k, v in a.arrays().items())


def test_rs_objective_and_transfer(task):
    data, vocab, batch = task
    tr = data.splits["train"]
    system = RsSystem(vocab, 2, SMALL, gamma=1.0, seed=0)
    system.attach_corpus(tr)
    loss, terms = rs_objective(system.model, make_batch(tr.sentences[:2], tr.labels[:2], vocab), system.discs, 1.0)
    assert np.isfinite(float(loss.data)) and set(terms) == {"recon", "kl_c", "kl_s", "cls"}
    _, no_cls = rs_objective(system.model, batch, system.discs, 0.0)
    assert "cls" not in no_cls
    system.model.classifier.weight.grad = None
    rs_objective(system.model, batch, system.discs, 0.0)[0].backward()
    assert system.model.classifier.weight.grad is None or not system.model.classifier.weight.grad.any()
    # the decoder reads s: zeroing the s-columns changes the logits
    dec = system.model.decoder
    code = Tensor(np.random.default_rng(0).normal(size=(batch.size, SMALL.d_s + SMALL.d_c)))
    before = dec.logits(system.model.embedding, code, batch.dec_in, batch.dec_mask).data
    dec.cell.weight.data[SMALL.d_emb:SMALL.d_emb + SMALL.d_s] = 0.0
    dec.out.weight.data[SMALL.d_dec:SMALL.d_dec + SMALL.d_s] = 0.0
    after = dec.logits(system.model.embedding, code, batch.dec_in, batch.dec_mask).data
    assert not np.allclose(before, after)
    m1 = mean_style_code(system, tr, 1)
    assert m1.shape == (SMALL.d_s,) and mean_style_code(system, tr, 1) is m1
    system.set_decode_length(6)
    te = data.splits["test"]
    out1 = system.transfer(te.sentences, [1] * len(te))
    assert out1 == system.transfer(te.sentences, [1] * len(te))
    only0 = type(tr)([s for s, y in zip(tr.sentences, tr.labels) if y == 0], [0] * 30, "train")
    with pytest.raises(ValidationError):
        mean_style_code(RsSystem(vocab, 2, SMALL, 1.0, 0), only0, 1)


def test_dump_latents(task, tmp_path):
    data, vocab, _ = task
    system = EmbeddingSystem(vocab, 2, SMALL, TermToggles(), seed=0)
    tr = data.splits["train"]
    rep = dump_latents(system, tr, tmp_path / "lat.csv")
    lines = (tmp_path / "lat.csv").read_text().splitlines()
    assert len(lines) == len(tr) + 1
    assert rep.majority == pytest.approx(100 * max(np.bincount(tr.labels)) / len(tr))
