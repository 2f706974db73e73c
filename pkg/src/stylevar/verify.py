"""Oracle suite behind ``verify-math``: GM arithmetic against reported rows,
the exact ELBO decomposition on enumerable toy models, the mask-prior
algebra, and a trained discriminator against its analytic optimum.

``gradient_integrity`` grad-checks every training loss; it is slower and
runs separately (``verify-math --gradients``).
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ops as T
from .autodiff.gradcheck import grad_check_module
from .autodiff.nn import MLP
from .autodiff.optim import Adam
from .autodiff.tensor import Tensor
from .divergences import (DiscreteToyModel, GaussianDiag, MaskPrior, delta_mask_kl, delta_mask_kl_expanded,
                          enumerate_elbo_decomposition, enumerate_masks, mask_log_prior,
                          optimal_log_ratio_gaussian)
from .evaluation import gm_score
from .reported import ROWS


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    seconds: float = 0.0
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name}: worst {self.worst:.3g} (tolerance {self.tolerance:g}, {self.seconds:.1f}s)"

    def to_dict(self) -> dict:
        return asdict(self)


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def check_gm_rows(seed: int = 0, count: int = 10, tol: float = 0.02) -> CheckResult:
    """GM recomputed from (ACC, BLEU_s, BLEU_r, PPL) for randomly drawn reported rows."""
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(ROWS), size=min(count, len(ROWS)), replace=False)
    errs = {f"{ROWS[i][0]}/{ROWS[i][1]}": abs(gm_score(*ROWS[i][2:6]) - ROWS[i][6]) for i in picks}
    worst = max(errs.values())
    return CheckResult("gm-arithmetic", worst <= tol, worst, tol, detail={"rows": len(errs)})


@_timed
def check_elbo_decomposition(seed: int = 0, models: int = 200, tol: float = 1e-9) -> CheckResult:
    """|(MI + marginal KL + JS) - E KL(q(c|x) || p(c))| on random enumerable models."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(models):
        nx, ny, nc = int(rng.integers(1, 7)), int(rng.integers(1, 4)), int(rng.integers(1, 6))
        conc = float(rng.choice([0.3, 1.0, 3.0]))
        model = DiscreteToyModel.random(rng, nx, ny, nc, conc)
        res = enumerate_elbo_decomposition(model, atol=np.inf)
        worst = max(worst, res["residual"])
    return CheckResult("elbo-decomposition", worst <= tol, worst, tol, detail={"models": models})


@_timed
def check_mask_prior(seed: int = 0, masks: int = 1000, max_len: int = 12,
                     tol_forms: float = 1e-12, tol_sum: float = 1e-9) -> CheckResult:
    """Both forms of the point-mass mask KL agree; the prior sums to p(L) per length."""
    rng = np.random.default_rng(seed)
    lengths = list(range(1, max_len + 1))
    prior = MaskPrior.uniform_lengths(lengths, lambda L: float(rng.uniform(0.05, 0.95)))
    form_gap = 0.0
    for _ in range(masks):
        L = int(rng.integers(1, max_len + 1))
        m = rng.integers(0, 2, size=L)
        form_gap = max(form_gap, abs(delta_mask_kl(m, prior) - delta_mask_kl_expanded(m, prior)))
    sum_gap = 0.0
    for L in lengths:
        total = sum(np.exp(mask_log_prior(m, prior)) for m in enumerate_masks(L))
        sum_gap = max(sum_gap, abs(total - prior.length_probs[L]))
    passed = form_gap <= tol_forms and sum_gap <= tol_sum
    return CheckResult("mask-prior", passed, max(form_gap / tol_forms, sum_gap / tol_sum), 1.0,
                       detail={"forms_max_gap": form_gap, "hypercube_max_gap": sum_gap})


def train_density_ratio(q: GaussianDiag, steps: int = 3000, batch: int = 512, hidden: int = 32,
                        lr: float = 1e-2, seed: int = 0) -> MLP:
    """Logistic discriminator, q samples labelled real and N(0, I) samples fake."""
    rng = np.random.default_rng(seed)
    d = q.mean.size
    f = MLP([d, hidden, 1], rng)
    opt = Adam(f.parameters(), lr=lr)
    for step in range(steps):
        # step decay so the last iterates average out minibatch noise
        opt.lr = lr * (0.1 if step > 0.7 * steps else 1.0)
        real = Tensor(q.sample(batch, rng))
        fake = Tensor(rng.standard_normal((batch, d)))
        loss = T.softplus(-f(real)).mean() + T.softplus(f(fake)).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return f


@_timed
def check_optimal_discriminator(seed: int = 0, tol: float = 0.1) -> CheckResult:
    """Learned f(x) vs log q(x) - log p(x) = x - 1/2 for q = N(1, 1), p = N(0, 1)."""
    q = GaussianDiag([1.0], [1.0])
    f = train_density_ratio(q, seed=seed)
    grid = np.linspace(-3, 3, 61)[:, None]
    learned = f(Tensor(grid)).data.reshape(-1)
    target = optimal_log_ratio_gaussian(q, grid).reshape(-1)
    mae = float(np.mean(np.abs(learned - target)))
    return CheckResult("optimal-discriminator", mae <= tol, mae, tol,
                       detail={"max_abs_error": float(np.max(np.abs(learned - target)))})


def run_oracle_suite(seed: int = 0) -> list[CheckResult]:
    return [check_gm_rows(seed), check_elbo_decomposition(seed), check_mask_prior(seed),
            check_optimal_discriminator(seed)]


# -- gradient integrity -----------------------------------------------------------------

def _scale_params(module, rng: np.random.Generator, scale: float) -> None:
    """Re-draw every parameter so checks are not all taken at the same point."""
    for p in module.parameters().values():
        p.data[...] = rng.uniform(-scale, scale, size=p.data.shape)


def gradient_losses(seed: int):
    """(name, loss closure, parameters) for every training loss on a tiny model.

    Straight-through terms are checked through a surrogate whose forward value
    equals the hard mask and whose derivative is the soft path's, which is the
    gradient the estimator defines.
    """
    from .data import SynthSpec, build_vocab, synth_generate
    from .embedding import (Discriminators, EmbedConfig, EmbedModel, RsDiscriminators, RsModel, TermToggles,
                            discriminator_loss, embedding_total_loss, encode_codes, kl_terms, reconstruction,
                            rs_objective)
    from .prototype import (Infiller, ProtoConfig, RationaleSystem, collapsed_prototypes, infill_loss,
                            make_infill_batch)
    from .seq import make_batch
    from .autodiff.nn import cross_entropy

    rng = np.random.default_rng([seed, 99])
    data = synth_generate(SynthSpec(train_size=6, valid_size=2, test_size=2, min_len=3, max_len=5,
                                    content_vocab=8, markers_per_style=2, seed=seed))
    tr = data.splits["train"]
    vocab = build_vocab(tr)
    batch = make_batch(tr.sentences[:4], tr.labels[:4], vocab)
    ecfg = EmbedConfig(d_emb=4, d_enc=3, d_c=3, d_s=2, d_dec=4)
    model = EmbedModel(len(vocab), 2, ecfg, rng)
    discs = Discriminators(ecfg.d_c, 2, rng)
    _scale_params(model, rng, 0.8)
    _scale_params(discs, rng, 0.8)
    on = TermToggles()
    out = []

    def codes():
        return encode_codes(model, batch.tokens, batch.tok_mask)

    out.append(("embed/recon", lambda: reconstruction(model, codes()[0], batch), model.parameters()))
    out.append(("embed/cls", lambda: cross_entropy(model.classifier(codes()[1]), batch.labels).mean(),
                model.parameters()))
    out.append(("embed/marginal_kl", lambda: kl_terms(codes()[0], batch.labels, discs, on)["marginal_kl"],
                model.parameters()))
    out.append(("embed/js", lambda: kl_terms(codes()[0], batch.labels, discs, on)["js"], model.parameters()))
    out.append(("embed/total", lambda: embedding_total_loss(model, batch, on, discs)[0], model.parameters()))
    real = rng.standard_normal((5, ecfg.d_c)) + 0.5
    fake = rng.standard_normal((5, ecfg.d_c))
    out.append(("embed/discriminator", lambda: discriminator_loss(discs.per_style[0], real, fake),
                discs.per_style[0].parameters()))

    rs = RsModel(len(vocab), 2, ecfg, rng)
    rs_discs = RsDiscriminators(ecfg.d_c, ecfg.d_s, rng)
    _scale_params(rs, rng, 0.8)
    _scale_params(rs_discs, rng, 0.8)
    out.append(("rs/objective", lambda: rs_objective(rs, batch, rs_discs, 1.0)[0], rs.parameters()))

    pcfg = ProtoConfig(d_emb=4, d_mask=3, d_cls=3, d_infill=4)
    rat = RationaleSystem(len(vocab), 2, pcfg, rng)
    _scale_params(rat, rng, 0.8)
    st_loss = _straight_through_surrogate(rat, batch, pcfg)
    out.append(("proto/rationale_cls", lambda: st_loss("cls"), rat.parameters()))
    out.append(("proto/rationale_compact", lambda: st_loss("compact"), rat.parameters()))

    infiller = Infiller(len(vocab), 2, pcfg, rng)
    _scale_params(infiller, rng, 0.8)
    masks = [[int(v) for v in rng.integers(0, 2, size=len(s))] for s in tr.sentences[:4]]
    ib = make_infill_batch(tr.sentences[:4], collapsed_prototypes(tr.sentences[:4], masks), tr.labels[:4], vocab)
    out.append(("proto/infill", lambda: infill_loss(infiller, ib)[0], infiller.parameters()))
    return out


def _straight_through_surrogate(rat, batch, cfg):
    """Loss closures with c = hard0 + l(theta) - l(theta0) in place of the ST op."""
    from .autodiff import ops

    l0 = rat.masker.soft(batch.tokens, batch.tok_mask).data.copy()
    hard0 = (l0 > 0.5).astype(np.float64)
    original = ops.straight_through

    def surrogate(l, threshold):
        return l + Tensor(hard0 - l0)

    def term(name):
        ops.straight_through = surrogate
        try:
            return _rationale_term(rat, batch, cfg, name)
        finally:
            ops.straight_through = original

    return term


def _rationale_term(rat, batch, cfg, name):
    from .autodiff.nn import cross_entropy
    from .prototype import mask_forward

    c, _ = mask_forward(rat.masker, batch.tokens, batch.tok_mask)
    s = (1.0 - c) * batch.tok_mask
    if name == "cls":
        return cfg.gamma * cross_entropy(rat.style_logits(batch.tokens, batch.tok_mask, s), batch.labels).mean()
    return cfg.alpha * (s.sum(axis=1) / batch.tok_mask.sum(axis=1)).mean()


def gradient_integrity(points: int = 10, max_coords: int = 6, eps: float = 1e-4,
                       tol: float = 1e-4) -> CheckResult:
    """Max relative backprop-vs-central-difference error over every loss at ``points`` random points."""
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in range(points):
        for name, f, params in gradient_losses(seed):
            errs = grad_check_module(f, params, eps=eps, max_coords=max_coords,
                                     rng=np.random.default_rng(seed))
            worst[name] = max(worst.get(name, 0.0), max(errs.values()))
    top = max(worst.values())
    return CheckResult("gradient-integrity", top <= tol, top, tol, time.perf_counter() - t0, detail=worst)
