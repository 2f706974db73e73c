"""Closed-form densities and divergences, and exact enumeration oracles.

All logarithms are natural.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import NumericDomainError, ValidationError

LOG_2PI = np.log(2 * np.pi)


@dataclass
class GaussianDiag:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.std = np.atleast_1d(np.asarray(self.std, dtype=np.float64))
        if self.mean.shape != self.std.shape:
            raise ValidationError("mean and std dimensions differ")
        if np.any(~(self.std > 0)):
            raise NumericDomainError("standard deviations must be strictly positive")

    def log_density(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        z = (x - self.mean) / self.std
        return -0.5 * np.sum(z * z + LOG_2PI + 2 * np.log(self.std), axis=-1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal((n, self.mean.size))


def standard_normal_log_density(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return -0.5 * np.sum(x * x + LOG_2PI, axis=-1)


def gaussian_kl_to_standard(q: GaussianDiag) -> float:
    """KL(q || N(0, I)) = sum_i (mu_i^2 + sigma_i^2 - 1 - 2 log sigma_i) / 2."""
    mu, s = q.mean, q.std
    if np.any(~(s > 0)):
        raise NumericDomainError("sigma must be > 0")
    return float(0.5 * np.sum(mu * mu + s * s - 1.0 - 2.0 * np.log(s)))


def optimal_log_ratio_gaussian(q: GaussianDiag, x) -> np.ndarray:
    """log q(x) - log N(x; 0, I): the logit of the Bayes-optimal discriminator
    separating samples of q (label 1) from prior samples (label 0)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or (x.ndim == 1 and q.mean.size > 1):
        x = x.reshape(1, -1) if x.ndim else x.reshape(1, 1)
    elif x.ndim == 1:
        x = x[:, None]
    return q.log_density(x) - standard_normal_log_density(x)


# -- mask prior -------------------------------------------------------------------

@dataclass
class MaskPrior:
    """Product-Bernoulli prior over binary masks with a length distribution.

    ``rates[L]`` is the Bernoulli rate for masks of length ``L`` and
    ``length_probs[L]`` is p(L).
    """
    rates: dict[int, float]
    length_probs: dict[int, float]

    def __post_init__(self):
        for L, r in self.rates.items():
            if not 0.0 < r < 1.0:
                raise ValidationError(f"rate for length {L} must lie in (0, 1), got {r}")
        total = sum(self.length_probs.values())
        if abs(total - 1.0) > 1e-12:
            raise ValidationError(f"length probabilities sum to {total}, not 1")
        if set(self.length_probs) - set(self.rates):
            raise ValidationError("every supported length needs a rate")

    @classmethod
    def uniform_lengths(cls, lengths: Sequence[int], rate) -> "MaskPrior":
        """Uniform p(L) over ``lengths``; ``rate`` is a constant or a callable of L."""
        lengths = sorted(set(int(L) for L in lengths))
        rates = {L: float(rate(L) if callable(rate) else rate) for L in lengths}
        p = 1.0 / len(lengths)
        probs = {L: p for L in lengths}
        # absorb rounding so the probabilities sum to exactly one
        probs[lengths[-1]] = 1.0 - p * (len(lengths) - 1)
        return cls(rates, probs)

    @classmethod
    def from_alpha(cls, lengths: Sequence[int], alpha: float) -> "MaskPrior":
        """Rates implied by the compactness weight: alpha = -L log((1 - r_L) / r_L)."""
        return cls.uniform_lengths(lengths, lambda L: rate_from_alpha(alpha, L))

    def _check(self, mask) -> tuple[np.ndarray, int]:
        m = np.asarray(mask)
        if not np.all((m == 0) | (m == 1)):
            raise ValidationError("mask entries must be 0 or 1")
        L = int(m.size)
        if L not in self.length_probs or self.length_probs[L] <= 0:
            raise NumericDomainError(f"length {L} outside the prior's support")
        return m.astype(np.float64), L


def rate_from_alpha(alpha: float, length: int) -> float:
    """Invert alpha = -L log((1 - r)/r):  r = 1 / (1 + exp(-alpha / L))."""
    return float(1.0 / (1.0 + np.exp(-alpha / length)))


def alpha_from_rate(rate: float, length: int) -> float:
    return float(-length * np.log((1.0 - rate) / rate))


def mask_log_prior(mask, prior: MaskPrior) -> float:
    """log p(L) + sum_t [m_t log r_L + (1 - m_t) log(1 - r_L)]."""
    m, L = prior._check(mask)
    r = prior.rates[L]
    return float(np.log(prior.length_probs[L]) + np.sum(m * np.log(r) + (1 - m) * np.log(1 - r)))


def delta_mask_kl(mask, prior: MaskPrior) -> float:
    """KL from a point-mass posterior on ``mask`` to the prior: -log p(mask)."""
    return -mask_log_prior(mask, prior)


def delta_mask_kl_expanded(mask, prior: MaskPrior) -> float:
    """Same quantity, written as log((1-r)/r) * sum(m) - log p(L) - L log(1-r)."""
    m, L = prior._check(mask)
    r = prior.rates[L]
    return float(np.log((1 - r) / r) * m.sum() - np.log(prior.length_probs[L]) - L * np.log(1 - r))


def style_mask_coefficient(prior: MaskPrior, length: int) -> float:
    """Coefficient of sum(style mask) in the KL once content = 1 - style: log(r/(1-r))."""
    r = prior.rates[length]
    return float(np.log(r / (1 - r)))


# -- Jensen-Shannon ----------------------------------------------------------------

def _kl_finite(p: np.ndarray, q: np.ndarray) -> float:
    nz = p > 0
    if np.any(q[nz] <= 0):
        raise NumericDomainError("KL: p puts mass where q has none")
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


def general_js(dists, weights) -> float:
    """sum_y w_y KL(p_y || sum_y' w_y' p_y').

    ``dists`` is either a list of probability vectors over one common support,
    or a list of :class:`GaussianDiag` (then a Monte-Carlo estimate with a
    fixed seed is returned).
    """
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValidationError("weights must be positive and sum to 1")
    if len(dists) != len(w):
        raise ValidationError("one weight per distribution")
    if isinstance(dists[0], GaussianDiag):
        return _general_js_gaussian(dists, w)
    ps = [np.asarray(p, dtype=np.float64) for p in dists]
    if len({p.shape for p in ps}) != 1:
        raise NumericDomainError("distributions do not share a support")
    for p in ps:
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValidationError("each distribution must be a probability vector")
    mix = sum(wi * p for wi, p in zip(w, ps))
    return float(sum(wi * _kl_finite(p, mix) for wi, p in zip(w, ps)))


def _general_js_gaussian(dists: Sequence[GaussianDiag], w: np.ndarray, n: int = 200_000,
                         seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    total = 0.0
    for wi, d in zip(w, dists):
        x = d.sample(n, rng)
        log_mix = np.logaddexp.reduce(
            np.stack([np.log(wj) + dj.log_density(x) for wj, dj in zip(w, dists)]), axis=0)
        total += wi * float(np.mean(d.log_density(x) - log_mix))
    return total


# -- discrete toy model and the decomposition ---------------------------------------

@dataclass
class DiscreteToyModel:
    """Finite x, y, c.  Tables: prior p(c) (C,), decoder p(x|c,y) (C, Y, X),
    encoder q(c|x) (X, C), data p_D(x, y) (X, Y)."""
    prior: np.ndarray
    decoder: np.ndarray
    encoder: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        self.prior = np.asarray(self.prior, dtype=np.float64)
        self.decoder = np.asarray(self.decoder, dtype=np.float64)
        self.encoder = np.asarray(self.encoder, dtype=np.float64)
        self.data = np.asarray(self.data, dtype=np.float64)
        C, = self.prior.shape
        X, Y = self.data.shape
        if self.decoder.shape != (C, Y, X) or self.encoder.shape != (X, C):
            raise ValidationError("table shapes are inconsistent")
        if X * Y * C > 10 ** 6:
            raise ValidationError("model too large to enumerate")
        for name, table, axis in (("prior", self.prior, -1), ("decoder", self.decoder, -1),
                                  ("encoder", self.encoder, -1)):
            if np.any(table < 0) or np.any(np.abs(table.sum(axis=axis) - 1.0) > 1e-12):
                raise ValidationError(f"{name} rows must sum to 1")
        if np.any(self.data < 0) or abs(self.data.sum() - 1.0) > 1e-12:
            raise ValidationError("data table must sum to 1")
        if np.any(self.prior <= 0):
            raise ValidationError("prior must have full support")

    @property
    def sizes(self) -> tuple[int, int, int]:
        X, Y = self.data.shape
        return X, Y, self.prior.shape[0]

    @classmethod
    def random(cls, rng: np.random.Generator, nx: int, ny: int, nc: int,
               concentration: float = 1.0) -> "DiscreteToyModel":
        def simplex(*shape):
            return rng.dirichlet(np.full(shape[-1], concentration), size=shape[:-1])

        prior = rng.dirichlet(np.full(nc, concentration))
        prior = np.maximum(prior, 1e-6)
        prior /= prior.sum()
        data = rng.dirichlet(np.ones(nx * ny)).reshape(nx, ny)
        return cls(prior, simplex(nc, ny, nx), simplex(nx, nc), data)

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k).tolist() for k in ("prior", "decoder", "encoder", "data")})

    @classmethod
    def from_json(cls, text: str) -> "DiscreteToyModel":
        return cls(**{k: np.array(v) for k, v in json.loads(text).items()})


def _xlogy_ratio(p: np.ndarray, num: np.ndarray, den: np.ndarray) -> float:
    """sum p * log(num / den) over entries where p > 0."""
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(num[nz]) - np.log(den[nz]))))


def enumerate_elbo_decomposition(model: DiscreteToyModel, atol: float = 1e-9) -> dict[str, float]:
    """Exact sums for the four terms of the decomposed ELBO and the undecomposed KL.

    recon       E_{p_D(x,y) q(c|x)} [-log p(x|c,y)]
    mi          E_{p_D(y)} [I(x; c)] under q(c, x | y) = q(c|x) p_D(x|y)
    marginal_kl KL(q(c) || p(c)) with q(c) = E_{p_D(y)} q(c|y)
    js          generalised JS of {q(c|y)} weighted by p_D(y)
    lhs_elbo_kl E_{p_D(x,y)} KL(q(c|x) || p(c))
    """
    X, Y, C = model.sizes
    pd_xy = model.data
    pd_y = pd_xy.sum(axis=0)
    q = model.encoder  # (X, C)

    # reconstruction term
    joint = pd_xy[:, :, None] * q[:, None, :]               # (X, Y, C)
    dec = np.transpose(model.decoder, (2, 1, 0))             # (X, Y, C) = p(x|c,y)
    recon = -_xlogy_ratio(joint, dec, np.ones_like(dec))

    # aggregated posteriors
    y_live = pd_y > 0
    pd_x_given_y = np.where(y_live, pd_xy / np.where(y_live, pd_y, 1.0), 0.0)  # (X, Y)
    q_c_given_y = pd_x_given_y.T @ q                         # (Y, C)
    q_c = pd_y @ q_c_given_y                                 # (C,)

    mi = 0.0
    for y in range(Y):
        if not y_live[y]:
            continue
        q_cx = pd_x_given_y[:, y][:, None] * q               # q(c, x | y)
        denom = q_c_given_y[y][None, :] * pd_x_given_y[:, y][:, None]
        mi += pd_y[y] * _xlogy_ratio(q_cx, q_cx, denom)

    marginal_kl = _xlogy_ratio(q_c, q_c, model.prior)
    live = [y for y in range(Y) if y_live[y]]
    js = general_js([q_c_given_y[y] for y in live], pd_y[live] / pd_y[live].sum()) if len(live) > 1 else 0.0

    lhs = 0.0
    for x in range(X):
        px = pd_xy[x].sum()
        if px > 0:
            lhs += px * _xlogy_ratio(q[x], q[x], model.prior)

    out = {"recon": recon, "mi": mi, "marginal_kl": marginal_kl, "js": js, "lhs_elbo_kl": lhs}
    residual = abs(mi + marginal_kl + js - lhs)
    out["residual"] = residual
    if residual > atol:
        raise AssertionError(f"decomposition residual {residual:.3e} exceeds {atol:.1e}")
    return out


def brute_force_js(dists: Sequence[np.ndarray], weights: Sequence[float]) -> float:
    """Definition expansion term by term with explicit loops (oracle for ``general_js``)."""
    total = 0.0
    K = len(dists[0])
    for wy, py in zip(weights, dists):
        for k in range(K):
            if py[k] == 0:
                continue
            mix = 0.0
            for wj, pj in zip(weights, dists):
                mix += wj * pj[k]
            total += wy * py[k] * np.log(py[k] / mix)
    return float(total)


def enumerate_masks(length: int):
    return itertools.product((0, 1), repeat=length)
