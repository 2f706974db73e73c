"""Layers built from the tensor ops: embeddings, linear heads, LSTMs, attention, MLPs."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from ..errors import DimensionError
from . import tensor as T
from .tensor import Parameter, Tensor

INIT_SCALE = 0.08


class Module:
    """Parameter container.  Attributes holding a ``Parameter``, a ``Module``
    or a list of modules are discovered in insertion order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise DimensionError(f"{k}: checkpoint shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)


def uniform(rng: np.random.Generator, shape, scale: float = INIT_SCALE) -> Parameter:
    return Parameter(rng.uniform(-scale, scale, size=shape))


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator, scale: float = 0.1):
        self.weight = uniform(rng, (num, dim), scale)

    def __call__(self, ids) -> Tensor:
        return T.embed_lookup(self.weight, ids)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, scale: float = INIT_SCALE):
        self.weight = uniform(rng, (d_in, d_out), scale)
        self.bias = Parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class MLP(Module):
    """Linear -> ReLU -> ... -> Linear.  ``dims`` lists every layer width."""

    def __init__(self, dims: list[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


class LSTMCell(Module):
    """Gate order i, f, g, o over a single fused weight for [x; h]."""

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        self.d_in = d_in
        self.d_hidden = d_hidden
        self.weight = uniform(rng, (d_in + d_hidden, 4 * d_hidden))
        bias = np.zeros(4 * d_hidden)
        bias[d_hidden:2 * d_hidden] = 1.0
        self.bias = Parameter(bias)

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        return lstm_step(x, h, c, self.weight, self.bias)

    def zero_state(self, batch: int) -> tuple[Tensor, Tensor]:
        z = np.zeros((batch, self.d_hidden))
        return Tensor(z), Tensor(z)


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, weight: Tensor, bias: Tensor):
    """One LSTM step: returns (h_t, c_t)."""
    H = h_prev.shape[-1]
    if weight.shape != (x.shape[-1] + H, 4 * H) or c_prev.shape != h_prev.shape:
        raise DimensionError(
            f"lstm_step: x {x.shape}, h {h_prev.shape}, c {c_prev.shape}, W {weight.shape}")
    z = T.concat([x, h_prev], axis=-1) @ weight + bias
    i = T.sigmoid(z[..., 0:H])
    f = T.sigmoid(z[..., H:2 * H])
    g = T.tanh(z[..., 2 * H:3 * H])
    o = T.sigmoid(z[..., 3 * H:4 * H])
    c = f * c_prev + i * g
    h = o * T.tanh(c)
    return h, c


def run_lstm(cell: LSTMCell, inputs: list[Tensor], mask: np.ndarray | None = None,
             reverse: bool = False, state=None):
    """Unroll ``cell`` over ``inputs`` (list of (B, d) tensors).

    ``mask`` is (B, T) with 1 for real tokens; padded steps carry the previous
    state through unchanged, so the final state of each row is the state at
    its true last token (first token when ``reverse``).
    Returns (per-step hidden states in input order, (h, c) final).
    """
    B = inputs[0].shape[0]
    h, c = state if state is not None else cell.zero_state(B)
    steps = range(len(inputs) - 1, -1, -1) if reverse else range(len(inputs))
    outputs: list[Tensor | None] = [None] * len(inputs)
    for t in steps:
        h_new, c_new = cell(inputs[t], h, c)
        if mask is not None and not mask[:, t].all():
            m = mask[:, t:t + 1].astype(np.float64)
            h = h_new * m + h * (1.0 - m)
            c = c_new * m + c * (1.0 - m)
        else:
            h, c = h_new, c_new
        outputs[t] = h
    return outputs, (h, c)


class BiLSTM(Module):
    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        self.fwd = LSTMCell(d_in, d_hidden, rng)
        self.bwd = LSTMCell(d_in, d_hidden, rng)
        self.d_hidden = d_hidden

    def __call__(self, inputs: list[Tensor], mask: np.ndarray | None = None):
        """Returns (per-step [h_fwd; h_bwd] states, concat of both final states)."""
        out_f, (hf, _) = run_lstm(self.fwd, inputs, mask)
        out_b, (hb, _) = run_lstm(self.bwd, inputs, mask, reverse=True)
        steps = [T.concat([a, b], axis=-1) for a, b in zip(out_f, out_b)]
        return steps, T.concat([hf, hb], axis=-1)


def masked_fill_bias(mask: np.ndarray) -> np.ndarray:
    """Additive score bias: 0 on valid positions, a large negative on padding."""
    return np.where(mask > 0, 0.0, -1e9)


class BilinearAttention(Module):
    """score(h, e_s) = h^T W e_s, softmax over valid source positions."""

    def __init__(self, d_query: int, d_key: int, rng: np.random.Generator):
        self.weight = uniform(rng, (d_key, d_query))

    def keys(self, memory: Tensor) -> Tensor:
        # (B, S, d_key) -> (B, S, d_query); computed once per source batch
        return memory @ self.weight

    def __call__(self, query: Tensor, keys: Tensor, memory: Tensor, bias: np.ndarray):
        B, H = query.shape
        scores = (keys @ query.reshape(B, H, 1)).reshape(B, keys.shape[1]) + bias
        weights = T.softmax(scores, axis=-1)
        context = (weights.reshape(B, 1, -1) @ memory).reshape(B, memory.shape[-1])
        return context, weights


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row negative log-likelihood of integer targets (no reduction)."""
    return -T.gather_last(T.log_softmax(logits, axis=-1), targets)
