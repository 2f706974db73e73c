"""Adam with bias correction, plus a triangular cyclic learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericDomainError
from .tensor import Parameter


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Parameter], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """In-place Adam update.  Refuses to touch any parameter if a gradient is non-finite."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericDomainError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise NumericDomainError(f"gradient shape mismatch for {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)


class Adam:
    """Optimizer over a named parameter dict.  Parameters without a gradient
    are skipped (their moments are left untouched)."""

    def __init__(self, params: dict[str, Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    @property
    def steps(self) -> int:
        return self.state.step

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.state.m:
            out[f"m/{k}"] = self.state.m[k]
            out[f"v/{k}"] = self.state.v[k]
        return out

    def load_state_dict(self, arrays: dict[str, np.ndarray], step: int) -> None:
        self.state.m = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("m/")}
        self.state.v = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("v/")}
        self.state.step = step


def triangular_lr(step: int, base_lr: float, max_lr: float, step_size: int) -> float:
    """Triangular cyclic schedule: base -> max over ``step_size`` steps, then back."""
    cycle = np.floor(1 + step / (2 * step_size))
    x = abs(step / step_size - 2 * cycle + 1)
    return base_lr + (max_lr - base_lr) * max(0.0, 1.0 - x)
