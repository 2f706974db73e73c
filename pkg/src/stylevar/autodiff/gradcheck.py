from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import NumericDomainError
from .tensor import Tensor


def numerical_grad(f: Callable[[], float], x: Tensor, eps: float) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericDomainError("function returned a non-finite value during grad_check")
        out[i] = (hi - lo) / (2 * eps)
    return grad


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps ``x`` to a scalar tensor.  ``x`` may be a model parameter that
    ``f`` reads implicitly; it is perturbed in place and restored.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    if not loss.is_valid():
        raise NumericDomainError("function returned NaN/Inf")
    loss.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    x.grad = None
    numeric = numerical_grad(lambda: float(f(x).data), x, eps)
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(rel.max()) if rel.size else 0.0


def grad_check_module(f: Callable[[], Tensor], params: dict, eps: float = 1e-5,
                      max_coords: int | None = None, rng: np.random.Generator | None = None) -> dict[str, float]:
    """``grad_check`` for every named parameter of a model-level loss ``f()``.

    With ``max_coords`` only that many randomly chosen coordinates per
    parameter are differenced (all coordinates otherwise).
    """
    for p in params.values():
        p.grad = None
    loss = f()
    if not loss.is_valid():
        raise NumericDomainError("loss is NaN/Inf")
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    for p in params.values():
        p.grad = None
    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        a = analytic[name].reshape(-1)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data)
            flat[i] = orig - eps
            lo = float(f().data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericDomainError(f"non-finite loss while perturbing {name}")
            num = (hi - lo) / (2 * eps)
            worst = max(worst, abs(a[i] - num) / (abs(a[i]) + abs(num) + 1e-12))
        errors[name] = worst
    return errors
