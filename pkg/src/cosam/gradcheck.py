"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5, index=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``x``; only flat positions in ``index`` if given (others stay 0)."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if index is None else index:
        orig = flat[i]
        flat[i] = orig + eps
        hi = f().item()
        flat[i] = orig - eps
        lo = f().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """Worst elementwise |a - n| / max(|a|, |n|, floor)."""
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(
    f: Callable[[], Tensor],
    wrt: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    floor: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare backprop gradients of the scalar ``f()`` against central differences.

    ``wrt`` tensors are perturbed in place and restored.  With ``max_coords``
    set, larger tensors are probed at that many seeded random positions
    rather than everywhere.  Returns the worst relative error.
    """
    tensors = [wrt] if isinstance(wrt, Tensor) else list(wrt)
    saved = [t.grad for t in tensors]
    flags = [t.requires_grad for t in tensors]
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    try:
        backward(f())
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
        pick = np.random.default_rng(seed)
        worst = 0.0
        for t, a in zip(tensors, analytic):
            if max_coords is None or t.data.size <= max_coords:
                worst = max(worst, relative_error(a, numerical_grad(f, t, eps), floor))
                continue
            idx = np.sort(pick.choice(t.data.size, size=max_coords, replace=False))
            num = numerical_grad(f, t, eps, idx)
            worst = max(worst, relative_error(a.reshape(-1)[idx], num.reshape(-1)[idx], floor))
        return worst
    finally:
        for t, g, flag in zip(tensors, saved, flags):
            t.grad = g
            t.requires_grad = flag
