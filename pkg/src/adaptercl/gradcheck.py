"""Central finite-difference gradient verification."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from dominating."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def numeric_gradient(fn: Callable[[], Tensor], t: Tensor, eps: float) -> np.ndarray:
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn().item()
        flat[i] = orig - eps
        fm = fn().item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite value while perturbing coordinate {i}")
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def finite_difference_check(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` must rebuild the scalar output from the current contents of
    ``tensors`` on every call; each tensor is perturbed in place.
    """
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    out = fn()
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite output")
    out.backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.isfinite(analytic).all():
            raise FloatingPointError("non-finite analytic gradient")
        numeric = numeric_gradient(fn, t, eps)
        if analytic.size:
            worst = max(worst, float(relative_error(analytic, numeric).max()))
    return worst
