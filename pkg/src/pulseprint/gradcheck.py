"""Finite-difference validation of analytic gradients.

Checks run in float64: central differences with a small step are meaningless
at float32 precision, so the caller must build the graph under test from
float64 tensors.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff
from .autodiff import Tensor


def numeric_gradient(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` with respect to ``t.data``.

    ``f`` is re-evaluated with individual elements of ``t.data`` perturbed in
    place, so it must be a pure function of the current tensor contents.
    """
    if t.dtype != np.float64:
        raise ValueError("numeric_gradient requires float64 tensors")
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    with autodiff.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
    return grad


def max_mismatch(analytic: np.ndarray, numeric: np.ndarray,
                 rel: float = 1e-4, abs_floor: float = 1e-6) -> float:
    """Largest excess over the tolerance max(abs_floor, rel * magnitude)."""
    diff = np.abs(analytic - numeric)
    tol = np.maximum(abs_floor, rel * np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((diff - tol).max())


def check_gradients(f: Callable[[], Tensor], tensors: Sequence[Tensor],
                    h: float = 1e-5, rel: float = 1e-4, abs_floor: float = 1e-6) -> None:
    """Assert analytic gradients of scalar ``f()`` match central differences.

    Each tensor in ``tensors`` must have requires_grad set; mismatches beyond
    max(abs_floor, rel * magnitude) raise an AssertionError naming the tensor
    index and the offending element.
    """
    autodiff.reset_tape()
    loss = f()
    autodiff.backward(loss)
    analytic = []
    for idx, t in enumerate(tensors):
        if not t.requires_grad:
            raise ValueError(f"tensor {idx} does not require grad")
        if t.grad is None:
            raise AssertionError(f"tensor {idx} received no gradient")
        analytic.append(t.grad.copy())
        t.grad = None
    for idx, t in enumerate(tensors):
        numeric = numeric_gradient(f, t, h=h)
        diff = np.abs(analytic[idx] - numeric)
        tol = np.maximum(abs_floor, rel * np.maximum(np.abs(analytic[idx]), np.abs(numeric)))
        if np.any(diff > tol):
            j = int(np.argmax(diff - tol))
            raise AssertionError(
                f"gradient mismatch for tensor {idx} at flat index {j}: "
                f"analytic {analytic[idx].reshape(-1)[j]:.8g}, "
                f"numeric {numeric.reshape(-1)[j]:.8g}")
