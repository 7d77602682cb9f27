"""Central finite-difference gradient checks for float64 graphs."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numerical_grad(f: Callable[[], Tensor], p: Tensor, h: float = 1e-5, idx=None) -> np.ndarray:
    """(f(p + h e_i) - f(p - h e_i)) / 2h for each flat index in ``idx`` (default all)."""
    flat = p.data.reshape(-1)
    if not flat.flags.writeable:
        p.data = p.data.copy()
        flat = p.data.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = np.zeros(flat.size)
    with T.no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return out.reshape(p.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """max |a - n| / max(|a|, |n|, floor) over the compared entries.

    The floor keeps finite-difference noise (around 1e-10 at h = 1e-5) on a
    structurally zero gradient, such as an attention key bias, from reading
    as a large relative error.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(f: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> dict[str, float]:
    """Relative error between backprop and finite differences for each named tensor.

    With ``max_entries`` only a random subset of each tensor's entries is
    perturbed; the comparison is restricted to that subset.
    """
    rng = rng or np.random.default_rng(0)
    T.zero_grads(params.values())
    loss = f()
    T.backward(loss)
    errors = {}
    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        n = p.size
        if max_entries is not None and n > max_entries:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            idx = np.arange(n)
        numeric = numerical_grad(f, p, h, idx)
        errors[name] = relative_error(analytic.reshape(-1)[idx], numeric.reshape(-1)[idx])
    T.zero_grads(params.values())
    return errors
