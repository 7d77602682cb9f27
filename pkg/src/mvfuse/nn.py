"""Parameter containers and layers built on :mod:`mvfuse.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Registers Tensor and Module attributes so parameters can be enumerated by name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
            self._modules.pop(name, None)
        elif isinstance(value, Module):
            self._modules[name] = value
            self._params.pop(name, None)
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def state_dict(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def trainable(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.named_parameters() if p.requires_grad}

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())


class ModuleList(Module):
    def __init__(self, items):
        super().__init__()
        for i, m in enumerate(items):
            setattr(self, str(i), m)

    def __getitem__(self, i: int) -> Module:
        return self._modules[str(i)]

    def __len__(self) -> int:
        return len(self._modules)

    def __iter__(self):
        return iter(self._modules.values())


class Linear(Module):
    """y = x W^T + b with W stored as [d_out, d_in]."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, std: float | None = None):
        super().__init__()
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.d_in, self.d_out = d_in, d_out
        self.weight = Tensor(rng.normal(0.0, std, size=(d_out, d_in)), requires_grad=True)
        if bias:
            self.bias = Tensor(np.zeros(d_out), requires_grad=True)
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight.T)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[..., L, D] -> [..., H, L, D/H]"""
    *lead, L, D = x.shape
    x = x.reshape(*lead, L, n_heads, D // n_heads)
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return x.transpose(*axes)


def merge_heads(x: Tensor) -> Tensor:
    """[..., H, L, Dh] -> [..., L, H*Dh]"""
    *lead, H, L, Dh = x.shape
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return x.transpose(*axes).reshape(*lead, L, H * Dh)


def attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention on [..., H, L, Dh] inputs.

    ``mask`` is an additive array broadcastable to the score shape (0 or -inf).
    Returns the context and the attention weights.
    """
    scores = T.matmul(q, k.T) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = scores + Tensor(mask)
    w = T.softmax(scores, axis=-1)
    return T.matmul(w, v), w


def causal_mask(n_new: int, n_total: int) -> np.ndarray:
    """Additive mask for ``n_new`` queries placed at the end of ``n_total`` keys."""
    q = np.arange(n_total - n_new, n_total)[:, None]
    k = np.arange(n_total)[None, :]
    return np.where(k <= q, 0.0, -np.inf)
