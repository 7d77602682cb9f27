"""Multi-view projectors: the attentive gated projector and the MLP baseline.

Both map a set of V per-view feature vectors to one vector in the language
model's embedding space, which then occupies the ``<|video|>`` slot.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, attend, merge_heads, split_heads
from .tensor import Tensor

VIEW_ROLES = ("ego", "exo")


@dataclass(frozen=True)
class AGPConfig:
    d_view: int = 768
    d_hidden: int = 1024
    n_heads: int = 4
    d_ffn: int | None = None  # None -> d_hidden
    d_lm: int = 576
    use_view_embeddings: bool = False
    max_views: int = 5
    eps: float = 1e-5

    def __post_init__(self):
        if self.d_ffn is None:
            object.__setattr__(self, "d_ffn", self.d_hidden)
        for name in ("d_view", "d_hidden", "d_ffn", "d_lm"):
            if getattr(self, name) < 2:
                raise ValueError(f"AGPConfig.{name} must be >= 2")
        if self.n_heads < 1 or self.d_hidden % self.n_heads:
            raise ValueError(f"d_hidden={self.d_hidden} is not divisible by n_heads={self.n_heads}")

    @classmethod
    def desk(cls, d_view: int = 64, d_lm: int = 64, **kw) -> "AGPConfig":
        return cls(d_view=d_view, d_hidden=64, n_heads=4, d_lm=d_lm, **kw)


@dataclass(frozen=True)
class MLPConfig:
    d_view: int = 768
    d_mlp: int = 576
    d_lm: int = 576

    def __post_init__(self):
        for name in ("d_view", "d_mlp", "d_lm"):
            if getattr(self, name) < 1:
                raise ValueError(f"MLPConfig.{name} must be positive")

    @classmethod
    def desk(cls, d_view: int = 64, d_lm: int = 64) -> "MLPConfig":
        return cls(d_view=d_view, d_mlp=d_lm, d_lm=d_lm)


@dataclass
class ViewFeatureSet:
    """Per-sample view features [V, d_view]; ``view_roles`` tags each row ego/exo."""

    features: np.ndarray
    view_roles: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise ValueError(f"view features must be [V, d_view] with V >= 1, got {self.features.shape}")
        V = self.features.shape[0]
        if not self.view_roles:
            self.view_roles = ["ego"] + ["exo"] * (V - 1)
        if len(self.view_roles) != V:
            raise ValueError(f"{len(self.view_roles)} roles for {V} views")
        if any(r not in VIEW_ROLES for r in self.view_roles):
            raise ValueError(f"unknown view role in {self.view_roles}")
        if self.view_roles.count("ego") > 1:
            raise ValueError("at most one ego view per sample")

    @property
    def n_views(self) -> int:
        return self.features.shape[0]


def _as_batch(x) -> tuple[Tensor, bool]:
    """Coerce input to a [B, V, d] tensor; flag whether a batch axis was added."""
    if isinstance(x, ViewFeatureSet):
        x = x.features
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float64))
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    if x.ndim != 3:
        raise ValueError(f"expected [V, d] or [B, V, d] view features, got {list(x.shape)}")
    return x, False


def canonical_view_order(features: np.ndarray) -> np.ndarray:
    """Per-sample row permutation sorting views lexicographically by value.

    Feeding views in this order makes order-invariant stages also bit-exact
    under permutation, since float reductions then see a fixed summation order.
    """
    B, V, d = features.shape
    return np.stack([np.lexsort(features[b].T[::-1]) for b in range(B)])


class AttentiveGatedProjector(Module):
    """View norm -> in-proj -> cross-view attention -> gated FFN -> mean-pool -> LM projection."""

    def __init__(self, config: AGPConfig, rng: np.random.Generator, embed_stats: tuple | None = None):
        super().__init__()
        c = self.config = config
        self.view_ln = LayerNorm(c.d_view, c.eps)
        self.in_proj = Linear(c.d_view, c.d_hidden, rng)
        self.attn = Module()
        for name in "qkvo":
            setattr(self.attn, name, Linear(c.d_hidden, c.d_hidden, rng))
        self.pre_ffn_ln = LayerNorm(c.d_hidden, c.eps)
        self.ffn = Module()
        self.ffn.fc1 = Linear(c.d_hidden, c.d_ffn, rng)
        self.ffn.fc2 = Linear(c.d_ffn, c.d_hidden, rng)
        self.gate = Linear(c.d_hidden, c.d_hidden, rng)
        self.out_proj = Linear(c.d_hidden, c.d_lm, rng)
        mean, std = embed_stats if embed_stats is not None else (np.zeros(c.d_lm), np.ones(c.d_lm))
        self.out_scale = Tensor(np.broadcast_to(np.asarray(std, float), (c.d_lm,)).copy(), requires_grad=True)
        self.out_shift = Tensor(np.broadcast_to(np.asarray(mean, float), (c.d_lm,)).copy(), requires_grad=True)
        if c.use_view_embeddings:
            self.view_embed = Tensor(rng.normal(0.0, 0.02, size=(c.max_views, c.d_hidden)), requires_grad=True)

    def normalize_views(self, x: Tensor) -> Tensor:
        if x.shape[-2] == 0:
            raise ValueError("no views to normalize")
        return self.view_ln(x)

    def cross_view_attention(self, h: Tensor, return_weights: bool = False):
        a = self.attn
        q, k, v = (split_heads(lin(h), self.config.n_heads) for lin in (a.q, a.k, a.v))
        ctx, w = attend(q, k, v)
        out = h + a.o(merge_heads(ctx))
        return (out, w) if return_weights else out

    def gated_ffn(self, h: Tensor, return_gate: bool = False):
        z = self.pre_ffn_ln(h)
        y = self.ffn.fc2(T.gelu(self.ffn.fc1(z)))
        g = T.sigmoid(self.gate(z))
        out = h + g * y
        return (out, g) if return_gate else out

    def project_to_lm(self, fused: Tensor, return_standardized: bool = False):
        z = self.out_proj(fused)
        zhat = T.standardize(z)
        out = zhat * self.out_scale + self.out_shift
        return (out, zhat) if return_standardized else out

    def fuse(self, views) -> Tensor:
        """[V, d_view] -> [d_lm] or [B, V, d_view] -> [B, d_lm]."""
        x, single = _as_batch(views)
        V = x.shape[1]
        if not self.config.use_view_embeddings and V > 1:
            order = canonical_view_order(x.data)
            x = x[np.arange(x.shape[0])[:, None], order]
        h = self.in_proj(self.normalize_views(x))
        if self.config.use_view_embeddings:
            if V > self.config.max_views:
                raise ValueError(f"{V} views exceed max_views={self.config.max_views}")
            h = h + self.view_embed[:V]
        h = self.gated_ffn(self.cross_view_attention(h))
        out = self.project_to_lm(h.mean(axis=1))
        return out.reshape(out.shape[-1]) if single else out

    __call__ = fuse


class MLPProjector(Module):
    """Mean-pool views, then Linear -> GELU -> Linear."""

    def __init__(self, config: MLPConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.fc1 = Linear(config.d_view, config.d_mlp, rng)
        self.fc2 = Linear(config.d_mlp, config.d_lm, rng)

    def fuse(self, views) -> Tensor:
        x, single = _as_batch(views)
        pooled = x.mean(axis=1)
        out = self.fc2(T.gelu(self.fc1(pooled)))
        return out.reshape(out.shape[-1]) if single else out

    mlp_fuse = fuse
    __call__ = fuse


def param_count(config: AGPConfig | MLPConfig) -> int:
    """Closed-form number of learnable scalars in the projector for ``config``."""
    if isinstance(config, MLPConfig):
        return config.d_view * config.d_mlp + config.d_mlp + config.d_mlp * config.d_lm + config.d_lm
    c = config
    h = c.d_hidden
    n = 2 * c.d_view  # view_ln
    n += c.d_view * h + h  # in_proj
    n += 4 * (h * h + h)  # attention q, k, v, o
    n += 2 * h  # pre_ffn_ln
    n += h * c.d_ffn + c.d_ffn + c.d_ffn * h + h  # ffn
    n += h * h + h  # gate
    n += h * c.d_lm + c.d_lm  # out_proj
    n += 2 * c.d_lm  # out_scale, out_shift
    if c.use_view_embeddings:
        n += c.max_views * h
    return n


def build_projector(kind: str, config, rng: np.random.Generator, embed_stats=None):
    if kind == "agp":
        return AttentiveGatedProjector(config, rng, embed_stats)
    if kind == "mlp":
        return MLPProjector(config, rng)
    raise ValueError(f"unknown projector {kind!r} (expected 'agp' or 'mlp')")
