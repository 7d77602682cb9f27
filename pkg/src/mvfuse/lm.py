"""A small causal transformer LM with LoRA adapters and greedy decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, ModuleList, attend, causal_mask, merge_heads, split_heads
from .tensor import Tensor
from .tokenizer import EOS, VOCAB_SIZE, decode


@dataclass(frozen=True)
class LMConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ffn: int | None = None  # None -> 4 * d_model
    max_seq: int = 512
    vocab_size: int = VOCAB_SIZE
    embed_std: float = 0.5
    eps: float = 1e-5

    def __post_init__(self):
        if self.d_ffn is None:
            object.__setattr__(self, "d_ffn", 4 * self.d_model)
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.vocab_size <= 256:
            raise ValueError("vocab must hold 256 bytes plus special tokens")


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 8
    alpha: float = 32.0

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class LoRALinear(Module):
    """Frozen base linear plus a trainable low-rank delta (alpha/r) B A.

    B starts at zero so the wrapped layer initially reproduces the base layer.
    """

    def __init__(self, base: Linear, config: LoRAConfig, rng: np.random.Generator):
        super().__init__()
        r = config.rank
        if r < 1 or r > min(base.d_in, base.d_out):
            raise ValueError(f"LoRA rank {r} must be in [1, min({base.d_in}, {base.d_out})]")
        self.d_in, self.d_out = base.d_in, base.d_out
        self.scaling = config.scaling
        self.weight = base.weight
        self.bias = base.bias
        self.weight.requires_grad = False
        if self.bias is not None:
            self.bias.requires_grad = False
        bound = 1.0 / math.sqrt(base.d_in)
        self.lora_a = Tensor(rng.uniform(-bound, bound, size=(r, base.d_in)), requires_grad=True)
        self.lora_b = Tensor(np.zeros((base.d_out, r)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight.T)
        if self.bias is not None:
            y = y + self.bias
        delta = T.matmul(T.matmul(x, self.lora_a.T), self.lora_b.T)
        return y + delta * self.scaling

    lora_forward = __call__

    def merged_weight(self) -> np.ndarray:
        return self.weight.data + self.scaling * (self.lora_b.data @ self.lora_a.data)

    def merge(self) -> Linear:
        lin = Linear.__new__(Linear)
        Module.__init__(lin)
        lin.d_in, lin.d_out = self.d_in, self.d_out
        lin.weight = Tensor(self.merged_weight())
        lin.bias = None if self.bias is None else Tensor(self.bias.data.copy())
        return lin


def lora_wrap(linear: Linear, config: LoRAConfig, rng: np.random.Generator) -> LoRALinear:
    return LoRALinear(linear, config, rng)


class Block(Module):
    def __init__(self, c: LMConfig, rng: np.random.Generator):
        super().__init__()
        self.n_heads = c.n_heads
        self.ln1 = LayerNorm(c.d_model, c.eps)
        self.attn = Module()
        for name in "qkvo":
            setattr(self.attn, name, Linear(c.d_model, c.d_model, rng))
        self.ln2 = LayerNorm(c.d_model, c.eps)
        self.ffn = Module()
        self.ffn.up = Linear(c.d_model, c.d_ffn, rng)
        self.ffn.down = Linear(c.d_ffn, c.d_model, rng)

    def adapted_linears(self):
        return [(self.attn, n) for n in "qkvo"] + [(self.ffn, "up"), (self.ffn, "down")]

    def __call__(self, x: Tensor, cache: dict | None = None) -> Tensor:
        a = self.attn
        h = self.ln1(x)
        q, k, v = (split_heads(lin(h), self.n_heads) for lin in (a.q, a.k, a.v))
        if cache is not None:
            if "k" in cache:
                pk, pv = cache["k"], cache["v"]
                if pk.shape[0] != k.shape[0]:
                    # a shared prefix computed once for the whole batch
                    pk = T.broadcast_to(pk, (k.shape[0], *pk.shape[1:]))
                    pv = T.broadcast_to(pv, (v.shape[0], *pv.shape[1:]))
                k = T.concat([pk, k], axis=-2)
                v = T.concat([pv, v], axis=-2)
            cache["k"], cache["v"] = k, v
        ctx, _ = attend(q, k, v, causal_mask(q.shape[-2], k.shape[-2]))
        x = x + a.o(merge_heads(ctx))
        return x + self.ffn.down(T.gelu(self.ffn.up(self.ln2(x))))


class ToyLM(Module):
    """Pre-norm causal transformer over the byte vocabulary.

    Byte embeddings are split from the special-token rows so the latter can be
    trained while everything else stays frozen. Positional embeddings are
    learned-style but zero-initialized.
    """

    def __init__(self, config: LMConfig, rng: np.random.Generator):
        super().__init__()
        c = self.config = config
        self.tok_embed = Tensor(rng.normal(0.0, c.embed_std, size=(256, c.d_model)), requires_grad=True)
        self.special_embed = Tensor(
            rng.normal(0.0, c.embed_std, size=(c.vocab_size - 256, c.d_model)), requires_grad=True
        )
        self.pos_embed = Tensor(np.zeros((c.max_seq, c.d_model)), requires_grad=True)
        self.layers = ModuleList([Block(c, rng) for _ in range(c.n_layers)])
        self.ln_f = LayerNorm(c.d_model, c.eps)

    def head(self, h: Tensor) -> Tensor:
        """Output logits through the tied embedding table."""
        return T.matmul(h, T.swap_last(self.embedding_table()))

    def embedding_table(self) -> Tensor:
        return T.concat([self.tok_embed, self.special_embed], axis=0)

    def embedding_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-dimension mean and std across the full embedding table."""
        table = self.embedding_table().data
        return table.mean(axis=0), table.std(axis=0)

    def embed(self, ids) -> Tensor:
        return T.take(self.embedding_table(), ids)

    def forward_embeddings(self, x: Tensor, start: int = 0, caches: list | None = None) -> Tensor:
        """Logits for embedded tokens ``x`` [..., L, d] occupying positions start..start+L-1."""
        return self.head(self.hidden(x, start, caches))

    def hidden(self, x: Tensor, start: int = 0, caches: list | None = None) -> Tensor:
        """Final normalized hidden states, before the output head."""
        L = x.shape[-2]
        if start + L > self.config.max_seq:
            raise ValueError(f"sequence length {start + L} exceeds max_seq={self.config.max_seq}")
        x = x + self.pos_embed[start:start + L]
        for i, layer in enumerate(self.layers):
            x = layer(x, None if caches is None else caches[i])
        return self.ln_f(x)

    def __call__(self, ids, fused: Tensor | None = None, video_positions=None) -> Tensor:
        """Logits [B, T, vocab] for ids [B, T] with fused visual rows injected."""
        ids = np.asarray(ids, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None]
        if ids.shape[1] > self.config.max_seq:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq={self.config.max_seq}")
        x = self.embed(ids)
        if fused is not None:
            if fused.ndim == 1:
                fused = fused.reshape(1, fused.shape[0])
            x = T.inject_rows(x, fused, np.broadcast_to(np.asarray(video_positions), (ids.shape[0],)))
        out = self.forward_embeddings(x)
        return out.reshape(out.shape[1:]) if single else out

    lm_forward = __call__

    def lora_modules(self) -> list[LoRALinear]:
        return [m for layer in self.layers for parent, n in layer.adapted_linears()
                if isinstance(m := getattr(parent, n), LoRALinear)]


def apply_lora(model: ToyLM, config: LoRAConfig, rng: np.random.Generator) -> ToyLM:
    """Attach adapters to every attention and FFN linear, then freeze base weights.

    Afterwards the trainable set is the LoRA factors plus the special-token rows.
    """
    for layer in model.layers:
        for parent, name in layer.adapted_linears():
            setattr(parent, name, lora_wrap(getattr(parent, name), config, rng))
    for name, p in model.named_parameters():
        p.requires_grad = "lora_" in name or name in ("special_embed", "pos_embed")
    return model


def merge_lora(model: ToyLM) -> None:
    """Fold every adapter into its base weight in place (inference only)."""
    for layer in model.layers:
        for parent, name in layer.adapted_linears():
            m = getattr(parent, name)
            if isinstance(m, LoRALinear):
                setattr(parent, name, m.merge())


def inject_visual(token_embeddings: Tensor, fused: Tensor, video_position: int) -> Tensor:
    """Replace row ``video_position`` of [T, d] embeddings with ``fused`` [d]."""
    Tn, d = token_embeddings.shape
    if not 0 <= video_position < Tn:
        raise IndexError(f"video position {video_position} outside [0, {Tn})")
    out = T.inject_rows(token_embeddings.reshape(1, Tn, d), fused.reshape(1, d), [video_position])
    return out.reshape(Tn, d)


def generate_batch(model: ToyLM, prompts: np.ndarray, fused: np.ndarray | None, video_positions,
                   max_new_tokens: int = 128) -> list[bytes]:
    """Greedy decoding for equal-length prompts [B, T]; stops at EOS or the budget.

    Keys and values are cached so each new token costs one incremental step.
    """
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    B, L = prompts.shape
    if max_new_tokens <= 0:
        return [b""] * B
    budget = min(max_new_tokens, model.config.max_seq - L)
    out = np.full((B, max(budget, 0)), EOS, dtype=np.int64)
    with T.no_grad():
        x = model.embed(prompts)
        if fused is not None:
            fz = Tensor(np.asarray(fused, dtype=np.float64).reshape(B, -1))
            x = T.inject_rows(x, fz, np.broadcast_to(np.asarray(video_positions), (B,)))
        caches = [{} for _ in model.layers]
        logits = model.forward_embeddings(x, 0, caches).data[:, -1]
        done = np.zeros(B, dtype=bool)
        for step in range(budget):
            nxt = logits.argmax(axis=-1)
            nxt[done] = EOS
            out[:, step] = nxt
            done |= nxt == EOS
            if done.all() or step == budget - 1:
                break
            x = model.embed(nxt[:, None])
            logits = model.forward_embeddings(x, L + step, caches).data[:, -1]
    results = []
    for row in out:
        stop = np.flatnonzero(row == EOS)
        results.append(decode(row[: stop[0] if stop.size else len(row)]))
    return results


def generate(model: ToyLM, prompt_ids, fused=None, video_position=None, max_new_tokens: int = 128) -> bytes:
    """Greedy continuation of one prompt; returns the bytes of the new tokens only."""
    fz = None if fused is None else np.asarray(fused.data if isinstance(fused, Tensor) else fused)[None]
    return generate_batch(model, np.asarray(prompt_ids)[None], fz, [video_position], max_new_tokens)[0]
