"""Projector + toy LM composed into one trainable vision-language model."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .fusion import AGPConfig, MLPConfig, build_projector
from .lm import LMConfig, LoRAConfig, ToyLM, apply_lora, generate_batch
from .nn import Module
from .tensor import Tensor
from .tokenizer import PAD, PromptSample, render_prompt


@dataclass(frozen=True)
class ModelConfig:
    projector: str = "agp"
    lm: LMConfig = field(default_factory=LMConfig)
    agp: AGPConfig = field(default_factory=AGPConfig.desk)
    mlp: MLPConfig = field(default_factory=MLPConfig.desk)
    lora: LoRAConfig = field(default_factory=LoRAConfig)
    supervise_all: bool = False

    def __post_init__(self):
        if self.projector not in ("agp", "mlp"):
            raise ValueError(f"projector must be 'agp' or 'mlp', got {self.projector!r}")
        d_lm = self.agp.d_lm if self.projector == "agp" else self.mlp.d_lm
        if d_lm != self.lm.d_model:
            raise ValueError(f"projector output {d_lm} does not match LM width {self.lm.d_model}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            projector=d["projector"],
            lm=LMConfig(**d["lm"]),
            agp=AGPConfig(**d["agp"]),
            mlp=MLPConfig(**d["mlp"]),
            lora=LoRAConfig(**d["lora"]),
            supervise_all=d.get("supervise_all", False),
        )


class VisionLanguageModel(Module):
    """Frozen-base LM with LoRA, fed one fused visual embedding per prompt."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.lm = ToyLM(config.lm, rng)
        stats = self.lm.embedding_stats()
        proj_cfg = config.agp if config.projector == "agp" else config.mlp
        setattr(self, config.projector, build_projector(config.projector, proj_cfg, rng, stats))
        apply_lora(self.lm, config.lora, rng)

    @property
    def projector(self):
        return getattr(self, self.config.projector)

    def batch_inputs(self, samples: list[PromptSample]):
        """Right-pad rendered train prompts; padding never contributes to the loss."""
        rendered = [render_prompt(s, "train", self.config.supervise_all) for s in samples]
        L = max(len(r.ids) for r in rendered)
        ids = np.full((len(samples), L), PAD, dtype=np.int64)
        mask = np.zeros((len(samples), L), dtype=bool)
        for i, r in enumerate(rendered):
            ids[i, : len(r.ids)] = r.ids
            mask[i, : len(r.ids)] = r.loss_mask
        return ids, mask, np.array([r.video_position for r in rendered])

    def loss(self, samples: list[PromptSample], features: np.ndarray) -> Tensor:
        """Masked next-token cross-entropy for a batch; ``features`` is [B, V, d_view].

        Tokens before the video slot are identical across the batch, so that
        prefix runs once and its keys/values are shared. Only supervised
        positions go through the output head.
        """
        ids, mask, pos = self.batch_inputs(samples)
        fused = self.projector.fuse(features)
        lm = self.lm
        P = 0 if self.config.supervise_all else shared_prefix_length(ids, pos)
        caches = [{} for _ in lm.layers]
        if P:
            lm.hidden(lm.embed(ids[:1, :P]), 0, caches)
        x = T.inject_rows(lm.embed(ids[:, P:]), fused, pos - P)
        h = lm.hidden(x, P, caches)
        b, t = np.nonzero(mask[:, 1:])
        logits = lm.head(h[b, t - P])
        return T.cross_entropy(logits, ids[b, t + 1])

    def generate(self, samples: list[PromptSample], features: np.ndarray, max_new_tokens: int = 128) -> list[bytes]:
        """Greedy assistant replies, batching samples that share a prompt length."""
        rendered = [render_prompt(s, "infer") for s in samples]
        with T.no_grad():
            fused = self.projector.fuse(features).data
        out: list[bytes | None] = [None] * len(samples)
        groups: dict[int, list[int]] = {}
        for i, r in enumerate(rendered):
            groups.setdefault(len(r.ids), []).append(i)
        for idx in groups.values():
            ids = np.stack([rendered[i].ids for i in idx])
            pos = [rendered[i].video_position for i in idx]
            for i, text in zip(idx, generate_batch(self.lm, ids, fused[idx], pos, max_new_tokens)):
                out[i] = text
        return out


def shared_prefix_length(ids: np.ndarray, video_positions) -> int:
    """Length of the token prefix common to every row and ending before any video slot."""
    same = (ids == ids[:1]).all(axis=0)
    limit = int(np.min(video_positions))
    diff = np.flatnonzero(~same[:limit])
    return int(diff[0]) if diff.size else limit
