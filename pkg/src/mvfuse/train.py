"""Training loop: warmup + cosine schedule, AdamW, clipping, best-val retention."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, capture, restore
from .data import FrozenEncoder, Splits, SynthSample, encode_views
from .model import ModelConfig, VisionLanguageModel
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 6
    batch_size: int = 8
    base_lr: float = 3e-4
    warmup_epochs: int = 1
    weight_decay: float = 0.01
    seed: int = 0
    grad_clip: float = 1.0
    min_lr: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    view_setting: str = "ego-exos"
    eval_max_new_tokens: int = 128

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.epochs > 0 and not self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs={self.warmup_epochs} must be < epochs={self.epochs}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        object.__setattr__(self, "betas", tuple(self.betas))

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        return cls(**{"epochs": 6, "batch_size": 32, "base_lr": 3e-4, "warmup_epochs": 1, **kw})


class TrainingDiverged(RuntimeError):
    pass


def lr_at(step: int, steps_per_epoch: int, config: TrainConfig) -> float:
    """Linear warmup from 0, then cosine decay to ``min_lr`` at the final step."""
    if steps_per_epoch <= 0:
        raise ValueError("steps_per_epoch must be positive")
    if step < 0:
        raise ValueError("step must be non-negative")
    warm = config.warmup_epochs * steps_per_epoch
    total = config.epochs * steps_per_epoch
    if step < warm:
        return config.base_lr * step / warm
    span = max(total - warm, 1)
    p = min((step - warm) / span, 1.0)
    return config.min_lr + (config.base_lr - config.min_lr) * (1.0 + math.cos(math.pi * p)) / 2.0


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        c = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * c
    return total


class AdamW:
    """Adam moments with decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for n, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            if lr == 0.0:
                continue
            p.data = p.data * (1.0 - lr * self.weight_decay) - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class Trainer:
    """Owns the model, optimizer, encoder and RNG of one run."""

    def __init__(self, model_config: ModelConfig, config: TrainConfig, encoder: FrozenEncoder):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.model = VisionLanguageModel(model_config, self.rng)
        self.encoder = encoder
        self.params = self.model.trainable()
        self.optim = AdamW(self.params, config.betas, config.adam_eps, config.weight_decay)
        self.step_count = 0
        self.last_lr = 0.0
        self.last_grad_norm = 0.0

    def features(self, samples: list[SynthSample]) -> np.ndarray:
        return encode_views(samples, self.encoder, self.config.view_setting)

    def train_step(self, samples: list[SynthSample], lr: float) -> float:
        T.zero_grads(self.params.values())
        loss = self.model.loss([s.to_prompt() for s in samples], self.features(samples))
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(
                f"non-finite loss {value} at step {self.step_count} (lr={self.last_lr:.3e}, "
                f"last grad norm={self.last_grad_norm:.3e})"
            )
        T.backward(loss)
        params = list(self.params.values())
        self.last_grad_norm = clip_grad_norm(params, self.config.grad_clip)
        self.optim.step(lr)
        self.step_count += 1
        self.last_lr = lr
        return value

    def batches(self, n: int):
        order = self.rng.permutation(n)
        bs = self.config.batch_size
        return [order[i:i + bs] for i in range(0, n, bs)]

    def checkpoint(self) -> Checkpoint:
        return capture(self.model, self.encoder, self.config, self.step_count, self.rng)


def run_training(splits: Splits, model_config: ModelConfig, config: TrainConfig,
                 history_path=None, evaluate=True):
    """Train for ``config.epochs`` epochs; returns (best checkpoint, history rows, trainer).

    Validation runs after every epoch; the checkpoint with the highest
    validation accuracy (earliest on ties) is retained.
    """
    from .metrics import evaluate_model

    if not splits.train:
        raise ValueError("training split is empty")
    m = splits.manifest
    trainer = Trainer(model_config, config, FrozenEncoder(m.seed, m.d_raw, m.d_view))
    best = trainer.checkpoint()
    best_acc = -1.0
    history: list[dict] = []
    n = len(splits.train)
    spe = math.ceil(n / config.batch_size)
    fh = open(history_path, "w") if history_path is not None else None
    try:
        for epoch in range(config.epochs):
            losses = []
            for idx in trainer.batches(n):
                lr = lr_at(trainer.step_count, spe, config)
                losses.append(trainer.train_step([splits.train[i] for i in idx], lr))
            row = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)), "val_acc": None,
                   "val_f1": None, "lr_last": trainer.last_lr}
            if evaluate and splits.val:
                report = evaluate_model(trainer.model, splits.val, trainer.encoder, config.view_setting,
                                        config.eval_max_new_tokens)
                row["val_acc"], row["val_f1"] = report.accuracy, report.macro_f1
                if report.accuracy > best_acc:
                    best_acc = report.accuracy
                    best = trainer.checkpoint()
            else:
                best = trainer.checkpoint()
            history.append(row)
            log.info("epoch %d loss %.4f val_acc %s", epoch + 1, row["train_loss"], row["val_acc"])
            if fh is not None:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
                fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return best, history, trainer


def train_config_from_dict(d: dict) -> TrainConfig:
    return TrainConfig(**d)


def train_config_to_dict(c: TrainConfig) -> dict:
    d = asdict(c)
    d["betas"] = list(d["betas"])
    return d


def write_history(history: list[dict], path) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in history))
