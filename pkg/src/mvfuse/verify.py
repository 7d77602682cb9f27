"""Invariant suite behind ``mvfuse verify``.

Each check is a named function returning ``(passed, detail)``. Gradient
checks run per op first, so a broken backward rule is reported under the
op's own name before the model-level checks that also trip over it.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .fusion import AGPConfig, AttentiveGatedProjector, MLPConfig, MLPProjector, param_count
from .gradcheck import check_gradients
from .lm import LMConfig, LoRAConfig, ToyLM, apply_lora, merge_lora
from .metrics import classification_metrics, lcs_length, meteor_core, rouge_l
from .tensor import Tensor
from .tokenizer import (
    SYSTEM_PROMPT,
    USER_PROMPT,
    VIDEO,
    PromptSample,
    assistant_text,
    decode,
    render_prompt,
)
from .train import TrainConfig, lr_at

LINEAR_TOL = 1e-6
GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _worst(errors: dict[str, float]) -> tuple[str, float]:
    name = max(errors, key=errors.get)
    return name, errors[name]


def _grad_verdict(errors: dict[str, float], tol: float) -> tuple[bool, str]:
    name, err = _worst(errors)
    return err < tol, f"max rel err {err:.2e} ({name}), tol {tol:.0e}, {len(errors)} tensors"


# ---------------------------------------------------------------- per-op gradients


def _op_cases(rng) -> dict[str, tuple[Callable, dict, float]]:
    """op name -> (loss closure, leaves, tolerance)."""
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 5)
    ba, bb = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 3)
    u, v = _leaf(rng, 3, 4), _leaf(rng, 4)
    s = _leaf(rng, 2, 5)
    c = _leaf(rng, 3, 2)
    x = _leaf(rng, 3, 6)
    gamma, beta = _leaf(rng, 6), _leaf(rng, 6)
    table = _leaf(rng, 7, 3)
    base, rows = _leaf(rng, 2, 4, 3), _leaf(rng, 2, 3)
    logits = _leaf(rng, 5, 7)
    targets = rng.integers(0, 7, size=5)
    w = {k: rng.normal(size=shp) for k, shp in
         [("mm", (3, 5)), ("bmm", (2, 3, 3)), ("uv", (3, 4)), ("s", (2, 5)), ("x", (3, 6)),
          ("cat", (3, 8)), ("take", (2, 4, 3)), ("inj", (2, 4, 3)), ("tr", (4, 3))]}
    W = {k: Tensor(val) for k, val in w.items()}
    return {
        "matmul": (lambda: (T.matmul(a, b) * W["mm"]).sum(), {"a": a, "b": b}, LINEAR_TOL),
        "batched_matmul": (lambda: (T.matmul(ba, bb) * W["bmm"]).sum(), {"a": ba, "b": bb}, LINEAR_TOL),
        "add_broadcast": (lambda: ((u + v) * W["uv"]).sum(), {"u": u, "v": v}, LINEAR_TOL),
        "mul": (lambda: (u * v * W["uv"]).sum(), {"u": u, "v": v}, LINEAR_TOL),
        "transpose": (lambda: (u.T * W["tr"]).sum(), {"u": u}, LINEAR_TOL),
        "mean": (lambda: (x.mean(axis=0) * Tensor(w["x"][0])).sum(), {"x": x}, LINEAR_TOL),
        "concat": (lambda: (T.concat([x, c], axis=1) * W["cat"]).sum(), {"x": x, "c": c},
                   LINEAR_TOL),
        "take": (lambda: (T.take(table, np.array([[0, 3, 3, 6], [1, 1, 2, 0]])) * W["take"]).sum(), {"table": table},
                 LINEAR_TOL),
        "inject_rows": (lambda: (T.inject_rows(base, rows, [1, 3]) * W["inj"]).sum(), {"base": base, "rows": rows},
                        LINEAR_TOL),
        "sigmoid": (lambda: (T.sigmoid(x) * W["x"]).sum(), {"x": x}, GRAD_TOL),
        "gelu": (lambda: (T.gelu(x) * W["x"]).sum(), {"x": x}, GRAD_TOL),
        "softmax": (lambda: (T.softmax(s, axis=-1) * W["s"]).sum(), {"s": s}, GRAD_TOL),
        "layer_norm": (lambda: (T.layer_norm(x, gamma, beta) * W["x"]).sum(), {"x": x, "gamma": gamma, "beta": beta},
                       GRAD_TOL),
        "standardize": (lambda: (T.standardize(x) * W["x"]).sum(), {"x": x}, GRAD_TOL),
        "cross_entropy": (lambda: T.cross_entropy(logits, targets), {"logits": logits}, GRAD_TOL),
    }


def op_gradient_checks() -> list[tuple[str, Callable]]:
    out = []
    for name in _op_cases(np.random.default_rng(0)):
        def check(name=name):
            f, leaves, tol = _op_cases(np.random.default_rng(0))[name]
            return _grad_verdict(check_gradients(f, leaves), tol)
        out.append((f"grad:{name}", check))
    return out


# ---------------------------------------------------------------- module gradients

TINY_LM = LMConfig(d_model=8, n_layers=2, n_heads=2, max_seq=16)
TINY_AGP = AGPConfig(d_view=6, d_hidden=8, n_heads=2, d_lm=8)
TINY_MLP = MLPConfig(d_view=6, d_mlp=8, d_lm=8)


def _projector_loss(proj, rng):
    views = rng.normal(size=(2, 3, proj.config.d_view))
    w = Tensor(rng.normal(size=(2, proj.config.d_lm)))
    return lambda: (proj.fuse(views) * w).sum()


def check_agp_gradients():
    rng = np.random.default_rng(1)
    proj = AttentiveGatedProjector(TINY_AGP, rng, (rng.normal(size=8), rng.uniform(0.5, 2, size=8)))
    return _grad_verdict(check_gradients(_projector_loss(proj, rng), dict(proj.named_parameters())), GRAD_TOL)


def check_agp_view_embedding_gradients():
    rng = np.random.default_rng(2)
    cfg = AGPConfig(d_view=6, d_hidden=8, n_heads=2, d_lm=8, use_view_embeddings=True, max_views=3)
    proj = AttentiveGatedProjector(cfg, rng)
    return _grad_verdict(check_gradients(_projector_loss(proj, rng), dict(proj.named_parameters())), GRAD_TOL)


def check_mlp_gradients():
    rng = np.random.default_rng(3)
    proj = MLPProjector(TINY_MLP, rng)
    return _grad_verdict(check_gradients(_projector_loss(proj, rng), dict(proj.named_parameters())), GRAD_TOL)


def _lm_loss(lm, rng, L=10):
    ids = rng.integers(0, lm.config.vocab_size, size=(2, L))
    fused = Tensor(rng.normal(size=(2, lm.config.d_model)))
    return lambda: T.cross_entropy(lm(ids, fused, [3, 5]).reshape(2 * L, -1), ids[:, ::-1].reshape(-1))


def check_lm_gradients():
    """Every base-LM tensor, checked before LoRA freezes most of them."""
    rng = np.random.default_rng(4)
    lm = ToyLM(TINY_LM, rng)
    lm.pos_embed.data = rng.normal(0, 0.1, size=lm.pos_embed.shape)
    params = dict(lm.named_parameters())
    return _grad_verdict(check_gradients(_lm_loss(lm, rng), params, max_entries=12, rng=rng), GRAD_TOL)


def check_lora_gradients():
    rng = np.random.default_rng(5)
    lm = apply_lora(ToyLM(TINY_LM, rng), LoRAConfig(rank=2, alpha=8), rng)
    for m in lm.lora_modules():  # B = 0 would leave dL/dA identically zero
        m.lora_b.data = rng.normal(0, 0.1, size=m.lora_b.shape)
    params = lm.trainable()
    return _grad_verdict(check_gradients(_lm_loss(lm, rng), params, max_entries=12, rng=rng), GRAD_TOL)


# ---------------------------------------------------------------- structural invariants


def check_statistical_alignment():
    rng = np.random.default_rng(6)
    proj = AttentiveGatedProjector(AGPConfig.desk(), rng)
    worst_mean = worst_var = 0.0
    for _ in range(100):
        V = int(rng.integers(1, 6))
        x = Tensor(rng.normal(0, rng.uniform(0.1, 10), size=(1, V, 64)))
        h = proj.gated_ffn(proj.cross_view_attention(proj.in_proj(proj.normalize_views(x))))
        _, z = proj.project_to_lm(h.mean(axis=1), return_standardized=True)
        worst_mean = max(worst_mean, abs(z.data.mean()))
        worst_var = max(worst_var, abs(z.data.var() - 1.0))
    ok = worst_mean < 1e-10 and worst_var < 1e-8
    return ok, f"max |mean| {worst_mean:.1e}, max |var-1| {worst_var:.1e} over 100 inputs"


def check_permutation_invariance():
    rng = np.random.default_rng(7)
    proj = AttentiveGatedProjector(AGPConfig.desk(), rng)
    x = rng.normal(size=(3, 64))
    with T.no_grad():
        outs = [proj.fuse(x[list(p)]).data for p in itertools.permutations(range(3))]
    same = all(np.array_equal(outs[0], o) for o in outs[1:])
    spread = max(np.abs(o - outs[0]).max() for o in outs)
    return same, f"6 permutations, max abs diff {spread:.1e}"


def check_lora_identity():
    rng = np.random.default_rng(8)
    lm = ToyLM(LMConfig(), rng)
    ids = rng.integers(0, 256, size=(2, 24))
    with T.no_grad():
        base = lm(ids).data
        apply_lora(lm, LoRAConfig(), rng)
        adapted = lm(ids).data
        for m in lm.lora_modules():
            m.lora_b.data = rng.normal(0, 0.05, size=m.lora_b.shape)
        unmerged = lm(ids).data
        merge_lora(lm)
        merged = lm(ids).data
    init_ok = np.array_equal(base, adapted)
    gap = float(np.abs(merged - unmerged).max())
    return init_ok and gap < 1e-10, f"init bit-exact: {init_ok}; merged vs unmerged {gap:.1e}"


def check_causality():
    rng = np.random.default_rng(9)
    lm = apply_lora(ToyLM(LMConfig(), rng), LoRAConfig(), rng)
    for m in lm.lora_modules():
        m.lora_b.data = rng.normal(0, 0.05, size=m.lora_b.shape)
    bad = 0
    with T.no_grad():
        for _ in range(20):
            L = int(rng.integers(4, 40))
            ids = rng.integers(0, lm.config.vocab_size, size=L)
            t = int(rng.integers(0, L - 1))
            alt = ids.copy()
            alt[t + 1] = (alt[t + 1] + 1 + rng.integers(0, 200)) % lm.config.vocab_size
            if not np.array_equal(lm(ids).data[: t + 1], lm(alt).data[: t + 1]):
                bad += 1
    return bad == 0, f"{20 - bad}/20 prompts leave logits at positions <= t unchanged"


def check_schedule():
    cfg = TrainConfig()
    spe = 64
    total = cfg.epochs * spe
    warm = cfg.warmup_epochs * spe
    mid = warm + (total - warm) // 2
    vals = lr_at(0, spe, cfg), lr_at(warm, spe, cfg), lr_at(mid, spe, cfg)
    ok = vals[0] == 0.0 and vals[1] == 3.0e-4 and abs(vals[2] - 1.5e-4) <= 1e-12
    return ok, "lr(0)={:.3g} lr(warmup end)={!r} lr(mid decay)={!r}".format(*vals)


def _brute_lcs(a, b):
    for k in range(len(a), -1, -1):
        for idx in itertools.combinations(range(len(a)), k):
            it = iter(b)
            if all(a[i] in it for i in idx):
                return k
    return 0


def check_metric_oracles():
    rng = np.random.default_rng(10)
    lcs_bad = 0
    for _ in range(400):
        a = list(rng.choice(list("abc"), size=rng.integers(0, 7)))
        b = list(rng.choice(list("abc"), size=rng.integers(0, 7)))
        lcs_bad += lcs_length(a, b) != _brute_lcs(a, b)
    met = meteor_core("a b", "a b")
    rl = rouge_l("a b c d", "a c d")
    cls = classification_metrics([0, 0, 1, 2], [0, 1, 1, 3])
    ok = (lcs_bad == 0 and abs(met - 0.9375) < 1e-12 and rl[:2] == (0.75, 1.0)
          and cls.accuracy == 0.5 and abs(cls.macro_f1 - 1 / 3) < 1e-15)
    return ok, f"LCS mismatches {lcs_bad}/400; meteor identical pair {met!r}; macro-F1 {cls.macro_f1:.6f}"


def check_prompt_protocol():
    s = PromptSample(SYSTEM_PROMPT, USER_PROMPT, assistant_text(2, "Smooth and steady."))
    train, infer = render_prompt(s, "train"), render_prompt(s, "infer")
    text = decode(train.ids)
    ok = (
        SYSTEM_PROMPT.encode() in text
        and USER_PROMPT.encode() in text
        and s.assistant.encode() in text
        and np.array_equal(train.ids[: len(infer.ids)], infer.ids)
        and len(infer.ids) < len(train.ids)
        and int((train.ids == VIDEO).sum()) == 1
        and train.ids[train.video_position] == VIDEO
    )
    return ok, f"train {len(train.ids)} tokens, infer {len(infer.ids)}, video at {train.video_position}"


def all_checks() -> list[tuple[str, Callable]]:
    return op_gradient_checks() + [
        ("grad:agp", check_agp_gradients),
        ("grad:agp_view_embeddings", check_agp_view_embedding_gradients),
        ("grad:mlp", check_mlp_gradients),
        ("grad:lm", check_lm_gradients),
        ("grad:lora", check_lora_gradients),
        ("alignment", check_statistical_alignment),
        ("permutation", check_permutation_invariance),
        ("lora_identity", check_lora_identity),
        ("causality", check_causality),
        ("schedule", check_schedule),
        ("metric_oracles", check_metric_oracles),
        ("prompt_protocol", check_prompt_protocol),
    ]


def run_checks(select: Callable[[str], bool] | None = None, report: Callable[[CheckResult], None] | None = None
               ) -> list[CheckResult]:
    results = []
    for name, fn in all_checks():
        if select is not None and not select(name):
            continue
        t0 = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as err:  # a crashing check is a failing check
            passed, detail = False, f"{type(err).__name__}: {err}"
        res = CheckResult(name, bool(passed), detail, time.perf_counter() - t0)
        results.append(res)
        if report is not None:
            report(res)
    return results


def paper_dim_counts() -> dict[str, int]:
    """Projector parameter counts at the paper's dimensions."""
    agp = AGPConfig()
    mlp = MLPConfig()
    return {
        "agp": param_count(agp),
        "agp_with_view_embeddings": param_count(AGPConfig(use_view_embeddings=True)),
        "mlp": param_count(mlp),
        "agp_attention": 4 * (agp.d_hidden * agp.d_hidden + agp.d_hidden),
        "agp_head_dim": agp.d_hidden // agp.n_heads,
        "lora_per_linear_576": LoRAConfig().rank * (576 + 576),
        "log10_agp": round(math.log10(param_count(agp)), 3),
    }
