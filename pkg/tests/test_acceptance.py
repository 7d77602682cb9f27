"""Acceptance criteria, one test each.

Every test records a ``PASS``/``FAIL`` line; ``conftest.py`` prints them in the
terminal summary, and ``python tests/test_acceptance.py [--slow]`` prints them
directly. The fusion-gap reproduction is marked ``slow`` (about 25 minutes on
one core).
"""

from __future__ import annotations

import itertools
import json
import sys
import time

import numpy as np
import pytest

from mvfuse.cli import main as cli_main
from mvfuse.data import DatasetManifest, FrozenEncoder, generate_dataset
from mvfuse.fusion import AGPConfig, AttentiveGatedProjector
from mvfuse.lm import LMConfig, LoRAConfig, ToyLM, apply_lora, merge_lora
from mvfuse.metrics import classification_metrics, lcs_length, meteor_core, parse_label
from mvfuse.model import ModelConfig
from mvfuse.tensor import Tensor
from mvfuse.tokenizer import (
    BOS,
    EOS,
    SYSTEM_PROMPT,
    USER_PROMPT,
    VIDEO,
    PromptSample,
    assistant_text,
    chat_text,
    decode,
    render_prompt,
)
from mvfuse.train import TrainConfig, Trainer, lr_at
from mvfuse.verify import run_checks

RESULTS: list[str] = []


def record(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  [{number:>2}] {title}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------- 1


def test_01_gradient_suite():
    t0 = time.perf_counter()
    results = run_checks(lambda n: n.startswith("grad:"))
    seconds = time.perf_counter() - t0
    failed = [r.name for r in results if not r.passed]
    names = {r.name for r in results}
    covered = {"grad:agp", "grad:mlp", "grad:lm", "grad:lora"} <= names
    record(1, "gradient suite", not failed and covered and seconds < 120,
           f"{len(results) - len(failed)}/{len(results)} checks, failed={failed}, {seconds:.1f}s (< 120s)")


# ---------------------------------------------------------------- 2


def test_02_statistical_alignment():
    rng = np.random.default_rng(20)
    proj = AttentiveGatedProjector(AGPConfig.desk(), rng)
    x = Tensor(rng.normal(0, 5, size=(100, 64)) + rng.normal(0, 3, size=(100, 1)))
    _, z = proj.project_to_lm(x, return_standardized=True)
    mean_err = float(np.abs(z.data.mean(axis=-1)).max())
    var_err = float(np.abs(z.data.var(axis=-1) - 1).max())
    record(2, "statistical alignment", mean_err < 1e-10 and var_err < 1e-8,
           f"max |mean| {mean_err:.1e} (< 1e-10), max |var-1| {var_err:.1e} (< 1e-8)")


# ---------------------------------------------------------------- 3


def test_03_permutation_invariance():
    rng = np.random.default_rng(30)
    proj = AttentiveGatedProjector(AGPConfig.desk(), rng)
    x = rng.normal(size=(3, 64))
    outs = [proj.fuse(x[list(p)]).data for p in itertools.permutations(range(3))]
    same = all(np.array_equal(outs[0], o) for o in outs[1:])
    record(3, "permutation invariance", same and len(outs) == 6, f"{len(outs)} permutations bit-identical={same}")


# ---------------------------------------------------------------- 4


def test_04_lora_identity():
    rng = np.random.default_rng(40)
    lm = ToyLM(LMConfig(), rng)
    ids = rng.integers(0, 256, size=(2, 24))
    base = lm(ids).data
    apply_lora(lm, LoRAConfig(), rng)
    identical = np.array_equal(lm(ids).data, base)
    for m in lm.lora_modules():
        m.lora_b.data = rng.normal(0, 0.05, size=m.lora_b.shape)
    unmerged = lm(ids).data
    merge_lora(lm)
    gap = float(np.abs(lm(ids).data - unmerged).max())
    record(4, "LoRA identity", identical and gap < 1e-10,
           f"init bit-exact={identical}, merged vs unmerged {gap:.1e} (< 1e-10)")


# ---------------------------------------------------------------- 5


def test_05_causality():
    rng = np.random.default_rng(50)
    lm = ToyLM(LMConfig(), rng)
    bad = 0
    for _ in range(20):
        L = int(rng.integers(4, 48))
        ids = rng.integers(0, 262, size=L)
        t = int(rng.integers(0, L - 1))
        alt = ids.copy()
        alt[t + 1] = (alt[t + 1] + 1 + int(rng.integers(0, 261))) % 262
        bad += not np.array_equal(lm(ids).data[: t + 1], lm(alt).data[: t + 1])
    record(5, "causality", bad == 0, f"{20 - bad}/20 prompts bit-identical up to t")


# ---------------------------------------------------------------- 6


def test_06_schedule_shape():
    cfg, spe = TrainConfig(), 16
    total = cfg.epochs * spe
    warm_end = cfg.warmup_epochs * spe
    mid = warm_end + (total - warm_end) // 2
    start, peak, half = lr_at(0, spe, cfg), lr_at(warm_end, spe, cfg), lr_at(mid, spe, cfg)
    ok = start == 0.0 and peak == 3.0e-4 and abs(half - 1.5e-4) <= 1e-12
    record(6, "schedule shape", ok, f"lr(0)={start}, lr(warmup end)={peak!r}, lr(decay mid)={half!r}")


# ---------------------------------------------------------------- 7


@pytest.mark.slow
def test_07_fusion_gap():
    from mvfuse.experiment import CompareConfig, run_comparison

    result = run_comparison(CompareConfig())
    print(result.format())
    gap = result.fusion_gap()
    table = result.table()
    beats = result.fusion_beats_single("agp")
    minutes = result.seconds / 60
    record(7, "fusion gap", gap >= 0.05 and beats and minutes < 15,
           f"AGP-MLP ego-exos {100 * gap:+.1f} pts (>= +5), AGP ego-exos beats single views={beats}, "
           f"{minutes:.1f} min (< 15); table={json.dumps(table)}")


# ---------------------------------------------------------------- 8


def test_08_memorization():
    splits = generate_dataset(DatasetManifest(n_train=8, n_val=4, seed=8))
    sample = splits.train[0]
    trainer = Trainer(ModelConfig(), TrainConfig(weight_decay=0.0, grad_clip=1.0), FrozenEncoder(0))
    loss = float("nan")
    for _ in range(200):
        loss = trainer.train_step([sample], 3e-3)
    text = trainer.model.generate([sample.to_prompt()], trainer.features([sample]))[0]
    target = sample.commentary.encode()  # the full assistant reply
    exact = text == target
    label = parse_label(text)
    record(8, "memorization oracle", loss < 0.05 and exact and label == sample.label,
           f"loss {loss:.2e} (< 0.05), byte-exact={exact}, parsed={label} planted={sample.label}")


# ---------------------------------------------------------------- 9


def _brute_lcs(a, b):
    best = 0
    for k in range(len(a), 0, -1):
        subs = set(itertools.combinations(a, k))
        if any(s in subs for s in itertools.combinations(b, k)):
            return k
    return best


def test_09_metric_oracles():
    mismatches = 0
    alphabet = "ab"
    pairs = 0
    for la in range(7):
        for lb in range(7):
            rng = np.random.default_rng(la * 7 + lb)
            seqs_a = [tuple(s) for s in itertools.product(alphabet, repeat=la)] if la <= 4 else \
                [tuple(rng.choice(list("abc"), la)) for _ in range(12)]
            seqs_b = [tuple(s) for s in itertools.product(alphabet, repeat=lb)] if lb <= 4 else \
                [tuple(rng.choice(list("abc"), lb)) for _ in range(12)]
            for a in seqs_a[:16]:
                for b in seqs_b[:16]:
                    pairs += 1
                    mismatches += lcs_length(list(a), list(b)) != _brute_lcs(a, b)
    # two identical unigrams in one chunk: F_mean 1, penalty 0.5 * (1/2)^3
    m = meteor_core("a b", "a b")
    res = classification_metrics([0, 1, 2, None], [0, 1, 1, 3])
    expected_conf = [[1, 0, 0, 0], [0, 1, 1, 0], [0, 0, 0, 0], [0, 0, 0, 0]]
    conf_ok = np.asarray(res.confusion).tolist() == expected_conf and res.accuracy == 0.5
    record(9, "metric oracles", mismatches == 0 and abs(m - 0.9375) <= 1e-12 and conf_ok,
           f"LCS vs brute force {pairs - mismatches}/{pairs}, meteor identical={m!r}, confusion exact={conf_ok}")


# ---------------------------------------------------------------- 10


def test_10_determinism(tmp_path):
    data = tmp_path / "data"
    assert cli_main(["gen-data", "--n-train", "48", "--n-val", "16", "--seed", "10", "--out", str(data)]) == 0
    for k in range(2):
        assert cli_main(["train", "--data", str(data), "--run-dir", str(tmp_path / f"r{k}"), "--epochs", "2",
                         "--batch-size", "16"]) == 0
    same = {name: (tmp_path / "r0" / name).read_bytes() == (tmp_path / "r1" / name).read_bytes()
            for name in ("history.jsonl", "checkpoint.agpckpt")}

    splits = generate_dataset(DatasetManifest(n_train=16, n_val=4, seed=10))
    trainer = Trainer(ModelConfig(), TrainConfig(), FrozenEncoder(0))
    frozen = {n: p.data.copy() for n, p in trainer.model.named_parameters() if not p.requires_grad}
    enc = trainer.encoder.projection.copy()
    for _ in range(3):
        trainer.train_step(splits.train[:8], 1e-2)
    named = dict(trainer.model.named_parameters())
    frozen_ok = all(np.array_equal(named[n].data, v) for n, v in frozen.items())
    enc_ok = np.array_equal(trainer.encoder.projection, enc)
    record(10, "determinism", all(same.values()) and frozen_ok and enc_ok,
           f"byte-identical {same}, base LM frozen={frozen_ok} ({len(frozen)} tensors), encoder frozen={enc_ok}")


# ---------------------------------------------------------------- 11


def test_11_prompt_protocol():
    problems = []
    for label in range(4):
        s = PromptSample(SYSTEM_PROMPT, USER_PROMPT, assistant_text(label, "Steady rhythm throughout."))
        tr, inf = render_prompt(s, "train"), render_prompt(s, "infer")
        if decode(tr.ids, skip={BOS, EOS}).decode() != chat_text(s.system, s.user, s.assistant):
            problems.append(f"train roundtrip {label}")
        if decode(inf.ids, skip={BOS}).decode() != chat_text(s.system, s.user):
            problems.append(f"infer roundtrip {label}")
        if not (len(inf.ids) < len(tr.ids) and np.array_equal(tr.ids[: len(inf.ids)], inf.ids)):
            problems.append(f"prefix {label}")
        for r in (tr, inf):
            if int((r.ids == VIDEO).sum()) != 1 or r.ids[r.video_position] != VIDEO:
                problems.append(f"video position {label}")
    record(11, "prompt protocol", not problems, "all roundtrips, prefix and video checks hold" if not problems
           else ", ".join(problems))


if __name__ == "__main__":
    import tempfile
    from pathlib import Path

    slow = "--slow" in sys.argv
    tests = [(n, f) for n, f in sorted(globals().items()) if n.startswith("test_")]
    for name, fn in tests:
        if name == "test_07_fusion_gap" and not slow:
            print("SKIP  [ 7] fusion gap: pass --slow to run (about 25 minutes)")
            continue
        try:
            if name == "test_10_determinism":
                with tempfile.TemporaryDirectory() as d:
                    fn(Path(d))
            else:
                fn()
        except AssertionError:
            pass
        except Exception as err:  # a crash is a failed criterion, not a stopped run
            print(f"FAIL  {name}: {type(err).__name__}: {err}")
