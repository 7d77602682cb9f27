import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvfuse.checkpoint import CheckpointError, load_checkpoint, model_from_checkpoint, restore, save_checkpoint
from mvfuse.data import DatasetManifest, generate_dataset
from mvfuse.model import ModelConfig, VisionLanguageModel, shared_prefix_length
from mvfuse.tensor import Tensor
from mvfuse.train import (
    AdamW,
    Trainer,
    TrainConfig,
    TrainingDiverged,
    clip_grad_norm,
    lr_at,
    run_training,
    write_history,
)


@pytest.fixture(scope="module")
def tiny():
    return generate_dataset(DatasetManifest(n_train=12, n_val=4, seed=1))


# ---------------------------------------------------------------- schedule


def test_schedule_examples():
    cfg = TrainConfig()
    assert lr_at(0, 64, cfg) == 0.0
    assert lr_at(64, 64, cfg) == 3.0e-4
    assert abs(lr_at(64 + 160, 64, cfg) - 1.5e-4) <= 1e-12
    assert lr_at(6 * 64, 64, cfg) == 0.0


def test_schedule_errors():
    with pytest.raises(ValueError):
        lr_at(0, 0, TrainConfig())
    with pytest.raises(ValueError):
        lr_at(-1, 4, TrainConfig())
    with pytest.raises(ValueError):
        TrainConfig(epochs=1, warmup_epochs=1)
    with pytest.raises(ValueError):
        TrainConfig(base_lr=0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 50), st.integers(2, 8), st.floats(1e-5, 1e-2), st.floats(0, 1e-5))
def test_schedule_shape(spe, epochs, base, floor):
    cfg = TrainConfig(epochs=epochs, base_lr=base, min_lr=floor)
    warm = spe
    lrs = [lr_at(s, spe, cfg) for s in range(epochs * spe + 1)]
    assert all(b >= a for a, b in zip(lrs[:warm], lrs[1:warm + 1]))  # warmup rises
    assert all(b <= a + 1e-18 for a, b in zip(lrs[warm:], lrs[warm + 1:]))  # decay falls
    # continuity at the boundary: warmup formula at step = warm equals decay formula at p = 0
    assert lrs[warm] == base
    assert math.isclose(lrs[-1], floor, abs_tol=1e-15)


def test_paper_preset():
    cfg = TrainConfig.paper()
    assert (cfg.epochs, cfg.batch_size, cfg.base_lr, cfg.warmup_epochs) == (6, 32, 3e-4, 1)


# ---------------------------------------------------------------- optimizer


def test_clip_grad_norm():
    rng = np.random.default_rng(0)
    ps = [Tensor(rng.normal(size=(3, 4)), requires_grad=True) for _ in range(3)]
    for p in ps:
        p.grad = rng.normal(size=p.shape) * 10
    pre = clip_grad_norm(ps, 1.0)
    post = math.sqrt(sum((p.grad ** 2).sum() for p in ps))
    assert pre > 1.0 and post <= 1.0 + 1e-12
    small = [Tensor(np.zeros(2), requires_grad=True)]
    small[0].grad = np.array([0.1, 0.1])
    clip_grad_norm(small, 1.0)
    assert small[0].grad.tolist() == [0.1, 0.1]


def test_adamw_single_step_closed_form():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -0.25])
    opt = AdamW({"p": p}, weight_decay=0.1)
    opt.step(0.01)
    # first bias-corrected step is lr * g / (|g| + eps) after decoupled decay
    expected = np.array([1.0, -2.0]) * (1 - 0.01 * 0.1) - 0.01 * np.sign([0.5, -0.25]) * (
        np.abs([0.5, -0.25]) / (np.abs([0.5, -0.25]) + 1e-8))
    np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-15)


def test_adamw_zero_lr_moves_only_moments():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    p.grad = np.array([0.3, -0.1])
    opt = AdamW({"p": p}, weight_decay=0.5)
    before = p.data.copy()
    opt.step(0.0)
    assert np.array_equal(p.data, before)
    assert np.abs(opt.m["p"]).sum() > 0 and opt.t == 1


# ---------------------------------------------------------------- model loss


def test_shared_prefix_length():
    ids = np.array([[1, 2, 3, 9, 5], [1, 2, 4, 9, 6]])
    assert shared_prefix_length(ids, [3, 3]) == 2
    assert shared_prefix_length(ids[:, [0, 1, 3, 4]], [2, 2]) == 2


def test_shared_prefix_loss_equals_plain_loss(tiny):
    # the prefix-sharing fast path must reproduce a plain per-sample forward
    from mvfuse import tensor as T
    from mvfuse.data import FrozenEncoder, encode_views

    model = VisionLanguageModel(ModelConfig(), np.random.default_rng(2))
    samples = tiny.train[:3]
    feats = encode_views(samples, FrozenEncoder(1))
    fast = model.loss([s.to_prompt() for s in samples], feats).item()
    ids, mask, pos = model.batch_inputs([s.to_prompt() for s in samples])
    fused = model.projector.fuse(feats)
    logits = model.lm(ids, fused, pos)
    B, L, V = logits.shape
    plain = T.cross_entropy(logits[:, :-1].reshape(B * (L - 1), V), ids[:, 1:].reshape(-1), mask[:, 1:].reshape(-1))
    assert abs(fast - plain.item()) < 1e-12


# ---------------------------------------------------------------- training runs


def test_epochs_zero_returns_initial(tiny):
    best, history, trainer = run_training(tiny, ModelConfig(), TrainConfig(epochs=0))
    assert history == [] and best.meta["step"] == 0


def test_history_and_steps(tiny, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=5, base_lr=1e-3, eval_max_new_tokens=8)
    best, history, trainer = run_training(tiny, ModelConfig(projector="mlp"), cfg, tmp_path / "h.jsonl")
    assert len(history) == 2
    assert trainer.step_count == 2 * math.ceil(12 / 5)
    rows = [json.loads(line) for line in (tmp_path / "h.jsonl").read_text().splitlines()]
    assert rows == history
    assert set(rows[0]) == {"epoch", "train_loss", "val_acc", "val_f1", "lr_last"}


def test_seed_determinism(tiny, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=6, base_lr=1e-3, eval_max_new_tokens=8)
    outs = []
    for k in range(2):
        best, history, _ = run_training(tiny, ModelConfig(), cfg, tmp_path / f"h{k}.jsonl")
        save_checkpoint(best, tmp_path / f"c{k}.agpckpt")
        outs.append(history)
    assert outs[0] == outs[1]
    assert (tmp_path / "h0.jsonl").read_bytes() == (tmp_path / "h1.jsonl").read_bytes()
    assert (tmp_path / "c0.agpckpt").read_bytes() == (tmp_path / "c1.agpckpt").read_bytes()


def test_frozen_set_unchanged(tiny):
    cfg = TrainConfig(epochs=2, batch_size=6, base_lr=1e-2)
    trainer = Trainer(ModelConfig(), cfg, __import__("mvfuse.data", fromlist=["FrozenEncoder"]).FrozenEncoder(1))
    frozen = {n: p.data.copy() for n, p in trainer.model.named_parameters() if not p.requires_grad}
    trainable = {n: p.data.copy() for n, p in trainer.params.items()}
    enc = trainer.encoder.projection.copy()
    for _ in range(3):
        trainer.train_step(tiny.train[:6], 1e-2)
    named = dict(trainer.model.named_parameters())
    assert all(np.array_equal(named[n].data, v) for n, v in frozen.items())
    assert any(not np.array_equal(named[n].data, v) for n, v in trainable.items())
    assert np.array_equal(trainer.encoder.projection, enc)
    assert "lm.tok_embed" in frozen and "lm.layers.0.attn.q.weight" in frozen


def test_nan_loss_aborts(tiny):
    from mvfuse.data import FrozenEncoder

    trainer = Trainer(ModelConfig(), TrainConfig(), FrozenEncoder(1))
    trainer.model.projector.out_shift.data[:] = np.nan
    with pytest.raises(TrainingDiverged, match="lr="):
        trainer.train_step(tiny.train[:2], 1e-3)


def test_empty_dataset(tiny):
    from mvfuse.data import Splits

    with pytest.raises(ValueError):
        run_training(Splits(tiny.manifest, [], tiny.val), ModelConfig(), TrainConfig())


def test_write_history(tmp_path):
    write_history([{"epoch": 1, "train_loss": 0.5}], tmp_path / "h")
    assert (tmp_path / "h").read_text() == '{"epoch": 1, "train_loss": 0.5}\n'


# ---------------------------------------------------------------- checkpoints


@pytest.fixture(scope="module")
def trained(tiny):
    best, _, trainer = run_training(tiny, ModelConfig(), TrainConfig(epochs=2, batch_size=6, base_lr=1e-3),
                                    evaluate=False)
    return best, trainer


def test_checkpoint_roundtrip_bytes(trained, tmp_path):
    best, _ = trained
    save_checkpoint(best, tmp_path / "a")
    loaded = load_checkpoint(tmp_path / "a")
    assert loaded == best
    save_checkpoint(loaded, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert (tmp_path / "a").read_bytes()[:8] == b"AGPCKPT1"


def test_checkpoint_restores_forward(trained, tiny, tmp_path):
    best, trainer = trained
    save_checkpoint(best, tmp_path / "c")
    model, encoder = model_from_checkpoint(load_checkpoint(tmp_path / "c"))
    feats = trainer.features(tiny.val)
    prompts = [s.to_prompt() for s in tiny.val]
    assert model.loss(prompts, feats).item() == trainer.model.loss(prompts, feats).item()
    assert np.array_equal(encoder.projection, trainer.encoder.projection)


def test_corrupted_magic(trained, tmp_path):
    save_checkpoint(trained[0], tmp_path / "c")
    data = bytearray((tmp_path / "c").read_bytes())
    data[0] ^= 0xFF
    (tmp_path / "c").write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "c")


def test_truncated_payload(trained, tmp_path):
    save_checkpoint(trained[0], tmp_path / "c")
    data = (tmp_path / "c").read_bytes()
    (tmp_path / "c").write_bytes(data[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "c")


def test_mlp_checkpoint_into_agp_model(tiny):
    best, _, _ = run_training(tiny, ModelConfig(projector="mlp"), TrainConfig(epochs=0))
    agp = VisionLanguageModel(ModelConfig(projector="agp"), np.random.default_rng(0))
    with pytest.raises(CheckpointError) as err:
        restore(agp, best)
    msg = str(err.value)
    assert "mlp.fc1.weight" in msg and "agp.in_proj.weight" in msg


def test_shape_mismatch_lists_tensor(trained):
    best = trained[0]
    bad = type(best)(dict(best.tensors), best.meta)
    bad.tensors["agp.gate.bias"] = np.zeros(3)
    model = VisionLanguageModel(ModelConfig(), np.random.default_rng(0))
    with pytest.raises(CheckpointError, match=r"agp.gate.bias: shape \[3\]"):
        restore(model, bad)
