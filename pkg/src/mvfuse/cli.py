"""``mvfuse`` command line: gen-data, train, eval, compare, verify, generate.

Exit codes: 0 success, 1 precondition or config error, 2 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, model_from_checkpoint, save_checkpoint
from .data import (
    VIEW_SETTINGS,
    DatasetError,
    DatasetManifest,
    generate_dataset,
    probe_self_test,
    read_dataset,
    write_dataset,
)
from .fusion import AGPConfig, MLPConfig, param_count
from .lm import LMConfig
from .metrics import evaluate_model
from .model import ModelConfig
from .tokenizer import LABEL_NAMES
from .train import TrainConfig, run_training, train_config_from_dict, train_config_to_dict

log = logging.getLogger("mvfuse")

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------- config


def paper_dims_model(projector: str) -> ModelConfig:
    return ModelConfig(projector=projector, lm=LMConfig(d_model=576, n_heads=4, max_seq=512),
                       agp=AGPConfig(d_view=64), mlp=MLPConfig(d_view=64))


def resolve_run_config(args) -> dict:
    """Merge a JSON config file (if any) with explicit flags; flags win."""
    cfg = {"model": ModelConfig().to_dict(), "train": train_config_to_dict(TrainConfig())}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as err:
            raise ConfigError(f"cannot read config {args.config}: {err}") from None
        for section in ("model", "train"):
            cfg[section].update(loaded.get(section, {}))
        cfg["data"] = loaded.get("data")
    if args.paper_dims:
        cfg["model"] = paper_dims_model(args.projector or cfg["model"]["projector"]).to_dict()
        cfg["train"]["batch_size"] = 32
    overrides = {
        ("model", "projector"): args.projector,
        ("model", "supervise_all"): True if args.supervise_all else None,
        ("train", "view_setting"): args.views,
        ("train", "epochs"): args.epochs,
        ("train", "batch_size"): args.batch_size,
        ("train", "base_lr"): args.lr,
        ("train", "seed"): args.seed,
    }
    for (section, key), value in overrides.items():
        if value is not None:
            cfg[section][key] = value
    if args.data:
        cfg["data"] = str(args.data)
    if not cfg.get("data"):
        raise ConfigError("no dataset given (use --data or a config file with a 'data' entry)")
    try:
        model_config = ModelConfig.from_dict(cfg["model"])
        train_config = train_config_from_dict(cfg["train"])
    except (TypeError, ValueError, KeyError) as err:
        raise ConfigError(f"invalid config: {err}") from None
    cfg["model"], cfg["train"] = model_config.to_dict(), train_config_to_dict(train_config)
    return cfg


def _load_splits(path):
    try:
        return read_dataset(path)
    except (DatasetError, OSError) as err:
        raise ConfigError(str(err)) from None


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    manifest = DatasetManifest(n_train=args.n_train, n_val=args.n_val, V=args.views, seed=args.seed,
                               commentaries_per_sample=args.commentaries)
    try:
        manifest.validate()
    except DatasetError as err:
        raise ConfigError(str(err)) from None
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise ConfigError(f"{out} exists and is not empty (pass --force to overwrite)")
        shutil.rmtree(out)
    splits = generate_dataset(manifest)
    write_dataset(splits, out)
    probe = probe_self_test(splits)
    print(f"wrote {len(splits.train)} train / {len(splits.val)} val samples to {out}")
    print("probe self-test (logistic probes on latents):")
    print("  single-view accuracy: " + ", ".join(f"{a:.3f}" for a in probe["single_view_acc"]))
    print(f"  fused-score accuracy: {probe['fused_acc']:.3f}")
    print("  label fractions:      " + ", ".join(f"{f:.3f}" for f in probe["label_fractions"]))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_run_config(args)
    splits = _load_splits(cfg["data"])
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    model_config = ModelConfig.from_dict(cfg["model"])
    train_config = train_config_from_dict(cfg["train"])
    proj_cfg = model_config.agp if model_config.projector == "agp" else model_config.mlp
    print(f"projector {model_config.projector}: {param_count(proj_cfg)} parameters")
    best, history, trainer = run_training(splits, model_config, train_config, run_dir / "history.jsonl")
    save_checkpoint(best, run_dir / "checkpoint.agpckpt")
    for row in history:
        print(json.dumps(row, sort_keys=True))
    print(f"trainable parameters: {sum(p.size for p in trainer.params.values())}")
    print(f"checkpoint: {run_dir / 'checkpoint.agpckpt'}")
    return EXIT_OK


def _checkpoint_from_args(args):
    path = Path(args.checkpoint) if args.checkpoint else Path(args.run_dir) / "checkpoint.agpckpt"
    if not path.exists():
        raise ConfigError(f"no checkpoint at {path}")
    try:
        ckpt = load_checkpoint(path)
        model, encoder = model_from_checkpoint(ckpt)
    except CheckpointError as err:
        raise ConfigError(str(err)) from None
    if args.views is None:
        args.views = ckpt.meta["train_config"]["view_setting"]
    return model, encoder


def write_csv(report, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "precision", "recall", "f1", "parsed_support"])
        for c, name in enumerate(LABEL_NAMES):
            w.writerow([name, f"{report.precision[c]:.4f}", f"{report.recall[c]:.4f}", f"{report.f1[c]:.4f}",
                        sum(report.confusion[c])])
        w.writerow(["accuracy", "", "", f"{report.accuracy:.4f}", report.n_samples])
        w.writerow(["macro_f1", "", "", f"{report.macro_f1:.4f}", report.n_samples])
        w.writerow(["parse_failures", "", "", "", report.parse_failures])


def cmd_eval(args) -> int:
    model, encoder = _checkpoint_from_args(args)
    splits = _load_splits(args.data)
    samples = splits.val if args.split == "val" else splits.train
    report = evaluate_model(model, samples, encoder, args.views, args.max_new_tokens)
    text = json.dumps(report.to_dict(with_generations=args.generations), indent=2, sort_keys=True)
    print(text)
    if args.run_dir:
        Path(args.run_dir, "report.json").write_text(text + "\n")
    if args.csv:
        write_csv(report, args.csv)
    return EXIT_OK


def cmd_compare(args) -> int:
    from .experiment import CompareConfig, run_comparison

    tc = TrainConfig(base_lr=args.lr, epochs=args.epochs)
    cc = CompareConfig(seeds=tuple(args.seeds), n_train=args.n_train, n_val=args.n_val, train=tc)
    result = run_comparison(cc)
    print(result.format())
    print(f"AGP - MLP (ego-exos): {100 * result.fusion_gap():+.1f} points; total {result.seconds:.0f}s")
    if args.out:
        Path(args.out).write_text(json.dumps({"table": result.table(), "runs": [asdict(r) for r in result.runs],
                                              "seconds": result.seconds}, indent=2) + "\n")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import paper_dim_counts, run_checks

    def report(r):
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} {r.detail}  [{r.seconds:.2f}s]")

    select = (lambda n: any(s in n for s in args.only)) if args.only else None
    results = run_checks(select, report)
    if args.paper_dims:
        print("paper-dimension parameter counts:")
        for k, v in paper_dim_counts().items():
            print(f"  {k:<28} {v}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_VERIFY
    return EXIT_OK


def cmd_generate(args) -> int:
    from .data import encode_views

    model, encoder = _checkpoint_from_args(args)
    splits = _load_splits(args.data)
    samples = splits.val if args.split == "val" else splits.train
    if not 0 <= args.index < len(samples):
        raise ConfigError(f"index {args.index} outside the {args.split} split of {len(samples)} samples")
    s = samples[args.index]
    out = model.generate([s.to_prompt()], encode_views([s], encoder, args.views), args.max_new_tokens)[0]
    sys.stdout.buffer.write(out + b"\n")
    sys.stdout.flush()
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvfuse", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic multi-view dataset")
    g.add_argument("--n-train", type=int, default=512)
    g.add_argument("--n-val", type=int, default=128)
    g.add_argument("--views", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--commentaries", type=int, default=1, help="commentary variants per training sample")
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train projector + LoRA adapters")
    t.add_argument("--data")
    t.add_argument("--run-dir", required=True)
    t.add_argument("--config", help="JSON file with 'data', 'model' and 'train' sections")
    t.add_argument("--projector", choices=["agp", "mlp"])
    t.add_argument("--views", choices=VIEW_SETTINGS)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--supervise-all", action="store_true", help="also supervise system and user tokens")
    t.add_argument("--paper-dims", action="store_true", help="768/1024/4 heads/576 sizes and batch 32")
    t.set_defaults(func=cmd_train)

    def add_checkpoint_args(q):
        q.add_argument("--run-dir")
        q.add_argument("--checkpoint")
        q.add_argument("--data", required=True)
        q.add_argument("--split", choices=["train", "val"], default="val")
        q.add_argument("--views", choices=VIEW_SETTINGS, help="default: the setting the checkpoint was trained on")
        q.add_argument("--max-new-tokens", type=int, default=128)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    add_checkpoint_args(e)
    e.add_argument("--csv", help="also write a per-class table")
    e.add_argument("--generations", action="store_true", help="include generated texts in the JSON")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="AGP vs MLP over ego / exos / ego-exos")
    c.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    c.add_argument("--n-train", type=int, default=512)
    c.add_argument("--n-val", type=int, default=128)
    c.add_argument("--epochs", type=int, default=6)
    c.add_argument("--lr", type=float, default=None)
    c.add_argument("--out", help="write the table and per-run results as JSON")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("verify", help="run the invariant suite")
    v.add_argument("--paper-dims", action="store_true", help="also print paper-dimension parameter counts")
    v.add_argument("--only", nargs="+", help="run checks whose name contains any of these strings")
    v.set_defaults(func=cmd_verify)

    gen = sub.add_parser("generate", help="greedy reply for one sample, raw bytes to stdout")
    add_checkpoint_args(gen)
    gen.add_argument("--index", type=int, default=0)
    gen.set_defaults(func=cmd_generate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if getattr(args, "command", None) == "compare" and args.lr is None:
        from .experiment import DESK_LR
        args.lr = DESK_LR
    if args.command in ("eval", "generate") and not (args.run_dir or args.checkpoint):
        print("error: pass --run-dir or --checkpoint", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
