"""Train AGP and the MLP baseline over ego / exos / ego-exos and write the table as JSON.

    python scripts/compare_projectors.py --seeds 0 1 2 --out compare.json
    python scripts/compare_projectors.py --seeds 0 --epochs 3 --n-train 128   # quick look
"""

from __future__ import annotations

import argparse
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

from mvfuse.experiment import DESK_LR, CompareConfig, run_comparison
from mvfuse.train import TrainConfig


@dataclass
class ScriptConfig:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    n_train: int = 512
    n_val: int = 128
    views: int = 5
    epochs: int = 6
    lr: float = DESK_LR
    out: Path | None = None

    def compare_config(self) -> CompareConfig:
        return CompareConfig(seeds=tuple(self.seeds), n_train=self.n_train, n_val=self.n_val, views=self.views,
                             train=TrainConfig(epochs=self.epochs, base_lr=self.lr))


def parse_args(argv=None) -> ScriptConfig:
    d = ScriptConfig()
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=d.seeds)
    p.add_argument("--n-train", type=int, default=d.n_train)
    p.add_argument("--n-val", type=int, default=d.n_val)
    p.add_argument("--views", type=int, default=d.views)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--out", type=Path)
    return ScriptConfig(**vars(p.parse_args(argv)))


def main(argv=None) -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = parse_args(argv)
    result = run_comparison(cfg.compare_config())
    print(result.format())
    print(f"AGP - MLP (ego-exos): {100 * result.fusion_gap():+.1f} points")
    for proj in ("agp", "mlp"):
        print(f"{proj}: ego-exos beats both single settings: {result.fusion_beats_single(proj)}")
    print(f"total {result.seconds / 60:.1f} min")
    if cfg.out:
        payload = {"config": {**asdict(cfg), "out": str(cfg.out)}, "table": result.table(),
                   "fusion_gap": result.fusion_gap(), "seconds": result.seconds,
                   "runs": [asdict(r) for r in result.runs]}
        cfg.out.write_text(json.dumps(payload, indent=2) + "\n")


if __name__ == "__main__":
    main()
