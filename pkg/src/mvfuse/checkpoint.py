"""Named-tensor checkpoint container and its binary file format.

Layout: 8-byte magic ``AGPCKPT1``, little-endian uint64 header length, UTF-8
JSON header (tensor names, dtypes, shapes, byte offsets, metadata), then the
raw little-endian float64 payloads in header order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"AGPCKPT1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.meta == other.meta
            and self.tensors.keys() == other.tensors.keys()
            and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)
        )


def capture(model, encoder, train_config, step: int, rng: np.random.Generator) -> Checkpoint:
    from .train import train_config_to_dict

    tensors = {name: p.data.copy() for name, p in model.named_parameters()}
    tensors["encoder.projection"] = encoder.projection.copy()
    meta = {
        "model_config": model.config.to_dict(),
        "train_config": train_config_to_dict(train_config),
        "step": int(step),
        "rng_state": rng.bit_generator.state,
        "encoder": {"seed": encoder.seed, "d_raw": encoder.d_raw, "d_view": encoder.d_view},
    }
    return Checkpoint(tensors, json.loads(json.dumps(meta)))


def restore(model, ckpt: Checkpoint) -> None:
    """Copy checkpoint tensors into ``model``; names and shapes must match exactly."""
    own = dict(model.named_parameters())
    theirs = {k: v for k, v in ckpt.tensors.items() if not k.startswith("encoder.")}
    problems = []
    for name in sorted(own.keys() | theirs.keys()):
        if name not in theirs:
            problems.append(f"{name}: missing from checkpoint")
        elif name not in own:
            problems.append(f"{name}: not in model")
        elif own[name].shape != theirs[name].shape:
            problems.append(f"{name}: shape {list(theirs[name].shape)} vs model {list(own[name].shape)}")
    if problems:
        raise CheckpointError("checkpoint does not match model:\n  " + "\n  ".join(problems))
    for name, p in own.items():
        p.data = theirs[name].copy()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries, offset = [], 0
    for name in sorted(ckpt.tensors):
        arr = ckpt.tensors[name]
        nbytes = arr.size * 8
        entries.append({"name": name, "dtype": "float64", "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = json.dumps({"tensors": entries, "meta": ckpt.meta}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for e in entries:
            fh.write(np.ascontiguousarray(ckpt.tensors[e["name"]], dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}, expected {MAGIC!r}")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen])
    except ValueError as err:
        raise CheckpointError(f"{path}: unreadable header: {err}") from None
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        if e["dtype"] != "float64":
            raise CheckpointError(f"{path}: unsupported dtype {e['dtype']} for {e['name']}")
        start, stop = base + e["offset"], base + e["offset"] + e["nbytes"]
        if stop > len(raw):
            raise CheckpointError(f"{path}: payload for {e['name']} truncated")
        tensors[e["name"]] = np.frombuffer(raw[start:stop], dtype="<f8").astype(np.float64).reshape(e["shape"])
    return Checkpoint(tensors, header["meta"])


def model_from_checkpoint(ckpt: Checkpoint):
    """Rebuild model and encoder described by a checkpoint's metadata."""
    from .data import FrozenEncoder
    from .model import ModelConfig, VisionLanguageModel

    cfg = ModelConfig.from_dict(ckpt.meta["model_config"])
    model = VisionLanguageModel(cfg, np.random.default_rng(0))
    restore(model, ckpt)
    e = ckpt.meta["encoder"]
    encoder = FrozenEncoder(e["seed"], e["d_raw"], e["d_view"])
    if not np.array_equal(encoder.projection, ckpt.tensors["encoder.projection"]):
        raise CheckpointError("encoder projection in checkpoint differs from the seeded encoder")
    return model, encoder
