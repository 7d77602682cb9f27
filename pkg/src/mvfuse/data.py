"""Frozen view encoder stub and the synthetic multi-view proficiency dataset.

Each sample carries one scalar latent per view, hidden along a fixed per-view
direction in raw feature space. The label is the quartile bucket of
``s_ego * mean(s_exo)``, so no single view determines it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tokenizer import LABEL_NAMES, SYSTEM_PROMPT, USER_PROMPT, PromptSample, assistant_text

DATASET_VERSION = 1
NOISE_STD = 0.3
VIEW_SETTINGS = ("ego", "exos", "ego-exos")

COMMENTARY_TEMPLATES = (
    (
        "Movements are hesitant and often lose balance.",
        "The subject pauses often and lacks a clear plan.",
        "Basic steps are attempted but rarely completed well.",
    ),
    (
        "Core steps are correct but timing is uneven.",
        "The subject shows promise yet still hesitates.",
        "Form is acceptable with several visible slips.",
    ),
    (
        "Smooth and controlled movements with clear intent.",
        "The subject is steady and makes few mistakes.",
        "Good rhythm with only minor hesitation at times.",
    ),
    (
        "Fluid, precise and efficient from start to end.",
        "The subject moves with total confidence and ease.",
        "Expert control with no wasted motion at all.",
    ),
)


class DatasetError(ValueError):
    pass


class FrozenEncoder:
    """Fixed random linear map raw [d_raw] -> feature [d_view]; never trained."""

    def __init__(self, seed: int, d_raw: int = 32, d_view: int = 64):
        self.seed, self.d_raw, self.d_view = seed, d_raw, d_view
        rng = np.random.default_rng([seed, 0xE1C0DE])
        self.projection = rng.normal(0.0, 1.0 / np.sqrt(d_raw), size=(d_raw, d_view))
        self.projection.flags.writeable = False

    def encode(self, raw: np.ndarray) -> np.ndarray:
        return np.asarray(raw, dtype=np.float64) @ self.projection


@dataclass
class SynthSample:
    raw_views: np.ndarray  # [V, d_raw]
    label: int
    commentary: str
    latent: np.ndarray  # [V]

    def __eq__(self, other):
        if not isinstance(other, SynthSample):
            return NotImplemented
        return (
            self.label == other.label
            and self.commentary == other.commentary
            and np.array_equal(self.raw_views, other.raw_views)
            and np.array_equal(self.latent, other.latent)
        )

    @property
    def n_views(self) -> int:
        return self.raw_views.shape[0]

    def to_prompt(self, features: np.ndarray | None = None) -> PromptSample:
        return PromptSample(SYSTEM_PROMPT, USER_PROMPT, self.commentary, features, self.label)


@dataclass
class DatasetManifest:
    n_train: int = 512
    n_val: int = 128
    V: int = 5
    seed: int = 0
    d_raw: int = 32
    d_view: int = 64
    commentaries_per_sample: int = 1
    version: int = DATASET_VERSION
    label_names: list[str] = field(default_factory=lambda: list(LABEL_NAMES))

    def __post_init__(self):
        if list(self.label_names) != list(LABEL_NAMES):
            raise DatasetError(f"label_names must be {list(LABEL_NAMES)}")

    def validate(self) -> None:
        if self.V < 2:
            raise DatasetError(f"the cross-view label rule needs V >= 2, got V={self.V}")
        if self.n_train < 4 or self.n_val < 4:
            raise DatasetError("n_train and n_val must be >= 4")
        if self.commentaries_per_sample < 1:
            raise DatasetError("commentaries_per_sample must be >= 1")


@dataclass
class Splits:
    manifest: DatasetManifest
    train: list[SynthSample]
    val: list[SynthSample]


def fusion_score(latent: np.ndarray) -> np.ndarray:
    """r = s_ego * mean(s_exo) for latents [..., V] with the ego view first."""
    latent = np.asarray(latent)
    return latent[..., 0] * latent[..., 1:].mean(axis=-1)


def bucket(r: np.ndarray, edges: np.ndarray) -> np.ndarray:
    return np.searchsorted(edges, r, side="right")


def generate_dataset(manifest: DatasetManifest) -> Splits:
    manifest.validate()
    rng = np.random.default_rng(manifest.seed)
    V, d_raw = manifest.V, manifest.d_raw
    directions = rng.normal(size=(V, d_raw))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    def draw(n):
        latent = rng.uniform(-1.0, 1.0, size=(n, V))
        raw = latent[:, :, None] * directions[None] + rng.normal(0.0, NOISE_STD, size=(n, V, d_raw))
        return latent, raw

    lat_tr, raw_tr = draw(manifest.n_train)
    lat_va, raw_va = draw(manifest.n_val)
    edges = np.quantile(fusion_score(lat_tr), [0.25, 0.5, 0.75])

    def build(latent, raw, copies):
        labels = bucket(fusion_score(latent), edges)
        out = []
        for i, y in enumerate(labels):
            first = int(rng.integers(3))
            for k in range(copies):
                text = COMMENTARY_TEMPLATES[y][(first + k) % 3]
                out.append(SynthSample(raw[i], int(y), assistant_text(int(y), text), latent[i]))
        return out

    return Splits(manifest, build(lat_tr, raw_tr, manifest.commentaries_per_sample), build(lat_va, raw_va, 1))


def filter_views(raw_views: np.ndarray, setting: str) -> np.ndarray:
    """Select view rows: ``ego`` keeps row 0, ``exos`` rows 1.., ``ego-exos`` all."""
    if setting == "ego":
        return raw_views[:1]
    if setting == "exos":
        return raw_views[1:]
    if setting == "ego-exos":
        return raw_views
    raise ValueError(f"unknown view setting {setting!r}; choose from {VIEW_SETTINGS}")


def encode_views(batch: list[SynthSample], encoder: FrozenEncoder, setting: str = "ego-exos",
                 flat: bool = False) -> np.ndarray:
    """Encode all views of a batch in one pass over the flattened batch*view axis.

    Returns [B, V, d_view], or the [B*V, d_view] flat array when ``flat``.
    """
    views = [filter_views(s.raw_views, setting) for s in batch]
    counts = {v.shape[0] for v in views}
    if len(counts) != 1:
        raise DatasetError(f"all samples in a batch must share V, got view counts {sorted(counts)}")
    B, V = len(views), counts.pop()
    stacked = np.stack(views)
    flat_feats = encoder.encode(stacked.reshape(B * V, -1))
    return flat_feats if flat else flat_feats.reshape(B, V, encoder.d_view)


# ---------------------------------------------------------------- probes


def _probe_accuracy(x: np.ndarray, y: np.ndarray) -> float:
    from sklearn.linear_model import LogisticRegression

    x = (x - x.mean(axis=0)) / (x.std(axis=0) + 1e-12)
    clf = LogisticRegression(C=1e4, max_iter=5000).fit(x, y)
    return float(clf.score(x, y))


def probe_self_test(splits: Splits) -> dict:
    """Logistic probes on single-view latents versus the fused score r.

    A planted cross-view rule shows low single-view accuracy and high accuracy
    on r, along with a near-uniform label histogram.
    """
    lat = np.stack([s.latent for s in splits.train])
    y = np.array([s.label for s in splits.train])
    single = [_probe_accuracy(lat[:, v:v + 1], y) for v in range(lat.shape[1])]
    fused = _probe_accuracy(fusion_score(lat)[:, None], y)
    hist = np.bincount(y, minlength=4) / len(y)
    return {
        "single_view_acc": single,
        "max_single_view_acc": max(single),
        "fused_acc": fused,
        "label_fractions": hist.tolist(),
    }


# ---------------------------------------------------------------- files


def _sample_record(s: SynthSample) -> dict:
    return {
        "views": s.raw_views.tolist(),
        "label": s.label,
        "label_name": LABEL_NAMES[s.label],
        "commentary": s.commentary,
        "latent": s.latent.tolist(),
    }


def write_dataset(splits: Splits, out_dir) -> None:
    """``manifest.json`` plus one JSON object per line in ``train.jsonl``/``val.jsonl``.

    Python's float repr round-trips float64 exactly.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(asdict(splits.manifest), indent=2, sort_keys=True) + "\n")
    for name, samples in (("train", splits.train), ("val", splits.val)):
        with open(out / f"{name}.jsonl", "w") as fh:
            for s in samples:
                fh.write(json.dumps(_sample_record(s), sort_keys=True) + "\n")


def _read_split(path: Path) -> list[SynthSample]:
    data = path.read_bytes()
    samples = []
    offset = 0
    for lineno, line in enumerate(data.splitlines(keepends=True), 1):
        if not line.endswith(b"\n"):
            raise DatasetError(f"{path}: truncated record at line {lineno}, byte offset {offset}")
        try:
            rec = json.loads(line)
            label = int(rec["label"])
            if not 0 <= label < 4 or rec["label_name"] != LABEL_NAMES[label]:
                raise ValueError(f"bad label {rec['label']!r} / {rec['label_name']!r}")
            views = np.asarray(rec["views"], dtype=np.float64)
            if views.ndim != 2:
                raise ValueError("views must be an array of arrays")
            latent = np.asarray(rec.get("latent", [np.nan] * views.shape[0]), dtype=np.float64)
            samples.append(SynthSample(views, label, str(rec["commentary"]), latent))
        except (ValueError, KeyError, TypeError) as err:
            raise DatasetError(f"{path}: malformed record at line {lineno}, byte offset {offset}: {err}") from None
        offset += len(line)
    return samples


def read_dataset(path) -> Splits:
    root = Path(path)
    if not (root / "manifest.json").exists():
        raise DatasetError(f"no manifest.json under {root}")
    meta = json.loads((root / "manifest.json").read_text())
    if meta.get("version") != DATASET_VERSION:
        raise DatasetError(
            f"dataset version mismatch: file has version {meta.get('version')}, reader expects {DATASET_VERSION}"
        )
    manifest = DatasetManifest(**meta)
    return Splits(manifest, _read_split(root / "train.jsonl"), _read_split(root / "val.jsonl"))
