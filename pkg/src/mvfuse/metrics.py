"""Label extraction, classification metrics and lexical text metrics."""

from __future__ import annotations

import itertools
import re
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from .tokenizer import LABEL_NAMES

N_CLASSES = len(LABEL_NAMES)
# longest names first so "Early Expert" is never read as a shorter name
_LABEL_RE = re.compile(
    r"proficiency\s+level\s*:\s*("
    + "|".join(re.escape(n).replace(r"\ ", r"\s+") for n in sorted(LABEL_NAMES, key=len, reverse=True))
    + r")",
    re.IGNORECASE,
)
_CANON = {n.lower(): i for i, n in enumerate(LABEL_NAMES)}


def parse_label(text) -> int | None:
    """Class index from the first ``Proficiency Level: <name>`` occurrence, or None."""
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    m = _LABEL_RE.search(text)
    if m is None:
        return None
    return _CANON[" ".join(m.group(1).lower().split())]


@dataclass
class ClassificationResult:
    accuracy: float
    accuracy_parsed: float | None
    macro_f1: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    confusion: list[list[int]]
    parse_failures: int


def classification_metrics(preds, gold) -> ClassificationResult:
    """Accuracy and macro-F1 with parse failures (None) counted as wrong.

    ``confusion[g][p]`` counts parsed predictions only.
    """
    if len(preds) != len(gold):
        raise ValueError(f"{len(preds)} predictions for {len(gold)} gold labels")
    if not gold:
        raise ValueError("no samples to score")
    conf = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    failures = 0
    for p, g in zip(preds, gold):
        if p is None:
            failures += 1
        else:
            conf[g, p] += 1
    gold_count = np.bincount(np.asarray(gold), minlength=N_CLASSES)
    tp = np.diag(conf)
    pred_count = conf.sum(axis=0)
    prec, rec, f1 = [], [], []
    for c in range(N_CLASSES):
        P = tp[c] / pred_count[c] if pred_count[c] else 0.0
        R = tp[c] / gold_count[c] if gold_count[c] else 0.0
        prec.append(float(P))
        rec.append(float(R))
        f1.append(float(2 * P * R / (P + R)) if P + R else 0.0)
        if not pred_count[c] and not gold_count[c]:
            warnings.warn(f"class {LABEL_NAMES[c]!r} absent from predictions and gold; its F1 counts as 0")
    n = len(gold)
    parsed = n - failures
    return ClassificationResult(
        accuracy=float(tp.sum() / n),
        accuracy_parsed=float(tp.sum() / parsed) if parsed else None,
        macro_f1=float(np.mean(f1)),
        precision=prec,
        recall=rec,
        f1=f1,
        confusion=conf.tolist(),
        parse_failures=failures,
    )


def tokenize(text) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace."""
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8", errors="replace")
    return re.sub(r"[^\w\s]", "", text.lower()).split()


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> tuple[float, float, float]:
    """Sentence-level ROUGE-L precision, recall and F1 (beta = 1)."""
    ref, cand = tokenize(reference), tokenize(candidate)
    if not ref:
        raise ValueError("empty reference")
    if not cand:
        return 0.0, 0.0, 0.0
    lcs = lcs_length(cand, ref)
    P, R = lcs / len(cand), lcs / len(ref)
    return P, R, (2 * P * R / (P + R) if P + R else 0.0)


def count_chunks(alignment) -> int:
    """Chunks in an alignment given as (cand_idx, ref_idx) pairs."""
    pairs = sorted(alignment)
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


_MAX_ALIGNMENTS = 50_000


def best_alignment(cand: list[str], ref: list[str]) -> tuple[int, int]:
    """(matches, chunks) for the exact-match alignment with most matches, then fewest chunks.

    Word types occurring more than once are searched exhaustively; beyond
    ``_MAX_ALIGNMENTS`` combinations each repeated type falls back to
    in-order pairing.
    """
    cpos, rpos = defaultdict(list), defaultdict(list)
    for i, w in enumerate(cand):
        cpos[w].append(i)
    for j, w in enumerate(ref):
        rpos[w].append(j)
    options = []
    total = 1
    for w in cpos.keys() & rpos.keys():
        ci, rj = cpos[w], rpos[w]
        k = min(len(ci), len(rj))
        if len(ci) <= len(rj):
            opts = [list(zip(ci, perm)) for perm in itertools.permutations(rj, k)]
        else:
            opts = [list(zip(perm, rj)) for perm in itertools.permutations(ci, k)]
        options.append(opts)
        total *= len(opts)
        if total > _MAX_ALIGNMENTS:
            break
    if total > _MAX_ALIGNMENTS:
        options = [[list(zip(cpos[w], rpos[w]))] for w in cpos.keys() & rpos.keys()]
    matches = sum(len(o[0]) for o in options)
    if matches == 0:
        return 0, 0
    best = min(count_chunks([p for group in combo for p in group]) for combo in itertools.product(*options))
    return matches, best


def meteor_core(candidate, reference) -> float:
    """METEOR with exact unigram matching only (no stemming or synonym stages).

    F_mean = 10PR / (R + 9P); penalty = 0.5 (chunks / matches)^3.
    """
    ref, cand = tokenize(reference), tokenize(candidate)
    if not ref:
        raise ValueError("empty reference")
    if not cand:
        return 0.0
    m, chunks = best_alignment(cand, ref)
    if m == 0:
        return 0.0
    P, R = m / len(cand), m / len(ref)
    f_mean = 10 * P * R / (R + 9 * P)
    return f_mean * (1.0 - 0.5 * (chunks / m) ** 3)


def embedding_cosine(candidate, reference, table: np.ndarray) -> float:
    """Cosine between mean byte embeddings; a lexical diagnostic, not BERTScore."""
    def vec(t):
        b = t if isinstance(t, (bytes, bytearray)) else t.encode()
        return table[list(b)].mean(axis=0) if b else np.zeros(table.shape[1])

    u, v = vec(candidate), vec(reference)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    return float(u @ v / (nu * nv)) if nu and nv else 0.0


@dataclass
class EvalReport:
    n_samples: int
    accuracy: float
    accuracy_parsed: float | None
    macro_f1: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    confusion: list[list[int]]
    parse_failures: int
    rouge_l: dict = field(default_factory=dict)
    meteor: float = 0.0
    generations: list[str] = field(default_factory=list)

    def to_dict(self, with_generations: bool = False) -> dict:
        d = asdict(self)
        if not with_generations:
            d.pop("generations")
        return d


def score_texts(generated: list, gold_labels: list[int], gold_texts: list[str]) -> EvalReport:
    preds = [parse_label(g) for g in generated]
    cls = classification_metrics(preds, gold_labels)
    rl = [rouge_l(g, r) for g, r in zip(generated, gold_texts)]
    met = [meteor_core(g, r) for g, r in zip(generated, gold_texts)]
    texts = [g.decode("utf-8", errors="replace") if isinstance(g, bytes) else g for g in generated]
    return EvalReport(
        n_samples=len(generated),
        accuracy=cls.accuracy,
        accuracy_parsed=cls.accuracy_parsed,
        macro_f1=cls.macro_f1,
        precision=cls.precision,
        recall=cls.recall,
        f1=cls.f1,
        confusion=cls.confusion,
        parse_failures=cls.parse_failures,
        rouge_l={k: float(np.mean([x[i] for x in rl])) for i, k in enumerate(("precision", "recall", "f1"))},
        meteor=float(np.mean(met)),
        generations=texts,
    )


def evaluate_model(model, samples, encoder, view_setting: str = "ego-exos", max_new_tokens: int = 128) -> EvalReport:
    """Generate a reply per sample from the inference prompt and score it."""
    from .data import encode_views

    if not samples:
        raise ValueError("validation split is empty")
    feats = encode_views(samples, encoder, view_setting)
    generated = model.generate([s.to_prompt() for s in samples], feats, max_new_tokens)
    return score_texts(generated, [s.label for s in samples], [s.commentary for s in samples])
