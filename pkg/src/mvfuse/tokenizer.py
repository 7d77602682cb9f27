"""Byte-level vocabulary, chat prompt rendering and label/assistant text."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

BOS, EOS, PAD, VIDEO_START, VIDEO, VIDEO_END = range(256, 262)
VOCAB_SIZE = 262
SPECIAL_TOKENS = {
    "<|bos|>": BOS,
    "<|eos|>": EOS,
    "<|pad|>": PAD,
    "<|video_start|>": VIDEO_START,
    "<|video|>": VIDEO,
    "<|video_end|>": VIDEO_END,
}
SPECIAL_NAMES = {v: k for k, v in SPECIAL_TOKENS.items()}
_SPECIAL_RE = re.compile(b"(" + b"|".join(re.escape(k.encode()) for k in SPECIAL_TOKENS) + b")")

LABEL_NAMES = ("Novice", "Early Expert", "Intermediate Expert", "Late Expert")

SYSTEM_PROMPT = "You are a visual agent for human performance analysis."
USER_PROMPT = (
    "Here are 8 frames sampled from a video: <|video_start|><|video|><|video_end|>. "
    "Given this video, analyze the proficiency level of the subject."
)


def _to_bytes(text) -> bytes:
    return text.encode("utf-8") if isinstance(text, str) else bytes(text)


def encode(text) -> list[int]:
    """Bytes map to ids 0-255; literal special-token names map to their ids."""
    ids: list[int] = []
    for i, part in enumerate(_SPECIAL_RE.split(_to_bytes(text))):
        if i % 2:
            ids.append(SPECIAL_TOKENS[part.decode()])
        else:
            ids.extend(part)
    return ids


def decode(ids, skip=()) -> bytes:
    out = bytearray()
    for t in ids:
        t = int(t)
        if t < 256:
            out.append(t)
        elif t in skip:
            continue
        elif t in SPECIAL_NAMES:
            out += SPECIAL_NAMES[t].encode()
        else:
            raise ValueError(f"token id {t} outside the vocabulary")
    return bytes(out)


def assistant_text(label: int, commentary: str) -> str:
    return f"Proficiency Level: {LABEL_NAMES[label]}.\nProficiency Commentary: {commentary}"


def chat_text(system: str, user: str, assistant: str | None = None) -> str:
    text = f"<|system|>\n{system}\n<|user|>\n{user}\n<|assistant|>\n"
    return text if assistant is None else text + assistant


@dataclass
class PromptSample:
    system: str
    user: str
    assistant: str
    views: object = None  # ViewFeatureSet or raw array
    label: int = -1


@dataclass
class RenderedPrompt:
    ids: np.ndarray
    video_position: int
    loss_mask: np.ndarray


def render_prompt(sample: PromptSample, mode: str = "train", supervise_all: bool = False) -> RenderedPrompt:
    """Tokenize the chat layout.

    ``train`` appends the assistant message and EOS; ``infer`` stops after the
    assistant header. The loss mask marks assistant bytes and EOS, or every
    token after BOS when ``supervise_all``.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    prefix = [BOS] + encode(chat_text(sample.system, sample.user))
    n_video = prefix.count(VIDEO)
    if n_video != 1:
        raise ValueError(f"prompt must contain exactly one <|video|> token, found {n_video}")
    pos = prefix.index(VIDEO)
    if prefix[pos - 1] != VIDEO_START or prefix[pos + 1] != VIDEO_END:
        raise ValueError("<|video|> must be bracketed by <|video_start|> and <|video_end|>")
    if mode == "infer":
        ids = prefix
        mask = np.zeros(len(ids), dtype=bool)
    else:
        body = encode(sample.assistant)
        if any(t >= 256 for t in body):
            raise ValueError("assistant text may not contain special tokens")
        ids = prefix + body + [EOS]
        mask = np.zeros(len(ids), dtype=bool)
        mask[len(prefix):] = True
    if supervise_all:
        mask[1:] = True
    return RenderedPrompt(np.asarray(ids, dtype=np.int64), pos, mask)
