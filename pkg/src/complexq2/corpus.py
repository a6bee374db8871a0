"""Byte-level corpora and a deterministic synthetic text generator."""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

BYTE_VOCAB = 256

_SUBJECTS = [
    "the farmer", "a young girl", "the old man", "my brother", "the teacher", "a small dog",
    "the captain", "our neighbour", "the baker", "a tired traveller", "the king", "her mother",
    "the doctor", "a quiet student", "the river", "the wind", "every child", "the merchant",
]
_VERBS = [
    "walked to", "looked at", "carried", "found", "painted", "forgot", "remembered", "opened",
    "followed", "watched", "cleaned", "sold", "built", "lost", "visited", "crossed", "heard", "loved",
]
_OBJECTS = [
    "the village", "a wooden box", "the long road", "an old letter", "the green field", "a red door",
    "the market", "the bridge", "a bright lamp", "the garden", "the mountain", "a silver coin",
    "the harbour", "a warm coat", "the library", "the forest", "a broken clock", "the tower",
]
_ADVERBIALS = [
    "in the morning", "before the rain", "after dinner", "at night", "with great care", "without a word",
    "in the spring", "near the church", "under the trees", "for many years", "on a cold day", "again",
]
_CONNECTIVES = ["and then", "but", "because", "so", "while", "although"]
_OPENERS = ["Once upon a time", "Later that week", "In those days", "One evening", "Long ago", "Soon after"]


def _clause(r: random.Random) -> str:
    s = f"{r.choice(_SUBJECTS)} {r.choice(_VERBS)} {r.choice(_OBJECTS)}"
    if r.random() < 0.6:
        s += " " + r.choice(_ADVERBIALS)
    return s


def _sentence(r: random.Random) -> str:
    s = _clause(r)
    if r.random() < 0.45:
        s += f" {r.choice(_CONNECTIVES)} {_clause(r)}"
    if r.random() < 0.25:
        s = f"{r.choice(_OPENERS)}, {s}"
    s = s[0].upper() + s[1:]
    return s + r.choice([".", ".", ".", "!", "?"])


def synthetic_text(n_bytes: int = 100_000, seed: int = 0) -> bytes:
    """Deterministic English-like prose of exactly ``n_bytes`` ASCII bytes."""
    r = random.Random(seed)
    parts: list[str] = []
    size = 0
    while size < n_bytes:
        para = " ".join(_sentence(r) for _ in range(r.randint(3, 7))) + "\n\n"
        parts.append(para)
        size += len(para)
    return "".join(parts).encode("ascii")[:n_bytes]


def encode_bytes(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def decode_bytes(ids) -> str:
    return bytes(int(i) for i in ids).decode("utf-8", errors="replace")


@dataclass
class Corpus:
    data: bytes
    seq_len: int

    def __post_init__(self):
        if self.seq_len <= 0:
            raise ConfigurationError("seq_len must be positive")
        if len(self.data) < self.seq_len + 1:
            raise ConfigurationError(
                f"corpus has {len(self.data)} bytes; at least {self.seq_len + 1} are needed for one window"
            )

    @property
    def vocab_size(self) -> int:
        return BYTE_VOCAB

    @property
    def tokens(self) -> np.ndarray:
        return encode_bytes(self.data)

    def windows(self) -> tuple[np.ndarray, np.ndarray]:
        """Non-overlapping ``(inputs, targets)`` windows, targets shifted by one."""
        t = self.tokens
        n = (t.size - 1) // self.seq_len
        x = t[: n * self.seq_len].reshape(n, self.seq_len)
        y = t[1 : n * self.seq_len + 1].reshape(n, self.seq_len)
        return x, y

    @classmethod
    def from_file(cls, path, seq_len: int) -> "Corpus":
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"corpus file not found: {p}")
        return cls(p.read_bytes(), seq_len)
