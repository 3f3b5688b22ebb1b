"""Labeled RNG streams derived from a master seed."""
from __future__ import annotations

import hashlib

import numpy as np


def _label_words(labels) -> list[int]:
    text = "\x1f".join(str(x) for x in labels).encode()
    digest = hashlib.sha256(text).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 32, 4)]


def stream(seed: int, *labels) -> np.random.Generator:
    """Generator for the stream named by ``labels`` under ``seed``.

    Streams with different labels are statistically independent, and each can
    be regenerated on its own.
    """
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *_label_words(labels)])
    return np.random.Generator(np.random.PCG64(seq))
