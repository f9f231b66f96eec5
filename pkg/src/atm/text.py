"""Language embedders.

The default is a deterministic bag-of-words hashing embedder so the pipeline
never needs external weights.  Anything with an ``encode(str) -> vector``
method and a ``dim`` attribute can be swapped in.
"""
from __future__ import annotations

import hashlib
import re

import numpy as np


class HashingTextEncoder:
    def __init__(self, dim: int = 32, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def _word_vector(self, word: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{word}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.standard_normal(self.dim)

    def encode(self, text: str) -> np.ndarray:
        if text not in self._cache:
            words = re.findall(r"[a-z0-9]+", text.lower())
            v = np.zeros(self.dim)
            for w in words:
                v += self._word_vector(w)
            n = np.linalg.norm(v)
            self._cache[text] = (v / n if n > 0 else v).astype(np.float32)
        return self._cache[text].copy()

    def __call__(self, text: str) -> np.ndarray:
        return self.encode(text)


class SentenceEncoderAdapter:
    """Wraps a pretrained sentence encoder exposing ``encode(list[str])``."""

    def __init__(self, model, dim: int):
        self.model = model
        self.dim = dim

    def encode(self, text: str) -> np.ndarray:
        return np.asarray(self.model.encode([text])[0], dtype=np.float32)

    __call__ = encode
