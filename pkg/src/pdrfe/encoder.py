"""Utterance text -> fixed-dimension edge feature vectors.

The default encoder is a signed-hash bag of tokens: deterministic,
dependency-free, and pluggable, so a learned sentence encoder can be
swapped in through the same `encode` interface (see
`load_precomputed_features` for the file-based hook).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class EncoderSpec:
    dim: int = 32
    lowercase: bool = True
    hash_seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("encoder dim must be >= 1")


def _token_hash(token: str, seed: int) -> int:
    key = seed.to_bytes(8, "little", signed=True)
    digest = hashlib.blake2b(token.encode("utf-8"), key=key, digest_size=8).digest()
    return int.from_bytes(digest, "little")


def encode_utterance(text: str, spec: EncoderSpec) -> np.ndarray:
    """Signed-hash bag-of-tokens vector, L2-normalized when nonzero.

    Whitespace tokenization after optional lowercasing; each token lands in
    one of `spec.dim` buckets with a +/-1 sign. Empty text maps to the zero
    vector. Deterministic for a fixed spec, including across processes.
    """
    if spec.lowercase:
        text = text.lower()
    vec = np.zeros(spec.dim)
    for token in text.split():
        h = _token_hash(token, spec.hash_seed)
        bucket = h % spec.dim
        sign = 1.0 if (h >> 63) & 1 == 0 else -1.0
        vec[bucket] += sign
    norm = np.linalg.norm(vec)
    if norm > 0.0:
        vec /= norm
    return vec


class HashingEncoder:
    """Wrapper around `encode_utterance` with a per-token cache.

    Bitwise-identical to the plain function; the cache only avoids
    re-hashing tokens that recur across a corpus.
    """

    def __init__(self, spec: EncoderSpec | None = None):
        self.spec = spec or EncoderSpec()
        self._token_cache: dict[str, tuple[int, float]] = {}

    @property
    def dim(self) -> int:
        return self.spec.dim

    def _bucket(self, token: str) -> tuple[int, float]:
        got = self._token_cache.get(token)
        if got is None:
            h = _token_hash(token, self.spec.hash_seed)
            got = (h % self.spec.dim, 1.0 if (h >> 63) & 1 == 0 else -1.0)
            self._token_cache[token] = got
        return got

    def encode(self, text: str) -> np.ndarray:
        if self.spec.lowercase:
            text = text.lower()
        vec = np.zeros(self.spec.dim)
        for token in text.split():
            bucket, sign = self._bucket(token)
            vec[bucket] += sign
        norm = np.linalg.norm(vec)
        if norm > 0.0:
            vec /= norm
        return vec

    def encode_all(self, texts) -> np.ndarray:
        return np.stack([self.encode(t) for t in texts]) if texts else np.zeros((0, self.dim))


class PrecomputedEncoder:
    """Lookup encoder backed by an externally produced feature file."""

    def __init__(self, table: dict[str, np.ndarray], dim: int):
        self._table = table
        self.dim = dim

    def encode(self, utterance_id: str) -> np.ndarray:
        try:
            return self._table[utterance_id]
        except KeyError:
            raise KeyError(f"no precomputed feature for utterance {utterance_id!r}")


def load_precomputed_features(path: str | Path) -> PrecomputedEncoder:
    """Read JSON-lines {utterance_id, vector} records.

    This is the hook for real pre-trained utterance embeddings; the vectors
    bypass the hash encoder entirely.
    """
    table: dict[str, np.ndarray] = {}
    dim = None
    with Path(path).open("r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if "utterance_id" not in obj or "vector" not in obj:
                raise ValueError(f"line {ln}: expected utterance_id and vector fields")
            vec = np.asarray(obj["vector"], dtype=np.float64)
            if vec.ndim != 1:
                raise ValueError(f"line {ln}: vector must be 1D")
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise ValueError(f"line {ln}: vector dim {vec.shape[0]} != {dim}")
            table[str(obj["utterance_id"])] = vec
    if dim is None:
        raise ValueError(f"no feature records in {path}")
    return PrecomputedEncoder(table, dim)
