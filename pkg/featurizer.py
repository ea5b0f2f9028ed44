"""
featurizer.py – hashed term-count features

Tokens are maximal alphanumeric runs.  Unigrams and adjacent bigrams are
hashed with 64-bit FNV-1a (seed XORed into the offset basis) and masked
into `num_buckets`.  Collisions are accepted.
"""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Iterable, List, Sequence

import numpy as np
import scipy.sparse as sp

import config
from errors import ArgumentError

# ── hashing constants ─────────────────────────────────────────────────────
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME  = 0x100000001B3
MASK64     = 0xFFFFFFFFFFFFFFFF
BIGRAM_SEP = "\x1f"

_TOKEN_RE = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class FeaturizerConfig:
    num_buckets: int  = config.NUM_BUCKETS
    use_bigrams: bool = config.USE_BIGRAMS
    lowercase:   bool = config.LOWERCASE
    hash_seed:   int  = config.HASH_SEED

    def __post_init__(self) -> None:
        n = self.num_buckets
        if n < 2 or n & (n - 1):
            raise ArgumentError(f"num_buckets must be a power of two >= 2, got {n}")
        if not 0 <= self.hash_seed <= MASK64:
            raise ArgumentError(f"hash_seed must fit in 64 bits, got {self.hash_seed}")


@dataclass(frozen=True)
class SparseFeatures:
    indices: np.ndarray   # int64, strictly increasing
    values:  np.ndarray   # float32 counts > 0

    def __len__(self) -> int:
        return int(self.indices.size)


# ── hashing ───────────────────────────────────────────────────────────────
@lru_cache(maxsize=1 << 20)
def fnv1a64(data: bytes, seed: int = 0) -> int:
    h = FNV_OFFSET ^ seed
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & MASK64
    return h


def tokenize(text: str, lowercase: bool = True) -> List[str]:
    if lowercase:
        text = text.lower()
    return _TOKEN_RE.findall(text)


def _grams(tokens: Sequence[str], use_bigrams: bool) -> Iterable[str]:
    yield from tokens
    if use_bigrams:
        for a, b in zip(tokens, tokens[1:]):
            yield a + BIGRAM_SEP + b


def bucket_counts(text: str, cfg: FeaturizerConfig) -> Counter:
    mask = cfg.num_buckets - 1
    toks = tokenize(text, cfg.lowercase)
    return Counter(fnv1a64(g.encode("utf-8"), cfg.hash_seed) & mask
                   for g in _grams(toks, cfg.use_bigrams))


def featurize(text: str, cfg: FeaturizerConfig) -> SparseFeatures:
    counts = bucket_counts(text, cfg)
    idx = np.fromiter(sorted(counts), dtype=np.int64, count=len(counts))
    val = np.array([counts[i] for i in idx.tolist()], dtype=np.float32)
    return SparseFeatures(idx, val)


def featurize_many(texts: Sequence[str], cfg: FeaturizerConfig,
                   dtype=np.float32) -> sp.csr_matrix:
    """Row i = featurize(texts[i]) as a CSR matrix of shape (len, num_buckets)."""
    indptr  = np.zeros(len(texts) + 1, dtype=np.int64)
    cols:  List[np.ndarray] = []
    vals:  List[np.ndarray] = []
    for i, t in enumerate(texts):
        f = featurize(t, cfg)
        cols.append(f.indices)
        vals.append(f.values)
        indptr[i + 1] = indptr[i] + len(f)
    indices = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    data    = np.concatenate(vals).astype(dtype) if vals else np.zeros(0, dtype=dtype)
    return sp.csr_matrix((data, indices, indptr),
                         shape=(len(texts), cfg.num_buckets))


# ── feature cache ─────────────────────────────────────────────────────────
class FeatureTable:
    """
    Featurize each distinct text once and hand out CSR row batches.

    Keys are arbitrary strings (passage ids, "q:"+query id); rows keep the
    order in which keys were added.
    """

    def __init__(self, cfg: FeaturizerConfig):
        self.cfg = cfg
        self._rows: Dict[str, int] = {}
        self._pending: List[str] = []
        self._matrix = sp.csr_matrix((0, cfg.num_buckets), dtype=np.float64)

    def __contains__(self, key: str) -> bool:
        return key in self._rows

    def __len__(self) -> int:
        return len(self._rows)

    def add(self, key: str, text: str) -> None:
        if key in self._rows:
            return
        self._rows[key] = len(self._rows)
        self._pending.append(text)

    def add_many(self, items: Iterable[tuple[str, str]]) -> None:
        for key, text in items:
            self.add(key, text)

    def _flush(self) -> None:
        if self._pending:
            block = featurize_many(self._pending, self.cfg, dtype=np.float64)
            self._matrix = sp.vstack([self._matrix, block], format="csr")
            self._pending = []

    def rows(self, keys: Sequence[str]) -> sp.csr_matrix:
        self._flush()
        return self._matrix[[self._rows[k] for k in keys]]

    @property
    def matrix(self) -> sp.csr_matrix:
        self._flush()
        return self._matrix

    def row_of(self, key: str) -> int:
        return self._rows[key]
