"""
index.py – corpus-side search structures

• exact_search   brute-force MIPS, the oracle for everything else
• kmeans         Lloyd's algorithm with k-means++ seeding
• build_ivf / ivf_search   coarse k-means lists, probe by inner product
• build_pq  / pq_search    product quantisation, asymmetric distance

Ranking rule everywhere: descending score, ties by ascending row index.
Scores are accumulated in float64 one row at a time, so a row's score does
not depend on which other rows were scored alongside it.
"""
from __future__ import annotations

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

import config
from errors import ArgumentError, FormatError, NumericError

logger = logging.getLogger(__name__)

# ── file format ───────────────────────────────────────────────────────────
INDEX_MAGIC   = b"DRBX"
INDEX_VERSION = 1
TAG_EXACT, TAG_IVF, TAG_PQ = 0, 1, 2
TAG_NAMES = {TAG_EXACT: "exact", TAG_IVF: "ivf", TAG_PQ: "pq"}

ASSIGN_CHUNK = 4096          # rows per assignment block, independent of threads


# ── types ─────────────────────────────────────────────────────────────────
@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    data:    np.ndarray               # (num_rows, dim) float32, row-major
    row_ids: Tuple[str, ...]

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise ArgumentError(f"embedding matrix must be 2-D, got shape {arr.shape}")
        if arr.shape[0] != len(self.row_ids):
            raise ArgumentError(f"{arr.shape[0]} rows but {len(self.row_ids)} row ids")
        if not np.all(np.isfinite(arr)):
            raise NumericError("embedding matrix contains non-finite values")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "row_ids", tuple(self.row_ids))

    @property
    def num_rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @cached_property
    def data64(self) -> np.ndarray:
        return self.data.astype(np.float64)

    def mean_norm(self) -> float:
        """Average L2 norm of the rows (μ_c in the margin)."""
        if self.num_rows == 0:
            return 0.0
        return float(np.sqrt((self.data64 * self.data64).sum(axis=1)).mean())


@dataclass(frozen=True)
class SearchResult:
    entries: Tuple[Tuple[str, float], ...]
    rows:    Tuple[int, ...] = ()

    @property
    def ids(self) -> List[str]:
        return [pid for pid, _ in self.entries]

    @property
    def scores(self) -> List[float]:
        return [s for _, s in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True, eq=False)
class KMeansResult:
    centroids:   np.ndarray           # (K, dim) float64
    assignments: np.ndarray           # (n,) int64, nearest centroid (L2)
    distortions: List[float] = field(default_factory=list)   # after each assignment


@dataclass(frozen=True, eq=False)
class IVFIndex:
    centroids: np.ndarray             # (K, dim) float32
    lists:     Tuple[np.ndarray, ...] # ascending row indices per centroid

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @cached_property
    def centroids64(self) -> np.ndarray:
        return self.centroids.astype(np.float64)


@dataclass(frozen=True, eq=False)
class PQIndex:
    dim:       int
    sub_dim:   int
    codebooks: np.ndarray             # (M, n_centroids, sub_dim) float32
    codes:     np.ndarray             # (num_rows, M) uint8
    row_ids:   Tuple[str, ...]

    @property
    def num_subspaces(self) -> int:
        return self.dim // self.sub_dim

    @property
    def n_centroids(self) -> int:
        return self.codebooks.shape[1]

    @property
    def num_rows(self) -> int:
        return self.codes.shape[0]

    @property
    def bytes_per_vector(self) -> int:
        return self.num_subspaces

    @property
    def compression_ratio(self) -> float:
        return (4 * self.dim) / self.bytes_per_vector

    @property
    def code_bytes(self) -> int:
        return int(self.codes.nbytes)

    def reconstruct(self, rows: Optional[Sequence[int]] = None) -> np.ndarray:
        codes = self.codes if rows is None else self.codes[np.asarray(rows)]
        parts = [self.codebooks[m][codes[:, m]] for m in range(self.num_subspaces)]
        return np.hstack(parts) if parts else np.zeros((len(codes), 0), np.float32)


# ── ranking helpers ───────────────────────────────────────────────────────
def row_scores(data64: np.ndarray, query64: np.ndarray,
               rows: Optional[np.ndarray] = None) -> np.ndarray:
    block = data64 if rows is None else data64[rows]
    return (block * query64).sum(axis=1)


def top_k_order(scores: np.ndarray, rows: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k best (score desc, row asc)."""
    n = scores.shape[0]
    if k >= n:
        return np.lexsort((rows, -scores))
    kth = np.partition(-scores, k - 1)[k - 1]
    cand = np.flatnonzero(-scores <= kth)
    order = np.lexsort((rows[cand], -scores[cand]))[:k]
    return cand[order]


def _result(scores: np.ndarray, rows: np.ndarray, row_ids: Sequence[str],
            k: int) -> SearchResult:
    order = top_k_order(scores, rows, k)
    sel = rows[order]
    return SearchResult(tuple((row_ids[r], float(scores[i])) for r, i in zip(sel, order)),
                        tuple(int(r) for r in sel))


def _check_query(query: np.ndarray, dim: int, k: int) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != dim:
        raise ArgumentError(f"query has dim {q.shape[0]}, index has dim {dim}")
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    return q


# ── exact search ──────────────────────────────────────────────────────────
def exact_search(matrix: EmbeddingMatrix, query: np.ndarray, k: int) -> SearchResult:
    q = _check_query(query, matrix.dim, k)
    rows = np.arange(matrix.num_rows)
    return _result(row_scores(matrix.data64, q), rows, matrix.row_ids, k)


# ── k-means ───────────────────────────────────────────────────────────────
def _as_array(x: Union[EmbeddingMatrix, np.ndarray]) -> np.ndarray:
    if isinstance(x, EmbeddingMatrix):
        return x.data64
    return np.ascontiguousarray(x, dtype=np.float64)


def _spans(n: int, chunk: int = ASSIGN_CHUNK) -> List[Tuple[int, int]]:
    return [(s, min(s + chunk, n)) for s in range(0, n, chunk)]


def _parallel(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def assign_l2(x: np.ndarray, centroids: np.ndarray,
              threads: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest centroid (lowest index on ties) and squared distance per row."""
    c_sq = (centroids * centroids).sum(axis=1)

    def block(span: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray]:
        xs = x[span[0]:span[1]]
        d2 = (xs * xs).sum(axis=1)[:, None] - 2.0 * (xs @ centroids.T) + c_sq
        np.maximum(d2, 0.0, out=d2)
        a = d2.argmin(axis=1)
        return a, d2[np.arange(len(a)), a]

    parts = _parallel(block, _spans(x.shape[0]), threads)
    if not parts:
        return np.zeros(0, np.int64), np.zeros(0)
    return (np.concatenate([p[0] for p in parts]).astype(np.int64),
            np.concatenate([p[1] for p in parts]))


def _kmeans_pp(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = np.zeros(n, dtype=bool)
    first = int(rng.integers(n))
    chosen[first] = True
    cents = [x[first]]
    d2 = ((x - x[first]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # every row coincides with a centroid already
            idx = int(rng.choice(np.flatnonzero(~chosen)))
        chosen[idx] = True
        cents.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(cents, dtype=np.float64)


def _reseed_empty(x: np.ndarray, cents: np.ndarray, assign: np.ndarray,
                  counts: np.ndarray) -> None:
    for c in np.flatnonzero(counts == 0):
        big = int(np.argmax(counts))
        members = np.flatnonzero(assign == big)
        far = members[int(np.argmax(((x[members] - cents[big]) ** 2).sum(axis=1)))]
        cents[c] = x[far]
        assign[far] = c
        counts[big] -= 1
        counts[c] = 1


def kmeans(matrix: Union[EmbeddingMatrix, np.ndarray], K: int,
           iters: int = config.KMEANS_ITERS, seed: int = config.KMEANS_SEED,
           threads: int = 1) -> KMeansResult:
    """
    Lloyd's algorithm.

    Stops after `iters` updates or when assignments stop changing.  An
    empty cluster is re-seeded with the point of the largest cluster that
    lies farthest from that cluster's centroid.
    """
    x = _as_array(matrix)
    n = x.shape[0]
    if K < 1 or K > n:
        raise ArgumentError(f"K must be in [1, num_rows={n}], got {K}")
    rng = np.random.default_rng(seed)
    cents = _kmeans_pp(x, K, rng)

    assign, d2 = assign_l2(x, cents, threads)
    distortions = [float(d2.sum())]
    for it in range(iters):
        onehot = sp.csr_matrix((np.ones(n), (assign, np.arange(n))), shape=(K, n))
        counts = np.bincount(assign, minlength=K).astype(np.int64)
        sums = np.asarray(onehot @ x)
        nz = counts > 0
        cents[nz] = sums[nz] / counts[nz, None]
        if not nz.all():
            _reseed_empty(x, cents, assign.copy(), counts.copy())
        new_assign, d2 = assign_l2(x, cents, threads)
        distortions.append(float(d2.sum()))
        logger.debug("kmeans K=%d iter %d distortion %.6g", K, it + 1, distortions[-1])
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return KMeansResult(cents, assign, distortions)


# ── IVF ───────────────────────────────────────────────────────────────────
def default_nlist(num_rows: int) -> int:
    return max(1, int(round(math.sqrt(num_rows))))


def build_ivf(matrix: EmbeddingMatrix, K: Optional[int] = None,
              iters: int = config.KMEANS_ITERS, seed: int = config.KMEANS_SEED,
              threads: int = 1) -> IVFIndex:
    K = default_nlist(matrix.num_rows) if K is None else K
    km = kmeans(matrix, K, iters, seed, threads)
    lists = tuple(np.flatnonzero(km.assignments == c).astype(np.int64) for c in range(K))
    logger.info("IVF: %d rows into %d lists (largest %d)", matrix.num_rows, K,
                max((len(l) for l in lists), default=0))
    return IVFIndex(km.centroids.astype(np.float32), lists)


def select_probes(index: IVFIndex, q: np.ndarray, n_probes: int,
                  probe_metric: str = config.PROBE_METRIC) -> np.ndarray:
    if not 1 <= n_probes <= index.K:
        raise ArgumentError(f"n_probes must be in [1, {index.K}], got {n_probes}")
    cents = index.centroids64
    if probe_metric == "ip":
        s = row_scores(cents, q)
    elif probe_metric == "l2":
        s = -((cents - q) ** 2).sum(axis=1)
    else:
        raise ArgumentError(f"probe_metric must be 'ip' or 'l2', got {probe_metric!r}")
    return top_k_order(s, np.arange(index.K), n_probes)


def ivf_candidates(index: IVFIndex, q: np.ndarray, n_probes: int,
                   probe_metric: str = config.PROBE_METRIC) -> np.ndarray:
    probes = select_probes(index, q, n_probes, probe_metric)
    return np.sort(np.concatenate([index.lists[c] for c in probes]))


def ivf_search(index: IVFIndex, matrix: EmbeddingMatrix, query: np.ndarray, k: int,
               n_probes: int, probe_metric: str = config.PROBE_METRIC) -> SearchResult:
    q = _check_query(query, matrix.dim, k)
    cand = ivf_candidates(index, q, n_probes, probe_metric)
    if cand.size == 0:
        return SearchResult(())
    return _result(row_scores(matrix.data64, q, cand), cand, matrix.row_ids, k)


# ── PQ ────────────────────────────────────────────────────────────────────
def build_pq(matrix: EmbeddingMatrix, sub_dim: int = config.PQ_SUB_DIM,
             seed: int = config.KMEANS_SEED, iters: int = config.KMEANS_ITERS,
             threads: int = 1, n_centroids: int = config.PQ_CENTROIDS) -> PQIndex:
    if sub_dim < 1 or matrix.dim % sub_dim:
        raise ArgumentError(f"dim {matrix.dim} is not divisible by sub_dim {sub_dim}")
    if matrix.num_rows == 0:
        raise ArgumentError("cannot train PQ codebooks on an empty matrix")
    if not 1 <= n_centroids <= 256:
        raise ArgumentError("PQ codes are bytes: n_centroids must be in [1, 256]")
    ncent = min(n_centroids, matrix.num_rows)
    if ncent < n_centroids:
        logger.warning("PQ: only %d rows, codebooks capped at %d centroids",
                       matrix.num_rows, ncent)
    M = matrix.dim // sub_dim
    x = matrix.data64

    def subspace(m: int) -> KMeansResult:
        part = np.ascontiguousarray(x[:, m * sub_dim:(m + 1) * sub_dim])
        return kmeans(part, ncent, iters, seed + m)

    fits = _parallel(subspace, list(range(M)), threads)
    codebooks = np.stack([f.centroids for f in fits]).astype(np.float32) if fits \
        else np.zeros((0, ncent, sub_dim), np.float32)
    codes = np.stack([f.assignments for f in fits], axis=1).astype(np.uint8) if fits \
        else np.zeros((matrix.num_rows, 0), np.uint8)
    return PQIndex(matrix.dim, sub_dim, codebooks, codes, matrix.row_ids)


def pq_lookup_table(index: PQIndex, q: np.ndarray) -> np.ndarray:
    """(M, n_centroids) inner products of query sub-vectors with each centroid."""
    qs = q.reshape(index.num_subspaces, index.sub_dim)
    return (index.codebooks.astype(np.float64) * qs[:, None, :]).sum(axis=2)


def pq_scores(index: PQIndex, q: np.ndarray) -> np.ndarray:
    lut = pq_lookup_table(index, q)
    scores = np.zeros(index.num_rows)
    for m in range(index.num_subspaces):
        scores += lut[m, index.codes[:, m]]
    return scores


def pq_search(index: PQIndex, query: np.ndarray, k: int) -> SearchResult:
    q = _check_query(query, index.dim, k)
    return _result(pq_scores(index, q), np.arange(index.num_rows), index.row_ids, k)


# ── unified handle ────────────────────────────────────────────────────────
@dataclass(frozen=True, eq=False)
class IndexFile:
    """What a DRBX file holds: one of exact / ivf (+ its matrix) / pq."""
    kind:   str
    matrix: Optional[EmbeddingMatrix] = None
    ivf:    Optional[IVFIndex] = None
    pq:     Optional[PQIndex] = None

    @property
    def dim(self) -> int:
        return self.pq.dim if self.kind == "pq" else self.matrix.dim

    @property
    def row_ids(self) -> Tuple[str, ...]:
        return self.pq.row_ids if self.kind == "pq" else self.matrix.row_ids

    def search(self, query: np.ndarray, k: int, n_probes: Optional[int] = None,
               probe_metric: str = config.PROBE_METRIC) -> SearchResult:
        if self.kind == "exact":
            return exact_search(self.matrix, query, k)
        if self.kind == "ivf":
            probes = self.ivf.K if n_probes is None else n_probes
            return ivf_search(self.ivf, self.matrix, query, k, probes, probe_metric)
        return pq_search(self.pq, query, k)


def search_many(fn: Callable[[np.ndarray], SearchResult], queries: np.ndarray,
                threads: int = 1) -> List[SearchResult]:
    """Run `fn` on each query row; output order = input order for any thread count."""
    return _parallel(fn, list(queries), threads)


# ── serialisation ─────────────────────────────────────────────────────────
def _pack_ids(ids: Sequence[str]) -> bytes:
    out = []
    for pid in ids:
        b = pid.encode("utf-8")
        out.append(struct.pack("<I", len(b)) + b)
    return b"".join(out)


def _unpack_ids(buf: bytes, pos: int, n: int) -> Tuple[Tuple[str, ...], int]:
    ids = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        ids.append(buf[pos:pos + ln].decode("utf-8"))
        pos += ln
    return tuple(ids), pos


def _take(buf: bytes, pos: int, dtype: str, count: int) -> Tuple[np.ndarray, int]:
    size = np.dtype(dtype).itemsize * count
    if pos + size > len(buf):
        raise FormatError("truncated index file")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=pos).copy(), pos + size


def _matrix_bytes(m: EmbeddingMatrix) -> bytes:
    return (struct.pack("<QI", m.num_rows, m.dim) + _pack_ids(m.row_ids)
            + m.data.astype("<f4").tobytes())


def _read_matrix(buf: bytes, pos: int) -> Tuple[EmbeddingMatrix, int]:
    n, dim = struct.unpack_from("<QI", buf, pos)
    ids, pos = _unpack_ids(buf, pos + 12, n)
    data, pos = _take(buf, pos, "<f4", n * dim)
    return EmbeddingMatrix(data.reshape(n, dim), ids), pos


def index_to_bytes(obj: IndexFile) -> bytes:
    tag = {"exact": TAG_EXACT, "ivf": TAG_IVF, "pq": TAG_PQ}[obj.kind]
    out = [INDEX_MAGIC, struct.pack("<IB", INDEX_VERSION, tag)]
    if obj.kind in ("exact", "ivf"):
        out.append(_matrix_bytes(obj.matrix))
    if obj.kind == "ivf":
        ivf = obj.ivf
        out.append(struct.pack("<I", ivf.K))
        out.append(ivf.centroids.astype("<f4").tobytes())
        for lst in ivf.lists:
            out.append(struct.pack("<Q", len(lst)) + lst.astype("<i8").tobytes())
    if obj.kind == "pq":
        pq = obj.pq
        out.append(struct.pack("<QIII", pq.num_rows, pq.dim, pq.sub_dim, pq.n_centroids))
        out.append(_pack_ids(pq.row_ids))
        out.append(pq.codebooks.astype("<f4").tobytes())
        out.append(np.ascontiguousarray(pq.codes, dtype=np.uint8).tobytes())
    return b"".join(out)


def index_from_bytes(buf: bytes) -> IndexFile:
    try:
        return _decode_index(buf)
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"truncated or corrupt index file ({exc})") from None


def _decode_index(buf: bytes) -> IndexFile:
    if buf[:4] != INDEX_MAGIC:
        raise FormatError("not an index file (bad magic)")
    if len(buf) < 9:
        raise FormatError("truncated index header")
    version, tag = struct.unpack_from("<IB", buf, 4)
    if version != INDEX_VERSION:
        raise FormatError(f"unsupported index version {version}")
    if tag not in TAG_NAMES:
        raise FormatError(f"unknown index type tag {tag}")
    pos = 9
    kind = TAG_NAMES[tag]
    if kind == "exact":
        matrix, pos = _read_matrix(buf, pos)
        result = IndexFile(kind, matrix=matrix)
    elif kind == "ivf":
        matrix, pos = _read_matrix(buf, pos)
        (K,) = struct.unpack_from("<I", buf, pos)
        cents, pos = _take(buf, pos + 4, "<f4", K * matrix.dim)
        lists = []
        for _ in range(K):
            (ln,) = struct.unpack_from("<Q", buf, pos)
            lst, pos = _take(buf, pos + 8, "<i8", ln)
            lists.append(lst.astype(np.int64))
        result = IndexFile(kind, matrix=matrix,
                           ivf=IVFIndex(cents.reshape(K, matrix.dim), tuple(lists)))
    else:
        n, dim, sub_dim, ncent = struct.unpack_from("<QIII", buf, pos)
        if sub_dim == 0 or dim % sub_dim:
            raise FormatError(f"sub_dim {sub_dim} does not divide dim {dim}")
        ids, pos = _unpack_ids(buf, pos + 20, n)
        M = dim // sub_dim
        books, pos = _take(buf, pos, "<f4", M * ncent * sub_dim)
        codes, pos = _take(buf, pos, "u1", n * M)
        result = IndexFile(kind, pq=PQIndex(dim, sub_dim, books.reshape(M, ncent, sub_dim),
                                            codes.reshape(n, M), ids))
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes in index file")
    return result


def save_index(path: str, obj: IndexFile) -> None:
    with open(path, "wb") as f:
        f.write(index_to_bytes(obj))
    logger.info("Saved %s index to %s", obj.kind, path)


def load_index(path: str) -> IndexFile:
    with open(path, "rb") as f:
        return index_from_bytes(f.read())
