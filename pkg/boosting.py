"""
boosting.py – the round-based training driver

    run_boosting   each round trains a fresh small encoder on negatives
                   mined from the current ensemble and appends it (α = 1)
    run_iterative  same loop, but the new full-width model replaces the old
    run_bagging    independent encoders, no error feedback, concatenated

An ensemble scores h(q, c) = Σ_r α_r q_r·c_r as one inner product of
concatenated vectors: query side [q_1, …, q_R], passage side
[α_1 c_1, …, α_R c_R].  Round 1 occupies the lowest indices.
"""
from __future__ import annotations

import logging
import math
import re
import struct
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from tqdm import tqdm

import config
import evaluation
from data import AugmentedExample, Corpus, TrainPair
from encoder import (MODEL_MAGIC, EncoderModel, TrainConfig, corpus_features, embed_rows,
                     model_from_bytes, model_to_bytes, query_features, train_with_history)
from errors import ArgumentError, FormatError, ValidationError
from featurizer import FeaturizerConfig, FeatureTable, featurize_many
from index import EmbeddingMatrix, SearchResult, exact_search, search_many, top_k_order

logger = logging.getLogger(__name__)

# ── ensemble file ─────────────────────────────────────────────────────────
ENSEMBLE_MAGIC   = b"DRBE"
ENSEMBLE_VERSION = 1

SIDES = ("query", "passage")


# ── ensemble ──────────────────────────────────────────────────────────────
@dataclass(frozen=True, eq=False)
class Ensemble:
    components: Tuple[Tuple[EncoderModel, float], ...]

    def __post_init__(self) -> None:
        comps = tuple((m, float(a)) for m, a in self.components)
        if not comps:
            raise ArgumentError("an ensemble needs at least one component")
        for _, a in comps:
            if not math.isfinite(a):
                raise ArgumentError(f"ensemble weight {a} is not finite")
        object.__setattr__(self, "components", comps)

    @classmethod
    def single(cls, model: EncoderModel, alpha: float = 1.0) -> "Ensemble":
        return cls(((model, alpha),))

    def append(self, model: EncoderModel, alpha: float = 1.0) -> "Ensemble":
        return Ensemble(self.components + ((model, alpha),))

    def __len__(self) -> int:
        return len(self.components)

    @property
    def models(self) -> List[EncoderModel]:
        return [m for m, _ in self.components]

    @property
    def alphas(self) -> List[float]:
        return [a for _, a in self.components]

    @property
    def total_dim(self) -> int:
        return sum(m.dim for m, _ in self.components)

    def prefix(self, rounds: int) -> "Ensemble":
        return Ensemble(self.components[:rounds])

    def prefixes(self) -> List["Ensemble"]:
        return [self.prefix(r) for r in range(1, len(self) + 1)]

    # embeddings ---------------------------------------------------------
    def _features(self, model: EncoderModel, texts: Sequence[str],
                  table: Optional[FeatureTable], corpus: Optional[Corpus]) -> sp.csr_matrix:
        if table is not None and table.cfg == model.featurizer:
            if corpus is not None:
                return corpus_features(table, corpus)
            return query_features(table, texts)
        return featurize_many(texts, model.featurizer)

    def _concat(self, texts: Sequence[str], side: str, threads: int,
                table: Optional[FeatureTable], corpus: Optional[Corpus]) -> np.ndarray:
        if side not in SIDES:
            raise ArgumentError(f"side must be one of {SIDES}, got {side!r}")
        blocks = []
        cache: dict = {}
        for model, alpha in self.components:
            x = cache.get(model.featurizer)
            if x is None:
                x = cache[model.featurizer] = self._features(model, texts, table, corpus)
            v = embed_rows(model, x, threads)
            if side == "passage" and alpha != 1.0:
                v = (v * np.float32(alpha)).astype(np.float32)
            blocks.append(v)
        return np.hstack(blocks)

    def embed(self, text: str, side: str) -> np.ndarray:
        return self._concat([text], side, 1, None, None)[0]

    def embed_texts(self, texts: Sequence[str], side: str, threads: int = 1,
                    table: Optional[FeatureTable] = None) -> np.ndarray:
        return self._concat(list(texts), side, threads, table, None)

    def embed_corpus(self, corpus: Corpus, threads: int = 1,
                     table: Optional[FeatureTable] = None) -> EmbeddingMatrix:
        data = self._concat(corpus.texts(), "passage", threads, table, corpus)
        return EmbeddingMatrix(data, tuple(corpus.ids))

    def score(self, query: str, passage: str) -> float:
        q = self.embed(query, "query").astype(np.float64)
        c = self.embed(passage, "passage").astype(np.float64)
        return float(q @ c)


def ensemble_embed(ensemble: Ensemble, text: str, side: str) -> np.ndarray:
    return ensemble.embed(text, side)


def ensemble_score(ensemble: Ensemble, query: str, passage: str) -> float:
    return ensemble.score(query, passage)


# ── configuration ─────────────────────────────────────────────────────────
_METRIC_RE = re.compile(r"^(R|MRR)@(\d+)$", re.IGNORECASE)


@dataclass(frozen=True)
class DevMetric:
    kind: str        # "recall" | "mrr"
    k:    int

    @classmethod
    def parse(cls, text: str) -> "DevMetric":
        m = _METRIC_RE.match(text.strip())
        if not m or int(m.group(2)) < 1:
            raise ArgumentError(f"dev metric must look like R@10 or MRR@10, got {text!r}")
        return cls("recall" if m.group(1).upper() == "R" else "mrr", int(m.group(2)))

    def __str__(self) -> str:
        return f"{'R' if self.kind == 'recall' else 'MRR'}@{self.k}"

    def value(self, results: Sequence[SearchResult], golds: Sequence[set]) -> float:
        if self.kind == "recall":
            return evaluation.recall_at_k(results, golds, self.k)
        return evaluation.mrr_at_k(results, golds, self.k)


@dataclass(frozen=True)
class BoostConfig:
    max_rounds:       int   = config.MAX_ROUNDS
    tolerance:        float = config.TOLERANCE
    dim_per_round:    int   = config.DIM_PER_ROUND
    negatives_n:      int   = config.NEGATIVES
    mine_top_N:       int   = config.MINE_TOP_N
    mine_temperature: float = config.MINE_TEMPERATURE
    dev_metric:       str   = config.DEV_METRIC
    mode:             str   = config.BOOST_MODE
    seed:             int   = config.BOOST_SEED

    def __post_init__(self) -> None:
        if self.max_rounds < 1:
            raise ArgumentError("max_rounds must be >= 1")
        if self.tolerance < 0:
            raise ArgumentError("tolerance must be >= 0")
        if self.negatives_n < 1 or self.dim_per_round < 1:
            raise ArgumentError("negatives_n and dim_per_round must be >= 1")
        if self.mine_top_N <= self.negatives_n:
            raise ArgumentError(f"mine_top_N ({self.mine_top_N}) must exceed "
                                f"negatives_n ({self.negatives_n})")
        if not self.mine_temperature > 0:
            raise ArgumentError("mine_temperature must be positive")
        if self.mode not in ("boost", "iterative", "bagging"):
            raise ArgumentError(f"unknown mode {self.mode!r}")
        DevMetric.parse(self.dev_metric)

    @property
    def metric(self) -> DevMetric:
        return DevMetric.parse(self.dev_metric)


@dataclass
class RoundRecord:
    round:      int
    dev_metric: float
    train_nll:  float
    dev_nll:    float
    total_dim:  int

    @property
    def dev_error(self) -> float:
        return 1.0 - self.dev_metric


# ── retrievers ────────────────────────────────────────────────────────────
class Retriever(Protocol):
    def search_many(self, texts: Sequence[str], k: int,
                    threads: int = 1) -> List[SearchResult]: ...


class DenseRetriever:
    """Exact MIPS over an ensemble's passage-side corpus embeddings."""

    def __init__(self, ensemble: Ensemble, corpus: Corpus, threads: int = 1,
                 table: Optional[FeatureTable] = None):
        self.ensemble = ensemble
        self.table = table
        self.matrix = ensemble.embed_corpus(corpus, threads, table)

    def search_many(self, texts: Sequence[str], k: int,
                    threads: int = 1) -> List[SearchResult]:
        qs = self.ensemble.embed_texts(texts, "query", threads, self.table)
        return search_many(lambda q: exact_search(self.matrix, q, k), qs, threads)


class LexicalRetriever:
    """
    Crude BM25 stand-in: Σ idf(b)² over unigram buckets shared by the query
    and the passage, idf(b) = ln(1 + N / df(b)).
    """

    def __init__(self, corpus: Corpus, featurizer: FeaturizerConfig):
        self.cfg = replace(featurizer, use_bigrams=False)
        self.row_ids = tuple(corpus.ids)
        x = featurize_many(corpus.texts(), self.cfg, dtype=np.float64)
        x.data[:] = 1.0
        self.binary = x
        df = np.bincount(x.indices, minlength=self.cfg.num_buckets).astype(np.float64)
        n = max(len(corpus), 1)
        idf = np.where(df > 0, np.log1p(n / np.maximum(df, 1.0)), 0.0)
        self.idf_sq = idf * idf

    def scores(self, text: str) -> np.ndarray:
        q = featurize_many([text], self.cfg, dtype=np.float64)
        w = np.zeros(self.cfg.num_buckets)
        w[q.indices] = self.idf_sq[q.indices]
        return np.asarray(self.binary @ w).reshape(-1)

    def search(self, text: str, k: int) -> SearchResult:
        s = self.scores(text)
        rows = np.arange(s.shape[0])
        order = top_k_order(s, rows, k)
        return SearchResult(tuple((self.row_ids[r], float(s[r])) for r in order),
                            tuple(int(r) for r in order))

    def search_many(self, texts: Sequence[str], k: int,
                    threads: int = 1) -> List[SearchResult]:
        return search_many(lambda t: self.search(t, k), list(texts), threads)


# ── negative sampling ─────────────────────────────────────────────────────
def sample_softmax(scores: np.ndarray, n: int, temperature: float,
                   rng: np.random.Generator) -> List[int]:
    """
    n draws without replacement: sample from softmax(score / T), remove the
    pick, renormalise.  T = inf is uniform; T → 0⁺ is the top-n.
    """
    s = np.asarray(scores, dtype=np.float64)
    alive = np.ones(s.shape[0], dtype=bool)
    picks: List[int] = []
    for _ in range(min(n, s.shape[0])):
        idx = np.flatnonzero(alive)
        if math.isinf(temperature):
            p = np.full(idx.size, 1.0 / idx.size)
        else:
            z = s[idx] / temperature
            z -= z.max()
            w = np.exp(z)
            p = w / w.sum()
        j = int(idx[rng.choice(idx.size, p=p)])
        picks.append(j)
        alive[j] = False
    return picks


def _uniform_fill(rng: np.random.Generator, corpus: Corpus, excluded: set,
                  need: int) -> List[str]:
    available = len(corpus) - sum(1 for pid in excluded if pid in corpus)
    if available < need:
        raise ValidationError(f"corpus has only {available} passages to sample "
                              f"{need} negatives from")
    ids = corpus.ids
    out: List[str] = []
    taken = set(excluded)
    while len(out) < need:
        pid = ids[int(rng.integers(len(ids)))]
        if pid not in taken:
            taken.add(pid)
            out.append(pid)
    return out


def initial_negatives(pairs: Sequence[TrainPair], corpus: Corpus, n: int,
                      seed: int) -> List[AugmentedExample]:
    """Uniform random negatives excluding positives (the h₀ = constant round)."""
    if n < 1:
        raise ArgumentError("n must be >= 1")
    return [AugmentedExample(p, tuple(_uniform_fill(np.random.default_rng([seed, i]),
                                                    corpus, set(p.positive_ids), n)))
            for i, p in enumerate(pairs)]


def negatives_from_results(results: Sequence[SearchResult], pairs: Sequence[TrainPair],
                           corpus: Corpus, n: int, temperature: float,
                           seed: int) -> List[AugmentedExample]:
    out = []
    padded = 0
    for i, (pair, res) in enumerate(zip(pairs, results)):
        rng = np.random.default_rng([seed, i])
        gold = set(pair.positive_ids)
        pool = [(pid, s) for pid, s in res.entries if pid not in gold]
        picks = sample_softmax(np.array([s for _, s in pool]), n, temperature, rng)
        negs = [pool[j][0] for j in picks]
        if len(negs) < n:
            padded += 1
            negs += _uniform_fill(rng, corpus, gold | set(negs), n - len(negs))
        out.append(AugmentedExample(pair, tuple(negs)))
    if padded:
        logger.warning("%d queries had fewer than %d mined candidates; padded uniformly",
                       padded, n)
    return out


def mine_negatives(retriever: Retriever, pairs: Sequence[TrainPair], corpus: Corpus,
                   cfg: BoostConfig, seed: int, threads: int = 1) -> List[AugmentedExample]:
    """Top-N pool from the retriever, positives removed, softmax-sampled negatives."""
    results = retriever.search_many([p.query_text for p in pairs], cfg.mine_top_N, threads)
    return negatives_from_results(results, pairs, corpus, cfg.negatives_n,
                                  cfg.mine_temperature, seed)


# ── dev evaluation ────────────────────────────────────────────────────────
def dev_metric_value(ensemble: Ensemble, dev: Sequence[TrainPair], corpus: Corpus,
                     metric: DevMetric, threads: int = 1,
                     table: Optional[FeatureTable] = None) -> float:
    retriever = DenseRetriever(ensemble, corpus, threads, table)
    results = retriever.search_many([p.query_text for p in dev], metric.k, threads)
    return metric.value(results, [set(p.positive_ids) for p in dev])


def _selected_train_nll(outcome) -> float:
    if outcome.best_epoch == 0:
        return float("nan")
    return outcome.train_nll[outcome.best_epoch - 1]


AlphaFn = Callable[[Optional[Ensemble], EncoderModel], float]


# ── drivers ───────────────────────────────────────────────────────────────
def run_boosting(train: Sequence[TrainPair], dev: Sequence[TrainPair], corpus: Corpus,
                 boost_cfg: BoostConfig, train_cfg: TrainConfig, threads: int = 1,
                 alpha_fn: Optional[AlphaFn] = None) -> Tuple[Ensemble, List[RoundRecord]]:
    """
    Keep adding weak learners while the dev error drops by more than τ.

    Returns the ensemble of the best dev round and the full history.
    """
    if not dev:
        raise ArgumentError("boosting needs a non-empty dev set")
    table = FeatureTable(train_cfg.featurizer)
    corpus_features(table, corpus)
    round_cfg = replace(train_cfg, dim=boost_cfg.dim_per_round,
                        negatives_per_example=boost_cfg.negatives_n)
    metric = boost_cfg.metric

    ensemble: Optional[Ensemble] = None
    best: Optional[Ensemble] = None
    best_err = math.inf
    prev_err = math.inf
    history: List[RoundRecord] = []

    for r in tqdm(range(1, boost_cfg.max_rounds + 1), desc="rounds", disable=None):
        seed_r = boost_cfg.seed * 1000 + r
        if ensemble is None:
            tr = initial_negatives(train, corpus, boost_cfg.negatives_n, seed_r)
            dv = initial_negatives(dev, corpus, boost_cfg.negatives_n, seed_r + 500)
        else:
            retriever = DenseRetriever(ensemble, corpus, threads, table)
            tr = mine_negatives(retriever, train, corpus, boost_cfg, seed_r, threads)
            dv = mine_negatives(retriever, dev, corpus, boost_cfg, seed_r + 500, threads)

        outcome = train_with_history(tr, dv, corpus, replace(round_cfg, seed=train_cfg.seed + r),
                                     init_seed=seed_r, features=table)
        alpha = alpha_fn(ensemble, outcome.model) if alpha_fn else 1.0
        candidate = (Ensemble.single(outcome.model, alpha) if ensemble is None
                     else ensemble.append(outcome.model, alpha))

        value = dev_metric_value(candidate, dev, corpus, metric, threads, table)
        rec = RoundRecord(r, value, _selected_train_nll(outcome),
                          outcome.dev_nll[outcome.best_epoch], candidate.total_dim)
        history.append(rec)
        logger.info("boost round %d: dev %s=%.4f (dim %d)", r, metric, value,
                    candidate.total_dim)

        if rec.dev_error < best_err:
            best, best_err = candidate, rec.dev_error
        ensemble = candidate
        improvement, prev_err = prev_err - rec.dev_error, rec.dev_error
        if improvement <= boost_cfg.tolerance:
            logger.info("dev error improved by %.5f <= %.5f, stopping",
                        improvement, boost_cfg.tolerance)
            break

    assert best is not None
    return best, history


def run_iterative(train: Sequence[TrainPair], dev: Sequence[TrainPair], corpus: Corpus,
                  boost_cfg: BoostConfig, train_cfg: TrainConfig,
                  threads: int = 1) -> Tuple[EncoderModel, List[RoundRecord]]:
    """
    Iteratively-sampled negatives: every round trains a full-width model with
    in-batch negatives plus negatives mined from the previous model, and the
    new model replaces the old.  Round 1 mines from the lexical scorer.
    """
    if not dev:
        raise ArgumentError("iterative training needs a non-empty dev set")
    table = FeatureTable(train_cfg.featurizer)
    corpus_features(table, corpus)
    full_cfg = replace(train_cfg, in_batch_negatives=True,
                       negatives_per_example=boost_cfg.negatives_n)
    metric = boost_cfg.metric
    retriever: Retriever = LexicalRetriever(corpus, train_cfg.featurizer)

    best: Optional[EncoderModel] = None
    best_err = math.inf
    prev_err = math.inf
    history: List[RoundRecord] = []

    for r in tqdm(range(1, boost_cfg.max_rounds + 1), desc="rounds", disable=None):
        seed_r = boost_cfg.seed * 1000 + r
        tr = mine_negatives(retriever, train, corpus, boost_cfg, seed_r, threads)
        dv = mine_negatives(retriever, dev, corpus, boost_cfg, seed_r + 500, threads)
        outcome = train_with_history(tr, dv, corpus, replace(full_cfg, seed=train_cfg.seed + r),
                                     init_seed=seed_r, features=table)
        current = Ensemble.single(outcome.model)
        value = dev_metric_value(current, dev, corpus, metric, threads, table)
        rec = RoundRecord(r, value, _selected_train_nll(outcome),
                          outcome.dev_nll[outcome.best_epoch], outcome.model.dim)
        history.append(rec)
        logger.info("iterative round %d: dev %s=%.4f", r, metric, value)

        if rec.dev_error < best_err:
            best, best_err = outcome.model, rec.dev_error
        retriever = DenseRetriever(current, corpus, threads, table)
        improvement, prev_err = prev_err - rec.dev_error, rec.dev_error
        if improvement <= boost_cfg.tolerance:
            break

    assert best is not None
    return best, history


def run_bagging(train: Sequence[TrainPair], dev: Sequence[TrainPair], corpus: Corpus,
                rounds: int, dims: int, train_cfg: TrainConfig,
                boost_cfg: Optional[BoostConfig] = None, threads: int = 1) -> Ensemble:
    """`rounds` independently seeded encoders on lexical negatives, concatenated."""
    if rounds < 1:
        raise ArgumentError("rounds must be >= 1")
    boost_cfg = boost_cfg or BoostConfig()
    table = FeatureTable(train_cfg.featurizer)
    corpus_features(table, corpus)
    cfg = replace(train_cfg, dim=dims, in_batch_negatives=True,
                  negatives_per_example=boost_cfg.negatives_n)

    lexical = LexicalRetriever(corpus, train_cfg.featurizer)
    tr_pool = lexical.search_many([p.query_text for p in train], boost_cfg.mine_top_N, threads)
    dv_pool = lexical.search_many([p.query_text for p in dev], boost_cfg.mine_top_N, threads)

    comps = []
    for r in tqdm(range(1, rounds + 1), desc="bags", disable=None):
        seed_r = boost_cfg.seed * 1000 + r
        tr = negatives_from_results(tr_pool, train, corpus, boost_cfg.negatives_n,
                                    boost_cfg.mine_temperature, seed_r)
        dv = negatives_from_results(dv_pool, dev, corpus, boost_cfg.negatives_n,
                                    boost_cfg.mine_temperature, seed_r + 500)
        outcome = train_with_history(tr, dv, corpus, replace(cfg, seed=train_cfg.seed + r),
                                     init_seed=seed_r, features=table)
        comps.append((outcome.model, 1.0))
        logger.info("bag %d trained (best epoch %d)", r, outcome.best_epoch)
    return Ensemble(tuple(comps))


# ── files ─────────────────────────────────────────────────────────────────
def ensemble_to_bytes(ens: Ensemble) -> bytes:
    out = [ENSEMBLE_MAGIC, struct.pack("<II", ENSEMBLE_VERSION, len(ens))]
    for model, alpha in ens.components:
        blob = model_to_bytes(model)
        out.append(struct.pack("<dQ", alpha, len(blob)))
        out.append(blob)
    return b"".join(out)


def ensemble_from_bytes(buf: bytes) -> Ensemble:
    if buf[:4] != ENSEMBLE_MAGIC:
        raise FormatError("not an ensemble file (bad magic)")
    if len(buf) < 12:
        raise FormatError("truncated ensemble header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != ENSEMBLE_VERSION:
        raise FormatError(f"unsupported ensemble version {version}")
    pos, comps = 12, []
    for _ in range(count):
        if len(buf) < pos + 16:
            raise FormatError("truncated ensemble component header")
        alpha, size = struct.unpack_from("<dQ", buf, pos)
        pos += 16
        model, end = model_from_bytes(buf, pos)
        if end != pos + size:
            raise FormatError("component length mismatch")
        comps.append((model, alpha))
        pos = end
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes in ensemble file")
    return Ensemble(tuple(comps))


def save_ensemble(path: str, ens: Ensemble) -> None:
    with open(path, "wb") as f:
        f.write(ensemble_to_bytes(ens))
    logger.info("Saved %d-component ensemble (%d dims) to %s", len(ens), ens.total_dim, path)


def load_ensemble(path: str) -> Ensemble:
    """Read a DRBE file; a single DRBM model file loads as a one-component ensemble."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] == MODEL_MAGIC:
        model, end = model_from_bytes(buf)
        if end != len(buf):
            raise FormatError(f"{path}: {len(buf) - end} trailing bytes")
        return Ensemble.single(model)
    return ensemble_from_bytes(buf)


def write_history_tsv(path: str, history: Sequence[RoundRecord]) -> None:
    evaluation.write_tsv(path, ["round", "dev_metric", "train_nll", "dev_nll", "total_dim"],
                         [[h.round, h.dev_metric, h.train_nll, h.dev_nll, h.total_dim]
                          for h in history])
