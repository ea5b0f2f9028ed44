"""
encoder.py – one weak learner

A shared query/passage encoder: hashed features → linear map → layer norm.
Trained with Adam on the NLL of the positive among its negatives (plus the
other positives of the batch in baseline mode).

    embed(model, text)           → float32 vector (dim,)
    score(model, q, p)           → embed(q) · embed(p)
    nll_loss(s_pos, s_neg)       → scalar NLL
    train(examples, dev, ...)    → EncoderModel from the best dev epoch
    embed_corpus(model, corpus)  → EmbeddingMatrix (row order = corpus order)
"""
from __future__ import annotations

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from tqdm import tqdm

import config
from data import AugmentedExample, Corpus
from errors import ArgumentError, FormatError, NumericError, TrainingError
from featurizer import FeaturizerConfig, FeatureTable, featurize_many
from index import EmbeddingMatrix

logger = logging.getLogger(__name__)

# ── model file ────────────────────────────────────────────────────────────
MODEL_MAGIC   = b"DRBM"
MODEL_VERSION = 1
FLAG_LAYER_NORM = 1
_MODEL_HEADER = struct.Struct("<IIIBBQId")   # version flags buckets bigrams lower seed dim eps

ADAM_EPS = 1e-8


# ── types ─────────────────────────────────────────────────────────────────
@dataclass(frozen=True, eq=False)
class EncoderModel:
    featurizer:     FeaturizerConfig
    dim:            int
    weights:        np.ndarray            # (num_buckets, dim) float32
    ln_gain:        np.ndarray            # (dim,) float32
    ln_bias:        np.ndarray            # (dim,) float32
    ln_epsilon:     float = config.LN_EPSILON
    use_layer_norm: bool  = True

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ArgumentError(f"dim must be >= 1, got {self.dim}")
        for name in ("weights", "ln_gain", "ln_bias"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"model parameter {name} is not finite")
            object.__setattr__(self, name, arr)
        if self.weights.shape != (self.featurizer.num_buckets, self.dim):
            raise ArgumentError(
                f"weights shape {self.weights.shape} != "
                f"({self.featurizer.num_buckets}, {self.dim})")
        if self.ln_gain.shape != (self.dim,) or self.ln_bias.shape != (self.dim,):
            raise ArgumentError("layer-norm parameters must have shape (dim,)")
        if not self.ln_epsilon > 0:
            raise ArgumentError("ln_epsilon must be positive")

    def same_as(self, other: "EncoderModel") -> bool:
        """Bitwise parameter equality."""
        return (self.featurizer == other.featurizer and self.dim == other.dim
                and self.ln_epsilon == other.ln_epsilon
                and self.use_layer_norm == other.use_layer_norm
                and np.array_equal(self.weights, other.weights)
                and np.array_equal(self.ln_gain, other.ln_gain)
                and np.array_equal(self.ln_bias, other.ln_bias))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate:      float = config.LEARNING_RATE
    adam_beta1:         float = config.ADAM_BETA1
    adam_beta2:         float = config.ADAM_BETA2
    epochs:             int   = config.EPOCHS
    batch_size:         int   = config.BATCH_SIZE
    negatives_per_example: int = config.NEGATIVES
    in_batch_negatives: bool  = config.IN_BATCH_NEGATIVES
    seed:               int   = config.TRAIN_SEED
    grad_clip:          Optional[float] = config.GRAD_CLIP
    dim:                int   = config.DIM
    featurizer:         FeaturizerConfig = field(default_factory=FeaturizerConfig)
    use_layer_norm:     bool  = True
    ln_epsilon:         float = config.LN_EPSILON

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ArgumentError("learning_rate must be positive")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0.0 < b < 1.0:
                raise ArgumentError(f"Adam betas must be in (0, 1), got {b}")
        if self.epochs < 0 or self.batch_size < 1 or self.negatives_per_example < 1:
            raise ArgumentError("epochs >= 0, batch_size >= 1, negatives >= 1 required")
        if self.dim < 1:
            raise ArgumentError("dim must be >= 1")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ArgumentError("grad_clip must be positive when set")


@dataclass
class TrainOutcome:
    model:       EncoderModel
    train_nll:   List[float]      # mean training NLL per epoch
    dev_nll:     List[float]      # index 0 = initialisation
    best_epoch:  int              # 0 = initialisation kept


# ── parameters (float64 while training) ──────────────────────────────────
@dataclass
class Params:
    weights: np.ndarray
    gain:    np.ndarray
    bias:    np.ndarray

    def arrays(self) -> List[np.ndarray]:
        return [self.weights, self.gain, self.bias]

    def copy(self) -> "Params":
        return Params(self.weights.copy(), self.gain.copy(), self.bias.copy())

    @classmethod
    def of(cls, model: EncoderModel) -> "Params":
        return cls(model.weights.astype(np.float64),
                   model.ln_gain.astype(np.float64),
                   model.ln_bias.astype(np.float64))

    def to_model(self, cfg: FeaturizerConfig, eps: float, use_ln: bool) -> EncoderModel:
        return EncoderModel(cfg, self.weights.shape[1], self.weights, self.gain,
                            self.bias, eps, use_ln)


def init_params(num_buckets: int, dim: int, seed: int) -> Params:
    """Weights ~ U(±1/√dim), gain 1, bias 0."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(dim)
    return Params(rng.uniform(-bound, bound, size=(num_buckets, dim)),
                  np.ones(dim), np.zeros(dim))


def init_model(featurizer: FeaturizerConfig, dim: int, seed: int,
               use_layer_norm: bool = True,
               ln_epsilon: float = config.LN_EPSILON) -> EncoderModel:
    return init_params(featurizer.num_buckets, dim, seed).to_model(
        featurizer, ln_epsilon, use_layer_norm)


# ── layer norm ────────────────────────────────────────────────────────────
def layer_norm_forward(z: np.ndarray, gain: np.ndarray, bias: np.ndarray,
                       eps: float) -> Tuple[np.ndarray, Tuple[np.ndarray, np.ndarray]]:
    mu  = z.mean(axis=1, keepdims=True)
    c   = z - mu
    var = (c * c).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = c * inv
    return xhat * gain + bias, (xhat, inv)


def layer_norm_backward(dy: np.ndarray, cache: Tuple[np.ndarray, np.ndarray],
                        gain: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv = cache
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dx = dy * gain
    dz = inv * (dx - dx.mean(axis=1, keepdims=True)
                - xhat * (dx * xhat).mean(axis=1, keepdims=True))
    return dz, dgain, dbias


# ── inference ─────────────────────────────────────────────────────────────
def embed_features(model: EncoderModel, x: sp.csr_matrix) -> np.ndarray:
    """Rows of `x` → float32 embeddings.  Each row is computed independently."""
    z = np.asarray(x.astype(np.float32) @ model.weights, dtype=np.float64)
    if model.use_layer_norm:
        z, _ = layer_norm_forward(z, model.ln_gain.astype(np.float64),
                                  model.ln_bias.astype(np.float64), model.ln_epsilon)
    return z.astype(np.float32)


def embed(model: EncoderModel, text: str) -> np.ndarray:
    return embed_features(model, featurize_many([text], model.featurizer))[0]


def score(model: EncoderModel, query: str, passage: str) -> float:
    q = embed(model, query).astype(np.float64)
    p = embed(model, passage).astype(np.float64)
    return float(q @ p)


def _embed_chunk(model: EncoderModel, x: sp.csr_matrix, out: np.ndarray,
                 start: int, stop: int) -> None:
    out[start:stop] = embed_features(model, x[start:stop])


def embed_rows(model: EncoderModel, x: sp.csr_matrix, threads: int = 1,
               chunk: int = 2048) -> np.ndarray:
    """Parallel embed_features; workers write disjoint row ranges."""
    n = x.shape[0]
    out = np.zeros((n, model.dim), dtype=np.float32)
    spans = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    if threads <= 1 or len(spans) <= 1:
        for s, e in spans:
            _embed_chunk(model, x, out, s, e)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda se: _embed_chunk(model, x, out, *se), spans))
    return out


def embed_corpus(model: EncoderModel, corpus: Corpus, threads: int = 1,
                 features: Optional[sp.csr_matrix] = None) -> EmbeddingMatrix:
    """Row i = embed(passage i); `features` may carry the corpus CSR already."""
    x = features if features is not None else featurize_many(corpus.texts(), model.featurizer)
    return EmbeddingMatrix(embed_rows(model, x, threads), tuple(corpus.ids))


# ── loss ──────────────────────────────────────────────────────────────────
def nll_loss(score_pos: float, scores_neg: Sequence[float]) -> float:
    """−log softmax of the positive among [positive, negatives]."""
    s = np.asarray([score_pos, *scores_neg], dtype=np.float64)
    if s.size < 2:
        raise ArgumentError("nll_loss needs at least one negative score")
    if not np.all(np.isfinite(s)):
        raise NumericError("nll_loss received a non-finite score")
    m = s.max()
    return float(m + math.log(np.exp(s - m).sum()) - s[0])


@dataclass
class Batch:
    """Feature rows for one step: B queries, B positives, flattened negatives."""
    x:           sp.csr_matrix    # vstack(queries, positives, negatives)
    size:        int              # B
    neg_owner:   np.ndarray       # example index per negative row
    neg_slot:    np.ndarray       # position within the example's negatives
    max_negs:    int
    inbatch_mask: np.ndarray      # (B, B) True where column j must be ignored for row i


def _query_key(text: str) -> str:
    return "q\x00" + text


def _passage_key(pid: str) -> str:
    return "p\x00" + pid


def make_batch(examples: Sequence[AugmentedExample], positives: Sequence[str],
               table: FeatureTable) -> Batch:
    b = len(examples)
    owner, slot, neg_keys = [], [], []
    for i, ex in enumerate(examples):
        for j, nid in enumerate(ex.negative_ids):
            owner.append(i)
            slot.append(j)
            neg_keys.append(_passage_key(nid))
    keys = ([_query_key(ex.pair.query_text) for ex in examples]
            + [_passage_key(pid) for pid in positives] + neg_keys)
    mask = np.zeros((b, b), dtype=bool)
    for i, ex in enumerate(examples):
        gold = set(ex.pair.positive_ids)
        for j, pid in enumerate(positives):
            if j != i and pid in gold:
                mask[i, j] = True
    return Batch(table.rows(keys), b, np.asarray(owner, dtype=np.int64),
                 np.asarray(slot, dtype=np.int64),
                 max((ex.n for ex in examples), default=0), mask)


def nll_objective(params: Params, batch: Batch, in_batch: bool,
                  use_layer_norm: bool = True,
                  eps: float = config.LN_EPSILON) -> Tuple[float, Params]:
    """Mean NLL over the batch and its gradient w.r.t. every parameter."""
    B = batch.size
    z = np.asarray(batch.x @ params.weights)
    if use_layer_norm:
        y, cache = layer_norm_forward(z, params.gain, params.bias, eps)
    else:
        y = z
    q, p, ng = y[:B], y[B:2 * B], y[2 * B:]

    off = B if in_batch else 1
    logits = np.full((B, off + batch.max_negs), -np.inf)
    if in_batch:
        logits[:, :B] = q @ p.T
        logits[:, :B][batch.inbatch_mask] = -np.inf
        target = np.arange(B)
    else:
        logits[:, 0] = (q * p).sum(axis=1)
        target = np.zeros(B, dtype=np.int64)
    s_neg = (q[batch.neg_owner] * ng).sum(axis=1)
    logits[batch.neg_owner, off + batch.neg_slot] = s_neg

    m = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - m)
    tot = ex.sum(axis=1, keepdims=True)
    losses = (m[:, 0] + np.log(tot[:, 0])) - logits[np.arange(B), target]
    loss = float(losses.mean())

    g = ex / tot
    g[np.arange(B), target] -= 1.0
    g /= B

    g_neg = g[batch.neg_owner, off + batch.neg_slot]
    dq = np.zeros_like(q)
    if in_batch:
        dq += g[:, :B] @ p
        dp = g[:, :B].T @ q
    else:
        dq += g[:, :1] * p
        dp = g[:, :1] * q
    np.add.at(dq, batch.neg_owner, g_neg[:, None] * ng)
    dng = g_neg[:, None] * q[batch.neg_owner]
    dy = np.vstack([dq, dp, dng])

    if use_layer_norm:
        dz, dgain, dbias = layer_norm_backward(dy, cache, params.gain)
    else:
        dz, dgain, dbias = dy, np.zeros_like(params.gain), np.zeros_like(params.bias)
    dw = np.asarray(batch.x.T @ dz)
    return loss, Params(dw, dgain, dbias)


# ── optimiser ─────────────────────────────────────────────────────────────
class Adam:
    """Adam with bias correction over a fixed list of arrays (updated in place)."""

    def __init__(self, params: Sequence[np.ndarray], lr: float,
                 beta1: float = config.ADAM_BETA1, beta2: float = config.ADAM_BETA2):
        self.params = list(params)
        self.lr, self.beta1, self.beta2 = lr, beta1, beta2
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * math.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= lr_t * m / (np.sqrt(v) + ADAM_EPS)


def clip_grads(grads: Sequence[np.ndarray], max_norm: Optional[float]) -> None:
    if max_norm is None:
        return
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm


# ── training ──────────────────────────────────────────────────────────────
def register_examples(table: FeatureTable, corpus: Corpus,
                      examples: Sequence[AugmentedExample]) -> None:
    for ex in examples:
        table.add(_query_key(ex.pair.query_text), ex.pair.query_text)
        for pid in (*ex.pair.positive_ids, *ex.negative_ids):
            table.add(_passage_key(pid), corpus[pid].full_text)


def corpus_features(table: FeatureTable, corpus: Corpus) -> sp.csr_matrix:
    """Corpus rows (corpus order) out of a shared feature table."""
    table.add_many((_passage_key(p.id), p.full_text) for p in corpus)
    return table.rows([_passage_key(p.id) for p in corpus])


def query_features(table: FeatureTable, texts: Sequence[str]) -> sp.csr_matrix:
    table.add_many((_query_key(t), t) for t in texts)
    return table.rows([_query_key(t) for t in texts])


def _mean_nll(params: Params, examples: Sequence[AugmentedExample], table: FeatureTable,
              cfg: TrainConfig) -> float:
    if not examples:
        return math.nan
    total = 0.0
    for s in range(0, len(examples), cfg.batch_size):
        chunk = examples[s:s + cfg.batch_size]
        batch = make_batch(chunk, [ex.pair.positive_ids[0] for ex in chunk], table)
        loss, _ = nll_objective(params, batch, cfg.in_batch_negatives,
                                cfg.use_layer_norm, cfg.ln_epsilon)
        total += loss * len(chunk)
    return total / len(examples)


def train_with_history(examples: Sequence[AugmentedExample],
                       dev: Sequence[AugmentedExample],
                       corpus: Corpus,
                       cfg: TrainConfig,
                       init_seed: int,
                       features: Optional[FeatureTable] = None) -> TrainOutcome:
    """Adam over shuffled mini-batches; keep the parameters of the best dev epoch."""
    if not examples:
        raise ArgumentError("training set is empty")
    if features is not None and features.cfg != cfg.featurizer:
        raise ArgumentError("feature table was built with a different featurizer config")
    table = features if features is not None else FeatureTable(cfg.featurizer)
    register_examples(table, corpus, examples)
    register_examples(table, corpus, dev)

    params = init_params(cfg.featurizer.num_buckets, cfg.dim, init_seed)
    opt = Adam(params.arrays(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2)
    rng = np.random.default_rng(cfg.seed)

    dev_hist = [_mean_nll(params, dev, table, cfg)]
    best_dev, best_epoch, best = dev_hist[0], 0, params.copy()
    train_hist: List[float] = []
    step = 0

    for epoch in tqdm(range(cfg.epochs), desc="epochs", leave=False, disable=None):
        order = rng.permutation(len(examples))
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            chunk = [examples[i] for i in order[s:s + cfg.batch_size]]
            batch = make_batch(chunk, [ex.pair.positive_for_epoch(epoch) for ex in chunk],
                               table)
            loss, grads = nll_objective(params, batch, cfg.in_batch_negatives,
                                        cfg.use_layer_norm, cfg.ln_epsilon)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss}", step)
            g = grads.arrays()
            clip_grads(g, cfg.grad_clip)
            opt.step(g)
            total += loss * len(chunk)
            logger.debug("step %d loss %.6f", step, loss)
            step += 1
        train_hist.append(total / len(examples))

        dev_nll = _mean_nll(params, dev, table, cfg)
        dev_hist.append(dev_nll)
        logger.info("epoch %d/%d train_nll=%.5f dev_nll=%.5f",
                    epoch + 1, cfg.epochs, train_hist[-1], dev_nll)
        # no dev set: the last epoch wins
        if not dev or dev_nll < best_dev:
            best_dev, best_epoch, best = dev_nll, epoch + 1, params.copy()

    model = best.to_model(cfg.featurizer, cfg.ln_epsilon, cfg.use_layer_norm)
    return TrainOutcome(model, train_hist, dev_hist, best_epoch)


def train(examples: Sequence[AugmentedExample], dev: Sequence[AugmentedExample],
          corpus: Corpus, cfg: TrainConfig, init_seed: int,
          features: Optional[FeatureTable] = None) -> EncoderModel:
    return train_with_history(examples, dev, corpus, cfg, init_seed, features).model


# ── serialisation ─────────────────────────────────────────────────────────
def model_to_bytes(model: EncoderModel) -> bytes:
    f = model.featurizer
    flags = FLAG_LAYER_NORM if model.use_layer_norm else 0
    head = _MODEL_HEADER.pack(MODEL_VERSION, flags, f.num_buckets, int(f.use_bigrams),
                              int(f.lowercase), f.hash_seed, model.dim, model.ln_epsilon)
    return b"".join([MODEL_MAGIC, head,
                     model.weights.astype("<f4").tobytes(),
                     model.ln_gain.astype("<f4").tobytes(),
                     model.ln_bias.astype("<f4").tobytes()])


def model_from_bytes(buf: bytes, offset: int = 0) -> Tuple[EncoderModel, int]:
    """Decode one model starting at `offset`; return it and the end offset."""
    if buf[offset:offset + 4] != MODEL_MAGIC:
        raise FormatError("not a model file (bad magic)")
    pos = offset + 4
    if len(buf) < pos + _MODEL_HEADER.size:
        raise FormatError("truncated model header")
    version, flags, buckets, bigrams, lower, seed, dim, eps = \
        _MODEL_HEADER.unpack_from(buf, pos)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}")
    pos += _MODEL_HEADER.size
    n_w = buckets * dim
    need = 4 * (n_w + 2 * dim)
    if len(buf) < pos + need:
        raise FormatError("truncated model parameters")
    arr = np.frombuffer(buf, dtype="<f4", count=n_w + 2 * dim, offset=pos)
    feat = FeaturizerConfig(buckets, bool(bigrams), bool(lower), seed)
    model = EncoderModel(feat, dim,
                         arr[:n_w].reshape(buckets, dim).astype(np.float32),
                         arr[n_w:n_w + dim].astype(np.float32),
                         arr[n_w + dim:].astype(np.float32),
                         float(eps), bool(flags & FLAG_LAYER_NORM))
    return model, pos + need


def save_model(path: str, model: EncoderModel) -> None:
    with open(path, "wb") as f:
        f.write(model_to_bytes(model))
    logger.info("Saved %d-dim model to %s", model.dim, path)


def load_model(path: str) -> EncoderModel:
    with open(path, "rb") as f:
        buf = f.read()
    model, end = model_from_bytes(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes")
    return model


