"""
distill.py – collapse an ensemble's query side into one encoder

Targets per training pair: q̄ = ensemble query vector, c̄ = ensemble passage
vector of the first positive.  A fresh linear encoder E of width total_dim
(no layer norm) minimises

    L(E) = Σ  w_q ‖E(q) − q̄‖² + w_c ‖E(q) − c̄‖²

with Adam, early-stopped on the dev loss.  The ensemble's passage index is
used unchanged with the distilled query encoder.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from tqdm import tqdm

import config
from boosting import Ensemble
from data import Corpus, TrainPair
from encoder import Adam, EncoderModel, Params, init_params, query_features
from errors import ArgumentError, TrainingError, ValidationError
from featurizer import FeatureTable

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DistillConfig:
    epochs:        int   = config.DISTILL_EPOCHS
    learning_rate: float = config.DISTILL_LEARNING_RATE
    batch_size:    int   = config.DISTILL_BATCH_SIZE
    seed:          int   = config.DISTILL_SEED
    weights:       Tuple[float, float] = config.DISTILL_WEIGHTS   # (query, passage)
    patience:      Optional[int] = config.DISTILL_PATIENCE
    adam_beta1:    float = config.ADAM_BETA1
    adam_beta2:    float = config.ADAM_BETA2

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ArgumentError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        wq, wc = self.weights
        if wq < 0 or wc < 0 or wq + wc <= 0:
            raise ArgumentError(f"distill weights must be >= 0 and not both zero, got {self.weights}")
        if self.patience is not None and self.patience < 1:
            raise ArgumentError("patience must be >= 1 when set")


@dataclass(frozen=True, eq=False)
class DistillTargets:
    query_texts: Tuple[str, ...]
    q_bar:       np.ndarray          # (n, total_dim) float64
    c_bar:       np.ndarray          # (n, total_dim) float64

    def __len__(self) -> int:
        return len(self.query_texts)

    def __iter__(self):
        return iter(zip(self.query_texts, self.q_bar, self.c_bar))


@dataclass
class DistillOutcome:
    model:      EncoderModel
    train_loss: List[float]          # mean per-pair loss per epoch
    dev_loss:   List[float]          # index 0 = initialisation
    best_epoch: int


def build_targets(ensemble: Ensemble, pairs: Sequence[TrainPair], corpus: Corpus,
                  threads: int = 1) -> DistillTargets:
    texts = [p.query_text for p in pairs]
    gold_texts = []
    for p in pairs:
        pid = p.positive_ids[0]
        if pid not in corpus:
            raise ValidationError(f"query {p.query_id}: positive {pid!r} is not in the corpus")
        gold_texts.append(corpus[pid].full_text)
    q = ensemble.embed_texts(texts, "query", threads).astype(np.float64)
    c = ensemble.embed_texts(gold_texts, "passage", threads).astype(np.float64)
    return DistillTargets(tuple(texts), q, c)


def loss_lower_bound(targets: DistillTargets,
                     weights: Tuple[float, float] = config.DISTILL_WEIGHTS) -> float:
    """Σ (w_q·w_c / (w_q + w_c)) ‖q̄ − c̄‖², reached when every output sits at the weighted mean."""
    wq, wc = weights
    d = targets.q_bar - targets.c_bar
    return float((wq * wc / (wq + wc)) * (d * d).sum())


def distill_objective(weights: np.ndarray, x: sp.csr_matrix, q_bar: np.ndarray,
                      c_bar: np.ndarray,
                      w: Tuple[float, float] = config.DISTILL_WEIGHTS) -> Tuple[float, np.ndarray]:
    """Summed loss over the rows of `x` and its gradient w.r.t. the weight matrix."""
    wq, wc = w
    e = np.asarray(x @ weights)
    dq, dc = e - q_bar, e - c_bar
    loss = float(wq * (dq * dq).sum() + wc * (dc * dc).sum())
    grad = np.asarray(x.T @ (2.0 * wq * dq + 2.0 * wc * dc))
    return loss, grad


def _mean_loss(weights: np.ndarray, x: sp.csr_matrix, t: DistillTargets,
               w: Tuple[float, float]) -> float:
    if len(t) == 0:
        return math.nan
    loss, _ = distill_objective(weights, x, t.q_bar, t.c_bar, w)
    return loss / len(t)


def distill_with_history(ensemble: Ensemble, train_pairs: Sequence[TrainPair],
                         dev_pairs: Sequence[TrainPair], corpus: Corpus,
                         cfg: DistillConfig = DistillConfig(),
                         threads: int = 1) -> DistillOutcome:
    if not train_pairs:
        raise ArgumentError("distillation needs training pairs")
    featurizer = ensemble.models[0].featurizer
    if any(m.featurizer != featurizer for m in ensemble.models):
        raise ArgumentError("ensemble components use different featurizers")
    dim = ensemble.total_dim

    train_t = build_targets(ensemble, train_pairs, corpus, threads)
    dev_t = build_targets(ensemble, dev_pairs, corpus, threads)
    table = FeatureTable(featurizer)
    x_train = query_features(table, train_t.query_texts)
    x_dev = query_features(table, dev_t.query_texts)

    params = init_params(featurizer.num_buckets, dim, cfg.seed)
    opt = Adam([params.weights], cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2)
    rng = np.random.default_rng(cfg.seed)

    dev_hist = [_mean_loss(params.weights, x_dev, dev_t, cfg.weights)]
    best_dev, best_epoch, best = dev_hist[0], 0, params.weights.copy()
    train_hist: List[float] = []
    stale, step = 0, 0

    for epoch in tqdm(range(cfg.epochs), desc="distill", leave=False, disable=None):
        order = rng.permutation(len(train_t))
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grad = distill_objective(params.weights, x_train[idx], train_t.q_bar[idx],
                                           train_t.c_bar[idx], cfg.weights)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite distillation loss {loss}", step)
            opt.step([grad / len(idx)])
            total += loss
            step += 1
        train_hist.append(total / len(train_t))

        dev_loss = _mean_loss(params.weights, x_dev, dev_t, cfg.weights)
        dev_hist.append(dev_loss)
        logger.info("distill epoch %d/%d train=%.5f dev=%.5f",
                    epoch + 1, cfg.epochs, train_hist[-1], dev_loss)
        if not dev_pairs or dev_loss < best_dev:
            best_dev, best_epoch, best = dev_loss, epoch + 1, params.weights.copy()
            stale = 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                logger.info("dev loss flat for %d epochs, stopping", stale)
                break

    model = Params(best, np.ones(dim), np.zeros(dim)).to_model(
        featurizer, config.LN_EPSILON, use_ln=False)
    return DistillOutcome(model, train_hist, dev_hist, best_epoch)


def distill(ensemble: Ensemble, train_pairs: Sequence[TrainPair],
            dev_pairs: Sequence[TrainPair], corpus: Corpus,
            cfg: DistillConfig = DistillConfig(), threads: int = 1) -> EncoderModel:
    return distill_with_history(ensemble, train_pairs, dev_pairs, corpus, cfg, threads).model
