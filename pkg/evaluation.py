"""
evaluation.py – retrieval metrics and diagnostics

Metrics are pure functions of (ranked results, golds).  Diagnostics:
top-k training margins per boosting round and recall-vs-probes sweeps
over an IVF index.  Tables are written as TSV, summaries as JSON.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import (TYPE_CHECKING, Any, Collection, Dict, List, Mapping, Optional, Sequence,
                    Tuple)

import numpy as np

import config
from data import Corpus, TrainPair
from errors import ArgumentError, NumericError, ParseError
from index import (EmbeddingMatrix, IVFIndex, SearchResult, exact_search, ivf_search,
                   search_many, select_probes)

if TYPE_CHECKING:                       # avoid circular import at runtime
    from boosting import Ensemble

logger = logging.getLogger(__name__)


# ── metrics ───────────────────────────────────────────────────────────────
def _check(results: Sequence[SearchResult], golds: Sequence[Any]) -> None:
    if not results:
        raise ArgumentError("metric over an empty query set")
    if len(results) != len(golds):
        raise ArgumentError(f"{len(results)} result lists but {len(golds)} gold sets")


def first_gold_rank(result: SearchResult, gold: Collection[str]) -> Optional[int]:
    """1-based rank of the first gold id, None if absent."""
    for rank, pid in enumerate(result.ids, start=1):
        if pid in gold:
            return rank
    return None


def hit_at_k(result: SearchResult, gold: Collection[str], k: int) -> float:
    r = first_gold_rank(result, gold)
    return 1.0 if r is not None and r <= k else 0.0


def reciprocal_rank(result: SearchResult, gold: Collection[str], k: int = 10) -> float:
    r = first_gold_rank(result, gold)
    return 1.0 / r if r is not None and r <= k else 0.0


def recall_at_k(results: Sequence[SearchResult], golds: Sequence[Collection[str]],
                k: int) -> float:
    """Fraction of queries with at least one gold in the top k."""
    _check(results, golds)
    return float(np.mean([hit_at_k(r, g, k) for r, g in zip(results, golds)]))


def mrr_at_k(results: Sequence[SearchResult], golds: Sequence[Collection[str]],
             k: int = 10) -> float:
    _check(results, golds)
    return float(np.mean([reciprocal_rank(r, g, k) for r, g in zip(results, golds)]))


def mrr_at_10(results: Sequence[SearchResult], golds: Sequence[Collection[str]]) -> float:
    return mrr_at_k(results, golds, 10)


def dcg(gains: Sequence[float]) -> float:
    g = np.asarray(gains, dtype=np.float64)
    return float((g / np.log2(np.arange(2, g.size + 2))).sum())


def ndcg_query(result: SearchResult, rels: Mapping[str, int], k: int = 10) -> float:
    ideal = dcg(sorted(rels.values(), reverse=True)[:k])
    if ideal == 0.0:
        return 0.0
    return dcg([rels.get(pid, 0) for pid in result.ids[:k]]) / ideal


def ndcg_at_10(results: Sequence[SearchResult], qrels: Sequence[Mapping[str, int]]) -> float:
    """Gain = graded relevance, log2 discount, ideal ranking from the qrels."""
    _check(results, qrels)
    return float(np.mean([ndcg_query(r, q, 10) for r, q in zip(results, qrels)]))


# ── reports ───────────────────────────────────────────────────────────────
@dataclass
class EvalReport:
    metrics: Dict[str, float]
    rows:    List[Dict[str, Any]] = field(default_factory=list)
    config:  Dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"metrics": self.metrics, "config": self.config},
                          indent=2, sort_keys=True)

    def write(self, out_dir: str, name: str) -> Dict[str, str]:
        """Write <name>.json and <name>.tsv; return the paths."""
        os.makedirs(out_dir, exist_ok=True)
        j = os.path.join(out_dir, f"{name}.json")
        t = os.path.join(out_dir, f"{name}.tsv")
        with open(j, "w", encoding="utf-8") as f:
            f.write(self.to_json() + "\n")
        cols = list(self.rows[0]) if self.rows else ["query_id"]
        write_tsv(t, cols, [[r[c] for c in cols] for r in self.rows])
        return {"json": j, "tsv": t}


def report_name(dataset: str, model: str, index_type: str, k: int) -> str:
    return f"{dataset}.{model}.{index_type}.k{k}"


def evaluate(results: Sequence[SearchResult], query_ids: Sequence[str],
             golds: Sequence[Collection[str]],
             qrels: Optional[Sequence[Mapping[str, int]]] = None,
             ks: Sequence[int] = config.RECALL_KS,
             echo: Optional[Dict[str, Any]] = None) -> EvalReport:
    """R@K for every K in `ks`, MRR@10 and, with graded qrels, NDCG@10."""
    metrics = {f"R@{k}": recall_at_k(results, golds, k) for k in ks}
    metrics["MRR@10"] = mrr_at_10(results, golds)
    if qrels is not None:
        metrics["NDCG@10"] = ndcg_at_10(results, qrels)
    rows = []
    for i, (qid, res, gold) in enumerate(zip(query_ids, results, golds)):
        rank = first_gold_rank(res, gold)
        row: Dict[str, Any] = {"query_id": qid, "first_gold_rank": rank or 0,
                               "rr@10": reciprocal_rank(res, gold)}
        if qrels is not None:
            row["ndcg@10"] = round(ndcg_query(res, qrels[i]), 6)
        rows.append(row)
    return EvalReport(metrics, rows, dict(echo or {}))


def write_tsv(path: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    def fmt(v: Any) -> str:
        return f"{v:.6f}" if isinstance(v, float) else str(v)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(header) + "\n")
        for r in rows:
            f.write("\t".join(fmt(v) for v in r) + "\n")


# ── acceptance thresholds ─────────────────────────────────────────────────
def _normalised(doc: Mapping[str, Any]) -> Any:
    return json.loads(json.dumps(doc, sort_keys=True))


def suggested_thresholds(observed: Mapping[str, float],
                         floors: Mapping[str, float] = config.ACCEPTANCE_FLOORS
                         ) -> Dict[str, float]:
    """Half of each observed gap, never below its floor."""
    missing = set(floors) - set(observed)
    if missing:
        raise ArgumentError(f"no observed gap for {sorted(missing)}")
    return {name: round(max(floor, observed[name] / 2), 4) for name, floor in floors.items()}


def write_thresholds(path: str, observed: Mapping[str, float], synth: Mapping[str, Any],
                     floors: Mapping[str, float] = config.ACCEPTANCE_FLOORS) -> Dict[str, float]:
    thresholds = suggested_thresholds(observed, floors)
    doc = {"synth": _normalised(synth),
           "observed": {k: round(float(v), 4) for k, v in observed.items()},
           "thresholds": thresholds}
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    logger.info("wrote acceptance thresholds to %s", path)
    return thresholds


def load_thresholds(path: str, synth: Mapping[str, Any],
                    floors: Mapping[str, float] = config.ACCEPTANCE_FLOORS) -> Dict[str, float]:
    """
    Thresholds from a pilot file, or the floors.

    A missing file, or one written for a different generator config, gives
    the floors unchanged.  A pilot value never lowers its floor.
    """
    if not os.path.exists(path):
        return dict(floors)
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ParseError(str(exc), path) from exc
    if doc.get("synth") != _normalised(synth):
        logger.warning("%s was written for another generator config; using the floors", path)
        return dict(floors)
    pilot = doc.get("thresholds", {})
    return {name: max(floor, float(pilot.get(name, floor))) for name, floor in floors.items()}


# ── run files ─────────────────────────────────────────────────────────────
RUN_HEADER = ("query_id", "passage_id", "rank", "score")


def write_run(path: str, query_ids: Sequence[str], results: Sequence[SearchResult]) -> None:
    """query_id, passage_id, 1-based rank, score (repr, so scores survive a re-read)."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(RUN_HEADER) + "\n")
        for qid, res in zip(query_ids, results):
            for rank, (pid, s) in enumerate(res.entries, start=1):
                f.write(f"{qid}\t{pid}\t{rank}\t{s!r}\n")


def read_run(path: str) -> Dict[str, SearchResult]:
    per_query: Dict[str, List[Tuple[int, str, float]]] = {}
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        if tuple(header) != RUN_HEADER:
            raise ParseError(f"expected header {RUN_HEADER}", path, 1)
        for line_no, raw in enumerate(f, start=2):
            if not raw.strip():
                continue
            parts = raw.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise ParseError("expected 4 tab-separated fields", path, line_no)
            try:
                rank, score = int(parts[2]), float(parts[3])
            except ValueError:
                raise ParseError("rank must be an integer and score a float",
                                 path, line_no) from None
            per_query.setdefault(parts[0], []).append((rank, parts[1], score))
    return {qid: SearchResult(tuple((pid, s) for _, pid, s in sorted(rows)))
            for qid, rows in per_query.items()}


# ── margins ───────────────────────────────────────────────────────────────
def margin_from_scores(gold_score: float, exact_results: SearchResult,
                       positives: Collection[str], k: int, q_norm: float,
                       mu_c: float) -> float:
    if q_norm <= 0.0 or mu_c <= 0.0:
        raise NumericError("zero query or passage norm in margin denominator")
    negs = [s for pid, s in exact_results.entries if pid not in positives]
    if len(negs) < k:
        raise ArgumentError(f"need {k} non-gold results, got {len(negs)}")
    return (gold_score - negs[k - 1]) / (q_norm * mu_c)


def topk_margin(ensemble: "Ensemble", pair: TrainPair, exact_results: SearchResult,
                k: int, mu_c: float, corpus: Corpus) -> float:
    """
    (h(q, c⁺) − k-th best non-gold score) / (‖q̄‖ · μ_c).

    The gold is the pair's first positive; every positive is excluded from
    the negative pool.
    """
    q = ensemble.embed(pair.query_text, "query").astype(np.float64)
    c = ensemble.embed(corpus[pair.positive_ids[0]].full_text, "passage").astype(np.float64)
    return margin_from_scores(float(q @ c), exact_results, set(pair.positive_ids), k,
                              float(np.linalg.norm(q)), mu_c)


@dataclass
class MarginRow:
    round:     int
    total_dim: int
    p50:       float
    p75:       float
    p90:       float
    n_queries: int
    n_skipped: int


def round_margins(ensemble: "Ensemble", pairs: Sequence[TrainPair], corpus: Corpus,
                  k: int = config.MARGIN_K, threads: int = 1,
                  features=None) -> np.ndarray:
    """Top-k margins of every pair under one ensemble; zero-norm queries skipped."""
    matrix = ensemble.embed_corpus(corpus, threads, features)
    mu_c = matrix.mean_norm()
    qs = ensemble.embed_texts([p.query_text for p in pairs], "query", threads, features)
    q64 = qs.astype(np.float64)

    def one(i: int) -> Optional[float]:
        pair = pairs[i]
        res = exact_search(matrix, q64[i], k + len(pair.positive_ids))
        gold = float(matrix.data64[corpus.row(pair.positive_ids[0])] @ q64[i])
        try:
            return margin_from_scores(gold, res, set(pair.positive_ids), k,
                                      float(np.linalg.norm(q64[i])), mu_c)
        except NumericError:
            logger.warning("query %s: zero norm, margin skipped", pair.query_id)
            return None

    vals = search_many(one, np.arange(len(pairs)), threads)
    return np.array([v for v in vals if v is not None], dtype=np.float64)


def margin_quantiles(ensembles_per_round: Sequence["Ensemble"], train_pairs: Sequence[TrainPair],
                     corpus: Corpus, k: int = config.MARGIN_K, threads: int = 1,
                     features=None) -> List[MarginRow]:
    """One row per prefix ensemble with the p50/p75/p90 top-k margin."""
    rows = []
    for r, ens in enumerate(ensembles_per_round, start=1):
        m = round_margins(ens, train_pairs, corpus, k, threads, features)
        if m.size == 0:
            raise NumericError(f"round {r}: no query had a usable margin")
        p50, p75, p90 = np.percentile(m, config.MARGIN_QUANTILES)
        rows.append(MarginRow(r, ens.total_dim, float(p50), float(p75), float(p90),
                              len(train_pairs), len(train_pairs) - int(m.size)))
        logger.info("round %d margins p50=%.4f p75=%.4f p90=%.4f", r, p50, p75, p90)
    return rows


def write_margins_tsv(path: str, rows: Sequence[MarginRow]) -> None:
    cols = list(asdict(rows[0])) if rows else [f for f in MarginRow.__dataclass_fields__]
    write_tsv(path, cols, [list(asdict(r).values()) for r in rows])


# ── IVF probe sweep ───────────────────────────────────────────────────────
@dataclass
class SweepRow:
    n_probes:        int
    recall_at_k:     float
    recall_vs_exact: float
    mean_candidates: float


def probe_sweep(ivf: IVFIndex, matrix: EmbeddingMatrix, queries: np.ndarray,
                golds: Sequence[Collection[str]], k: int, probe_list: Sequence[int],
                threads: int = 1, probe_metric: str = config.PROBE_METRIC) -> List[SweepRow]:
    """
    Gold recall@k and overlap with exact top-k for each probe count.

    Overlap with exact results can only grow with n_probes: a row in the
    exact top-k stays in the top-k of any candidate set that contains it.
    """
    if len(queries) != len(golds):
        raise ArgumentError("queries and golds differ in length")
    exact = search_many(lambda q: exact_search(matrix, q, k), queries, threads)
    exact_sets = [set(r.rows) for r in exact]
    rows = []
    for n_probes in sorted(set(probe_list)):
        res = search_many(lambda q: ivf_search(ivf, matrix, q, k, n_probes, probe_metric),
                          queries, threads)
        overlap = [len(set(r.rows) & e) / len(e) if e else 1.0
                   for r, e in zip(res, exact_sets)]
        sizes = [sum(len(ivf.lists[c]) for c in
                     select_probes(ivf, np.asarray(q, np.float64), n_probes, probe_metric))
                 for q in queries]
        rows.append(SweepRow(n_probes, recall_at_k(res, golds, k),
                             float(np.mean(overlap)), float(np.mean(sizes))))
        logger.info("n_probes=%d R@%d=%.4f recall_vs_exact=%.4f",
                    n_probes, k, rows[-1].recall_at_k, rows[-1].recall_vs_exact)
    return rows


def default_probe_list(K: int) -> List[int]:
    """1, 2, 4, … up to K (K always included)."""
    out, p = [], 1
    while p < K:
        out.append(p)
        p *= 2
    out.append(K)
    return out


def write_sweep_tsv(path: str, rows: Sequence[SweepRow]) -> None:
    cols = [f for f in SweepRow.__dataclass_fields__]
    write_tsv(path, cols, [list(asdict(r).values()) for r in rows])
