#!/usr/bin/env python3
"""
main.py – one executable, one subcommand per pipeline stage

    gen      synthetic benchmark
    train    boosting / iterative / bagging
    embed    corpus → exact index file
    index    exact | ivf | pq
    search   queries → run TSV
    eval     run TSV → metrics JSON + per-query TSV
    sweep    IVF recall vs n_probes
    margins  top-k training margins per boosting round
    distill  ensemble query side → one encoder

Settings: flag > config file [command] > config file [common] > config.py.
Every command writes <command>.manifest.json next to its output.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import psutil
import scipy

import config
from boosting import (BoostConfig, Ensemble, RoundRecord, dev_metric_value, load_ensemble,
                      run_bagging, run_boosting, run_iterative, save_ensemble,
                      write_history_tsv)
from data import load_corpus, load_qrels, load_queries, load_train_pairs, split_dev
from distill import DistillConfig, distill_with_history
from encoder import TrainConfig, embed_rows, load_model, save_model
from errors import ArgumentError, RetrievalError, ValidationError
from evaluation import (default_probe_list, evaluate, margin_quantiles, probe_sweep,
                        read_run, report_name, write_margins_tsv, write_run,
                        write_sweep_tsv)
from featurizer import FeaturizerConfig, FeatureTable, featurize_many
from index import (IndexFile, SearchResult, build_ivf, build_pq, exact_search, ivf_search,
                   load_index, save_index, search_many)
from synthgen import SynthConfig, generate, write_dataset

logger = logging.getLogger("drboost")

LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"
NPROBE_CHECK_QUERIES = 200


# ── plumbing ──────────────────────────────────────────────────────────────
def setup_logging(verbose: bool, quiet: bool, log_file: Optional[str]) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _hash_paths(paths: Sequence[Optional[str]]) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for p in paths:
        if not p:
            continue
        if os.path.isdir(p):
            for name in sorted(os.listdir(p)):
                fp = os.path.join(p, name)
                if os.path.isfile(fp) and not name.endswith(".manifest.json"):
                    out[fp] = sha256_file(fp)
        elif os.path.isfile(p):
            out[p] = sha256_file(p)
    return out


def machine_info() -> Dict[str, Any]:
    return {
        "python":         platform.python_version(),
        "numpy":          np.__version__,
        "scipy":          scipy.__version__,
        "platform":       platform.platform(),
        "physical_cores": psutil.cpu_count(logical=False),
        "logical_cores":  psutil.cpu_count(logical=True),
        "memory_bytes":   psutil.virtual_memory().total,
    }


def write_manifest(out_path: str, args: argparse.Namespace, inputs: Sequence[Optional[str]],
                   outputs: Sequence[Optional[str]], seeds: Dict[str, int]) -> str:
    """Config echo, seeds and artifact hashes, written beside the main output."""
    out_dir = out_path if os.path.isdir(out_path) else (os.path.dirname(out_path) or ".")
    manifest = {
        "command": args.command,
        "config":  {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "seeds":   seeds,
        "inputs":  _hash_paths(inputs),
        "outputs": _hash_paths(outputs),
        "machine": machine_info(),
    }
    path = os.path.join(out_dir, f"{args.command}.{config.MANIFEST_NAME}")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)
        f.write("\n")
    logger.info("Wrote manifest %s", path)
    return path


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def _featurizer(args: argparse.Namespace) -> FeaturizerConfig:
    return FeaturizerConfig(args.num_buckets, not args.no_bigrams, not args.no_lowercase,
                            args.hash_seed)


def _train_dev(args: argparse.Namespace, corpus):
    train = load_train_pairs(args.train, corpus)
    if args.dev:
        return train, load_train_pairs(args.dev, corpus)
    return split_dev(train, args.dev_fraction, args.seed)


def _query_vectors(args: argparse.Namespace, texts: Sequence[str], threads: int) -> np.ndarray:
    """Ensemble query side, or a distilled query model when one is given."""
    if args.query_model:
        model = load_model(args.query_model)
        return embed_rows(model, featurize_many(texts, model.featurizer), threads)
    if not args.model:
        raise ArgumentError("either --model or --query-model is required")
    return load_ensemble(args.model).embed_texts(texts, "query", threads)


def _parse_probes(value: Any, K: int) -> List[int]:
    if value is None:
        return default_probe_list(K)
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    try:
        return [int(v) for v in value]
    except (TypeError, ValueError):
        raise ArgumentError(f"--probes must be a comma-separated list of ints, got {value!r}") from None


def _parse_mix(value: Any) -> tuple:
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    try:
        mix = tuple(float(v) for v in value)
    except (TypeError, ValueError):
        raise ArgumentError(f"--level-mix must be three comma-separated numbers, "
                            f"got {value!r}") from None
    if len(mix) != 3:
        raise ArgumentError(f"--level-mix needs three shares, got {len(mix)}")
    return mix


# ── commands ──────────────────────────────────────────────────────────────
def cmd_gen(args: argparse.Namespace, threads: int) -> Dict[str, Any]:
    cfg = SynthConfig(num_topics=args.num_topics, passages_per_topic=args.passages_per_topic,
                      vocab_size=args.vocab_size, words_per_passage=args.words_per_passage,
                      queries_per_topic=args.queries_per_topic, query_len=args.query_len,
                      noise_rate=args.noise_rate, seed=args.seed,
                      dev_fraction=args.dev_fraction, zipf_exponent=args.zipf_exponent,
                      subtopics_per_topic=args.subtopics_per_topic,
                      leaves_per_subtopic=args.leaves_per_subtopic,
                      level_mix=_parse_mix(args.level_mix))
    ds = generate(cfg)
    paths = write_dataset(args.out, ds)
    write_manifest(args.out, args, [], list(paths.values()), {"seed": args.seed})
    return {"passages": len(ds.corpus), "train": len(ds.train), "dev": len(ds.dev),
            "files": paths}


def cmd_train(args: argparse.Namespace, threads: int) -> Dict[str, Any]:
    corpus = load_corpus(args.corpus)
    train, dev = _train_dev(args, corpus)
    dim = args.dim or (config.ITERATIVE_DIM if args.mode == "iterative" else config.DIM_PER_ROUND)
    train_cfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs,
                            batch_size=args.batch_size, negatives_per_example=args.negatives,
                            seed=args.seed, grad_clip=args.grad_clip, dim=dim,
                            featurizer=_featurizer(args))
    boost_cfg = BoostConfig(max_rounds=args.rounds, tolerance=args.tolerance,
                            dim_per_round=dim, negatives_n=args.negatives,
                            mine_top_N=args.mine_top_n, mine_temperature=args.temperature,
                            dev_metric=args.dev_metric, mode=args.mode, seed=args.seed)

    if args.mode == "boost":
        ens, history = run_boosting(train, dev, corpus, boost_cfg, train_cfg, threads)
    elif args.mode == "iterative":
        model, history = run_iterative(train, dev, corpus, boost_cfg, train_cfg, threads)
        ens = Ensemble.single(model)
    else:
        ens = run_bagging(train, dev, corpus, args.rounds, dim, train_cfg, boost_cfg, threads)
        table = FeatureTable(train_cfg.featurizer)
        history = [RoundRecord(r, dev_metric_value(p, dev, corpus, boost_cfg.metric,
                                                   threads, table),
                               float("nan"), float("nan"), p.total_dim)
                   for r, p in enumerate(ens.prefixes(), start=1)] if dev else []

    os.makedirs(args.out, exist_ok=True)
    model_path = os.path.join(args.out, "ensemble.drbe")
    hist_path = os.path.join(args.out, "history.tsv")
    save_ensemble(model_path, ens)
    write_history_tsv(hist_path, history)
    write_manifest(args.out, args, [args.corpus, args.train, args.dev],
                   [model_path, hist_path], {"seed": args.seed})
    return {"mode": args.mode, "components": len(ens), "total_dim": ens.total_dim,
            "history": [vars(h) for h in history], "model": model_path}


def cmd_embed(args: argparse.Namespace, threads: int) -> Dict[str, Any]:
    ens = load_ensemble(args.model)
    corpus = load_corpus(args.corpus)
    matrix = ens.embed_corpus(corpus, threads)
    _ensure_parent(args.out)
    save_index(args.out, IndexFile("exact", matrix))
    write_manifest(args.out, args, [args.model, args.corpus], [args.out], {})
    return {"rows": matrix.num_rows, "dim": matrix.dim, "out": args.out}


def _nprobe_check(index: IndexFile, k: int, seed: int, threads: int) -> int:
    """Full-probe IVF vs exact on random queries; returns the number checked."""
    matrix, ivf = index.matrix, index.ivf
    n = min(NPROBE_CHECK_QUERIES, max(matrix.num_rows, 1))
    queries = np.random.default_rng(seed).standard_normal((n, matrix.dim))
    exact = search_many(lambda q: exact_search(matrix, q, k), queries, threads)
    full = search_many(lambda q: ivf_search(ivf, matrix, q, k, ivf.K), queries, threads)
    bad = sum(1 for a, b in zip(exact, full) if a.entries != b.entries)
    if bad:
        raise ValidationError(f"full-probe IVF search differs from exact search "
                              f"on {bad}/{n} queries")
    logger.info("n-probe check passed on %d queries (K=%d)", n, ivf.K)
    return n


def cmd_index(args: argparse.Namespace, threads: int) -> Dict[str, Any]:
    if args.embeddings:
        src = load_index(args.embeddings)
        if src.kind == "pq":
            raise ArgumentError("--embeddings must hold raw vectors (exact or ivf index)")
        matrix = src.matrix
    elif args.model and args.corpus:
        matrix = load_ensemble(args.model).embed_corpus(load_corpus(args.corpus), threads)
    else:
        raise ArgumentError("give --embeddings, or --model together with --corpus")

    summary: Dict[str, Any] = {"type": args.type, "rows": matrix.num_rows, "dim": matrix.dim}
    if args.type == "exact":
        index = IndexFile("exact", matrix)
    elif args.type == "ivf":
        index = IndexFile("ivf", matrix, ivf=build_ivf(matrix, args.nlist, args.kmeans_iters,
                                                       args.seed, threads))
        summary["nlist"] = index.ivf.K
        if args.nprobe_check:
            summary["nprobe_check_queries"] = _nprobe_check(index, args.k, args.seed, threads)
    else:
        pq = build_pq(matrix, args.sub_dim, args.seed, args.kmeans_iters, threads,
                      args.pq_centroids)
        index = IndexFile("pq", pq=pq)
        summary.update(bytes_per_vector=pq.bytes_per_vector,
                       raw_bytes_per_vector=4 * pq.dim,
                       compression_ratio=pq.compression_ratio)

    _ensure_parent(args.out)
    save_index(args.out, index)
    write_manifest(args.out, args, [args.embeddings, args.model, args.corpus], [args.out],
                   {"seed": args.seed})
    summary["out"] = args.out
    return summary


def cmd_search(args: argparse.Namespace, threads: int) -> Dict[str, Any]:
    index = load_index(args.index)
    queries = load_queries(args.queries)
    qvecs = _query_vectors(args, [q.query_text for q in queries], threads)
    if qvecs.shape[1] != index.dim:
        raise ArgumentError(f"query vectors have dim {qvecs.shape[1]}, index has {index.dim}")
    results = search_many(lambda q: index.search(q, args.k, args.nprobes, args.probe_metric),
                          qvecs, threads)
    _ensure_parent(args.out)
    write_run(args.out, [q.query_id for q in queries], results)
    write_manifest(args.out, args, [args.index, args.model, args.query_model, args.queries],
                   [args.out], {})
    return {"queries": len(queries), "k": args.k, "out": args.out}


def cmd_eval(args: argparse.Namespace, threads: int) -> Dict[str, Any]:
    run = read_run(args.run)
    queries = load_queries(args.queries)
    results = [run.get(q.query_id, SearchResult(())) for q in queries]
    golds = [set(q.positive_ids) for q in queries]
    qrels = None
    if args.qrels:
        graded = load_qrels(args.qrels)
        qrels = [graded.get(q.query_id, {}) for q in queries]
    ks = sorted(set(config.RECALL_KS) | {args.k})
    report = evaluate(results, [q.query_id for q in queries], golds, qrels, ks,
                      echo={"run": args.run, "queries": args.queries, "qrels": args.qrels})
    paths = report.write(args.out, report_name(args.dataset, args.model_name,
                                               args.index_type, args.k))
    write_manifest(paths["json"], args, [args.run, args.queries, args.qrels],
                   list(paths.values()), {})
    return {"metrics": report.metrics, "files": paths}


def cmd_sweep(args: argparse.Namespace, threads: int) -> Dict[str, Any]:
    index = load_index(args.index)
    if index.kind != "ivf":
        raise ArgumentError(f"sweep needs an ivf index, {args.index} is {index.kind}")
    queries = load_queries(args.queries)
    qvecs = _query_vectors(args, [q.query_text for q in queries], threads)
    probes = _parse_probes(args.probes, index.ivf.K)
    rows = probe_sweep(index.ivf, index.matrix, qvecs, [set(q.positive_ids) for q in queries],
                       args.k, probes, threads, args.probe_metric)
    _ensure_parent(args.out)
    write_sweep_tsv(args.out, rows)
    write_manifest(args.out, args, [args.index, args.model, args.query_model, args.queries],
                   [args.out], {})
    return {"rows": [vars(r) for r in rows], "out": args.out}


def cmd_margins(args: argparse.Namespace, threads: int) -> Dict[str, Any]:
    ens = load_ensemble(args.model)
    corpus = load_corpus(args.corpus)
    pairs = load_train_pairs(args.train, corpus)
    table = FeatureTable(ens.models[0].featurizer)
    rows = margin_quantiles(ens.prefixes(), pairs, corpus, args.k, threads, table)
    _ensure_parent(args.out)
    write_margins_tsv(args.out, rows)
    write_manifest(args.out, args, [args.model, args.corpus, args.train], [args.out], {})
    return {"rows": [vars(r) for r in rows], "out": args.out}


def cmd_distill(args: argparse.Namespace, threads: int) -> Dict[str, Any]:
    ens = load_ensemble(args.model)
    corpus = load_corpus(args.corpus)
    train, dev = _train_dev(args, corpus)
    cfg = DistillConfig(args.epochs, args.lr, args.batch_size, args.seed,
                        (args.query_weight, args.passage_weight), args.patience)
    outcome = distill_with_history(ens, train, dev, corpus, cfg, threads)
    _ensure_parent(args.out)
    save_model(args.out, outcome.model)
    write_manifest(args.out, args, [args.model, args.corpus, args.train, args.dev],
                   [args.out], {"seed": args.seed})
    return {"dim": outcome.model.dim, "best_epoch": outcome.best_epoch,
            "dev_loss_init": outcome.dev_loss[0],
            "dev_loss_best": outcome.dev_loss[outcome.best_epoch], "out": args.out}


# ── argument parser ───────────────────────────────────────────────────────
def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="TOML file with [common] and per-command tables")
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker threads (default ${config.THREADS_ENV}, else physical cores)")
    p.add_argument("--json", action="store_true", help="print a JSON summary to stdout")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--log-file", default=None)
    return p


def _featurizer_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--num-buckets", type=int, default=config.NUM_BUCKETS)
    p.add_argument("--no-bigrams", action="store_true", default=not config.USE_BIGRAMS)
    p.add_argument("--no-lowercase", action="store_true", default=not config.LOWERCASE)
    p.add_argument("--hash-seed", type=int, default=config.HASH_SEED)


def _split_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--dev", default=None, help="dev pairs; split from --train when absent")
    p.add_argument("--dev-fraction", type=float, default=config.SYNTH_DEV_FRACTION)


def _query_side_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", default=None, help="ensemble (DRBE) or model (DRBM) file")
    p.add_argument("--query-model", default=None, help="distilled query encoder (DRBM)")
    p.add_argument("--queries", required=True)
    p.add_argument("--probe-metric", choices=("ip", "l2"), default=config.PROBE_METRIC)


def build_parser() -> tuple[argparse.ArgumentParser, Dict[str, argparse.ArgumentParser]]:
    common = _common()
    ap = argparse.ArgumentParser(prog="drboost", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)
    subs: Dict[str, argparse.ArgumentParser] = {}

    def add(name: str, func: Callable, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("gen", cmd_gen, "generate the synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=config.SYNTH_SEED)
    p.add_argument("--num-topics", type=int, default=config.SYNTH_NUM_TOPICS)
    p.add_argument("--passages-per-topic", type=int, default=config.SYNTH_PASSAGES_PER_TOPIC)
    p.add_argument("--vocab-size", type=int, default=config.SYNTH_VOCAB_SIZE)
    p.add_argument("--words-per-passage", type=int, default=config.SYNTH_WORDS_PER_PASSAGE)
    p.add_argument("--queries-per-topic", type=int, default=config.SYNTH_QUERIES_PER_TOPIC)
    p.add_argument("--query-len", type=int, default=config.SYNTH_QUERY_LEN)
    p.add_argument("--noise-rate", type=float, default=config.SYNTH_NOISE_RATE)
    p.add_argument("--dev-fraction", type=float, default=config.SYNTH_DEV_FRACTION)
    p.add_argument("--zipf-exponent", type=float, default=config.SYNTH_ZIPF_EXPONENT)
    p.add_argument("--subtopics-per-topic", type=int, default=config.SYNTH_SUBTOPICS_PER_TOPIC)
    p.add_argument("--leaves-per-subtopic", type=int, default=config.SYNTH_LEAVES_PER_SUBTOPIC)
    p.add_argument("--level-mix", default=",".join(map(str, config.SYNTH_LEVEL_MIX)),
                   help="topic-wide,subtopic,leaf word shares")

    p = add("train", cmd_train, "train an ensemble")
    _split_args(p)
    _featurizer_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mode", choices=("boost", "iterative", "bagging"), default=config.BOOST_MODE)
    p.add_argument("--rounds", type=int, default=config.MAX_ROUNDS)
    p.add_argument("--dim", type=int, default=None,
                   help=f"per-round dim (boost/bagging, default {config.DIM_PER_ROUND}) "
                        f"or model dim (iterative, default {config.ITERATIVE_DIM})")
    p.add_argument("--epochs", type=int, default=config.EPOCHS)
    p.add_argument("--lr", type=float, default=config.LEARNING_RATE)
    p.add_argument("--batch-size", type=int, default=config.BATCH_SIZE)
    p.add_argument("--negatives", type=int, default=config.NEGATIVES)
    p.add_argument("--grad-clip", type=float, default=config.GRAD_CLIP)
    p.add_argument("--mine-top-n", type=int, default=config.MINE_TOP_N)
    p.add_argument("--temperature", type=float, default=config.MINE_TEMPERATURE)
    p.add_argument("--tolerance", type=float, default=config.TOLERANCE)
    p.add_argument("--dev-metric", default=config.DEV_METRIC)
    p.add_argument("--seed", type=int, default=config.BOOST_SEED)

    p = add("embed", cmd_embed, "embed a corpus into an exact index file")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)

    p = add("index", cmd_index, "build an exact, ivf or pq index")
    p.add_argument("--type", choices=("exact", "ivf", "pq"), default="exact")
    p.add_argument("--embeddings", default=None, help="exact index file from `embed`")
    p.add_argument("--model", default=None)
    p.add_argument("--corpus", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--nlist", type=int, default=config.IVF_NLIST)
    p.add_argument("--kmeans-iters", type=int, default=config.KMEANS_ITERS)
    p.add_argument("--sub-dim", type=int, default=config.PQ_SUB_DIM)
    p.add_argument("--pq-centroids", type=int, default=config.PQ_CENTROIDS)
    p.add_argument("--seed", type=int, default=config.KMEANS_SEED)
    p.add_argument("--nprobe-check", action="store_true",
                   help="verify full-probe IVF search against exact search")
    p.add_argument("--k", type=int, default=config.EVAL_K)

    p = add("search", cmd_search, "search an index, write a run TSV")
    p.add_argument("--index", required=True)
    _query_side_args(p)
    p.add_argument("--k", type=int, default=config.EVAL_K)
    p.add_argument("--nprobes", type=int, default=None, help="IVF probes (default: all)")
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "score a run TSV")
    p.add_argument("--run", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--qrels", default=None)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--k", type=int, default=config.EVAL_K)
    p.add_argument("--dataset", default="synth")
    p.add_argument("--model-name", default="model")
    p.add_argument("--index-type", default="exact")

    p = add("sweep", cmd_sweep, "IVF recall vs n_probes")
    p.add_argument("--index", required=True)
    _query_side_args(p)
    p.add_argument("--k", type=int, default=config.EVAL_K)
    p.add_argument("--probes", default=None, help="comma-separated, default 1,2,4,...,K")
    p.add_argument("--out", required=True)

    p = add("margins", cmd_margins, "top-k margin quantiles per boosting round")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--k", type=int, default=config.MARGIN_K)
    p.add_argument("--out", required=True)

    p = add("distill", cmd_distill, "distill the ensemble query side into one encoder")
    p.add_argument("--model", required=True)
    _split_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=config.DISTILL_EPOCHS)
    p.add_argument("--lr", type=float, default=config.DISTILL_LEARNING_RATE)
    p.add_argument("--batch-size", type=int, default=config.DISTILL_BATCH_SIZE)
    p.add_argument("--seed", type=int, default=config.DISTILL_SEED)
    p.add_argument("--query-weight", type=float, default=config.DISTILL_WEIGHTS[0])
    p.add_argument("--passage-weight", type=float, default=config.DISTILL_WEIGHTS[1])
    p.add_argument("--patience", type=int, default=config.DISTILL_PATIENCE)

    return ap, subs


def _apply_config_file(args: argparse.Namespace, subs: Dict[str, argparse.ArgumentParser]) -> bool:
    """Install config-file values as subcommand defaults; True if any were set."""
    values = config.load_config_file(args.config, args.command)
    if not values:
        return False
    p = subs[args.command]
    known = {a.dest for a in p._actions}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ArgumentError(f"{args.config}: unknown keys for '{args.command}': {unknown}")
    p.set_defaults(**values)
    return True


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    setup_logging(args.verbose, args.quiet, args.log_file)
    try:
        reparse = _apply_config_file(args, subs)
    except ArgumentError as exc:
        # a broken config file is a usage error: argparse prints usage and exits 2
        try:
            subs[args.command].error(str(exc))
        except SystemExit as usage:
            return int(usage.code or 2)
    except OSError as exc:
        print(f"drboost {args.command}: error: {exc}", file=sys.stderr)
        return 1
    try:
        if reparse:
            try:
                args = parser.parse_args(argv)
            except SystemExit as exc:
                return int(exc.code or 0)
        threads = config.resolve_threads(args.threads)
        logger.info("%s: %d thread(s)", args.command, threads)
        summary = args.func(args, threads)
    except (RetrievalError, OSError) as exc:
        logger.debug("failure detail", exc_info=True)
        print(f"drboost {args.command}: error: {exc}", file=sys.stderr)
        return 1

    if args.json:
        print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    else:
        logger.info("%s done: %s", args.command, json.dumps(summary, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
