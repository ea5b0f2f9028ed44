#!/usr/bin/env python3
"""
pilot_acceptance.py: one pass over the full synthetic benchmark

Trains the boosted, bagged, iterative and distilled models once and prints
every comparative gap next to its floor (config.ACCEPTANCE_FLOORS) with the
suggested threshold: half the observed gap, never below the floor.  With
--write PATH the thresholds are saved where tests/test_acceptance.py reads
them (tests/acceptance_thresholds.json).
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import config                                                      # noqa: E402
from boosting import (BoostConfig, DevMetric, Ensemble, dev_metric_value,  # noqa: E402
                      run_bagging, run_boosting, run_iterative)
from distill import DistillConfig, distill                         # noqa: E402
from encoder import TrainConfig, embed_rows                        # noqa: E402
from evaluation import (margin_quantiles, probe_sweep, recall_at_k,  # noqa: E402
                        suggested_thresholds, write_thresholds)
from featurizer import FeatureTable, featurize_many                # noqa: E402
from index import build_ivf, default_nlist, exact_search, search_many  # noqa: E402
from synthgen import SynthConfig, generate                         # noqa: E402

log = logging.getLogger("pilot")


def _overlap_at_two(ens, ds, table, threads):
    matrix = ens.embed_corpus(ds.corpus, threads, table)
    ivf = build_ivf(matrix, default_nlist(len(ds.corpus)), threads=threads)
    q = ens.embed_texts([p.query_text for p in ds.dev], "query", threads, table)
    rows = probe_sweep(ivf, matrix, q, [set(p.positive_ids) for p in ds.dev], 20, [2],
                       threads=threads)
    return rows[0].recall_vs_exact


def main():
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--threads", type=int, default=None)
    ap.add_argument("--json", action="store_true")
    ap.add_argument("--write", metavar="PATH", default=None,
                    help="save the suggested thresholds as JSON for the acceptance tests")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)-7s %(name)s: %(message)s")
    threads = config.resolve_threads(args.threads)

    synth = SynthConfig()
    ds = generate(synth)
    boost_cfg, train_cfg = BoostConfig(), TrainConfig()
    table = FeatureTable(train_cfg.featurizer)
    r10, r20 = DevMetric("recall", 10), DevMetric("recall", 20)

    def metric(ens, m):
        return dev_metric_value(ens, ds.dev, ds.corpus, m, threads, table)

    log.info("boosting")
    ens, history = run_boosting(ds.train, ds.dev, ds.corpus, boost_cfg, train_cfg, threads)
    log.info("bagging")
    bagged = run_bagging(ds.train, ds.dev, ds.corpus, boost_cfg.max_rounds,
                         boost_cfg.dim_per_round, train_cfg, boost_cfg, threads)
    log.info("iterative")
    model, _ = run_iterative(ds.train, ds.dev, ds.corpus, boost_cfg,
                             replace(train_cfg, dim=config.ITERATIVE_DIM), threads)
    single = Ensemble.single(model)

    observed = {
        "boost_over_round_one_r10": metric(ens, r10) - metric(ens.prefix(1), r10),
        "boost_over_bagging_r20":   metric(ens, r20) - metric(bagged, r20),
        "boost_vs_iterative_r10":   metric(ens, r10) - metric(single, r10),
        "ivf_two_probe_overlap":    (_overlap_at_two(ens, ds, table, threads)
                                     - _overlap_at_two(single, ds, table, threads)),
    }

    margins = margin_quantiles([ens.prefix(1), ens], ds.train, ds.corpus, config.MARGIN_K,
                               threads, table)
    student = distill(ens, ds.train, ds.dev, ds.corpus, DistillConfig(), threads)
    matrix = ens.embed_corpus(ds.corpus, threads, table)
    q = embed_rows(student, featurize_many([p.query_text for p in ds.dev], student.featurizer),
                   threads)
    res = search_many(lambda v: exact_search(matrix, v, 20), q, threads)
    distill_gap = metric(ens, r20) - recall_at_k(res, [set(p.positive_ids) for p in ds.dev], 20)

    suggested = suggested_thresholds(observed)
    if args.write:
        write_thresholds(args.write, observed, asdict(synth))
    report = {
        "rounds_selected": len(ens),
        "history": [vars(h) for h in history],
        "gaps": {name: {"observed": round(v, 4), "floor": config.ACCEPTANCE_FLOORS[name],
                        "suggested": suggested[name]}
                 for name, v in observed.items()},
        "margin_p75": [round(margins[0].p75, 4), round(margins[-1].p75, 4)],
        "margin_p90": [round(margins[0].p90, 4), round(margins[-1].p90, 4)],
        "distill_r20_gap": round(distill_gap, 4),
    }
    if args.json:
        print(json.dumps(report, indent=2))
        return
    print(f"rounds selected: {report['rounds_selected']}")
    for name, g in report["gaps"].items():
        flag = "" if g["observed"] >= g["floor"] else "   <-- below floor"
        print(f"{name:28s} observed {g['observed']:+.4f}  floor {g['floor']:+.4f}  "
              f"suggested {g['suggested']:+.4f}{flag}")
    print(f"margin p75 round 1 -> final: {report['margin_p75']}")
    print(f"margin p90 round 1 -> final: {report['margin_p90']}")
    print(f"distilled R@20 gap:  {report['distill_r20_gap']:+.4f}")


if __name__ == "__main__":
    main()
