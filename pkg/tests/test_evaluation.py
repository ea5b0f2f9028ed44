import json
import math

import numpy as np
import pytest

import config
from boosting import Ensemble
from encoder import init_model
from errors import ArgumentError, NumericError, ParseError
from evaluation import (EvalReport, default_probe_list, evaluate, load_thresholds,
                        margin_from_scores, margin_quantiles, mrr_at_10, ndcg_at_10,
                        probe_sweep, read_run, recall_at_k, report_name, round_margins,
                        suggested_thresholds, topk_margin, write_margins_tsv, write_run,
                        write_sweep_tsv, write_thresholds)
from index import EmbeddingMatrix, SearchResult, build_ivf, exact_search


def _ranked(gold_rank, n=40, gold="g"):
    ids = [f"x{i}" for i in range(n)]
    if gold_rank is not None:
        ids[gold_rank - 1] = gold
    return SearchResult(tuple((pid, float(n - i)) for i, pid in enumerate(ids)))


class TestMetrics:
    def test_recall_hand_example(self):
        results = [_ranked(1), _ranked(5), _ranked(30)]
        golds = [{"g"}] * 3
        assert recall_at_k(results, golds, 20) == pytest.approx(2 / 3)
        assert recall_at_k(results, golds, 100) == 1.0

    def test_mrr_hand_example(self):
        results = [_ranked(1), _ranked(2), _ranked(20)]
        assert mrr_at_10(results, [{"g"}] * 3) == pytest.approx(0.5)

    def test_missing_gold_scores_zero(self):
        assert mrr_at_10([_ranked(None)], [{"g"}]) == 0.0

    def test_ndcg_hand_example(self):
        res = SearchResult((("b", 2.0), ("a", 1.0)))
        got = ndcg_at_10([res], [{"a": 3, "b": 2}])
        expected = (2 + 3 / math.log2(3)) / (3 + 2 / math.log2(3))
        assert got == pytest.approx(expected, rel=1e-12)

    def test_ndcg_perfect_ranking(self):
        res = SearchResult((("a", 2.0), ("b", 1.0), ("c", 0.5)))
        assert ndcg_at_10([res], [{"a": 3, "b": 2}]) == pytest.approx(1.0)

    def test_empty_query_set(self):
        with pytest.raises(ArgumentError):
            recall_at_k([], [], 10)
        with pytest.raises(ArgumentError):
            mrr_at_10([], [])

    def test_length_mismatch(self):
        with pytest.raises(ArgumentError):
            recall_at_k([_ranked(1)], [{"g"}, {"g"}], 10)


class TestReport:
    def test_evaluate_and_write(self, tmp_path):
        results = [_ranked(1), _ranked(3)]
        rep = evaluate(results, ["q1", "q2"], [{"g"}, {"g"}], qrels=[{"g": 1}, {"g": 2}],
                       ks=(1, 5), echo={"index": "exact"})
        assert rep.metrics["R@1"] == 0.5 and rep.metrics["R@5"] == 1.0
        assert rep.metrics["MRR@10"] == pytest.approx((1 + 1 / 3) / 2)
        assert "NDCG@10" in rep.metrics
        name = report_name("dev", "ens", "exact", 5)
        assert name == "dev.ens.exact.k5"
        paths = rep.write(str(tmp_path), name)
        doc = json.loads(open(paths["json"], encoding="utf-8").read())
        assert doc["config"] == {"index": "exact"}
        lines = open(paths["tsv"], encoding="utf-8").read().splitlines()
        assert lines[0].split("\t")[:2] == ["query_id", "first_gold_rank"]
        assert lines[2].split("\t")[:2] == ["q2", "3"]

    def test_empty_report_writes_header(self, tmp_path):
        paths = EvalReport({"R@1": 0.0}).write(str(tmp_path), "empty")
        assert open(paths["tsv"], encoding="utf-8").read() == "query_id\n"


class TestThresholds:
    SYNTH = {"num_topics": 20, "level_mix": (0.4, 0.3, 0.3)}

    def test_missing_file_gives_floors(self, tmp_path):
        got = load_thresholds(str(tmp_path / "none.json"), self.SYNTH)
        assert got == config.ACCEPTANCE_FLOORS

    def test_half_gap_never_below_floor(self, tmp_path):
        path = str(tmp_path / "t.json")
        observed = {"boost_over_round_one_r10": 0.30, "boost_over_bagging_r20": 0.01,
                    "boost_vs_iterative_r10": 0.04, "ivf_two_probe_overlap": -0.2}
        written = write_thresholds(path, observed, self.SYNTH)
        assert written == {"boost_over_round_one_r10": 0.15, "boost_over_bagging_r20": 0.02,
                           "boost_vs_iterative_r10": 0.02, "ivf_two_probe_overlap": 0.02}
        assert load_thresholds(path, self.SYNTH) == written

    def test_other_generator_config_is_ignored(self, tmp_path):
        path = str(tmp_path / "t.json")
        write_thresholds(path, {k: 1.0 for k in config.ACCEPTANCE_FLOORS}, self.SYNTH)
        other = dict(self.SYNTH, num_topics=21)
        assert load_thresholds(path, other) == config.ACCEPTANCE_FLOORS

    def test_hand_lowered_value_keeps_floor(self, tmp_path):
        path = tmp_path / "t.json"
        path.write_text(json.dumps({"synth": {"num_topics": 20, "level_mix": [0.4, 0.3, 0.3]},
                                    "thresholds": {"boost_over_round_one_r10": 0.0}}),
                        encoding="utf-8")
        assert load_thresholds(str(path), self.SYNTH) == config.ACCEPTANCE_FLOORS

    def test_needs_every_gap(self):
        with pytest.raises(ArgumentError):
            suggested_thresholds({"boost_over_round_one_r10": 0.1})

    def test_malformed_file(self, tmp_path):
        path = tmp_path / "t.json"
        path.write_text("{", encoding="utf-8")
        with pytest.raises(ParseError):
            load_thresholds(str(path), self.SYNTH)


class TestRunFile:
    def test_round_trip_keeps_scores(self, tmp_path):
        results = [SearchResult((("p1", 0.1 + 0.2), ("p2", -1e-17))),
                   SearchResult((("p3", 5.0),))]
        path = str(tmp_path / "run.tsv")
        write_run(path, ["q1", "q2"], results)
        back = read_run(path)
        assert back["q1"].entries == results[0].entries
        assert back["q2"].entries == results[1].entries

    def test_bad_header(self, tmp_path):
        path = tmp_path / "run.tsv"
        path.write_text("qid\tpid\n", encoding="utf-8")
        with pytest.raises(ParseError):
            read_run(str(path))

    def test_bad_rank(self, tmp_path):
        path = tmp_path / "run.tsv"
        path.write_text("query_id\tpassage_id\trank\tscore\nq1\tp1\tone\t0.5\n",
                        encoding="utf-8")
        with pytest.raises(ParseError) as exc:
            read_run(str(path))
        assert exc.value.line == 2


class TestMargins:
    def test_hand_example(self):
        res = SearchResult((("g", 5.0), ("a", 4.0), ("b", 3.0), ("c", 1.0)))
        assert margin_from_scores(5.0, res, {"g"}, 2, 2.0, 0.5) == pytest.approx(2.0)

    def test_too_few_negatives(self):
        res = SearchResult((("g", 5.0), ("a", 4.0)))
        with pytest.raises(ArgumentError):
            margin_from_scores(5.0, res, {"g"}, 2, 1.0, 1.0)

    def test_zero_norm(self):
        with pytest.raises(NumericError):
            margin_from_scores(1.0, SearchResult((("a", 0.0),)), set(), 1, 0.0, 1.0)

    def test_topk_margin_by_hand(self, tiny_model, micro_corpus, micro_pairs):
        ens = Ensemble.single(tiny_model, alpha=1.5)
        matrix = ens.embed_corpus(micro_corpus)
        pair = micro_pairs[0]
        q = ens.embed(pair.query_text, "query").astype(np.float64)
        res = exact_search(matrix, q, 5)
        negs = [s for pid, s in res.entries if pid not in pair.positive_ids]
        gold = float(matrix.data64[micro_corpus.row("p1")] @ q)
        mu = matrix.mean_norm()
        expected = (gold - negs[2]) / (np.linalg.norm(q) * mu)
        got = topk_margin(ens, pair, res, 3, mu, micro_corpus)
        assert got == pytest.approx(expected, rel=1e-6)

    def test_round_quantiles(self, small_featurizer, small_synth, tmp_path):
        ens = Ensemble(((init_model(small_featurizer, 3, 0), 1.0),
                        (init_model(small_featurizer, 3, 1), 0.7)))
        margins = round_margins(ens, small_synth.train, small_synth.corpus, k=5)
        assert margins.shape == (len(small_synth.train),)
        rows = margin_quantiles(ens.prefixes(), small_synth.train, small_synth.corpus, k=5)
        assert [r.round for r in rows] == [1, 2]
        assert [r.total_dim for r in rows] == [3, 6]
        assert all(r.p50 <= r.p75 <= r.p90 for r in rows)
        path = str(tmp_path / "margins.tsv")
        write_margins_tsv(path, rows)
        header = open(path, encoding="utf-8").readline().rstrip("\n").split("\t")
        assert header == ["round", "total_dim", "p50", "p75", "p90", "n_queries", "n_skipped"]


class TestProbeSweep:
    def test_recall_vs_exact_grows_to_one(self, rng, tmp_path):
        data = rng.standard_normal((600, 8)).astype(np.float32)
        matrix = EmbeddingMatrix(data, tuple(f"p{i}" for i in range(600)))
        ivf = build_ivf(matrix, 16, seed=0)
        queries = rng.standard_normal((60, 8))
        golds = [{f"p{int(rng.integers(600))}"} for _ in range(60)]
        rows = probe_sweep(ivf, matrix, queries, golds, 10, default_probe_list(ivf.K))
        overlap = [r.recall_vs_exact for r in rows]
        assert all(a <= b + 1e-12 for a, b in zip(overlap, overlap[1:]))
        assert overlap[-1] == 1.0
        assert rows[-1].mean_candidates == 600
        path = str(tmp_path / "sweep.tsv")
        write_sweep_tsv(path, rows)
        assert len(open(path, encoding="utf-8").read().splitlines()) == len(rows) + 1

    def test_default_probe_list(self):
        assert default_probe_list(10) == [1, 2, 4, 8, 10]
        assert default_probe_list(8) == [1, 2, 4, 8]
        assert default_probe_list(1) == [1]
