import numpy as np
import pytest
import scipy.sparse as sp

from boosting import Ensemble
from data import TrainPair
from distill import (DistillConfig, build_targets, distill, distill_objective,
                     distill_with_history, loss_lower_bound)
from encoder import embed_rows, init_model
from errors import ArgumentError, ValidationError
from featurizer import featurize_many
from index import IndexFile, index_to_bytes


def _ensemble(featurizer, dims=(3, 3), seed=0):
    return Ensemble(tuple((init_model(featurizer, d, seed * 10 + i), 1.0 + 0.5 * i)
                          for i, d in enumerate(dims)))


class TestTargets:
    def test_single_component_targets_are_its_embeddings(self, tiny_model, micro_corpus,
                                                         micro_pairs):
        t = build_targets(Ensemble.single(tiny_model), micro_pairs, micro_corpus)
        feat = tiny_model.featurizer
        q = embed_rows(tiny_model, featurize_many([p.query_text for p in micro_pairs], feat))
        golds = [micro_corpus[p.positive_ids[0]].full_text for p in micro_pairs]
        c = embed_rows(tiny_model, featurize_many(golds, feat))
        assert np.array_equal(t.q_bar, q.astype(np.float64))
        assert np.array_equal(t.c_bar, c.astype(np.float64))

    def test_width_is_total_dim(self, small_featurizer, micro_corpus, micro_pairs):
        ens = _ensemble(small_featurizer, dims=(2, 3, 4))
        t = build_targets(ens, micro_pairs, micro_corpus)
        assert t.q_bar.shape == t.c_bar.shape == (len(micro_pairs), 9)

    def test_bitwise_deterministic(self, small_featurizer, small_synth):
        ens = _ensemble(small_featurizer)
        a = build_targets(ens, small_synth.train, small_synth.corpus, threads=1)
        b = build_targets(ens, small_synth.train, small_synth.corpus, threads=4)
        assert np.array_equal(a.q_bar, b.q_bar) and np.array_equal(a.c_bar, b.c_bar)

    def test_unknown_positive(self, tiny_model, micro_corpus):
        with pytest.raises(ValidationError, match="p99"):
            build_targets(Ensemble.single(tiny_model), [TrainPair("q", "x", ("p99",))],
                          micro_corpus)


class TestObjective:
    def test_midpoint_reaches_lower_bound(self, rng):
        q = rng.standard_normal((5, 4))
        c = rng.standard_normal((5, 4))
        x = sp.identity(5, format="csr")
        loss, grad = distill_objective((q + c) / 2, x, q, c, (1.0, 1.0))
        d = q - c
        assert loss == pytest.approx(float((d * d).sum()) / 2, rel=1e-12)
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    def test_weighted_bound(self, tiny_model, micro_corpus, micro_pairs):
        t = build_targets(Ensemble.single(tiny_model), micro_pairs, micro_corpus)
        d = t.q_bar - t.c_bar
        assert loss_lower_bound(t, (1.0, 3.0)) == pytest.approx(0.75 * float((d * d).sum()))

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_matches_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = sp.random(6, 10, density=0.4, format="csr", random_state=seed) * 3.0
        w = rng.standard_normal((10, 3))
        q, c = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
        weights = (float(rng.uniform(0.1, 2.0)), float(rng.uniform(0.1, 2.0)))
        _, grad = distill_objective(w, x, q, c, weights)
        h = 1e-6
        for r in range(10):
            for j in range(3):
                old = w[r, j]
                w[r, j] = old + h
                up, _ = distill_objective(w, x, q, c, weights)
                w[r, j] = old - h
                down, _ = distill_objective(w, x, q, c, weights)
                w[r, j] = old
                numeric = (up - down) / (2 * h)
                if abs(numeric) < 1e-7 and abs(grad[r, j]) < 1e-7:
                    continue
                assert abs(grad[r, j] - numeric) / (abs(grad[r, j]) + abs(numeric)) < 1e-4


class TestDistill:
    def test_zero_epochs_returns_initialisation(self, small_featurizer, micro_corpus,
                                                micro_pairs):
        ens = _ensemble(small_featurizer)
        cfg = DistillConfig(epochs=0, seed=8)
        model = distill(ens, micro_pairs, micro_pairs, micro_corpus, cfg)
        assert model.same_as(init_model(small_featurizer, 6, 8, use_layer_norm=False))

    def test_improves_on_dev_and_respects_bound(self, small_featurizer, small_synth):
        ens = _ensemble(small_featurizer, dims=(4, 4))
        cfg = DistillConfig(epochs=15, learning_rate=0.02, batch_size=16, seed=1)
        out = distill_with_history(ens, small_synth.train, small_synth.dev, small_synth.corpus,
                                   cfg)
        assert out.dev_loss[out.best_epoch] <= out.dev_loss[0]
        assert out.dev_loss[out.best_epoch] == min(out.dev_loss[:len(out.train_loss) + 1])

        t = build_targets(ens, small_synth.train, small_synth.corpus)
        x = featurize_many(list(t.query_texts), small_featurizer)
        loss, _ = distill_objective(out.model.weights.astype(np.float64), x, t.q_bar, t.c_bar,
                                    cfg.weights)
        assert loss >= loss_lower_bound(t, cfg.weights) * (1 - 1e-9)

    def test_model_shape(self, small_featurizer, micro_corpus, micro_pairs):
        ens = _ensemble(small_featurizer, dims=(2, 5))
        model = distill(ens, micro_pairs, micro_pairs, micro_corpus,
                        DistillConfig(epochs=2, seed=0))
        assert model.dim == ens.total_dim == 7
        assert model.use_layer_norm is False
        assert model.featurizer == small_featurizer

    def test_passage_index_untouched(self, small_featurizer, micro_corpus, micro_pairs):
        ens = _ensemble(small_featurizer)
        before = index_to_bytes(IndexFile("exact", ens.embed_corpus(micro_corpus)))
        distill(ens, micro_pairs, micro_pairs, micro_corpus, DistillConfig(epochs=3, seed=0))
        after = index_to_bytes(IndexFile("exact", ens.embed_corpus(micro_corpus)))
        assert before == after

    def test_deterministic(self, small_featurizer, micro_corpus, micro_pairs):
        ens = _ensemble(small_featurizer)
        cfg = DistillConfig(epochs=4, batch_size=2, seed=3)
        a = distill(ens, micro_pairs, micro_pairs, micro_corpus, cfg)
        b = distill(ens, micro_pairs, micro_pairs, micro_corpus, cfg)
        assert a.same_as(b)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(weights=(0.0, 0.0)), dict(weights=(-1.0, 1.0)),
                                    dict(epochs=-1), dict(batch_size=0), dict(patience=0),
                                    dict(learning_rate=0.0)])
    def test_rejects(self, kw):
        with pytest.raises(ArgumentError):
            DistillConfig(**kw)

    def test_needs_training_pairs(self, tiny_model, micro_corpus):
        with pytest.raises(ArgumentError):
            distill(Ensemble.single(tiny_model), [], [], micro_corpus)
