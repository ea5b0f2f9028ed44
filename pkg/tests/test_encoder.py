import math

import numpy as np
import pytest

from boosting import initial_negatives
from data import AugmentedExample
from encoder import (Adam, EncoderModel, Params, TrainConfig, embed, embed_corpus, embed_rows,
                     init_model, init_params, layer_norm_forward, load_model, make_batch,
                     model_from_bytes, model_to_bytes, nll_loss, nll_objective,
                     register_examples, save_model, score, train, train_with_history)
from errors import ArgumentError, FormatError
from featurizer import FeaturizerConfig, FeatureTable, featurize_many
from synthgen import SynthConfig, generate

GRAD_BUCKETS = 16


def _augment(pairs, corpus, n=2):
    out = []
    for i, p in enumerate(pairs):
        others = [pid for pid in corpus.ids if pid not in p.positive_ids]
        out.append(AugmentedExample(p, tuple(others[i % 3:i % 3 + n])))
    return out


def _rel_err(a, b):
    return abs(a - b) / max(abs(a) + abs(b), 1e-8)


class TestNll:
    @pytest.mark.parametrize("n", [1, 3, 7])
    def test_uniform_scores_give_log_n_plus_one(self, n):
        assert abs(nll_loss(0.37, [0.37] * n) - math.log(n + 1)) < 1e-9

    def test_large_scores_stay_finite(self):
        v = nll_loss(1e4, [1e4 - 1.0, 0.0])
        assert math.isfinite(v)
        assert v == pytest.approx(math.log1p(math.exp(-1.0)), rel=1e-9)

    def test_needs_a_negative(self):
        with pytest.raises(ArgumentError):
            nll_loss(1.0, [])


class TestGradients:
    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("in_batch", [False, True])
    def test_matches_central_differences(self, seed, in_batch, micro_corpus, micro_pairs):
        feat = FeaturizerConfig(num_buckets=GRAD_BUCKETS)
        table = FeatureTable(feat)
        examples = _augment(micro_pairs, micro_corpus)
        register_examples(table, micro_corpus, examples)
        batch = make_batch(examples, [ex.pair.positive_ids[0] for ex in examples], table)

        rng = np.random.default_rng(seed)
        params = init_params(GRAD_BUCKETS, 3, seed)
        params.gain += rng.normal(0, 0.3, size=3)
        params.bias += rng.normal(0, 0.3, size=3)
        _, grads = nll_objective(params, batch, in_batch)

        h = 1e-5
        used = np.unique(batch.x.indices)
        checks = [("weights", (int(r), int(c))) for r in used[:6] for c in range(3)]
        checks += [("gain", (j,)) for j in range(3)] + [("bias", (j,)) for j in range(3)]
        for name, idx in checks:
            arr = getattr(params, name)
            old = arr[idx]
            arr[idx] = old + h
            up, _ = nll_objective(params, batch, in_batch)
            arr[idx] = old - h
            down, _ = nll_objective(params, batch, in_batch)
            arr[idx] = old
            numeric = (up - down) / (2 * h)
            analytic = getattr(grads, name)[idx]
            if abs(numeric) < 1e-6 and abs(analytic) < 1e-6:
                continue
            assert _rel_err(analytic, numeric) < 1e-4, (name, idx)

    def test_without_layer_norm(self, micro_corpus, micro_pairs):
        feat = FeaturizerConfig(num_buckets=GRAD_BUCKETS)
        table = FeatureTable(feat)
        examples = _augment(micro_pairs, micro_corpus)
        register_examples(table, micro_corpus, examples)
        batch = make_batch(examples, [ex.pair.positive_ids[0] for ex in examples], table)
        params = init_params(GRAD_BUCKETS, 2, 3)
        _, grads = nll_objective(params, batch, False, use_layer_norm=False)
        assert not grads.gain.any() and not grads.bias.any()
        r = int(batch.x.indices[0])
        h = 1e-5
        params.weights[r, 0] += h
        up, _ = nll_objective(params, batch, False, use_layer_norm=False)
        params.weights[r, 0] -= 2 * h
        down, _ = nll_objective(params, batch, False, use_layer_norm=False)
        assert _rel_err(grads.weights[r, 0], (up - down) / (2 * h)) < 1e-4

    def test_shared_gold_is_masked_in_batch(self, micro_corpus, micro_pairs):
        # q5 lists p1 as a positive, so p1 (q1's gold) must not count against q5
        feat = FeaturizerConfig(num_buckets=GRAD_BUCKETS)
        table = FeatureTable(feat)
        examples = _augment(micro_pairs, micro_corpus)
        register_examples(table, micro_corpus, examples)
        batch = make_batch(examples, [ex.pair.positive_ids[0] for ex in examples], table)
        assert batch.inbatch_mask[4, 0]
        assert batch.inbatch_mask.sum() == 1


class TestLayerNorm:
    def test_normalises_rows(self, rng):
        z = rng.normal(3.0, 5.0, size=(4, 16))
        y, _ = layer_norm_forward(z, np.ones(16), np.zeros(16), 1e-5)
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=1), 1.0, rtol=1e-4)

    def test_zero_weights_embed_to_bias(self, small_featurizer, rng):
        bias = rng.standard_normal(5).astype(np.float32)
        model = EncoderModel(small_featurizer, 5, np.zeros((small_featurizer.num_buckets, 5)),
                             rng.normal(1.0, 0.3, 5), bias)
        for text in ("the nile river", "", "w00001 w00002 w00003"):
            np.testing.assert_array_equal(embed(model, text), bias)


class TestInference:
    def test_score_is_dot_of_embeddings(self, tiny_model):
        q, p = "nile river", "the nile is long"
        expected = float(embed(tiny_model, q).astype(np.float64)
                         @ embed(tiny_model, p).astype(np.float64))
        assert score(tiny_model, q, p) == expected

    def test_parallel_embedding_is_bitwise_identical(self, tiny_model, small_synth):
        x = featurize_many(small_synth.corpus.texts(), tiny_model.featurizer)
        one = embed_rows(tiny_model, x, threads=1, chunk=7)
        four = embed_rows(tiny_model, x, threads=4, chunk=7)
        assert one.dtype == np.float32
        assert np.array_equal(one, four)

    def test_corpus_rows_follow_corpus_order(self, tiny_model, micro_corpus):
        m = embed_corpus(tiny_model, micro_corpus)
        assert m.row_ids == tuple(micro_corpus.ids)
        for pid in ("p1", "p6"):
            p = micro_corpus[pid]
            assert np.array_equal(m.data[micro_corpus.row(pid)], embed(tiny_model, p.full_text))


class TestTraining:
    def test_zero_epochs_returns_initialisation(self, micro_corpus, micro_pairs,
                                                 small_featurizer):
        cfg = TrainConfig(epochs=0, dim=4, featurizer=small_featurizer)
        examples = _augment(micro_pairs, micro_corpus)
        model = train(examples, examples, micro_corpus, cfg, init_seed=9)
        assert model.same_as(init_model(small_featurizer, 4, 9))

    def test_learns_and_keeps_best_dev_epoch(self, micro_corpus, micro_pairs, small_featurizer):
        cfg = TrainConfig(epochs=15, batch_size=3, dim=4, learning_rate=0.05,
                          featurizer=small_featurizer)
        examples = _augment(micro_pairs, micro_corpus)
        out = train_with_history(examples, examples, micro_corpus, cfg, init_seed=2)
        assert len(out.dev_nll) == 16 and len(out.train_nll) == 15
        assert out.train_nll[-1] < out.train_nll[0]
        assert out.dev_nll[out.best_epoch] == min(out.dev_nll)
        assert out.dev_nll[out.best_epoch] <= out.dev_nll[0]

    def test_full_batch_loss_falls_every_epoch(self, small_featurizer):
        ds = generate(SynthConfig(num_topics=5, passages_per_topic=12, vocab_size=300,
                                  words_per_passage=10, queries_per_topic=12, query_len=4,
                                  seed=6, subtopics_per_topic=2, leaves_per_subtopic=2))
        pairs = (ds.train + ds.dev)[:50]
        assert len(pairs) == 50
        examples = initial_negatives(pairs, ds.corpus, 3, seed=1)
        cfg = TrainConfig(epochs=3, batch_size=50, dim=4, learning_rate=3e-3,
                          featurizer=small_featurizer)
        out = train_with_history(examples, examples, ds.corpus, cfg, init_seed=8)
        assert np.all(np.diff(out.train_nll) < 0)
        assert np.all(np.diff(out.dev_nll) < 0)
        assert out.best_epoch == 3

    def test_deterministic(self, micro_corpus, micro_pairs, fast_train_cfg):
        examples = _augment(micro_pairs, micro_corpus)
        a = train(examples, examples, micro_corpus, fast_train_cfg, init_seed=4)
        b = train(examples, examples, micro_corpus, fast_train_cfg, init_seed=4)
        assert a.same_as(b)

    def test_empty_training_set(self, micro_corpus, fast_train_cfg):
        with pytest.raises(ArgumentError):
            train([], [], micro_corpus, fast_train_cfg, init_seed=0)

    def test_feature_table_must_match(self, micro_corpus, micro_pairs, fast_train_cfg):
        table = FeatureTable(FeaturizerConfig(num_buckets=32))
        with pytest.raises(ArgumentError):
            train(_augment(micro_pairs, micro_corpus), [], micro_corpus, fast_train_cfg, 0,
                  features=table)


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        p = np.array([1.0, -2.0])
        opt = Adam([p], lr=0.1)
        opt.step([np.array([3.0, -0.5])])
        np.testing.assert_allclose(p, [0.9, -1.9], rtol=1e-6)


class TestModelFile:
    def test_round_trip(self, tiny_model, tmp_path):
        path = str(tmp_path / "m.drbm")
        save_model(path, tiny_model)
        assert load_model(path).same_as(tiny_model)
        assert open(path, "rb").read()[:4] == b"DRBM"

    def test_layer_norm_flag_survives(self, small_featurizer):
        m = init_model(small_featurizer, 3, 1, use_layer_norm=False)
        back, _ = model_from_bytes(model_to_bytes(m))
        assert back.use_layer_norm is False

    def test_featurizer_config_survives(self):
        feat = FeaturizerConfig(num_buckets=64, use_bigrams=False, lowercase=False, hash_seed=42)
        m = init_model(feat, 2, 0)
        back, end = model_from_bytes(model_to_bytes(m))
        assert back.featurizer == feat and end == len(model_to_bytes(m))

    def test_bad_magic_and_truncation(self, tiny_model):
        buf = model_to_bytes(tiny_model)
        with pytest.raises(FormatError):
            model_from_bytes(b"XXXX" + buf[4:])
        with pytest.raises(FormatError):
            model_from_bytes(buf[:-3])

    def test_trailing_bytes_rejected(self, tiny_model, tmp_path):
        path = tmp_path / "m.drbm"
        path.write_bytes(model_to_bytes(tiny_model) + b"\0")
        with pytest.raises(FormatError):
            load_model(str(path))

    def test_shape_validation(self, small_featurizer):
        with pytest.raises(ArgumentError):
            EncoderModel(small_featurizer, 2, np.zeros((3, 2)), np.ones(2), np.zeros(2))

    def test_params_round_trip(self, tiny_model):
        p = Params.of(tiny_model)
        back = p.to_model(tiny_model.featurizer, tiny_model.ln_epsilon, True)
        assert back.same_as(tiny_model)
