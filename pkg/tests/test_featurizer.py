from collections import Counter

import numpy as np
import pytest

from errors import ArgumentError
from featurizer import (BIGRAM_SEP, FeaturizerConfig, FeatureTable, featurize, featurize_many,
                        fnv1a64, tokenize)


def reference_fnv(data: bytes, seed: int = 0) -> int:
    h = 0xCBF29CE484222325 ^ seed
    for b in data:
        h = ((h ^ b) * 0x100000001B3) % (1 << 64)
    return h


class TestHash:
    @pytest.mark.parametrize("data, expected", [
        (b"", 0xCBF29CE484222325),
        (b"a", 0xAF63DC4C8601EC8C),
        (b"foobar", 0x85944171F73967E8),
    ])
    def test_published_vectors(self, data, expected):
        assert fnv1a64(data) == expected

    def test_seed_is_xored_into_offset(self):
        assert fnv1a64(b"", 5) == 0xCBF29CE484222325 ^ 5
        for word in (b"river", b"w00017", "café".encode()):
            assert fnv1a64(word, 99) == reference_fnv(word, 99)


class TestTokenize:
    def test_alphanumeric_runs(self):
        assert tokenize("Hello, World_x 42!") == ["hello", "world", "x", "42"]

    def test_case_kept_when_asked(self):
        assert tokenize("Nile River", lowercase=False) == ["Nile", "River"]

    def test_unicode_letters(self):
        assert tokenize("Café-au-lait") == ["café", "au", "lait"]


class TestFeaturize:
    def test_counts_match_reference(self):
        cfg = FeaturizerConfig()
        feats = featurize("a a b", cfg)
        mask = cfg.num_buckets - 1
        grams = ["a", "a", "b", "a" + BIGRAM_SEP + "a", "a" + BIGRAM_SEP + "b"]
        expected = Counter(reference_fnv(g.encode()) & mask for g in grams)
        assert dict(zip(feats.indices.tolist(), feats.values.tolist())) == expected
        assert np.all(np.diff(feats.indices) > 0)
        assert feats.values.dtype == np.float32

    def test_case_folding_merges_tokens(self):
        cfg = FeaturizerConfig()
        feats = featurize("Nobel nobel", cfg)
        mask = cfg.num_buckets - 1
        uni = reference_fnv(b"nobel") & mask
        bi = reference_fnv(("nobel" + BIGRAM_SEP + "nobel").encode()) & mask
        assert dict(zip(feats.indices.tolist(), feats.values.tolist())) == {uni: 2.0, bi: 1.0}

    def test_case_kept_gives_two_unigrams(self):
        feats = featurize("Nobel nobel", FeaturizerConfig(lowercase=False, use_bigrams=False))
        assert feats.values.tolist() == [1.0, 1.0]

    def test_word_order_only_matters_with_bigrams(self):
        on, off = FeaturizerConfig(), FeaturizerConfig(use_bigrams=False)
        for a, b in (("a b", "b a"), ("nile river delta", "delta river nile")):
            assert not np.array_equal(featurize(a, on).indices, featurize(b, on).indices)
            fa, fb = featurize(a, off), featurize(b, off)
            assert np.array_equal(fa.indices, fb.indices)
            assert np.array_equal(fa.values, fb.values)

    @pytest.mark.parametrize("buckets", [2, 1 << 10, 1 << 18])
    def test_random_unicode_stays_in_range(self, buckets):
        cfg = FeaturizerConfig(num_buckets=buckets, hash_seed=12345)
        rng = np.random.default_rng(buckets)
        for _ in range(200):
            points = rng.integers(0x20, 0x2FFFF, size=int(rng.integers(0, 40)))
            text = "".join(chr(int(c)) for c in points if not 0xD800 <= c <= 0xDFFF)
            feats = featurize(text, cfg)
            assert np.all(feats.indices >= 0) and np.all(feats.indices < buckets)
            assert np.all(feats.values > 0)
            assert np.all(np.diff(feats.indices) > 0)

    def test_unigrams_only(self):
        cfg = FeaturizerConfig(use_bigrams=False)
        assert featurize("x y z", cfg).values.sum() == 3

    def test_empty_text(self):
        assert len(featurize("", FeaturizerConfig())) == 0

    def test_hash_seed_moves_buckets(self):
        a = featurize("river delta", FeaturizerConfig(hash_seed=0))
        b = featurize("river delta", FeaturizerConfig(hash_seed=1))
        assert not np.array_equal(a.indices, b.indices)

    def test_many_matches_single(self, small_featurizer):
        texts = ["the nile river", "", "mount everest everest"]
        x = featurize_many(texts, small_featurizer)
        assert x.shape == (3, small_featurizer.num_buckets)
        for i, t in enumerate(texts):
            f = featurize(t, small_featurizer)
            row = x[i]
            assert row.indices.tolist() == f.indices.tolist()
            assert row.data.tolist() == f.values.tolist()

    @pytest.mark.parametrize("buckets", [0, 1, 3, 1000])
    def test_bucket_count_power_of_two(self, buckets):
        with pytest.raises(ArgumentError):
            FeaturizerConfig(num_buckets=buckets)


class TestFeatureTable:
    def test_rows_in_request_order(self, small_featurizer):
        table = FeatureTable(small_featurizer)
        table.add_many([("a", "alpha beta"), ("b", "gamma")])
        table.add("a", "ignored, key exists")
        assert len(table) == 2
        rows = table.rows(["b", "a"])
        expect = featurize_many(["gamma", "alpha beta"], small_featurizer)
        assert (rows != expect).nnz == 0

    def test_lazy_flush_appends(self, small_featurizer):
        table = FeatureTable(small_featurizer)
        table.add("a", "one")
        assert table.matrix.shape[0] == 1
        table.add("b", "two")
        assert table.matrix.shape[0] == 2
        assert table.row_of("b") == 1
