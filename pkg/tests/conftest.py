"""Shared fixtures: a hand-written micro corpus and a small synthetic benchmark."""
from __future__ import annotations

import numpy as np
import pytest

from data import Corpus, Passage, TrainPair
from encoder import TrainConfig, init_model
from featurizer import FeaturizerConfig
from synthgen import SynthConfig, generate

SMALL_BUCKETS = 1 << 10


@pytest.fixture
def small_featurizer() -> FeaturizerConfig:
    return FeaturizerConfig(num_buckets=SMALL_BUCKETS)


@pytest.fixture
def micro_corpus() -> Corpus:
    texts = [
        ("p1", "Rivers", "the nile is the longest river in africa"),
        ("p2", "Mountains", "everest is the highest mountain on earth"),
        ("p3", "Oceans", "the pacific ocean is the largest ocean"),
        ("p4", "Deserts", "the sahara desert covers much of north africa"),
        ("p5", "Rivers", "the amazon river carries the most water"),
        ("p6", "Lakes", "lake baikal is the deepest lake"),
        ("p7", "Islands", "greenland is the largest island"),
        ("p8", "Volcanoes", "mauna loa is a large active volcano"),
    ]
    return Corpus(tuple(Passage(*t) for t in texts))


@pytest.fixture
def micro_pairs() -> list[TrainPair]:
    return [
        TrainPair("q1", "longest river in africa", ("p1",)),
        TrainPair("q2", "highest mountain", ("p2",)),
        TrainPair("q3", "largest ocean", ("p3",)),
        TrainPair("q4", "desert in africa", ("p4",)),
        TrainPair("q5", "river with most water", ("p5", "p1")),
        TrainPair("q6", "deepest lake", ("p6",)),
    ]


@pytest.fixture(scope="session")
def small_synth():
    cfg = SynthConfig(num_topics=4, passages_per_topic=30, vocab_size=400,
                      words_per_passage=12, queries_per_topic=10, query_len=4,
                      noise_rate=0.1, seed=3, subtopics_per_topic=2,
                      leaves_per_subtopic=3)
    return generate(cfg)


@pytest.fixture
def fast_train_cfg(small_featurizer) -> TrainConfig:
    return TrainConfig(epochs=2, batch_size=8, negatives_per_example=2, dim=4,
                       featurizer=small_featurizer, seed=5)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model(small_featurizer):
    return init_model(small_featurizer, 4, seed=11)
