"""
synthgen.py – deterministic synthetic retrieval benchmark

Every topic owns a disjoint slice of the vocabulary; the last tenth of the
vocabulary is shared noise.  Inside its slice a topic nests three levels:

    topic-wide words   shared by all passages of the topic
    subtopic words     one chunk per subtopic
    leaf words         one chunk per leaf (a few dozen passages)

A passage belongs to one leaf and draws each word from one of the three
levels (`level_mix`), with Zipfian frequencies inside the chosen chunk.  A
query samples words from its gold passage and swaps each one for a noise
word with probability `noise_rate`.

    corpus.jsonl  train.jsonl  dev.jsonl  qrels.tsv  topics.tsv
"""
from __future__ import annotations

import logging
import math
import os
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

import config
from data import (Corpus, Passage, TrainPair, qrels_from_pairs, split_dev, write_corpus,
                  write_qrels, write_train_pairs)
from errors import ArgumentError

logger = logging.getLogger(__name__)

MIN_TOPIC_WORDS = 3


@dataclass(frozen=True)
class SynthConfig:
    num_topics:          int   = config.SYNTH_NUM_TOPICS
    passages_per_topic:  int   = config.SYNTH_PASSAGES_PER_TOPIC
    vocab_size:          int   = config.SYNTH_VOCAB_SIZE
    words_per_passage:   int   = config.SYNTH_WORDS_PER_PASSAGE
    queries_per_topic:   int   = config.SYNTH_QUERIES_PER_TOPIC
    query_len:           int   = config.SYNTH_QUERY_LEN
    noise_rate:          float = config.SYNTH_NOISE_RATE
    seed:                int   = config.SYNTH_SEED
    dev_fraction:        float = config.SYNTH_DEV_FRACTION
    zipf_exponent:       float = config.SYNTH_ZIPF_EXPONENT
    subtopics_per_topic: int   = config.SYNTH_SUBTOPICS_PER_TOPIC
    leaves_per_subtopic: int   = config.SYNTH_LEAVES_PER_SUBTOPIC
    level_mix:           Tuple[float, float, float] = config.SYNTH_LEVEL_MIX

    def __post_init__(self) -> None:
        for name in ("num_topics", "passages_per_topic", "vocab_size",
                     "words_per_passage", "queries_per_topic", "query_len",
                     "subtopics_per_topic", "leaves_per_subtopic"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ArgumentError(f"noise_rate must be in [0, 1), got {self.noise_rate}")
        if not 0.0 < self.dev_fraction < 1.0:
            raise ArgumentError(f"dev_fraction must be in (0, 1), got {self.dev_fraction}")
        if not self.zipf_exponent > 0:
            raise ArgumentError("zipf_exponent must be positive")
        mix = tuple(float(x) for x in self.level_mix)
        if (len(mix) != 3 or not all(math.isfinite(x) and x >= 0 for x in mix)
                or sum(mix) <= 0):
            raise ArgumentError(f"level_mix must be three non-negative shares, got {self.level_mix}")
        object.__setattr__(self, "level_mix", mix)
        if self.topic_words < MIN_TOPIC_WORDS:
            raise ArgumentError(
                f"vocab_size {self.vocab_size} is too small for {self.num_topics} topics "
                f"(need {MIN_TOPIC_WORDS} words per topic after {self.noise_words} noise words)")
        if self.subtopic_words < 1 or self.leaf_words < 1:
            raise ArgumentError(
                f"vocab_size {self.vocab_size} leaves no words for {self.subtopics_per_topic} "
                f"subtopics x {self.leaves_per_subtopic} leaves per topic")

    @property
    def noise_words(self) -> int:
        return max(1, self.vocab_size // 10)

    @property
    def topic_words(self) -> int:
        return (self.vocab_size - self.noise_words) // self.num_topics

    @property
    def level_words(self) -> int:
        """Size of the subtopic region and of the leaf region of a topic slice."""
        return self.topic_words // 3

    @property
    def general_words(self) -> int:
        return self.topic_words - 2 * self.level_words

    @property
    def leaves_per_topic(self) -> int:
        return self.subtopics_per_topic * self.leaves_per_subtopic

    @property
    def subtopic_words(self) -> int:
        return self.level_words // self.subtopics_per_topic

    @property
    def leaf_words(self) -> int:
        return self.level_words // self.leaves_per_topic


@dataclass(frozen=True)
class Cluster:
    topic:    int
    subtopic: int      # global subtopic number
    leaf:     int      # global leaf number


@dataclass(frozen=True, eq=False)
class SynthDataset:
    corpus:   Corpus
    train:    List[TrainPair]
    dev:      List[TrainPair]
    clusters: Dict[str, Cluster]       # passage_id -> cluster

    @property
    def topics(self) -> Dict[str, int]:
        return {pid: c.topic for pid, c in self.clusters.items()}


def word(i: int) -> str:
    return f"w{i:05d}"


def zipf_probs(n: int, exponent: float) -> np.ndarray:
    p = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** exponent
    return p / p.sum()


def _title(words: List[str]) -> str:
    return " ".join(w for w, _ in Counter(words).most_common(2))


class _Chunk:
    """A run of word ids drawn with Zipfian frequencies in a shuffled order."""

    def __init__(self, start: int, size: int, exponent: float, rng: np.random.Generator):
        self.ranking = rng.permutation(size) + start
        self.probs = zipf_probs(size, exponent)

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.ranking[rng.choice(self.ranking.size, size=n, p=self.probs)]


def generate(cfg: SynthConfig = SynthConfig()) -> SynthDataset:
    rng = np.random.default_rng(cfg.seed)
    noise_base = cfg.num_topics * cfg.topic_words
    mix = np.asarray(cfg.level_mix) / sum(cfg.level_mix)
    n_leaves = cfg.leaves_per_topic

    passages: List[Passage] = []
    clusters: Dict[str, Cluster] = {}
    by_topic: List[List[Passage]] = []
    for t in range(cfg.num_topics):
        base = t * cfg.topic_words
        sub_base = base + cfg.general_words
        leaf_base = sub_base + cfg.level_words
        general = _Chunk(base, cfg.general_words, cfg.zipf_exponent, rng)
        subs = [_Chunk(sub_base + s * cfg.subtopic_words, cfg.subtopic_words,
                       cfg.zipf_exponent, rng) for s in range(cfg.subtopics_per_topic)]
        leaves = [_Chunk(leaf_base + f * cfg.leaf_words, cfg.leaf_words,
                         cfg.zipf_exponent, rng) for f in range(n_leaves)]
        own = []
        for j in range(cfg.passages_per_topic):
            f = j % n_leaves
            s = f // cfg.leaves_per_subtopic
            n_gen, n_sub, n_leaf = rng.multinomial(cfg.words_per_passage, mix)
            draws = np.concatenate([general.draw(n_gen, rng), subs[s].draw(n_sub, rng),
                                    leaves[f].draw(n_leaf, rng)])
            words = [word(int(i)) for i in rng.permutation(draws)]
            p = Passage(f"p{len(passages):06d}", _title(words), " ".join(words))
            passages.append(p)
            own.append(p)
            clusters[p.id] = Cluster(t, t * cfg.subtopics_per_topic + s, t * n_leaves + f)
        by_topic.append(own)

    pairs: List[TrainPair] = []
    for t, own in enumerate(by_topic):
        replace = cfg.queries_per_topic > len(own)
        golds = rng.choice(len(own), size=cfg.queries_per_topic, replace=replace)
        for g in golds:
            gold = own[int(g)]
            words = gold.text.split()
            picks = rng.choice(len(words), size=cfg.query_len,
                               replace=cfg.query_len > len(words))
            noisy = rng.random(cfg.query_len) < cfg.noise_rate
            noise = rng.integers(cfg.noise_words, size=cfg.query_len) + noise_base
            q = [word(int(noise[i])) if noisy[i] else words[int(picks[i])]
                 for i in range(cfg.query_len)]
            pairs.append(TrainPair(f"q{len(pairs):06d}", " ".join(q), (gold.id,)))

    train, dev = split_dev(pairs, cfg.dev_fraction, cfg.seed)
    logger.info("Generated %d passages in %d leaves, %d train and %d dev queries over %d topics",
                len(passages), cfg.num_topics * n_leaves, len(train), len(dev), cfg.num_topics)
    return SynthDataset(Corpus(tuple(passages)), train, dev, clusters)


def write_topics(path: str, clusters: Dict[str, Cluster]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("passage_id\ttopic\tsubtopic\tleaf\n")
        for pid, c in clusters.items():
            f.write(f"{pid}\t{c.topic}\t{c.subtopic}\t{c.leaf}\n")


def write_dataset(out_dir: str, ds: SynthDataset) -> Dict[str, str]:
    """Write every file of the dataset; returns name -> path."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {name: os.path.join(out_dir, name) for name in
             ("corpus.jsonl", "train.jsonl", "dev.jsonl", "qrels.tsv", "topics.tsv")}
    write_corpus(paths["corpus.jsonl"], ds.corpus)
    write_train_pairs(paths["train.jsonl"], ds.train)
    write_train_pairs(paths["dev.jsonl"], ds.dev)
    write_qrels(paths["qrels.tsv"], qrels_from_pairs(ds.dev))
    write_topics(paths["topics.tsv"], ds.clusters)
    return paths
