"""
data.py – corpus, training pairs and relevance judgments

JSON-lines in, immutable in-memory stores out.  Every loader validates as
it goes and reports the offending line.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Mapping, Sequence, Tuple

import numpy as np

from errors import ArgumentError, ParseError, ValidationError

logger = logging.getLogger(__name__)

# ── file formats ──────────────────────────────────────────────────────────
CORPUS_KEYS = ("id", "title", "text")
PAIR_KEYS   = ("query_id", "query_text", "positive_ids")


# ── records ───────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class Passage:
    id:    str
    title: str
    text:  str

    def __post_init__(self) -> None:
        if not self.id:
            raise ValidationError("passage id must be non-empty")
        if not self.text and not self.title:
            raise ValidationError(f"passage {self.id!r} has neither title nor text")

    @property
    def full_text(self) -> str:
        """Title and text joined the way the featurizer sees them."""
        return f"{self.title} {self.text}"


@dataclass(frozen=True)
class TrainPair:
    query_id:     str
    query_text:   str
    positive_ids: Tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.query_id:
            raise ValidationError("query_id must be non-empty")
        if not self.positive_ids:
            raise ValidationError(f"query {self.query_id!r} has no positive_ids")
        # accept lists from callers, store a tuple
        object.__setattr__(self, "positive_ids", tuple(self.positive_ids))

    def positive_for_epoch(self, epoch: int) -> str:
        """Multiple golds are used one per epoch, cycling."""
        return self.positive_ids[epoch % len(self.positive_ids)]


@dataclass(frozen=True)
class AugmentedExample:
    pair:         TrainPair
    negative_ids: Tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "negative_ids", tuple(self.negative_ids))
        if not self.negative_ids:
            raise ValidationError(f"query {self.pair.query_id!r}: no negatives")
        clash = set(self.negative_ids) & set(self.pair.positive_ids)
        if clash:
            raise ValidationError(
                f"query {self.pair.query_id!r}: negatives overlap positives "
                f"{sorted(clash)}")

    @property
    def n(self) -> int:
        return len(self.negative_ids)


# ── corpus store ──────────────────────────────────────────────────────────
@dataclass(frozen=True)
class Corpus:
    """Ordered, immutable passage store; row index = insertion order."""
    passages: Tuple[Passage, ...] = ()
    _rows:    Dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "passages", tuple(self.passages))
        rows: Dict[str, int] = {}
        for i, p in enumerate(self.passages):
            if p.id in rows:
                raise ValidationError(f"duplicate passage id {p.id!r}")
            rows[p.id] = i
        object.__setattr__(self, "_rows", rows)

    def __len__(self) -> int:
        return len(self.passages)

    def __iter__(self) -> Iterator[Passage]:
        return iter(self.passages)

    def __contains__(self, pid: object) -> bool:
        return pid in self._rows

    def __getitem__(self, pid: str) -> Passage:
        return self.passages[self._rows[pid]]

    def row(self, pid: str) -> int:
        return self._rows[pid]

    @property
    def ids(self) -> List[str]:
        return [p.id for p in self.passages]

    def texts(self) -> List[str]:
        return [p.full_text for p in self.passages]

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"id": p.id, "title": p.title, "text": p.text},
                       ensure_ascii=False) + "\n"
            for p in self.passages)


# ── line reader ───────────────────────────────────────────────────────────
def _read_objects(path: str, keys: Sequence[str]) -> Iterator[Tuple[int, dict]]:
    """Yield (line_no, object) for every non-blank line, keys checked exactly."""
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", path, line_no) from None
            if not isinstance(obj, dict) or set(obj) != set(keys):
                got = sorted(obj) if isinstance(obj, dict) else type(obj).__name__
                raise ParseError(f"expected keys {list(keys)}, got {got}", path, line_no)
            yield line_no, obj


def _require_str(obj: dict, key: str, path: str, line_no: int) -> str:
    val = obj[key]
    if not isinstance(val, str):
        raise ParseError(f"{key!r} must be a string", path, line_no)
    return val


# ── public loaders ────────────────────────────────────────────────────────
def load_corpus(path: str) -> Corpus:
    """Read corpus.jsonl; duplicate ids are rejected with the line number."""
    passages: List[Passage] = []
    seen: Dict[str, int] = {}
    for line_no, obj in _read_objects(path, CORPUS_KEYS):
        pid   = _require_str(obj, "id", path, line_no)
        title = _require_str(obj, "title", path, line_no)
        text  = _require_str(obj, "text", path, line_no)
        if pid in seen:
            raise ValidationError(
                f"{path}:{line_no}: duplicate passage id {pid!r} "
                f"(first seen on line {seen[pid]})")
        seen[pid] = line_no
        try:
            passages.append(Passage(pid, title, text))
        except ValidationError as exc:
            raise ValidationError(f"{path}:{line_no}: {exc}") from None
    logger.info("Loaded %d passages from %s", len(passages), path)
    return Corpus(tuple(passages))


def _iter_pairs(path: str) -> Iterator[Tuple[int, TrainPair]]:
    seen: set[str] = set()
    for line_no, obj in _read_objects(path, PAIR_KEYS):
        qid  = _require_str(obj, "query_id", path, line_no)
        text = _require_str(obj, "query_text", path, line_no)
        pos  = obj["positive_ids"]
        if not isinstance(pos, list) or not pos or not all(isinstance(p, str) for p in pos):
            raise ParseError("'positive_ids' must be a non-empty list of strings",
                             path, line_no)
        if qid in seen:
            raise ValidationError(f"{path}:{line_no}: duplicate query_id {qid!r}")
        seen.add(qid)
        yield line_no, TrainPair(qid, text, tuple(pos))


def load_train_pairs(path: str, corpus: Corpus) -> List[TrainPair]:
    """Read train/dev jsonl and resolve every positive against the corpus."""
    pairs: List[TrainPair] = []
    for line_no, pair in _iter_pairs(path):
        for pid in pair.positive_ids:
            if pid not in corpus:
                raise ValidationError(
                    f"{path}:{line_no}: query {pair.query_id!r} has unknown positive "
                    f"passage {pid!r}")
        pairs.append(pair)
    logger.info("Loaded %d query pairs from %s", len(pairs), path)
    return pairs


def load_queries(path: str) -> List[TrainPair]:
    """Same format as load_train_pairs, positives left unresolved (search/eval side)."""
    return [pair for _, pair in _iter_pairs(path)]


def load_qrels(path: str) -> Dict[str, Dict[str, int]]:
    """query_id<TAB>passage_id<TAB>relevance, relevance an integer >= 1."""
    qrels: Dict[str, Dict[str, int]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError("expected 3 tab-separated fields", path, line_no)
            qid, pid, rel_s = parts
            try:
                rel = int(rel_s)
            except ValueError:
                raise ParseError(f"relevance {rel_s!r} is not an integer",
                                 path, line_no) from None
            if rel < 1:
                raise ParseError(f"relevance must be >= 1, got {rel}", path, line_no)
            qrels.setdefault(qid, {})[pid] = rel
    return qrels


# ── writers ───────────────────────────────────────────────────────────────
def write_corpus(path: str, corpus: Corpus) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(corpus.to_jsonl())


def write_train_pairs(path: str, pairs: Iterable[TrainPair]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(json.dumps({"query_id": p.query_id,
                                "query_text": p.query_text,
                                "positive_ids": list(p.positive_ids)},
                               ensure_ascii=False) + "\n")


def write_qrels(path: str, qrels: Mapping[str, Mapping[str, int]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for qid, rels in qrels.items():
            for pid, rel in rels.items():
                f.write(f"{qid}\t{pid}\t{rel}\n")


def qrels_from_pairs(pairs: Iterable[TrainPair]) -> Dict[str, Dict[str, int]]:
    """Binary qrels (relevance 1) for every annotated positive."""
    return {p.query_id: {pid: 1 for pid in p.positive_ids} for p in pairs}


# ── dev split ─────────────────────────────────────────────────────────────
def split_dev(pairs: Sequence[TrainPair], fraction: float,
              seed: int) -> Tuple[List[TrainPair], List[TrainPair]]:
    """
    Deterministic disjoint split; both halves keep the input order.

    The dev half has round(len * fraction) pairs.
    """
    if not (0.0 < fraction < 1.0) or math.isnan(fraction):
        raise ArgumentError(f"fraction must be in (0, 1), got {fraction}")
    n_dev = int(round(len(pairs) * fraction))
    perm  = np.random.default_rng(seed).permutation(len(pairs))
    dev_rows = set(perm[:n_dev].tolist())
    train = [p for i, p in enumerate(pairs) if i not in dev_rows]
    dev   = [p for i, p in enumerate(pairs) if i in dev_rows]
    return train, dev
