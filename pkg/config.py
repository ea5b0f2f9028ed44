# config.py
"""
Configuration defaults for the boosted retrieval pipeline.

Every tunable lives here as a module-level constant.  The CLI layers a
TOML config file and command-line flags on top (flags win).
"""
from __future__ import annotations

import os
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:  # Python 3.10: tomli is the same parser under its backport name
    import tomli as tomllib
from typing import Any

import psutil

from errors import ArgumentError

# ── Featurizer ─────────────────────────────────────────────────────────────

NUM_BUCKETS   = 1 << 18      # hashed feature space, power of two
USE_BIGRAMS   = True
LOWERCASE     = True
HASH_SEED     = 0

# ── Weak learner / encoder training ────────────────────────────────────────

DIM               = 32       # per-learner embedding width
LN_EPSILON        = 1e-5
LEARNING_RATE     = 1e-2
ADAM_BETA1        = 0.9
ADAM_BETA2        = 0.999
EPOCHS            = 10
BATCH_SIZE        = 32
NEGATIVES         = 4        # hard negatives per example
IN_BATCH_NEGATIVES = False   # boosting trains on hard negatives only
GRAD_CLIP         = None     # optional global-norm clip
TRAIN_SEED        = 7

# ── Boosting loop ──────────────────────────────────────────────────────────

MAX_ROUNDS        = 5
TOLERANCE         = 0.001    # minimum dev-error reduction to keep going
DIM_PER_ROUND     = 8
MINE_TOP_N        = 100      # candidate pool per query
MINE_TEMPERATURE  = 1.0
DEV_METRIC        = "R@10"
BOOST_MODE        = "boost"  # boost | iterative | bagging
BOOST_SEED        = 7
ITERATIVE_DIM     = 40       # full-width model for the iterative baseline

# ── Index ──────────────────────────────────────────────────────────────────

KMEANS_ITERS      = 20
KMEANS_SEED       = 7
PQ_SUB_DIM        = 4
PQ_CENTROIDS      = 256
IVF_NLIST         = None     # None → round(sqrt(num_rows))
PROBE_METRIC      = "ip"     # ip | l2  (centroid ranking at query time)

# ── Distillation ───────────────────────────────────────────────────────────

DISTILL_EPOCHS        = 20
DISTILL_LEARNING_RATE = 1e-2
DISTILL_BATCH_SIZE    = 64
DISTILL_SEED          = 7
DISTILL_WEIGHTS       = (1.0, 1.0)   # (query target, passage target)
DISTILL_PATIENCE      = 3

# ── Synthetic benchmark ────────────────────────────────────────────────────

SYNTH_NUM_TOPICS         = 20
SYNTH_PASSAGES_PER_TOPIC = 1000
SYNTH_VOCAB_SIZE         = 20000
SYNTH_WORDS_PER_PASSAGE  = 40
SYNTH_QUERIES_PER_TOPIC  = 125
SYNTH_QUERY_LEN          = 6
SYNTH_NOISE_RATE         = 0.3
SYNTH_DEV_FRACTION       = 0.2
SYNTH_ZIPF_EXPONENT      = 1.1
SYNTH_SEED               = 7
SYNTH_SUBTOPICS_PER_TOPIC = 8
SYNTH_LEAVES_PER_SUBTOPIC = 5        # 40 leaves of 25 passages per topic
SYNTH_LEVEL_MIX          = (0.4, 0.3, 0.3)   # topic-wide, subtopic, leaf word shares

# ── Evaluation ─────────────────────────────────────────────────────────────

EVAL_K            = 20
RECALL_KS         = (1, 5, 10, 20, 100)
MARGIN_K          = 20
MARGIN_QUANTILES  = (50, 75, 90)

# comparative floors on the default benchmark; a pilot run may only raise them
ACCEPTANCE_FLOORS = {
    "boost_over_round_one_r10": 0.05,    # dev R@10
    "boost_over_bagging_r20":   0.02,    # dev R@20
    "boost_vs_iterative_r10":  -0.01,    # dev R@10
    "ivf_two_probe_overlap":    0.02,    # recall vs exact at two probes
}
DISTILL_MAX_GAP   = 0.02                 # dev R@20, absolute

# ── Runtime ────────────────────────────────────────────────────────────────

THREADS_ENV       = "DRBOOST_THREADS"
MANIFEST_NAME     = "manifest.json"


def default_threads() -> int:
    """Physical core count, 1 if psutil can't tell."""
    return psutil.cpu_count(logical=False) or 1


def resolve_threads(flag: int | None) -> int:
    """--threads > DRBOOST_THREADS > physical cores."""
    if flag is not None:
        n = flag
    elif os.environ.get(THREADS_ENV):
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError:
            raise ArgumentError(f"{THREADS_ENV} must be an integer, "
                                f"got {os.environ[THREADS_ENV]!r}") from None
    else:
        n = default_threads()
    if n < 1:
        raise ArgumentError(f"thread count must be >= 1, got {n}")
    return n


def load_config_file(path: str | None, section: str) -> dict[str, Any]:
    """
    Read a TOML config and return the merged `[common]` + `[section]` table.

    Keys are flag names with underscores (``nprobes = 4``).
    """
    if not path:
        return {}
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ArgumentError(f"{path}: {exc}") from None

    merged: dict[str, Any] = {}
    for name in ("common", section):
        table = data.get(name, {})
        if not isinstance(table, dict):
            raise ArgumentError(f"{path}: [{name}] must be a table")
        merged.update(table)
    return merged
