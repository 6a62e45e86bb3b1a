"""Stochastic gradient training of one embedding space."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numba
import numpy as np

from ..ingestion import Basket
from .objective import corpus_log_likelihood
from .sampling import NegativeTable
from .space import EmbeddingSpace

logger = logging.getLogger(__name__)

MAX_BASKET = 500
LR_FLOOR = 1e-4
CHUNK_PAIRS = 1 << 18


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    dimension: int = 100
    negatives: int = 20
    epochs: int = 5
    learning_rate: float = 0.025
    unigram_power: float = 1.0
    seed: int = 42
    parallel_workers: int = 1
    subsample: float = 0.0
    max_basket: int = MAX_BASKET

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.unigram_power < 0:
            raise ValueError("unigram_power must be >= 0")
        if self.parallel_workers < 1:
            raise ValueError("parallel_workers must be >= 1")
        if self.max_basket < 2:
            raise ValueError("max_basket must be >= 2")


@numba.njit(cache=True, fastmath=False)
def _sgd_chunk(V, U, targets, contexts, negs, lr0, start, total):
    """Sequential per-pair updates; returns False if a non-finite value appears."""
    d = V.shape[1]
    grad_v = np.empty(d)
    for p in range(targets.shape[0]):
        lr = lr0 * max(LR_FLOOR, 1.0 - (start + p) / total)
        t = targets[p]
        c = contexts[p]
        for j in range(d):
            grad_v[j] = 0.0
        # positive pair
        f = 0.0
        for j in range(d):
            f += U[c, j] * V[t, j]
        g = 1.0 - _sig(f)
        for j in range(d):
            grad_v[j] -= g * U[c, j]
        for j in range(d):
            U[c, j] += lr * g * V[t, j]
        for k in range(negs.shape[1]):
            n = negs[p, k]
            if n < 0:
                continue
            f = 0.0
            for j in range(d):
                f += U[n, j] * V[t, j]
            s = _sig(f)
            for j in range(d):
                grad_v[j] += s * U[n, j]
            for j in range(d):
                U[n, j] -= lr * s * V[t, j]
        ok = True
        for j in range(d):
            V[t, j] -= lr * grad_v[j]
            if not math.isfinite(V[t, j]):
                ok = False
        if not ok:
            return False
    return True


@numba.njit(cache=True)
def _sig(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@numba.njit(cache=True, parallel=True)
def _sgd_chunk_hogwild(V, U, targets, contexts, negs, lr0, start, total, workers):
    # shards update the shared matrices without locks; lost updates are tolerated
    n = targets.shape[0]
    step = (n + workers - 1) // workers
    flags = np.ones(workers, dtype=np.bool_)
    for w in numba.prange(workers):
        lo = w * step
        hi = min(n, lo + step)
        if lo < hi:
            flags[w] = _sgd_chunk(V, U, targets[lo:hi], contexts[lo:hi], negs[lo:hi], lr0, start + lo, total)
    return flags.all()


def _index_baskets(baskets: Sequence, index: dict) -> List[np.ndarray]:
    out = []
    for b in baskets:
        items = b.items if isinstance(b, Basket) else b
        rows = sorted(index[p] for p in items if p in index)
        if len(rows) >= 2:
            out.append(np.asarray(rows, dtype=np.int64))
    return out


def _pairs(rows: List[np.ndarray]):
    sizes = np.fromiter((r.size for r in rows), dtype=np.int64, count=len(rows))
    total = int((sizes * (sizes - 1)).sum())
    ts = np.empty(total, dtype=np.int64)
    cs = np.empty(total, dtype=np.int64)
    pos = 0
    for r in rows:
        n = r.size
        m = n * (n - 1)
        t = np.repeat(r, n)
        c = np.tile(r, n)
        keep = t != c
        ts[pos : pos + m] = t[keep]
        cs[pos : pos + m] = c[keep]
        pos += m
    return ts, cs


def train(
    baskets: Sequence,
    config: TrainConfig,
    vocabulary: Optional[Sequence[str]] = None,
    space_kind: str = "purchase",
    holdout: Optional[Sequence] = None,
) -> EmbeddingSpace:
    """Fit one space by SGD on the negative-sampling objective.

    ``vocabulary`` fixes the row order; by default it is the sorted set of
    products in ``baskets``.  Products outside it are ignored.  With
    ``parallel_workers == 1`` the result is a pure function of the inputs
    and ``config.seed``.
    """
    if vocabulary is None:
        vocabulary = sorted({p for b in baskets for p in (b.items if isinstance(b, Basket) else b)})
    vocabulary = list(vocabulary)
    index = {p: i for i, p in enumerate(vocabulary)}
    rows = _index_baskets(baskets, index)
    if not rows:
        raise ValueError("empty corpus: no basket with two or more in-vocabulary products")

    rng = np.random.default_rng(config.seed)
    n, d = len(vocabulary), config.dimension
    V = (rng.random((n, d)) - 0.5) / d
    U = np.zeros((n, d))

    truncated = 0
    for i, r in enumerate(rows):
        if r.size > config.max_basket:
            rows[i] = np.sort(rng.choice(r, config.max_basket, replace=False))
            truncated += 1
    if truncated:
        logger.info("truncated %d baskets to %d products", truncated, config.max_basket)

    counts = np.zeros(n)
    for r in rows:
        counts[r] += 1
    table = NegativeTable(counts, config.unigram_power)
    # products with no occurrence stay at zero so scorers report them as untrained
    V[counts == 0] = 0.0

    space = EmbeddingSpace(vocabulary, V, U, space_kind)
    space.meta.update(seed=config.seed, epochs=config.epochs, dimension=d, negatives=config.negatives)
    if holdout:
        hold = [b for b in holdout if sum(p in index for p in (b.items if isinstance(b, Basket) else b)) >= 2]
        hold = [Basket("", space_kind, frozenset(p for p in b.items if p in index)) for b in hold]
    else:
        hold = []
    if hold:
        space.meta["holdout_ll_init"] = corpus_log_likelihood(space, hold, table, config.negatives, config.seed)

    freq = counts / counts.sum()
    pairs_per_epoch = sum(r.size * (r.size - 1) for r in rows)
    total = float(max(1, pairs_per_epoch * config.epochs))
    done = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(rows))
        epoch_rows = [rows[i] for i in order]
        if config.subsample > 0:
            keep_p = np.minimum(1.0, np.sqrt(config.subsample / np.maximum(freq, 1e-300)))
            thinned = []
            for r in epoch_rows:
                r = r[rng.random(r.size) < keep_p[r]]
                if r.size >= 2:
                    thinned.append(r)
            epoch_rows = thinned
        start = 0
        while start < len(epoch_rows):
            # group baskets so each chunk holds about CHUNK_PAIRS pairs
            stop, acc = start, 0
            while stop < len(epoch_rows) and (acc == 0 or acc < CHUNK_PAIRS):
                acc += epoch_rows[stop].size * (epoch_rows[stop].size - 1)
                stop += 1
            ts, cs = _pairs(epoch_rows[start:stop])
            negs = table.sample_excluding(rng, cs, config.negatives)
            if config.parallel_workers > 1:
                ok = _sgd_chunk_hogwild(V, U, ts, cs, negs, config.learning_rate, float(done), total, config.parallel_workers)
            else:
                ok = _sgd_chunk(V, U, ts, cs, negs, config.learning_rate, float(done), total)
            if not ok or not (np.isfinite(V).all() and np.isfinite(U).all()):
                raise TrainingDiverged(
                    f"non-finite embedding values in epoch {epoch}; learning rate {config.learning_rate} is too high"
                )
            done += ts.size
            start = stop
        logger.debug("epoch %d done (%d pairs)", epoch, done)

    if hold:
        space.meta["holdout_ll_final"] = corpus_log_likelihood(space, hold, table, config.negatives, config.seed)
        if config.epochs and space.meta["holdout_ll_final"] <= space.meta["holdout_ll_init"]:
            logger.warning("held-out objective did not improve over initialization")
    space.meta["negative_table"] = table
    return space.freeze()


def negative_table_for(space: EmbeddingSpace, baskets: Sequence, power: float = 1.0) -> NegativeTable:
    """Unigram table from basket membership counts over ``space``'s vocabulary."""
    counts = np.zeros(len(space))
    for b in baskets:
        for p in b.items if isinstance(b, Basket) else b:
            if p in space.index:
                counts[space.index[p]] += 1
    return NegativeTable(counts, power)
