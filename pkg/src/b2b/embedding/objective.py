"""Negative-sampling loss, its gradients, and likelihood diagnostics."""

from __future__ import annotations

from itertools import permutations
from typing import Iterable, List, Tuple

import numpy as np

from ..ingestion import Basket
from .sampling import NegativeTable
from .space import EmbeddingSpace


def sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def context_pairs(basket) -> List[Tuple[str, str]]:
    """Every ordered (target, context) pair; the rest of the basket is the context."""
    items = sorted(basket.items if isinstance(basket, Basket) else basket)
    if len(items) < 2:
        raise ValueError("a basket needs at least two products")
    return list(permutations(items, 2))


def _check(u_c, v_t, negatives):
    u_c = np.asarray(u_c, dtype=np.float64)
    v_t = np.asarray(v_t, dtype=np.float64)
    if u_c.shape != v_t.shape or u_c.ndim != 1:
        raise ValueError(f"dimension mismatch: u_c {u_c.shape} vs v_t {v_t.shape}")
    raw = np.asarray(negatives, dtype=np.float64)
    if raw.size == 0:
        return u_c, v_t, np.empty((0, v_t.shape[0]))
    if raw.shape[-1] != v_t.shape[0]:
        raise ValueError(f"dimension mismatch: negatives {raw.shape} vs v_t {v_t.shape}")
    return u_c, v_t, raw.reshape(-1, v_t.shape[0])


def pair_loss(u_c, v_t, negatives) -> float:
    """``-[log s(u_c.v_t) + sum_k log s(-u_k.v_t)]`` for one positive pair."""
    u_c, v_t, neg = _check(u_c, v_t, negatives)
    return float(-(log_sigmoid(u_c @ v_t) + log_sigmoid(-(neg @ v_t)).sum()))


def pair_gradients(u_c, v_t, negatives):
    """Gradients of :func:`pair_loss` w.r.t. ``v_t``, ``u_c`` and each negative."""
    u_c, v_t, neg = _check(u_c, v_t, negatives)
    pos = 1.0 - sigmoid(u_c @ v_t)
    sneg = sigmoid(neg @ v_t)
    g_v = -pos * u_c + sneg @ neg
    g_u = -pos * v_t
    g_neg = sneg[:, None] * v_t[None, :]
    return g_v, g_u, g_neg


def full_softmax_prob(space: EmbeddingSpace, target: str, context: str) -> float:
    """Exact ``P(context | target)`` over the whole vocabulary."""
    t = space.row(target)
    c = space.row(context)
    logits = space.output_matrix @ space.input_matrix[t]
    logits = logits - logits.max()
    w = np.exp(logits)
    p = w[c] / w.sum()
    return float(np.clip(p, np.finfo(float).tiny, np.nextafter(1.0, 0.0)))


def _index_pairs(space: EmbeddingSpace, baskets: Iterable) -> Tuple[np.ndarray, np.ndarray]:
    ts, cs = [], []
    for b in baskets:
        for t, c in context_pairs(b):
            ts.append(space.row(t))
            cs.append(space.row(c))
    return np.asarray(ts, dtype=np.int64), np.asarray(cs, dtype=np.int64)


def corpus_log_likelihood(
    space: EmbeddingSpace,
    baskets: Iterable,
    negative_table: NegativeTable,
    sample_negatives: int,
    seed: int = 0,
) -> float:
    """Monte-Carlo estimate of the corpus objective.

    Each positive pair draws ``sample_negatives`` fresh negatives (never the
    pair's own context); the value is minus the summed pair losses.
    """
    ts, cs = _index_pairs(space, baskets)
    if ts.size == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    negs = negative_table.sample_excluding(rng, cs, sample_negatives)
    V = space.input_matrix[ts]
    pos = log_sigmoid(np.einsum("ij,ij->i", space.output_matrix[cs], V))
    valid = negs >= 0
    dots = np.einsum("ikj,ij->ik", space.output_matrix[np.where(valid, negs, 0)], V)
    neg = np.where(valid, log_sigmoid(-dots), 0.0)
    return float(pos.sum() + neg.sum())
