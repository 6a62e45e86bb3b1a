"""Complementarity / substitutability scores and constrained neighbor search.

Both scores are cosine similarities: complementarity in the purchase space,
substitutability in the search space.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .catalog import Catalog, Product
from .embedding.space import EmbeddingSpace

CONSTRAINTS = ("none", "same_department_diff_category", "diff_department", "same_category")


class UntrainedProductError(ValueError):
    """The product's vector has zero norm."""


@dataclass(frozen=True)
class ScorePair:
    i: str
    j: str
    comp: float
    sub: float


@dataclass(frozen=True)
class NeighborQuery:
    focal: str
    k: int = 5
    space_kind: str = "purchase"
    constraint: str = "none"
    exclude: FrozenSet[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.constraint not in CONSTRAINTS:
            raise ValueError(f"unknown constraint {self.constraint!r}; choose from {CONSTRAINTS}")


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        raise UntrainedProductError("untrained product: zero-norm embedding")
    return float(a @ b) / (na * nb)


def cosine_score(space: EmbeddingSpace, i: str, j: str, matrix: str = "input") -> float:
    X = space.vectors(matrix)
    a, b = X[space.row(i)], X[space.row(j)]
    try:
        return _cosine(a, b)
    except UntrainedProductError:
        bad = i if not a.any() else j
        raise UntrainedProductError(f"untrained product {bad!r} in {space.space_kind} space") from None


def complementarity(space_purchase: EmbeddingSpace, i: str, j: str, matrix: str = "input") -> float:
    return cosine_score(space_purchase, i, j, matrix)


def substitutability(space_search: EmbeddingSpace, i: str, j: str, matrix: str = "input") -> float:
    return cosine_score(space_search, i, j, matrix)


def constraint_predicate(constraint: str, focal: Product) -> Callable[[Product], bool]:
    if constraint == "none":
        return lambda p: True
    if constraint == "same_department_diff_category":
        return lambda p: p.department == focal.department and p.category != focal.category
    if constraint == "diff_department":
        return lambda p: p.department != focal.department
    if constraint == "same_category":
        return lambda p: p.category == focal.category
    raise ValueError(f"unknown constraint {constraint!r}")


class Scorer:
    """Exact neighbor search over one space.

    ``fast=True`` scans a pre-normalized matrix with one matrix-vector
    product; ``fast=False`` is the per-candidate reference scan.  Zero-norm
    rows never appear as neighbors.
    """

    def __init__(self, space: EmbeddingSpace, catalog: Optional[Catalog] = None, matrix: str = "input"):
        self.space = space
        self.catalog = catalog
        self.matrix = matrix

    @cached_property
    def _normalized(self) -> Tuple[np.ndarray, np.ndarray]:
        X = self.space.vectors(self.matrix)
        norms = np.sqrt(np.einsum("ij,ij->i", X, X))
        ok = norms > 0
        Xn = np.zeros_like(X)
        Xn[ok] = X[ok] / norms[ok, None]
        return Xn, ok

    def score(self, i: str, j: str) -> float:
        return cosine_score(self.space, i, j, self.matrix)

    def _allowed(self, query: NeighborQuery) -> np.ndarray:
        vocab = self.space.vocabulary
        mask = np.ones(len(vocab), dtype=bool)
        mask[self.space.row(query.focal)] = False
        for pid in query.exclude:
            if pid in self.space.index:
                mask[self.space.index[pid]] = False
        if query.constraint != "none":
            if self.catalog is None:
                raise ValueError("hierarchy constraints need a catalog")
            pred = constraint_predicate(query.constraint, self.catalog[query.focal])
            for r, pid in enumerate(vocab):
                if mask[r]:
                    mask[r] = pid in self.catalog and pred(self.catalog[pid])
        return mask

    def top_k(self, query: NeighborQuery, fast: bool = True) -> List[Tuple[str, float]]:
        """Highest-cosine products passing the constraint, ties by id ascending."""
        f = self.space.row(query.focal)
        mask = self._allowed(query)
        vocab = self.space.vocabulary
        if fast:
            Xn, ok = self._normalized
            if not ok[f]:
                raise UntrainedProductError(f"untrained product {query.focal!r} in {self.space.space_kind} space")
            mask &= ok
            rows = np.flatnonzero(mask)
            scores = Xn[rows] @ Xn[f]
            cands = list(zip(scores.tolist(), rows.tolist()))
        else:
            X = self.space.vectors(self.matrix)
            cands = []
            for r in np.flatnonzero(mask):
                if not X[r].any():
                    continue
                try:
                    cands.append((_cosine(X[f], X[r]), int(r)))
                except UntrainedProductError:
                    raise UntrainedProductError(
                        f"untrained product {query.focal!r} in {self.space.space_kind} space"
                    ) from None
        cands.sort(key=lambda t: (-t[0], vocab[t[1]]))
        return [(vocab[r], s) for s, r in cands[: query.k]]


def top_k(query: NeighborQuery, space: EmbeddingSpace, catalog: Optional[Catalog] = None, matrix: str = "input"):
    return Scorer(space, catalog, matrix).top_k(query)


def score_pairs(
    purchase: EmbeddingSpace, search: EmbeddingSpace, pairs: Iterable[Tuple[str, str]], matrix: str = "input"
) -> List[ScorePair]:
    return [
        ScorePair(i, j, complementarity(purchase, i, j, matrix), substitutability(search, i, j, matrix))
        for i, j in pairs
    ]


def score_matrix_export(
    space: EmbeddingSpace, id_subset: Sequence[str], out: Union[str, Path], matrix: str = "input"
) -> int:
    """Write the upper triangle of pairwise scores as ``i,j,score`` rows."""
    ids = list(id_subset)
    for pid in ids:
        space.row(pid)
    n = 0
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "score"])
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                w.writerow([ids[a], ids[b], repr(cosine_score(space, ids[a], ids[b], matrix))])
                n += 1
    return n


def write_neighbors(rows: Iterable[Tuple[str, List[Tuple[str, float]]]], out: Union[str, Path]) -> None:
    """CSV with ``focal_id,candidate_id,score,rank`` (rank starts at 1)."""
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["focal_id", "candidate_id", "score", "rank"])
        for focal, ranked in rows:
            for rank, (pid, s) in enumerate(ranked, 1):
                w.writerow([focal, pid, repr(s), rank])
