import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from b2b.catalog import Catalog, UnknownProductError
from b2b.embedding import EmbeddingSpace
from b2b.scoring import (
    CONSTRAINTS,
    NeighborQuery,
    Scorer,
    UntrainedProductError,
    complementarity,
    cosine_score,
    score_matrix_export,
    score_pairs,
    substitutability,
    top_k,
    write_neighbors,
)

from conftest import product


def space_of(vectors, kind="purchase"):
    ids = list(vectors)
    X = np.array([vectors[i] for i in ids], dtype=float)
    return EmbeddingSpace(ids, X, X.copy(), kind)


def random_world(seed, n=200, d=8):
    rng = np.random.default_rng(seed)
    products = []
    for i in range(n):
        dept = int(rng.integers(0, 3))
        aisle = int(rng.integers(0, 2))
        cat = int(rng.integers(0, 4))
        a = f"D{dept}-A{aisle}"
        products.append(product(f"p{i:03d}", f"D{dept}", a, f"{a}-C{cat}"))
    catalog = Catalog(products)
    ids = [p.product_id for p in products]
    return EmbeddingSpace(ids, rng.normal(size=(n, d)), rng.normal(size=(n, d))), catalog


def oracle_top_k(space, catalog, focal, k, constraint, exclude=()):
    """Plain-Python linear scan."""
    f = space.input_matrix[space.index[focal]]
    fp = catalog[focal] if catalog is not None else None
    out = []
    for pid in space.vocabulary:
        if pid == focal or pid in exclude:
            continue
        if constraint != "none":
            p = catalog[pid]
            ok = {
                "same_department_diff_category": p.department == fp.department and p.category != fp.category,
                "diff_department": p.department != fp.department,
                "same_category": p.category == fp.category,
            }[constraint]
            if not ok:
                continue
        v = space.input_matrix[space.index[pid]]
        dot = sum(a * b for a, b in zip(f, v))
        out.append((pid, dot / (math.sqrt(sum(a * a for a in f)) * math.sqrt(sum(b * b for b in v)))))
    out.sort(key=lambda t: (-t[1], t[0]))
    return out[:k]


class TestCosine:
    def test_identical(self):
        assert complementarity(space_of({"i": [1, 0], "j": [1, 0]}), "i", "j") == 1.0

    def test_orthogonal(self):
        assert complementarity(space_of({"i": [1, 0], "j": [0, 1]}), "i", "j") == 0.0

    def test_diagonal(self):
        assert complementarity(space_of({"i": [1, 1], "j": [1, 0]}), "i", "j") == pytest.approx(0.70710678, abs=1e-8)

    def test_scale_invariant(self):
        assert substitutability(space_of({"i": [2, 0], "j": [1, 0]}, "search"), "i", "j") == 1.0

    def test_antipodal(self):
        assert substitutability(space_of({"i": [1, 0], "j": [-1, 0]}, "search"), "i", "j") == -1.0

    def test_matches_dot_and_norm_oracle(self):
        rng = np.random.default_rng(0)
        vecs = {f"p{i}": rng.normal(size=4) for i in range(5)}
        sp = space_of(vecs)
        for i in vecs:
            for j in vecs:
                expected = vecs[i] @ vecs[j] / (np.linalg.norm(vecs[i]) * np.linalg.norm(vecs[j]))
                assert cosine_score(sp, i, j) == pytest.approx(expected, abs=1e-12)

    def test_zero_vector_is_untrained(self):
        with pytest.raises(UntrainedProductError, match="untrained product 'j'"):
            complementarity(space_of({"i": [1, 0], "j": [0, 0]}), "i", "j")

    def test_unknown_product(self):
        with pytest.raises(UnknownProductError):
            complementarity(space_of({"i": [1, 0]}), "i", "zz")

    def test_matrix_switch(self):
        sp = EmbeddingSpace(["a", "b"], np.array([[1.0, 0], [0, 1.0]]), np.array([[1.0, 0], [1.0, 0]]))
        assert cosine_score(sp, "a", "b", "input") == 0.0
        assert cosine_score(sp, "a", "b", "output") == 1.0
        assert cosine_score(sp, "a", "b", "mean") == pytest.approx(1 / math.sqrt(2), abs=1e-12)  # a=[1,0], b=[.5,.5]

    def test_score_pairs(self):
        p = space_of({"i": [1, 0], "j": [1, 1]})
        s = space_of({"i": [0, 1], "j": [0, -1]}, "search")
        [pair] = score_pairs(p, s, [("i", "j")])
        assert pair.comp == pytest.approx(math.sqrt(0.5)) and pair.sub == -1.0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3),
           st.floats(0.01, 100))
    def test_properties(self, a, b, lam):
        if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
            return
        sp = space_of({"a": a, "b": b})
        scaled = space_of({"a": [lam * x for x in a], "b": b})
        s = cosine_score(sp, "a", "b")
        assert s == cosine_score(sp, "b", "a")
        assert -1.0 - 1e-12 <= s <= 1.0 + 1e-12
        assert cosine_score(sp, "a", "a") == pytest.approx(1.0, abs=1e-12)
        assert cosine_score(scaled, "a", "b") == pytest.approx(s, abs=1e-12)


class TestTopK:
    def test_planted_duplicate(self):
        sp = space_of({"f": [1, 0.2], "dup": [2, 0.4], "x": [0, 1]})
        assert top_k(NeighborQuery("f", 1), sp)[0][0] == "dup"

    def test_same_category_cardinality(self, small_catalog):
        rng = np.random.default_rng(1)
        sp = space_of({pid: rng.normal(size=3) for pid in small_catalog})
        res = top_k(NeighborQuery("D", 5, constraint="same_category"), sp, small_catalog)
        assert res == []
        res = top_k(NeighborQuery("A", 5, constraint="same_category"), sp, small_catalog)
        assert [pid for pid, _ in res] == ["B"]

    def test_ties_by_id(self):
        sp = space_of({"f": [1, 0], "c": [1, 1], "b": [1, -1], "a": [0, 1]})
        assert [p for p, _ in top_k(NeighborQuery("f", 3), sp)] == ["b", "c", "a"]

    def test_focal_unknown(self):
        with pytest.raises(UnknownProductError):
            top_k(NeighborQuery("nope", 1), space_of({"f": [1, 0]}))

    def test_untrained_focal(self):
        with pytest.raises(UntrainedProductError):
            top_k(NeighborQuery("f", 1), space_of({"f": [0, 0], "g": [1, 0]}))

    def test_untrained_rows_never_neighbors(self):
        sp = space_of({"f": [1, 0], "z": [0, 0], "g": [1, 1]})
        assert [p for p, _ in top_k(NeighborQuery("f", 5), sp)] == ["g"]
        assert [p for p, _ in Scorer(sp).top_k(NeighborQuery("f", 5), fast=False)] == ["g"]

    def test_constraint_needs_catalog(self):
        with pytest.raises(ValueError, match="catalog"):
            top_k(NeighborQuery("f", 1, constraint="diff_department"), space_of({"f": [1, 0], "g": [0, 1]}))

    @pytest.mark.parametrize("kw", [{"k": 0}, {"constraint": "same_aisle"}])
    def test_bad_query(self, kw):
        with pytest.raises(ValueError):
            NeighborQuery("f", **kw)

    def test_exclude(self):
        sp = space_of({"f": [1, 0], "g": [1, 0.1], "h": [1, 0.5]})
        assert top_k(NeighborQuery("f", 1, exclude=frozenset({"g"})), sp)[0][0] == "h"

    def test_full_permutation_and_prefix(self):
        sp, catalog = random_world(3, n=40)
        scorer = Scorer(sp, catalog)
        full = scorer.top_k(NeighborQuery("p000", 39))
        assert sorted(p for p, _ in full) == sorted(sp.vocabulary[1:])
        for k in (1, 5, 20):
            assert scorer.top_k(NeighborQuery("p000", k)) == full[:k]

    def test_fast_and_reference_paths_agree_with_oracle(self):
        sp, catalog = random_world(0)
        scorer = Scorer(sp, catalog)
        rng = np.random.default_rng(11)
        for _ in range(50):
            focal = sp.vocabulary[int(rng.integers(len(sp.vocabulary)))]
            k = int(rng.integers(1, 12))
            constraint = CONSTRAINTS[int(rng.integers(len(CONSTRAINTS)))]
            q = NeighborQuery(focal, k, constraint=constraint)
            expected = oracle_top_k(sp, catalog, focal, k, constraint)
            for fast in (True, False):
                got = scorer.top_k(q, fast=fast)
                assert [p for p, _ in got] == [p for p, _ in expected]
                np.testing.assert_allclose([s for _, s in got], [s for _, s in expected], atol=1e-12)


class TestExport:
    def test_sizes_and_values(self, tmp_path):
        sp, _ = random_world(2, n=5)
        assert score_matrix_export(sp, ["p000"], tmp_path / "one.csv") == 0
        n = score_matrix_export(sp, ["p000", "p001", "p002"], tmp_path / "three.csv")
        assert n == 3
        with open(tmp_path / "three.csv") as fh:
            rows = list(csv.DictReader(fh))
        for r in rows:
            assert float(r["score"]) == complementarity(sp, r["i"], r["j"])

    def test_unknown_id(self, tmp_path):
        sp, _ = random_world(2, n=5)
        with pytest.raises(UnknownProductError):
            score_matrix_export(sp, ["p000", "x"], tmp_path / "x.csv")

    def test_write_neighbors(self, tmp_path):
        write_neighbors([("f", [("a", 0.5), ("b", 0.25)])], tmp_path / "n.csv")
        lines = (tmp_path / "n.csv").read_text().splitlines()
        assert lines == ["focal_id,candidate_id,score,rank", "f,a,0.5,1", "f,b,0.25,2"]
