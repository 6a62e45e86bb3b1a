import itertools

import numpy as np
import pytest

from b2b.catalog import Catalog, Product
from b2b.embedding import TrainConfig, train
from b2b.ingestion import build_pair_stats, ingest_sessions
from b2b.synth import make_synthetic_corpus


def product(pid, dept="D0", aisle="D0-A0", cat="D0-A0-C0", brand="b", price=1.0, rating=4.0, name=None, **kw):
    return Product(pid, name or f"name {pid}", dept, aisle, cat, brand, price, rating, **kw)


def block_separation(space, blocks):
    """Mean within-block cosine minus mean cross-block cosine (input matrix)."""
    X = space.input_matrix / np.linalg.norm(space.input_matrix, axis=1, keepdims=True)
    idx = space.index
    within = [X[idx[a]] @ X[idx[b]] for bl in blocks for a, b in itertools.combinations(bl, 2)]
    cross = [X[idx[a]] @ X[idx[b]] for b1, b2 in itertools.combinations(blocks, 2) for a in b1 for b in b2]
    return float(np.mean(within) - np.mean(cross))


@pytest.fixture(scope="session")
def corpus():
    return make_synthetic_corpus(seed=7)


@pytest.fixture(scope="session")
def ingested(corpus):
    res = ingest_sessions(corpus.events)
    return res, build_pair_stats(res.sessions)


@pytest.fixture(scope="session")
def spaces(ingested):
    res, _ = ingested
    cfg = TrainConfig(dimension=16, epochs=10, negatives=5, seed=3)
    return (
        train(res.baskets("purchase"), cfg, space_kind="purchase"),
        train(res.baskets("search"), cfg, space_kind="search"),
    )


@pytest.fixture
def small_catalog():
    # two departments; D0 has two aisles, three categories
    return Catalog(
        [
            product("A", "D0", "D0-A0", "D0-A0-C0", "x", 2.0, 4.5),
            product("B", "D0", "D0-A0", "D0-A0-C0", "y", 3.0, 4.0),
            product("C", "D0", "D0-A0", "D0-A0-C1", "x", 5.0, 3.5),
            product("D", "D0", "D0-A1", "D0-A1-C0", "z", 1.5, 5.0),
            product("E", "D1", "D1-A0", "D1-A0-C0", "x", 4.0, 4.2),
            product("F", "D1", "D1-A0", "D1-A0-C0", "w", 8.0, 3.0),
        ]
    )
