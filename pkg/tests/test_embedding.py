import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from b2b.catalog import UnknownProductError
from b2b.embedding import (
    EmbeddingSpace,
    NegativeTable,
    TrainConfig,
    TrainingDiverged,
    context_pairs,
    corpus_log_likelihood,
    full_softmax_prob,
    load_binary,
    load_text,
    pair_gradients,
    pair_loss,
    save_binary,
    save_text,
    train,
)
from b2b.embedding.objective import log_sigmoid
from b2b.ingestion import Basket

from conftest import block_separation


def fd_gradients(u_c, v_t, neg, h=1e-5):
    """Central differences of pair_loss for every coordinate."""
    def num(vec, setter):
        g = np.zeros_like(vec)
        for i in range(vec.size):
            up, dn = vec.copy(), vec.copy()
            up[i] += h
            dn[i] -= h
            g[i] = (setter(up) - setter(dn)) / (2 * h)
        return g

    g_v = num(v_t, lambda x: pair_loss(u_c, x, neg))
    g_u = num(u_c, lambda x: pair_loss(x, v_t, neg))
    g_n = np.array([num(neg[k], lambda x, k=k: pair_loss(u_c, v_t, np.vstack([neg[:k], x[None], neg[k + 1:]])))
                    for k in range(len(neg))])
    return g_v, g_u, g_n


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


class TestContextPairs:
    def test_two(self):
        assert context_pairs(Basket("s", "purchase", frozenset("AB"))) == [("A", "B"), ("B", "A")]

    def test_three(self):
        assert len(context_pairs(frozenset("ABC"))) == 6

    def test_five_products(self):
        assert len(context_pairs(frozenset("ABCDE"))) == 20

    def test_singleton(self):
        with pytest.raises(ValueError):
            context_pairs(frozenset("A"))

    @given(st.sets(st.text("abcdefgh", min_size=1, max_size=3), min_size=2, max_size=9))
    def test_count_and_no_self_pairs(self, items):
        pairs = context_pairs(frozenset(items))
        assert len(pairs) == len(items) * (len(items) - 1)
        assert all(t != c for t, c in pairs)
        assert len(set(pairs)) == len(pairs)


class TestPairLoss:
    def test_zero_vectors(self):
        assert pair_loss(np.zeros(3), np.zeros(3), np.zeros((1, 3))) == pytest.approx(-2 * math.log(0.5))
        assert pair_loss(np.zeros(3), np.zeros(3), np.zeros((1, 3))) == pytest.approx(1.386294, abs=1e-6)

    def test_scalar_case(self):
        loss = pair_loss([1.0, 0.0], [1.0, 0.0], [[1.0, 0.0]])
        expected = -(math.log(1 / (1 + math.exp(-1))) + math.log(1 / (1 + math.exp(1))))
        assert loss == pytest.approx(expected, rel=1e-14)
        assert loss == pytest.approx(1.626523, abs=1e-6)

    def test_limit_goes_to_zero(self):
        assert pair_loss([50.0], [50.0], [[-50.0]]) < 1e-300 + 1e-12

    def test_positive(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            assert pair_loss(rng.normal(size=4), rng.normal(size=4), rng.normal(size=(3, 4))) > 0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            pair_loss(np.zeros(3), np.zeros(4), [])
        with pytest.raises(ValueError, match="dimension"):
            pair_loss(np.zeros(3), np.zeros(3), np.zeros((2, 4)))

    def test_log_sigmoid_stable(self):
        assert np.isfinite(log_sigmoid(np.array([-800.0, 800.0]))).all()


class TestPairGradients:
    def test_zero_vectors(self):
        g_v, g_u, g_n = pair_gradients(np.zeros(3), np.zeros(3), np.zeros((2, 3)))
        assert not g_v.any() and not g_u.any() and not g_n.any()

    def test_saturated_positive_no_negatives(self):
        g_v, g_u, g_n = pair_gradients(np.array([40.0]), np.array([40.0]), [])
        assert np.all(g_v == 0) and np.all(g_u == 0) and g_n.shape == (0, 1)

    @pytest.mark.parametrize("seed", range(20))
    def test_against_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        d, n = int(rng.integers(1, 8)), int(rng.integers(1, 6))
        u, v, neg = rng.normal(size=d), rng.normal(size=d), rng.normal(size=(n, d))
        a = pair_gradients(u, v, neg)
        f = fd_gradients(u, v, neg)
        for x, y in zip(a, f):
            assert rel_err(x, y) < 1e-5


class TestSoftmax:
    def space(self, rng, n=6, d=3, scale=1.0):
        return EmbeddingSpace([f"p{i}" for i in range(n)], rng.normal(size=(n, d)) * scale,
                              rng.normal(size=(n, d)) * scale)

    def test_uniform_when_zero(self):
        sp = EmbeddingSpace(list("ABCD"), np.zeros((4, 2)), np.zeros((4, 2)))
        assert full_softmax_prob(sp, "A", "C") == pytest.approx(0.25, abs=1e-15)

    def test_favoured_context(self):
        V = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
        U = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 1.0]])
        sp = EmbeddingSpace(list("ABC"), V, U)
        p = {c: full_softmax_prob(sp, "A", c) for c in "ABC"}
        assert p["B"] > p["A"] and p["B"] > p["C"]

    def test_sums_to_one(self):
        sp = self.space(np.random.default_rng(1))
        for t in sp.vocabulary:
            assert math.fsum(full_softmax_prob(sp, t, c) for c in sp.vocabulary) == pytest.approx(1.0, abs=1e-12)

    def test_never_exactly_zero_or_one(self):
        sp = self.space(np.random.default_rng(2), n=3, scale=200.0)
        for t in sp.vocabulary:
            for c in sp.vocabulary:
                assert 0.0 < full_softmax_prob(sp, t, c) < 1.0

    def test_unknown(self):
        sp = self.space(np.random.default_rng(3))
        with pytest.raises(UnknownProductError):
            full_softmax_prob(sp, "p0", "nope")


class TestNegativeTable:
    def test_frequencies_match_weights(self):
        counts = np.array([1, 2, 3, 5, 8, 13, 0, 21], dtype=float)
        for power in (1.0, 0.75):
            t = NegativeTable(counts, power)
            draws = t.sample(np.random.default_rng(0), 10**6)
            observed = np.bincount(draws, minlength=len(counts))
            w = counts**power
            mask = w > 0
            assert observed[~mask].sum() == 0
            expected = 10**6 * w[mask] / w[mask].sum()
            assert sps.chisquare(observed[mask], expected).pvalue > 0.001

    def test_excluding_never_returns_excluded(self):
        t = NegativeTable(np.array([10.0, 1.0, 1.0]))
        exclude = np.zeros(1000, dtype=np.int64)
        out = t.sample_excluding(np.random.default_rng(0), exclude, 5)
        assert out.shape == (1000, 5)
        assert not (out == 0).any()

    def test_impossible_exclusion_gives_minus_one(self):
        t = NegativeTable(np.array([1.0, 0.0]))
        out = t.sample_excluding(np.random.default_rng(0), np.array([0]), 3)
        assert (out == -1).all()

    @pytest.mark.parametrize("counts", [[], [-1.0, 2.0], [0.0, 0.0]])
    def test_bad_counts(self, counts):
        with pytest.raises(ValueError):
            NegativeTable(np.array(counts))


class TestCorpusLogLikelihood:
    def test_single_basket_zero_vectors(self):
        sp = EmbeddingSpace(["A", "B"], np.zeros((2, 3)), np.zeros((2, 3)))
        table = NegativeTable(np.array([1.0, 1.0]))
        ll = corpus_log_likelihood(sp, [Basket("s", "purchase", frozenset("AB"))], table, 1)
        assert ll == pytest.approx(4 * math.log(0.5), rel=1e-14)

    def test_equals_minus_sum_of_pair_losses(self):
        rng = np.random.default_rng(4)
        vocab = list("ABCDEF")
        sp = EmbeddingSpace(vocab, rng.normal(size=(6, 4)), rng.normal(size=(6, 4)))
        table = NegativeTable(np.arange(1.0, 7.0))
        baskets = [frozenset("ABC"), frozenset("DF"), frozenset("ACEF")]
        ll = corpus_log_likelihood(sp, baskets, table, 3, seed=9)
        # replay the sampler with the same seed
        ts, cs = [], []
        for b in baskets:
            for t, c in context_pairs(b):
                ts.append(sp.row(t))
                cs.append(sp.row(c))
        negs = table.sample_excluding(np.random.default_rng(9), np.array(cs), 3)
        total = sum(pair_loss(sp.output_matrix[c], sp.input_matrix[t], sp.output_matrix[n[n >= 0]])
                    for t, c, n in zip(ts, cs, negs))
        assert ll == pytest.approx(-total, rel=1e-12)


class TestTrain:
    def corpus(self):
        rng = np.random.default_rng(0)
        blocks = [list("ABCDE"), list("FGHIJ")]
        out = []
        for s in range(400):
            b = blocks[s % 2]
            out.append(Basket(f"s{s}", "purchase", frozenset(rng.choice(b, size=3, replace=False))))
        return out, blocks

    def test_empty_corpus(self):
        with pytest.raises(ValueError, match="empty"):
            train([], TrainConfig(dimension=4))
        with pytest.raises(ValueError, match="empty"):
            train([Basket("s", "purchase", frozenset("A"))], TrainConfig(dimension=4))

    def test_zero_epochs_returns_initialization(self):
        baskets, _ = self.corpus()
        sp = train(baskets, TrainConfig(dimension=8, epochs=0))
        assert np.all(sp.output_matrix == 0)
        assert np.all(np.abs(sp.input_matrix) <= 0.5 / 8)
        again = train(baskets, TrainConfig(dimension=8, epochs=0))
        assert np.array_equal(sp.input_matrix, again.input_matrix)

    def test_deterministic(self):
        baskets, _ = self.corpus()
        a = train(baskets, TrainConfig(dimension=8, epochs=3, negatives=4))
        b = train(baskets, TrainConfig(dimension=8, epochs=3, negatives=4))
        assert a.input_matrix.tobytes() == b.input_matrix.tobytes()
        assert a.output_matrix.tobytes() == b.output_matrix.tobytes()

    def test_frozen(self):
        baskets, _ = self.corpus()
        sp = train(baskets, TrainConfig(dimension=4, epochs=1))
        with pytest.raises(ValueError):
            sp.input_matrix[0, 0] = 1.0

    def test_holdout_objective_improves(self):
        baskets, _ = self.corpus()
        sp = train(baskets[:300], TrainConfig(dimension=8, epochs=5, negatives=5), holdout=baskets[300:])
        assert sp.meta["holdout_ll_final"] > sp.meta["holdout_ll_init"]

    def test_planted_blocks_separate(self):
        baskets, blocks = self.corpus()
        sp = train(baskets, TrainConfig(dimension=8, epochs=5, negatives=5))
        assert block_separation(sp, blocks) > 0.3

    def test_parallel_mode_passes_statistical_check(self):
        baskets, blocks = self.corpus()
        sp = train(baskets, TrainConfig(dimension=8, epochs=5, negatives=5, parallel_workers=2))
        assert np.isfinite(sp.input_matrix).all()
        assert block_separation(sp, blocks) > 0.3

    def test_unused_vocabulary_rows_are_zero(self):
        baskets, _ = self.corpus()
        sp = train(baskets, TrainConfig(dimension=4, epochs=1), vocabulary=list("ABCDEFGHIJZ"))
        assert not sp.input_matrix[sp.row("Z")].any()

    def test_divergence_detected(self):
        baskets, _ = self.corpus()
        with pytest.raises(TrainingDiverged, match="learning rate"):
            train(baskets, TrainConfig(dimension=8, epochs=2, negatives=5, learning_rate=1e200))

    def test_production_scale_config_accepted(self):
        cfg = TrainConfig(dimension=100, negatives=20)
        assert (cfg.dimension, cfg.negatives, cfg.unigram_power) == (100, 20, 1.0)

    @pytest.mark.parametrize("kw", [{"dimension": 0}, {"negatives": 0}, {"learning_rate": 0.0}, {"epochs": -1}])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_synthetic_spaces_recover_blocks(self, corpus, spaces):
        purchase, search = spaces
        assert block_separation(purchase, corpus.truth["complement_blocks"]) > 0.3
        assert block_separation(search, corpus.truth["substitute_blocks"]) > 0.3


class TestSpaceIO:
    def space(self):
        rng = np.random.default_rng(0)
        return EmbeddingSpace(["a", "b", "c"], rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), "search")

    def test_text_roundtrip_exact(self, tmp_path):
        sp = self.space()
        paths = save_text(sp, tmp_path / "s.txt")
        assert [p.name for p in paths] == ["s.txt", "s.txt.out"]
        assert (tmp_path / "s.txt").read_text().splitlines()[0] == "3 4"
        again = load_text(tmp_path / "s.txt", "search")
        assert again.vocabulary == sp.vocabulary
        assert np.array_equal(again.input_matrix, sp.input_matrix)
        assert np.array_equal(again.output_matrix, sp.output_matrix)

    def test_binary_roundtrip(self, tmp_path):
        sp = self.space()
        save_binary(sp, tmp_path / "s.bin")
        again = load_binary(tmp_path / "s.bin")
        assert again.space_kind == "search" and again.vocabulary == sp.vocabulary
        np.testing.assert_allclose(again.input_matrix, sp.input_matrix, rtol=1e-6)
        assert (tmp_path / "s.bin").read_bytes()[:6] == b"B2BEMB"

    def test_binary_bad_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"nope")
        with pytest.raises(ValueError):
            load_binary(tmp_path / "x.bin")

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            EmbeddingSpace(["a"], np.zeros((2, 3)), np.zeros((2, 3)))
