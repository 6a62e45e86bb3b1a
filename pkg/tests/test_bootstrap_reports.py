import csv
import math
import warnings

import numpy as np
import pytest
from scipy import stats as sps
from scipy.special import expit

import b2b.glmm.bootstrap as bootstrap_mod
from b2b.bundles import BundleCandidate
from b2b.glmm import (
    BootstrapError,
    HierarchicalFit,
    NonNestedError,
    Truth,
    aggregate_by_aisle_pair,
    chi2_pvalue,
    cluster_bootstrap,
    deviance_anova,
    fit,
    simulate_bundle_data,
    write_heatmap,
    write_zero_copurchase,
    zero_copurchase_report,
)

SMALL = ["price_1", "same_brand"]


@pytest.fixture(scope="module")
def tiny():
    return simulate_bundle_data(seed=3, n_aisles=4, bundles_per_aisle=40)


@pytest.fixture(scope="module")
def medium():
    return simulate_bundle_data(seed=8, n_aisles=20, bundles_per_aisle=300)


def quiet_bootstrap(*args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return cluster_bootstrap(*args, **kw)


class TestBootstrap:
    def test_two_replicates_give_min_max(self, tiny):
        with pytest.warns(UserWarning, match="too few"):
            r = cluster_bootstrap(tiny.observations, "varying_intercept", B=2, seed=1, covariates=SMALL)
        assert r.replicates.shape[0] == 2 and r.dropped == 0
        np.testing.assert_array_equal(r.param_lower, r.replicates.min(axis=0))
        np.testing.assert_array_equal(r.param_upper, r.replicates.max(axis=0))

    def test_deterministic_and_worker_independent(self, tiny):
        kw = dict(spec="varying_intercept", B=6, seed=4, covariates=SMALL)
        a = quiet_bootstrap(tiny.observations, **kw)
        b = quiet_bootstrap(tiny.observations, **kw)
        c = quiet_bootstrap(tiny.observations, workers=2, **kw)
        np.testing.assert_array_equal(a.replicates, b.replicates)
        np.testing.assert_array_equal(a.replicates, c.replicates)

    def test_interval_contains_median(self, tiny):
        r = quiet_bootstrap(tiny.observations, "varying_slopes", B=20, seed=2, covariates=SMALL)
        assert np.all(r.param_lower <= r.param_median) and np.all(r.param_median <= r.param_upper)
        ok = ~np.isnan(r.aisle_lower)
        assert np.all(r.aisle_lower[ok] <= r.aisle_median[ok]) and np.all(r.aisle_median[ok] <= r.aisle_upper[ok])
        assert r.param_names[:3] == ["mu_alpha", "mu_beta_comp", "mu_beta_sub"]
        assert r.param_names[-3:] == ["sd_alpha", "sd_beta_comp", "sd_beta_sub"]
        assert r.cluster_key == "focal_id"

    def test_pooled_and_fixed_specs(self, tiny):
        for spec in ("pooled", "fixed_aisle"):
            r = quiet_bootstrap(tiny.observations, spec, B=4, seed=2, covariates=SMALL)
            assert r.dropped == 0 and np.isfinite(r.param_lower).all()

    def test_aisle_resampling_relabels(self, tiny):
        r = quiet_bootstrap(tiny.observations, "varying_intercept", B=4, seed=2, covariates=SMALL,
                            resample_aisles=True)
        assert np.isnan(r.aisle_lower).all() and np.isfinite(r.param_lower[:3]).all()

    def test_bad_B(self, tiny):
        with pytest.raises(ValueError):
            cluster_bootstrap(tiny.observations, B=0)

    def test_too_many_failures(self, tiny, monkeypatch):
        monkeypatch.setattr(bootstrap_mod, "_replicate", lambda args: None)
        with pytest.raises(BootstrapError, match="failed to converge"):
            quiet_bootstrap(tiny.observations, "pooled", B=5, covariates=SMALL)

    def test_truth_inside_aisle_intervals(self, medium):
        base = fit(medium.observations)
        r = cluster_bootstrap(medium.observations, B=100, seed=8, base=base)
        truth = np.array([medium.aisle_effects[a] for a in r.aisles])
        inside = (r.aisle_lower <= truth) & (truth <= r.aisle_upper)
        assert inside.mean() >= 0.85
        # comp slopes vary more across aisles than sub slopes
        sd = base.varying.std(axis=0, ddof=1)
        assert sd[2] < sd[1]


class TestAnova:
    def test_identical(self, tiny):
        f = fit(tiny.observations, "pooled", covariates=SMALL)
        res = deviance_anova(f, f)
        assert (res.deviance_delta, res.df, res.p_value) == (0.0, 0, 1.0)

    def test_published_numbers(self):
        assert 4388.53 - 4317.03 == pytest.approx(71.50, abs=1e-9)
        p = chi2_pvalue(71.50, 2)
        assert p < 0.001
        assert p == pytest.approx(math.exp(-71.50 / 2), rel=1e-12)

    def test_scores_contrast(self, tiny):
        without = fit(tiny.observations, "pooled", covariates=SMALL, include_scores=False)
        with_ = fit(tiny.observations, "pooled", covariates=SMALL)
        res = deviance_anova(without, with_)
        assert res.df == 2 and res.deviance_delta >= 0
        assert res.p_value == pytest.approx(sps.chi2.sf(res.deviance_delta, 2))

    def test_non_nested(self, tiny):
        a = fit(tiny.observations, "pooled", covariates=SMALL)
        with pytest.raises(NonNestedError, match="specification"):
            deviance_anova(a, fit(tiny.observations, "fixed_aisle", covariates=SMALL))
        with pytest.raises(NonNestedError, match="data"):
            deviance_anova(a, fit(tiny.observations[:-10], "pooled", covariates=SMALL))
        with pytest.raises(NonNestedError, match="subset"):
            deviance_anova(a, fit(tiny.observations, "pooled", covariates=["rating_1"]))

    def test_null_pvalues_uniform(self):
        truth = Truth(mu=np.array([-3.0, 0.0, 0.0]), sd=np.zeros(3))
        ps = []
        for seed in range(120):
            obs = simulate_bundle_data(seed=seed, n_aisles=3, bundles_per_aisle=60, truth=truth,
                                       mean_views=40).observations
            small = fit(obs, "pooled", include_scores=False)
            big = fit(obs, "pooled")
            ps.append(deviance_anova(small, big).p_value)
        assert sps.kstest(ps, "uniform").pvalue > 0.01


def toy_fit(alphas, beta_comp=1.0):
    aisles = sorted(alphas)
    varying = np.array([[alphas[a], beta_comp, 0.0] for a in aisles])
    return HierarchicalFit(spec="varying_slopes", aisles=aisles, covariates=[], include_scores=True, gamma={},
                           mu=varying.mean(axis=0), Sigma=np.zeros((3, 3)), varying=varying, loglik=0.0,
                           iterations=0, converged=True, n_obs=1, n_params=1)


class TestHeatmap:
    def test_single_candidate(self, small_catalog):
        f = toy_fit({"D0-A0": 0.0})
        aisles, mat = aggregate_by_aisle_pair(f, [BundleCandidate("A", "B", "CP", 0.0, 0.0)], small_catalog)
        assert aisles == ["D0-A0"] and mat.shape == (1, 1) and mat[0, 0] == 0.5

    def test_hand_averaged(self, small_catalog, tmp_path):
        f = toy_fit({"D0-A0": -1.0, "D0-A1": 0.5, "D1-A0": -2.0})
        cands = [
            BundleCandidate("A", "D", "CC", 0.2, 0.0),  # D0-A0 -> D0-A1
            BundleCandidate("C", "D", "CC", 0.6, 0.0),  # D0-A0 -> D0-A1
            BundleCandidate("D", "A", "CC", 0.0, 0.0),  # D0-A1 -> D0-A0
            BundleCandidate("E", "A", "DC", 1.0, 0.0),  # D1-A0 -> D0-A0
        ]
        aisles, mat = aggregate_by_aisle_pair(f, cands, small_catalog)
        assert aisles == ["D0-A0", "D0-A1", "D1-A0"]
        forward = (expit(-1.0 + 0.2) + expit(-1.0 + 0.6)) / 2
        expected = (forward + expit(0.5)) / 2
        assert mat[0, 1] == pytest.approx(expected, abs=1e-15) and mat[1, 0] == mat[0, 1]
        assert mat[0, 2] == pytest.approx(expit(-1.0), abs=1e-15) and mat[2, 0] == mat[0, 2]
        assert np.isnan(mat[0, 0]) and np.isnan(mat[1, 2])
        write_heatmap(aisles, mat, tmp_path / "h.csv", header="seed=1")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "# seed=1" and lines[1] == "aisle_1,aisle_2,mean_pred_pct"
        rows = list(csv.reader(lines[2:]))
        assert len(rows) == 9
        cell = {(a, b): v for a, b, v in rows}
        assert cell[("D0-A0", "D0-A0")] == ""
        assert float(cell[("D0-A0", "D0-A1")]) == pytest.approx(100 * expected)


class TestZeroCoPurchase:
    def cands(self):
        return [
            BundleCandidate("A", "B", "CP", 0.9, 0.0, co_purchase_count=3),
            BundleCandidate("A", "C", "CC", 0.1, 0.0),
            BundleCandidate("B", "D", "CC", 0.5, 0.0),
            BundleCandidate("C", "E", "DC", 0.3, 0.0),
            BundleCandidate("E", "F", "VR", 0.2, 0.0),
        ]

    def test_ranks(self, small_catalog, tmp_path):
        f = toy_fit({"D0-A0": 0.0, "D1-A0": -1.0})
        rows = zero_copurchase_report(f, self.cands(), small_catalog, top_per_aisle=2)
        assert [(r.focal_aisle, r.rank, r.focal_id, r.addon_id) for r in rows] == [
            ("D0-A0", 1, "B", "D"), ("D0-A0", 2, "C", "E"), ("D1-A0", 1, "E", "F")]
        assert rows[0].pred_prob == pytest.approx(expit(0.5))
        write_zero_copurchase(rows, tmp_path / "z.csv")
        header = (tmp_path / "z.csv").read_text().splitlines()[0]
        assert header == "focal_aisle,rank,category_1,product_1,category_2,product_2,pred_prob"

    def test_all_copurchased(self, small_catalog):
        f = toy_fit({"D0-A0": 0.0})
        cands = [BundleCandidate("A", "B", "CP", 0.9, 0.0, co_purchase_count=1)]
        assert zero_copurchase_report(f, cands, small_catalog) == []
