import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps
from statsmodels.stats.proportion import proportions_ztest

from b2b.analytics import (
    ArmStats,
    arm_table,
    balance_table,
    one_way_anova,
    pairwise_proportion_test,
    pairwise_tests,
    read_rows,
    total_row,
    write_arm_table,
    write_balance,
    write_pairwise,
)

# Bundle-type counts from the field experiment: bundles, views, clicks, ATC, purchases
PUBLISHED = {
    "CP": (2189, 94458, 1586, 1050, 198),
    "CC": (2632, 88757, 1014, 665, 102),
    "DC": (2126, 81239, 794, 289, 47),
    "VR": (2781, 91914, 1803, 843, 156),
}


def published_arms():
    return {s: ArmStats(s, b, v, c, a, p) for s, (b, v, c, a, p) in PUBLISHED.items()}


def rows_from_published():
    # one aggregate row per arm, with the bundle count spread over extra zero rows
    rows = []
    for s, (b, v, c, a, p) in PUBLISHED.items():
        rows.append({"strategy": s, "views": v, "clicks": c, "atc": a, "purchases": p})
        rows += [{"strategy": s, "views": 0, "clicks": 0, "atc": 0, "purchases": 0}] * (b - 1)
    return rows


class TestArmTable:
    def test_published_totals(self):
        arms = arm_table(rows_from_published())
        tot = total_row(arms)
        assert (tot.bundles, tot.views, tot.clicks, tot.atc, tot.purchases) == (9728, 356368, 5197, 2847, 503)
        assert round(tot.atc_rate, 3) == 0.008
        assert tot.atc_rate == pytest.approx(0.0079889, abs=1e-7)
        assert round(tot.ctr, 3) == 0.015 and round(tot.purchase_rate, 3) == 0.001

    def test_published_arm_rates(self):
        arms = arm_table(rows_from_published())
        assert list(arms) == ["CP", "CC", "DC", "VR"]
        assert round(arms["CP"].atc_rate, 3) == 0.011
        assert {s: round(a.ctr, 3) for s, a in arms.items()} == {"CP": 0.017, "CC": 0.011, "DC": 0.010, "VR": 0.020}
        assert round(arms["DC"].atc_rate, 3) == 0.004 and round(arms["VR"].atc_rate, 3) == 0.009
        # the published CC ATC rate (0.008) does not match its own counts: 665 / 88,757 = 0.00749
        assert round(arms["CC"].atc_rate, 3) == 0.007

    def test_single_row_identity(self):
        arms = arm_table([{"strategy": "DC", "views": 7, "clicks": 3, "atc": 2, "purchases": 1}])
        a = arms["DC"]
        assert (a.bundles, a.views, a.clicks, a.atc, a.purchases) == (1, 7, 3, 2, 1)
        assert a.atc_rate == 2 / 7

    def test_zero_views_gives_missing_rates(self):
        a = arm_table([{"strategy": "CP", "views": 0, "clicks": 0, "atc": 1, "purchases": 0}])["CP"]
        assert a.ctr is None and a.atc_rate is None and a.purchase_rate is None

    def test_negative_count(self):
        with pytest.raises(ValueError):
            arm_table([{"strategy": "CP", "views": -1, "clicks": 0, "atc": 0, "purchases": 0}])

    def test_csv(self, tmp_path):
        write_arm_table(published_arms(), tmp_path / "arms.csv")
        rows = read_rows(tmp_path / "arms.csv")
        assert [r["strategy"] for r in rows] == ["CP", "CC", "DC", "VR", "total"]
        assert int(rows[-1]["views"]) == 356368


class TestProportionTest:
    def test_identical(self):
        assert pairwise_proportion_test((50, 1000), (50, 1000)) == 1.0

    def test_cp_vs_cc(self):
        p = pairwise_proportion_test((1050, 94458), (665, 88757))
        assert p < 0.001
        assert p == pytest.approx(8e-16, rel=0.5)

    def test_all_published_atc_pairs_significant(self):
        for a, b, p in pairwise_tests(published_arms(), "atc"):
            assert p < 0.001, (a, b)

    def test_published_purchase_column_needs_continuity(self):
        plain = {(a, b): p for a, b, p in pairwise_tests(published_arms(), "purchases")}
        corrected = {(a, b): p for a, b, p in pairwise_tests(published_arms(), "purchases", continuity=True)}
        assert round(corrected[("CP", "VR")], 3) == 0.054
        assert round(corrected[("CC", "VR")], 3) == 0.003
        assert round(plain[("CP", "VR")], 3) == 0.048
        assert round(plain[("CC", "VR")], 3) == 0.002
        for pair in [("CP", "CC"), ("CP", "DC"), ("CC", "DC"), ("DC", "VR")]:
            assert corrected[pair] < 0.001

    @pytest.mark.parametrize("a,b", [((51, 1000), (49, 1000)), ((1050, 94458), (665, 88757)), ((3, 20), (9, 25))])
    def test_statsmodels_oracle(self, a, b):
        _, ref = proportions_ztest([a[0], b[0]], [a[1], b[1]])
        assert pairwise_proportion_test(a, b) == pytest.approx(ref, rel=1e-10)

    def test_continuity_reduces_evidence(self):
        assert pairwise_proportion_test((51, 1000), (49, 1000), continuity=True) > pairwise_proportion_test(
            (51, 1000), (49, 1000))

    def test_degenerate_pool(self):
        assert pairwise_proportion_test((0, 10), (0, 20)) == 1.0

    @pytest.mark.parametrize("a,b", [((11, 10), (1, 10)), ((1, 0), (1, 10)), ((-1, 5), (1, 5))])
    def test_contract(self, a, b):
        with pytest.raises(ValueError):
            pairwise_proportion_test(a, b)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 500), st.integers(1, 500), st.data())
    def test_symmetric_and_bounded(self, n1, n2, data):
        x1 = data.draw(st.integers(0, n1))
        x2 = data.draw(st.integers(0, n2))
        p = pairwise_proportion_test((x1, n1), (x2, n2))
        assert 0.0 <= p <= 1.0
        assert p == pairwise_proportion_test((x2, n2), (x1, n1))

    def test_monotone_in_difference(self):
        ps = [pairwise_proportion_test((50, 1000), (50 + d, 1000)) for d in range(0, 40, 5)]
        assert all(a > b for a, b in zip(ps, ps[1:]))

    def test_write_pairwise(self, tmp_path):
        write_pairwise(pairwise_tests(published_arms()), tmp_path / "p.csv")
        rows = read_rows(tmp_path / "p.csv")
        assert len(rows) == 6


class TestAnova:
    def test_hand_worked(self):
        # groups {1,2,3}, {4,5,6}, {7,8,9}: SSB = 54, SSW = 6, F = (54/2)/(6/6) = 27
        F, p = one_way_anova([[1, 2, 3], [4, 5, 6], [7, 8, 9]])
        assert F == pytest.approx(27.0, abs=1e-12)
        assert p == pytest.approx(sps.f.sf(27.0, 2, 6), rel=1e-12)

    def test_matches_scipy(self):
        rng = np.random.default_rng(0)
        groups = [rng.normal(m, 1, size=n) for m, n in ((0, 10), (0.3, 14), (-0.2, 9), (0.1, 20))]
        F, p = one_way_anova(groups)
        ref = sps.f_oneway(*groups)
        assert F == pytest.approx(ref.statistic, rel=1e-12) and p == pytest.approx(ref.pvalue, rel=1e-10)

    def test_identical_arms(self):
        F, p = one_way_anova([[1.0, 2.0, 3.0]] * 3)
        assert F == pytest.approx(0.0, abs=1e-12) and p == pytest.approx(1.0, abs=1e-12)

    def test_single_group(self):
        with pytest.raises(ValueError):
            one_way_anova([[1, 2]])

    def test_balance_table(self, tmp_path):
        rows = [{"arm": a, "visits": v, "spend": s} for a, v, s in
                [("CP", 1, 10), ("CP", 2, 12), ("CP", 3, 11), ("CC", 4, 9), ("CC", 5, 13), ("CC", 6, 10),
                 ("VR", 7, 11), ("VR", 8, 10), ("VR", 9, 12)]]
        table = balance_table(rows, ["visits", "spend"])
        visits = table[0]
        assert visits.means == {"CC": 5.0, "CP": 2.0, "VR": 8.0}
        assert visits.sds["CP"] == 1.0
        assert visits.f_stat == pytest.approx(27.0)
        write_balance(table, tmp_path / "b.csv")
        assert len(read_rows(tmp_path / "b.csv")) == 2

    def test_balance_needs_two_arms(self):
        with pytest.raises(ValueError):
            balance_table([{"arm": "CP", "x": 1}, {"arm": "CP", "x": 2}], ["x"])
