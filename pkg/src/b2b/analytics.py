"""Experiment bookkeeping: arm KPIs, proportion tests, covariate balance."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats as sps

from .bundles import STRATEGIES

COUNTS = ("views", "clicks", "atc", "purchases")


@dataclass
class ArmStats:
    strategy: str
    bundles: int = 0
    views: int = 0
    clicks: int = 0
    atc: int = 0
    purchases: int = 0

    def _rate(self, count: int) -> Optional[float]:
        return count / self.views if self.views > 0 else None

    @property
    def ctr(self) -> Optional[float]:
        return self._rate(self.clicks)

    @property
    def atc_rate(self) -> Optional[float]:
        return self._rate(self.atc)

    @property
    def purchase_rate(self) -> Optional[float]:
        return self._rate(self.purchases)


def arm_table(outcome_rows: Iterable[Mapping[str, object]]) -> Dict[str, ArmStats]:
    """Sum counts per strategy; every rate is a count over views.

    Each row is one bundle.  Arms come back in the canonical CP/CC/DC/VR
    order followed by any other labels alphabetically.
    """
    arms: Dict[str, ArmStats] = {}
    for row in outcome_rows:
        s = str(row["strategy"])
        arm = arms.setdefault(s, ArmStats(s))
        arm.bundles += 1
        for name in COUNTS:
            v = int(row[name])
            if v < 0:
                raise ValueError(f"negative {name} count in arm {s}")
            setattr(arm, name, getattr(arm, name) + v)
    order = [s for s in STRATEGIES if s in arms] + sorted(set(arms) - set(STRATEGIES))
    return {s: arms[s] for s in order}


def total_row(arms: Mapping[str, ArmStats]) -> ArmStats:
    tot = ArmStats("total")
    for a in arms.values():
        tot.bundles += a.bundles
        for name in COUNTS:
            setattr(tot, name, getattr(tot, name) + getattr(a, name))
    return tot


def pairwise_proportion_test(
    arm_a: Tuple[int, int], arm_b: Tuple[int, int], continuity: bool = False
) -> float:
    """Two-sided two-sample z-test for proportions with pooled variance."""
    (x1, n1), (x2, n2) = arm_a, arm_b
    for x, n in ((x1, n1), (x2, n2)):
        if n <= 0:
            raise ValueError("trials must be positive")
        if x < 0 or x > n:
            raise ValueError(f"successes {x} outside [0, {n}]")
    p1, p2 = x1 / n1, x2 / n2
    pooled = (x1 + x2) / (n1 + n2)
    var = pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2)
    diff = abs(p1 - p2)
    if continuity:
        diff = max(diff - 0.5 * (1.0 / n1 + 1.0 / n2), 0.0)
    if var == 0.0:
        return 1.0
    z = diff / math.sqrt(var)
    return float(min(1.0, 2.0 * sps.norm.sf(z)))


def pairwise_tests(
    arms: Mapping[str, ArmStats], metric: str = "atc", continuity: bool = False
) -> List[Tuple[str, str, float]]:
    """All arm pairs in table order: ``(a, b, p_value)``."""
    names = list(arms)
    out = []
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            pa = (getattr(arms[a], metric), arms[a].views)
            pb = (getattr(arms[b], metric), arms[b].views)
            out.append((a, b, pairwise_proportion_test(pa, pb, continuity)))
    return out


@dataclass
class BalanceRow:
    covariate: str
    means: Dict[str, float]
    sds: Dict[str, float]
    f_stat: float
    p_value: float


def one_way_anova(groups: Sequence[Sequence[float]]) -> Tuple[float, float]:
    """Classical one-way ANOVA F-test; returns ``(F, p)``."""
    groups = [np.asarray(g, dtype=float) for g in groups]
    if len(groups) < 2:
        raise ValueError("ANOVA needs at least two groups")
    n = sum(len(g) for g in groups)
    k = len(groups)
    if n <= k or any(len(g) == 0 for g in groups):
        raise ValueError("every group needs observations and n must exceed the number of groups")
    grand = np.concatenate(groups).mean()
    ss_between = sum(len(g) * (g.mean() - grand) ** 2 for g in groups)
    ss_within = sum(((g - g.mean()) ** 2).sum() for g in groups)
    df_b, df_w = k - 1, n - k
    if ss_within == 0.0:
        return (0.0, 1.0) if ss_between == 0.0 else (math.inf, 0.0)
    F = (ss_between / df_b) / (ss_within / df_w)
    return float(F), float(sps.f.sf(F, df_b, df_w))


def balance_table(
    rows: Iterable[Mapping[str, object]], covariates: Sequence[str], arm_key: str = "arm"
) -> List[BalanceRow]:
    """Means, SDs (ddof=1) and an ANOVA p-value per pre-period covariate."""
    by_arm: Dict[str, List[Mapping[str, object]]] = {}
    for r in rows:
        by_arm.setdefault(str(r[arm_key]), []).append(r)
    if len(by_arm) < 2:
        raise ValueError("balance table needs at least two arms")
    arms = sorted(by_arm)
    out = []
    for cov in covariates:
        groups = [np.array([float(r[cov]) for r in by_arm[a]]) for a in arms]
        F, p = one_way_anova(groups)
        means = {a: float(g.mean()) for a, g in zip(arms, groups)}
        sds = {a: float(g.std(ddof=1)) if len(g) > 1 else math.nan for a, g in zip(arms, groups)}
        out.append(BalanceRow(cov, means, sds, F, p))
    return out


# ---------------------------------------------------------------- CSV


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else repr(v)


def read_rows(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def write_arm_table(arms: Mapping[str, ArmStats], path: Union[str, Path], with_total: bool = True) -> None:
    rows = list(arms.values()) + ([total_row(arms)] if with_total else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "bundles", *COUNTS, "ctr", "atc_rate", "purchase_rate"])
        for a in rows:
            w.writerow([a.strategy, a.bundles, a.views, a.clicks, a.atc, a.purchases,
                        _fmt(a.ctr), _fmt(a.atc_rate), _fmt(a.purchase_rate)])


def write_pairwise(tests: Sequence[Tuple[str, str, float]], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm_a", "arm_b", "p_value"])
        for a, b, p in tests:
            w.writerow([a, b, repr(p)])


def write_balance(rows: Sequence[BalanceRow], path: Union[str, Path]) -> None:
    arms = list(rows[0].means) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["covariate", *(f"mean_{a}" for a in arms), *(f"sd_{a}" for a in arms), "F", "p_value"])
        for r in rows:
            w.writerow([r.covariate, *(repr(r.means[a]) for a in arms), *(repr(r.sds[a]) for a in arms),
                        repr(r.f_stat), repr(r.p_value)])
