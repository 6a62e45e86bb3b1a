from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats as sps

from ..bundles import BundleCandidate
from ..catalog import Catalog
from .model import HierarchicalFit, NonNestedError


@dataclass(frozen=True)
class AnovaResult:
    deviance_delta: float
    df: int
    p_value: float


def chi2_pvalue(deviance_delta: float, df: int) -> float:
    if df == 0:
        return 1.0
    return float(sps.chi2.sf(max(deviance_delta, 0.0), df))


def deviance_anova(fit_without_scores: HierarchicalFit, fit_with_scores: HierarchicalFit) -> AnovaResult:
    """Likelihood-ratio test of the larger model against the nested one."""
    small, big = fit_without_scores, fit_with_scores
    if small.spec != big.spec:
        raise NonNestedError(f"different specifications: {small.spec} vs {big.spec}")
    if small.data_key != big.data_key:
        raise NonNestedError("models were fitted on different data")
    if not set(small.covariates) <= set(big.covariates) or (small.include_scores and not big.include_scores):
        raise NonNestedError("the first model's terms are not a subset of the second's")
    if small.diagonal != big.diagonal:
        raise NonNestedError("different random-effect covariance structures")
    df = big.n_params - small.n_params
    delta = small.deviance - big.deviance
    return AnovaResult(float(delta), int(df), chi2_pvalue(delta, df))


def aggregate_by_aisle_pair(
    fit: HierarchicalFit, sampled_candidates: Sequence[BundleCandidate], catalog: Catalog
) -> Tuple[List[str], np.ndarray]:
    """Mean predicted probability per unordered aisle pair.

    Each orientation (focal aisle, add-on aisle) is averaged first; the
    cell is the mean of the orientations present.  Rows and columns are in
    alphabetical aisle order; cells without candidates are NaN.
    """
    sums: Dict[Tuple[str, str], List[float]] = defaultdict(list)
    for c in sampled_candidates:
        fa = catalog[c.focal_id].aisle
        aa = catalog[c.addon_id].aisle
        sums[(fa, aa)].append(fit.predict(c, fa))
    aisles = sorted({a for pair in sums for a in pair})
    idx = {a: i for i, a in enumerate(aisles)}
    mat = np.full((len(aisles), len(aisles)), np.nan)
    for a in aisles:
        for b in aisles:
            means = [float(np.mean(sums[k])) for k in ((a, b), (b, a)) if k in sums]
            if a == b:
                means = means[:1]
            if means:
                mat[idx[a], idx[b]] = float(np.mean(means))
    return aisles, mat


def write_heatmap(aisles: Sequence[str], mat: np.ndarray, path: Union[str, Path], header: Optional[str] = None) -> None:
    """Long-format CSV ``aisle_1,aisle_2,mean_pred_pct``; empty cells are left blank."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["aisle_1", "aisle_2", "mean_pred_pct"])
        for i, a in enumerate(aisles):
            for j, b in enumerate(aisles):
                v = mat[i, j]
                w.writerow([a, b, "" if math.isnan(v) else repr(100.0 * float(v))])


@dataclass(frozen=True)
class ZeroCoPurchaseRow:
    focal_aisle: str
    focal_category: str
    focal_id: str
    focal_name: str
    addon_category: str
    addon_id: str
    addon_name: str
    pred_prob: float
    rank: int


def zero_copurchase_report(
    fit: HierarchicalFit, candidates: Sequence[BundleCandidate], catalog: Catalog, top_per_aisle: int = 3
) -> List[ZeroCoPurchaseRow]:
    """Best never-co-purchased bundles per focal aisle, by predicted probability."""
    by_aisle: Dict[str, List[Tuple[float, BundleCandidate]]] = defaultdict(list)
    for c in candidates:
        if c.co_purchase_count != 0:
            continue
        fa = catalog[c.focal_id].aisle
        by_aisle[fa].append((fit.predict(c, fa), c))
    rows = []
    for aisle in sorted(by_aisle):
        ranked = sorted(by_aisle[aisle], key=lambda t: (-t[0], t[1].focal_id, t[1].addon_id))
        for rank, (p, c) in enumerate(ranked[:top_per_aisle], 1):
            f, a = catalog[c.focal_id], catalog[c.addon_id]
            rows.append(ZeroCoPurchaseRow(aisle, f.category, f.product_id, f.name, a.category, a.product_id, a.name, p, rank))
    return rows


def write_zero_copurchase(rows: Sequence[ZeroCoPurchaseRow], path: Union[str, Path], header: Optional[str] = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["focal_aisle", "rank", "category_1", "product_1", "category_2", "product_2", "pred_prob"])
        for r in rows:
            w.writerow([r.focal_aisle, r.rank, r.focal_category, r.focal_name, r.addon_category, r.addon_name, repr(r.pred_prob)])
