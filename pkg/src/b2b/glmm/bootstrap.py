"""Cluster bootstrap for the bundle models."""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..bundles import COVARIATES
from .model import (
    HIERARCHICAL,
    BundleObservation,
    Design,
    HierarchicalFit,
    _data_key,
    build_design,
    fit_design,
    observed_information,
)

logger = logging.getLogger(__name__)

MAX_DROP_SHARE = 0.20


class BootstrapError(RuntimeError):
    pass


@dataclass
class BootstrapResult:
    """Percentile intervals from ``B`` cluster-resampled refits.

    ``estimate`` holds full-sample values; ``median``, ``lower`` and
    ``upper`` summarize the replicates.  Per-aisle arrays are indexed like
    ``aisles`` with columns ``(alpha, beta_comp, beta_sub)``.
    """

    B: int
    cluster_key: str
    aisles: List[str]
    aisle_estimate: np.ndarray
    aisle_median: np.ndarray
    aisle_lower: np.ndarray
    aisle_upper: np.ndarray
    param_names: List[str]
    param_estimate: np.ndarray
    param_median: np.ndarray
    param_lower: np.ndarray
    param_upper: np.ndarray
    dropped: int = 0
    replicates: np.ndarray = field(default=None, repr=False)

    def param_interval(self, name: str):
        j = self.param_names.index(name)
        return float(self.param_lower[j]), float(self.param_upper[j])

    def covers(self, values: Dict[str, float]) -> Dict[str, bool]:
        out = {}
        for name, v in values.items():
            lo, hi = self.param_interval(name)
            out[name] = bool(lo <= v <= hi)
        return out


def _param_vector(f: HierarchicalFit) -> np.ndarray:
    sds = np.sqrt(np.clip(np.diag(f.Sigma), 0.0, None))
    return np.concatenate([f.mu, [f.gamma[c] for c in f.covariates], sds])


def _param_names(f: HierarchicalFit) -> List[str]:
    return ["mu_alpha", "mu_beta_comp", "mu_beta_sub"] + list(f.covariates) + ["sd_alpha", "sd_beta_comp", "sd_beta_sub"]


def _resample(clusters, by_aisle, rng, resample_aisles) -> List[Tuple[int, str]]:
    """Draw ``(observation index, aisle label)`` pairs; ``None`` keeps the original aisle."""
    out: List[Tuple[int, str]] = []
    if resample_aisles:
        aisles = sorted(by_aisle)
        for j, a in enumerate(rng.integers(len(aisles), size=len(aisles))):
            name = aisles[a]
            members = by_aisle[name]
            for c in rng.integers(len(members), size=len(members)):
                out.extend((i, f"{name}#{j}") for i in clusters[members[c]])
    else:
        keys = sorted(clusters)
        for c in rng.integers(len(keys), size=len(keys)):
            out.extend((i, None) for i in clusters[keys[c]])
    return out


def _subdesign(full: Design, row_of: np.ndarray, drawn: List[Tuple[int, str]]) -> Design:
    """Rows of the full design for the drawn observations, regrouped by label."""
    labels = [full.aisles[full.group[row_of[i]]] if lab is None else lab for i, lab in drawn]
    aisles = sorted(set(labels))
    gidx = {a: k for k, a in enumerate(aisles)}
    group = np.array([gidx[lab] for lab in labels], dtype=np.int64)
    order = np.argsort(group, kind="stable")
    rows = row_of[np.array([i for i, _ in drawn], dtype=np.int64)][order]
    return Design(full.X[rows], list(full.names), full.y[rows], full.m[rows], group[order], aisles,
                  [full.clusters[r] for r in rows])


def _replicate(args):
    (observations, full, row_of, spec, covariates, include_scores, diagonal, start, seed_seq, resample_aisles,
     clusters, by_aisle) = args
    rng = np.random.default_rng(seed_seq)
    drawn = _resample(clusters, by_aisle, rng, resample_aisles)
    try:
        if spec == "fixed_aisle":
            # aisle dummies depend on the drawn aisle set
            sample = [observations[i] if lab is None else
                      BundleObservation(observations[i].candidate, lab, observations[i].successes, observations[i].failures)
                      for i, lab in drawn]
            design = build_design(sample, spec, covariates, include_scores)
        else:
            design = _subdesign(full, row_of, drawn)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            f = fit_design(design, spec, list(covariates), include_scores, diagonal, start=start)
    except Exception as exc:  # a failed refit is dropped and counted
        logger.debug("bootstrap replicate failed: %s", exc)
        return None
    if not f.converged:
        return None
    return f


def cluster_bootstrap(
    observations: Sequence[BundleObservation],
    spec: str = "varying_slopes",
    B: int = 1000,
    seed: int = 7,
    covariates: Sequence[str] = COVARIATES,
    include_scores: bool = True,
    diagonal: bool = False,
    resample_aisles: bool = False,
    workers: int = 1,
    base: Optional[HierarchicalFit] = None,
    level: float = 0.95,
) -> BootstrapResult:
    """Resample focal products with replacement and refit ``B`` times.

    With ``resample_aisles=True`` aisles are drawn first and focal products
    within each drawn aisle second, which also propagates between-aisle
    sampling variation into the population-level parameters; per-aisle
    intervals are only reported in the default focal-only mode.
    Replicate ``b`` uses the ``b``-th child of ``SeedSequence(seed)``, so the
    result does not depend on ``workers``.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    if B < 100:
        warnings.warn(f"B={B} replicates is too few for stable percentile intervals")
    covariates = list(covariates)
    design = build_design(observations, spec, covariates, include_scores)
    if base is None:
        base = fit_design(design, spec, covariates, include_scores, diagonal)
    if spec in HIERARCHICAL and base.information is None and base.data_key == _data_key(design):
        base = replace(base, information=observed_information(design, base))
    clusters: Dict[str, List[int]] = {}
    for i, o in enumerate(observations):
        clusters.setdefault(o.cluster, []).append(i)
    by_aisle: Dict[str, List[str]] = {}
    for key in sorted(clusters):
        by_aisle.setdefault(observations[clusters[key][0]].aisle, []).append(key)
    row_of = np.empty(len(observations), dtype=np.int64)
    row_of[design.source] = np.arange(len(observations))

    seeds = np.random.SeedSequence(seed).spawn(B)
    jobs = [
        (observations, design, row_of, spec, covariates, include_scores, diagonal, base, s, resample_aisles,
         clusters, by_aisle)
        for s in seeds
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            fits = list(pool.map(_replicate, jobs))
    else:
        fits = [_replicate(j) for j in jobs]

    dropped = sum(f is None for f in fits)
    if dropped > MAX_DROP_SHARE * B:
        raise BootstrapError(f"{dropped} of {B} bootstrap replicates failed to converge")
    if dropped:
        logger.warning("dropped %d non-converged bootstrap replicates", dropped)
    good = [f for f in fits if f is not None]

    K = len(base.aisles)
    aisle_reps = np.full((len(good), K, 3), np.nan)
    if not resample_aisles:
        for r, f in enumerate(good):
            idx = f.aisle_index
            for k, a in enumerate(base.aisles):
                if a in idx:
                    aisle_reps[r, k] = f.varying[idx[a]]
    params = np.array([_param_vector(f) for f in good])
    tail = 100.0 * (1.0 - level) / 2.0

    def pct(arr, q):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return np.nanpercentile(arr, q, axis=0, method="inverted_cdf")

    return BootstrapResult(
        B=B,
        cluster_key="focal_id",
        aisles=list(base.aisles),
        aisle_estimate=base.varying.copy(),
        aisle_median=pct(aisle_reps, 50.0),
        aisle_lower=pct(aisle_reps, tail),
        aisle_upper=pct(aisle_reps, 100.0 - tail),
        param_names=_param_names(base),
        param_estimate=_param_vector(base),
        param_median=pct(params, 50.0),
        param_lower=pct(params, tail),
        param_upper=pct(params, 100.0 - tail),
        dropped=dropped,
        replicates=params,
    )
