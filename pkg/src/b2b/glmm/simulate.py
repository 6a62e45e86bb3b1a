"""Simulate bundle outcomes from a known varying-slopes logistic model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.special import expit

from ..bundles import BINARY, CONTINUOUS, COVARIATES, STRATEGIES, BundleCandidate
from .model import BundleObservation

# Per-SD effects: reported coefficients times the covariate SDs of the
# bundle summary table (relative price interaction is already unit-SD).
REFERENCE_GAMMA: Dict[str, float] = {
    "hist_co_purchase_rate": 0.066 * 0.009,
    "price_1": -0.015 * 12.811,
    "price_2": -0.022 * 11.776,
    "rel_price_interaction": 0.167,
    "hist_purchase_rate_1": -0.905 * 0.026,
    "hist_purchase_rate_2": 2.216 * 0.033,
    "rating_1": 0.100 * 0.415,
    "rating_2": -0.037 * 0.390,
    "same_brand": 0.356,
    "same_category": 0.286,
    "diff_category_same_aisle": 0.437,
}
BINARY_RATES = {"same_brand": 0.301, "same_category": 0.401, "diff_category_same_aisle": 0.196}


@dataclass
class Truth:
    mu: np.ndarray = field(default_factory=lambda: np.array([-4.0, 0.308, 0.171]))
    sd: np.ndarray = field(default_factory=lambda: np.array([0.30, 0.21, 0.06]))
    corr: np.ndarray = field(default_factory=lambda: np.eye(3))
    gamma: Dict[str, float] = field(default_factory=lambda: dict(REFERENCE_GAMMA))

    @property
    def Sigma(self) -> np.ndarray:
        return self.corr * np.outer(self.sd, self.sd)


@dataclass
class SimulatedData:
    observations: List[BundleObservation]
    aisle_effects: Dict[str, np.ndarray]
    truth: Truth


def draw_covariates(rng: np.random.Generator) -> Dict[str, float]:
    out = {name: float(rng.normal()) for name in CONTINUOUS}
    same_brand = int(rng.random() < BINARY_RATES["same_brand"])
    same_cat = int(rng.random() < BINARY_RATES["same_category"])
    # diff-category-same-aisle is only possible when categories differ
    p_diff = BINARY_RATES["diff_category_same_aisle"] / (1.0 - BINARY_RATES["same_category"])
    diff_cat = int(not same_cat and rng.random() < p_diff)
    out.update(same_brand=same_brand, same_category=same_cat, diff_category_same_aisle=diff_cat)
    return out


def simulate_bundle_data(
    seed: int,
    n_aisles: int = 20,
    bundles_per_aisle: int = 300,
    truth: Optional[Truth] = None,
    mean_views: float = 150.0,
    bundles_per_focal: int = 4,
) -> SimulatedData:
    """Bundles grouped into focal products, focal products into aisles.

    Scores and continuous covariates are standard normal; binaries follow
    the reference rates.  Views per bundle are ``1 + Poisson(mean_views - 1)``.
    """
    truth = truth or Truth()
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(truth.Sigma + 1e-15 * np.eye(3))
    obs: List[BundleObservation] = []
    effects: Dict[str, np.ndarray] = {}
    for k in range(n_aisles):
        aisle = f"aisle{k:02d}"
        coef = truth.mu + chol @ rng.normal(size=3)
        effects[aisle] = coef
        for b in range(bundles_per_aisle):
            focal = f"{aisle}-f{b // bundles_per_focal:03d}"
            addon = f"{aisle}-a{b:04d}"
            comp, sub = float(rng.normal()), float(rng.normal())
            w = draw_covariates(rng)
            eta = coef[0] + coef[1] * comp + coef[2] * sub + sum(truth.gamma[n] * w[n] for n in truth.gamma)
            views = 1 + int(rng.poisson(mean_views - 1))
            succ = int(rng.binomial(views, expit(eta)))
            cand = BundleCandidate(focal, addon, STRATEGIES[b % len(STRATEGIES)], comp, sub, standardized=w)
            obs.append(BundleObservation(cand, aisle, succ, views - succ))
    return SimulatedData(obs, effects, truth)


def simulate_outcomes(
    candidates: Sequence[BundleCandidate],
    aisle_of: Callable[[str], str],
    seed: int,
    truth: Optional[Truth] = None,
    mean_views: float = 40.0,
) -> List[BundleObservation]:
    """Outcome counts for real candidates (demo data for the pipeline).

    Each focal aisle gets its own draw of ``(alpha, beta_b, beta_s)``;
    candidates with missing scores or covariates are skipped.
    """
    truth = truth or Truth()
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(truth.Sigma + 1e-15 * np.eye(3))
    coefs: Dict[str, np.ndarray] = {}
    out = []
    for c in candidates:
        if c.standardized is None or not np.isfinite([c.comp_score, c.sub_score]).all():
            continue
        aisle = aisle_of(c.focal_id)
        if aisle not in coefs:
            coefs[aisle] = truth.mu + chol @ rng.normal(size=3)
        a, bb, bs = coefs[aisle]
        eta = a + bb * c.comp_score + bs * c.sub_score + sum(truth.gamma[n] * c.standardized[n] for n in COVARIATES)
        views = 1 + int(rng.poisson(mean_views - 1))
        succ = int(rng.binomial(views, expit(eta)))
        out.append(BundleObservation(c, aisle, succ, views - succ))
    return out
