"""Candidate bundle generation for the four strategies.

CP  add-on most often co-purchased with the focal product
CC  strongest complement in another category of the same department
DC  strongest complement in another department
VR  strongest substitute in the search space (an "imperfect substitute")
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from .catalog import Catalog
from .ingestion import PURCHASE, PairStats
from .scoring import NeighborQuery, Scorer, UntrainedProductError

STRATEGIES = ("CP", "CC", "DC", "VR")
DEFAULT_DISCOUNT_PCT = 10.0


@dataclass(frozen=True)
class FeatureVector:
    hist_co_purchase_rate: float
    price_1: float
    price_2: float
    rel_price_interaction: float
    hist_purchase_rate_1: float
    hist_purchase_rate_2: float
    rating_1: float
    rating_2: float
    same_brand: int
    same_category: int
    diff_category_same_aisle: int

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in COVARIATES], dtype=np.float64)


COVARIATES = tuple(f.name for f in fields(FeatureVector))
CONTINUOUS = COVARIATES[:8]
BINARY = COVARIATES[8:]


@dataclass
class BundleCandidate:
    focal_id: str
    addon_id: str
    strategy: str
    comp_score: float
    sub_score: float
    covariates: Optional[FeatureVector] = None
    standardized: Optional[Dict[str, float]] = None
    co_purchase_count: int = 0
    discount_pct: float = DEFAULT_DISCOUNT_PCT

    def __post_init__(self):
        if self.focal_id == self.addon_id:
            raise ValueError("a bundle needs two distinct products")
        if self.strategy not in STRATEGIES and self.strategy != "":
            raise ValueError(f"unknown strategy {self.strategy!r}")


class MissingAttributeError(ValueError):
    pass


def assemble_features(focal: str, addon: str, stats: PairStats, catalog: Catalog) -> FeatureVector:
    """Raw covariates for one pair; nothing is imputed."""
    p1, p2 = catalog[focal], catalog[addon]
    missing = [
        f"{label}.{name}"
        for label, p in (("focal", p1), ("addon", p2))
        for name in ("price", "rating")
        if getattr(p, name) is None
    ]
    if missing:
        raise MissingAttributeError(f"missing attributes for ({focal}, {addon}): {', '.join(missing)}")
    rates = None
    if p1.hist_purchase_rate is None or p2.hist_purchase_rate is None:
        rates = stats.purchase_rates()
    r1 = p1.hist_purchase_rate if p1.hist_purchase_rate is not None else rates.get(focal, 0.0)
    r2 = p2.hist_purchase_rate if p2.hist_purchase_rate is not None else rates.get(addon, 0.0)
    total = stats.basket_counts.get(PURCHASE, 0)
    gap = p1.price - p2.price
    same_cat = int(p1.category == p2.category)
    return FeatureVector(
        hist_co_purchase_rate=stats.co_purchase_count(focal, addon) / total if total else 0.0,
        price_1=float(p1.price),
        price_2=float(p2.price),
        rel_price_interaction=math.copysign(gap * gap, gap) if gap else 0.0,
        hist_purchase_rate_1=float(r1),
        hist_purchase_rate_2=float(r2),
        rating_1=float(p1.rating),
        rating_2=float(p2.rating),
        same_brand=int(p1.brand == p2.brand),
        same_category=same_cat,
        diff_category_same_aisle=int(not same_cat and p1.aisle == p2.aisle),
    )


@dataclass
class Standardizer:
    """Centers and scales the continuous covariates; binaries pass through."""

    means: Dict[str, float] = field(default_factory=dict)
    sds: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def fit(cls, vectors: Sequence[FeatureVector]) -> "Standardizer":
        if not vectors:
            raise ValueError("cannot standardize an empty candidate set")
        X = np.array([v.as_array() for v in vectors])
        means, sds = {}, {}
        for k, name in enumerate(COVARIATES):
            if name in CONTINUOUS:
                means[name] = float(X[:, k].mean())
                sd = float(X[:, k].std(ddof=1)) if len(vectors) > 1 else 0.0
                sds[name] = sd if sd > 0 else 1.0
        return cls(means, sds)

    def transform(self, v: FeatureVector) -> Dict[str, float]:
        out = {}
        for name in COVARIATES:
            x = float(getattr(v, name))
            if name in self.means:
                x = (x - self.means[name]) / self.sds[name]
            out[name] = x
        return out

    def to_dict(self) -> dict:
        return {"means": self.means, "sds": self.sds}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Standardizer":
        return cls(dict(d["means"]), dict(d["sds"]))


def _score_or_nan(scorer: Optional[Scorer], i: str, j: str) -> float:
    if scorer is None or i not in scorer.space.index or j not in scorer.space.index:
        return math.nan
    try:
        return scorer.score(i, j)
    except UntrainedProductError:
        return math.nan


class BundleGenerator:
    """Generates CP/CC/DC/VR candidates for focal products.

    ``purchase`` and ``search`` are scorers over the two spaces.
    """

    def __init__(self, purchase: Scorer, search: Scorer, catalog: Catalog, stats: PairStats,
                 discount_pct: float = DEFAULT_DISCOUNT_PCT):
        self.purchase = purchase
        self.search = search
        self.catalog = catalog
        self.stats = stats
        self.discount_pct = discount_pct
        self._by_name: Dict[str, set] = {}
        for pid, p in catalog.items():
            self._by_name.setdefault(p.name, set()).add(pid)

    def _candidate(self, focal: str, addon: str, strategy: str) -> BundleCandidate:
        return BundleCandidate(
            focal_id=focal,
            addon_id=addon,
            strategy=strategy,
            comp_score=_score_or_nan(self.purchase, focal, addon),
            sub_score=_score_or_nan(self.search, focal, addon),
            co_purchase_count=self.stats.co_purchase_count(focal, addon),
            discount_pct=self.discount_pct,
        )

    def generate_cp(self, focal: str) -> Optional[BundleCandidate]:
        """Top co-purchase partner; ties go to higher complementarity, then id."""
        partners = {p: c for p, c in self.stats.partners(focal).items() if c > 0 and p in self.catalog}
        if not partners:
            return None
        best = max(partners.values())
        tied = [p for p, c in partners.items() if c == best]

        def comp(p):
            s = _score_or_nan(self.purchase, focal, p)
            return -math.inf if math.isnan(s) else s

        addon = min(tied, key=lambda p: (-comp(p), p))
        return self._candidate(focal, addon, "CP")

    def _top(self, scorer: Scorer, focal: str, k: int, constraint: str, exclude=frozenset()):
        if focal not in scorer.space.index:
            return []
        try:
            return scorer.top_k(NeighborQuery(focal, k, scorer.space.space_kind, constraint, frozenset(exclude)))
        except UntrainedProductError:
            return []

    def generate_cc(self, focal: str, cp_addon: Optional[str] = None) -> Optional[BundleCandidate]:
        ranked = self._top(self.purchase, focal, 2, "same_department_diff_category")
        ranked = [pid for pid, _ in ranked if pid != cp_addon]
        return self._candidate(focal, ranked[0], "CC") if ranked else None

    def generate_dc(self, focal: str) -> Optional[BundleCandidate]:
        ranked = self._top(self.purchase, focal, 1, "diff_department")
        return self._candidate(focal, ranked[0][0], "DC") if ranked else None

    def vr_exclusions(self, focal: str) -> frozenset:
        return frozenset(self._by_name.get(self.catalog[focal].name, ()))

    def generate_vr(self, focal: str) -> Optional[BundleCandidate]:
        ranked = self._top(self.search, focal, 1, "none", self.vr_exclusions(focal))
        return self._candidate(focal, ranked[0][0], "VR") if ranked else None

    def for_focal(self, focal: str, strategies: Iterable[str] = STRATEGIES) -> List[BundleCandidate]:
        strategies = set(strategies)
        out = []
        cp = self.generate_cp(focal)
        if cp is not None and "CP" in strategies:
            out.append(cp)
        if "CC" in strategies:
            cc = self.generate_cc(focal, cp.addon_id if cp is not None else None)
            if cc is not None:
                out.append(cc)
        if "DC" in strategies:
            dc = self.generate_dc(focal)
            if dc is not None:
                out.append(dc)
        if "VR" in strategies:
            vr = self.generate_vr(focal)
            if vr is not None:
                out.append(vr)
        return out

    def generate(self, focals: Iterable[str], strategies: Iterable[str] = STRATEGIES) -> List[BundleCandidate]:
        strategies = tuple(strategies)
        out: List[BundleCandidate] = []
        for f in focals:
            out.extend(self.for_focal(f, strategies))
        return out


def featurize(
    candidates: List[BundleCandidate], stats: PairStats, catalog: Catalog, standardizer: Optional[Standardizer] = None
) -> Standardizer:
    """Attach raw and standardized covariates in place.

    Without a ``standardizer`` one is fitted on ``candidates`` and returned.
    """
    if any(p.hist_purchase_rate is None for p in catalog.values()):
        catalog = catalog.with_purchase_rates(stats.purchase_rates())
    for c in candidates:
        c.covariates = assemble_features(c.focal_id, c.addon_id, stats, catalog)
    if standardizer is None:
        standardizer = Standardizer.fit([c.covariates for c in candidates])
    for c in candidates:
        c.standardized = standardizer.transform(c.covariates)
    return standardizer


Predicate = Callable[[BundleCandidate], bool]


def apply_filters(candidates: Iterable[BundleCandidate], predicates: Sequence[Predicate] = ()) -> List[BundleCandidate]:
    return [c for c in candidates if all(p(c) for p in predicates)]


def margin_predicate(catalog: Catalog) -> Predicate:
    """Keep bundles whose combined margin stays positive after the add-on discount.

    Margins are per-unit currency amounts from the catalog's ``margin``
    column; a bundle with either margin missing is dropped.
    """
    if not any(p.margin is not None for p in catalog.values()):
        raise ValueError("catalog has no margin column")

    def keep(c: BundleCandidate) -> bool:
        f, a = catalog[c.focal_id], catalog[c.addon_id]
        if f.margin is None or a.margin is None or a.price is None:
            return False
        return f.margin + a.margin - a.price * c.discount_pct / 100.0 > 0

    return keep


def top_focal_by_views(stats: PairStats, n: int, catalog: Optional[Catalog] = None) -> List[str]:
    ranked = sorted(stats.views, key=lambda p: (-stats.views[p], -stats.purchases.get(p, 0), p))
    if catalog is not None:
        ranked = [p for p in ranked if p in catalog]
    return ranked[:n]


# ---------------------------------------------------------------- CSV


def write_candidates(
    candidates: Sequence[BundleCandidate],
    catalog: Catalog,
    path: Union[str, Path],
    standardizer: Optional[Standardizer] = None,
    header: Optional[str] = None,
) -> None:
    """One row per candidate; the standardizer goes to ``<path>.scaling.json``."""
    cols = [
        "focal_id", "addon_id", "strategy", "focal_aisle", "addon_aisle", "focal_category", "addon_category",
        "comp_score", "sub_score", "co_purchase_count", "discount_pct",
    ] + [f"raw_{n}" for n in COVARIATES] + [f"std_{n}" for n in COVARIATES]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for c in candidates:
            f, a = catalog[c.focal_id], catalog[c.addon_id]
            raw = asdict(c.covariates) if c.covariates is not None else {}
            std = c.standardized or {}
            w.writerow(
                [c.focal_id, c.addon_id, c.strategy, f.aisle, a.aisle, f.category, a.category,
                 repr(c.comp_score), repr(c.sub_score), c.co_purchase_count, repr(c.discount_pct)]
                + [repr(raw[n]) if n in raw else "" for n in COVARIATES]
                + [repr(std[n]) if n in std else "" for n in COVARIATES]
            )
    if standardizer is not None:
        Path(str(path) + ".scaling.json").write_text(json.dumps(standardizer.to_dict(), indent=2, sort_keys=True) + "\n")


def read_candidate_rows(path: Union[str, Path]) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def candidate_from_row(row: Mapping[str, str]) -> BundleCandidate:
    raw = {n: row.get(f"raw_{n}", "") for n in COVARIATES}
    std = {n: row.get(f"std_{n}", "") for n in COVARIATES}
    cov = None
    if all(v not in ("", None) for v in raw.values()):
        cov = FeatureVector(**{n: (int(float(v)) if n in BINARY else float(v)) for n, v in raw.items()})
    return BundleCandidate(
        focal_id=row["focal_id"],
        addon_id=row["addon_id"],
        strategy=row.get("strategy", "") or "",
        comp_score=float(row["comp_score"]),
        sub_score=float(row["sub_score"]),
        covariates=cov,
        standardized={n: float(v) for n, v in std.items()} if all(v not in ("", None) for v in std.values()) else None,
        co_purchase_count=int(row.get("co_purchase_count") or 0),
        discount_pct=float(row.get("discount_pct") or DEFAULT_DISCOUNT_PCT),
    )
