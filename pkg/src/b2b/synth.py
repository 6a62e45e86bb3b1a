"""Synthetic clickstream with planted complement and substitute blocks.

Complement blocks are groups of products bought together; each block sits in
one department and spreads over several categories.  Substitute blocks are
groups of products from a single category that get browsed together without
being bought.  The generator emits the ground-truth block membership so
tests can check that trained embeddings recover it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Dict, List, Union

import numpy as np

from .catalog import Catalog, Product, write_catalog


@dataclass(frozen=True)
class PlantedStructure:
    complement_blocks: int = 2
    complement_size: int = 10
    substitute_blocks: int = 2
    substitute_size: int = 10
    departments: int = 4
    aisles_per_department: int = 3
    categories_per_aisle: int = 3
    purchases_per_session: tuple = (2, 4)
    views_per_session: tuple = (2, 5)
    noise_purchase_prob: float = 0.2
    noise_view_prob: float = 0.5


@dataclass
class SyntheticCorpus:
    events: List[dict]
    catalog: Catalog
    truth: Dict[str, List[List[str]]] = field(default_factory=dict)

    def write(self, out_dir: Union[str, Path]) -> Dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"events": out / "events.jsonl", "catalog": out / "catalog.csv", "truth": out / "truth.json"}
        with open(paths["events"], "w", encoding="utf-8") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")
        write_catalog(self.catalog, paths["catalog"])
        paths["truth"].write_text(json.dumps(self.truth, indent=2, sort_keys=True) + "\n")
        return paths


def make_synthetic_corpus(
    seed: int = 7,
    n_products: int = 200,
    n_sessions: int = 5000,
    planted_structure: PlantedStructure = PlantedStructure(),
) -> SyntheticCorpus:
    ps = planted_structure
    if n_products < 4:
        raise ValueError("n_products must be >= 4")
    planted = ps.complement_blocks * ps.complement_size + ps.substitute_blocks * ps.substitute_size
    if planted > n_products:
        raise ValueError(f"{planted} planted products do not fit in {n_products}")
    rng = np.random.default_rng(seed)

    depts = [f"D{d}" for d in range(ps.departments)]
    aisles = {d: [f"{d}-A{a}" for a in range(ps.aisles_per_department)] for d in depts}
    cats = {a: [f"{a}-C{c}" for c in range(ps.categories_per_aisle)] for d in depts for a in aisles[d]}
    dept_cats = {d: [c for a in aisles[d] for c in cats[a]] for d in depts}
    cat_parent = {c: (d, a) for d in depts for a in aisles[d] for c in cats[a]}
    all_cats = [c for d in depts for c in dept_cats[d]]

    ids = [f"P{i:04d}" for i in range(n_products)]
    category: Dict[str, str] = {}
    comp_blocks: List[List[str]] = []
    sub_blocks: List[List[str]] = []
    cursor = 0
    for b in range(ps.complement_blocks):
        dept = depts[b % len(depts)]
        block = ids[cursor : cursor + ps.complement_size]
        cursor += ps.complement_size
        for k, pid in enumerate(block):
            category[pid] = dept_cats[dept][k % len(dept_cats[dept])]
        comp_blocks.append(block)
    for b in range(ps.substitute_blocks):
        dept = depts[(b + ps.complement_blocks) % len(depts)]
        cat = dept_cats[dept][b % len(dept_cats[dept])]
        block = ids[cursor : cursor + ps.substitute_size]
        cursor += ps.substitute_size
        for pid in block:
            category[pid] = cat
        sub_blocks.append(block)
    background = ids[cursor:]
    for pid in background:
        category[pid] = all_cats[int(rng.integers(len(all_cats)))]

    products = []
    for i, pid in enumerate(ids):
        d, a = cat_parent[category[pid]]
        products.append(
            Product(
                product_id=pid,
                name=f"Product {i}",
                department=d,
                aisle=a,
                category=category[pid],
                brand=f"B{int(rng.integers(12))}",
                price=round(float(np.exp(rng.normal(1.8, 0.7))), 2),
                rating=round(float(rng.uniform(3.0, 5.0)), 1),
            )
        )
    catalog = Catalog(products)

    n_users = max(1, n_sessions // 3)
    t0 = datetime(2018, 1, 1, tzinfo=timezone.utc)
    clock: Dict[int, datetime] = {}
    events: List[dict] = []
    for s in range(n_sessions):
        user = int(rng.integers(n_users))
        # sessions of one user are separated by hours, well past any gap rule
        t = clock.get(user, t0 + timedelta(minutes=int(rng.integers(0, 600)))) + timedelta(hours=int(rng.integers(2, 48)))
        uid = f"U{user:05d}"
        bought: List[str] = []
        if comp_blocks:
            block = comp_blocks[int(rng.integers(len(comp_blocks)))]
            k = int(rng.integers(ps.purchases_per_session[0], ps.purchases_per_session[1] + 1))
            bought = list(rng.choice(block, size=min(k, len(block)), replace=False))
        if background and rng.random() < ps.noise_purchase_prob:
            extra = background[int(rng.integers(len(background)))]
            if extra not in bought:
                bought.append(extra)
        browsed: List[str] = []
        if sub_blocks:
            block = sub_blocks[int(rng.integers(len(sub_blocks)))]
            m = int(rng.integers(ps.views_per_session[0], ps.views_per_session[1] + 1))
            browsed = [p for p in rng.choice(block, size=min(m, len(block)), replace=False) if p not in bought]
        if background and rng.random() < ps.noise_view_prob:
            extra = background[int(rng.integers(len(background)))]
            if extra not in bought and extra not in browsed:
                browsed.append(extra)
        for pid in browsed + bought:
            t += timedelta(seconds=int(rng.integers(20, 300)))
            events.append({"user_id": uid, "timestamp": t.isoformat(), "product_id": str(pid), "action": "view"})
        for pid in bought:
            t += timedelta(seconds=int(rng.integers(20, 120)))
            units = int(rng.integers(1, 3))
            events.append(
                {
                    "user_id": uid,
                    "timestamp": t.isoformat(),
                    "product_id": str(pid),
                    "action": "purchase",
                    "units": units,
                    "price_paid": catalog[str(pid)].price,
                }
            )
        clock[user] = t
    truth = {
        "complement_blocks": [[str(p) for p in b] for b in comp_blocks],
        "substitute_blocks": [[str(p) for p in b] for b in sub_blocks],
    }
    return SyntheticCorpus(events, catalog, truth)
