"""Product catalog with a strict Department > Aisle > Category tree."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, Iterator, Mapping, Optional

CATALOG_COLUMNS = ("product_id", "name", "department", "aisle", "category", "brand", "price", "rating")


class CatalogError(ValueError):
    """Raised on a malformed catalog or a broken hierarchy."""


class UnknownProductError(KeyError):
    """A product id has no catalog (or vocabulary) entry."""


@dataclass(frozen=True)
class Product:
    product_id: str
    name: str
    department: str
    aisle: str
    category: str
    brand: str
    price: Optional[float]
    rating: Optional[float]
    hist_purchase_rate: Optional[float] = None
    margin: Optional[float] = None


class Catalog(Mapping[str, Product]):
    """Read-only mapping of product id to :class:`Product`.

    Construction validates the hierarchy: a category maps to exactly one
    aisle and an aisle to exactly one department.
    """

    def __init__(self, products: Iterable[Product]):
        self._products: Dict[str, Product] = {}
        cat_to_aisle: Dict[str, str] = {}
        aisle_to_dept: Dict[str, str] = {}
        for p in products:
            if p.product_id in self._products:
                raise CatalogError(f"duplicate product_id {p.product_id!r}")
            if p.price is not None and p.price < 0:
                raise CatalogError(f"negative price for {p.product_id!r}")
            if p.rating is not None and not 0.0 <= p.rating <= 5.0:
                raise CatalogError(f"rating outside [0, 5] for {p.product_id!r}")
            prev = cat_to_aisle.setdefault(p.category, p.aisle)
            if prev != p.aisle:
                raise CatalogError(
                    f"category {p.category!r} appears under aisles {prev!r} and {p.aisle!r}"
                )
            prev = aisle_to_dept.setdefault(p.aisle, p.department)
            if prev != p.department:
                raise CatalogError(
                    f"aisle {p.aisle!r} appears under departments {prev!r} and {p.department!r}"
                )
            self._products[p.product_id] = p

    def __getitem__(self, product_id: str) -> Product:
        try:
            return self._products[product_id]
        except KeyError:
            raise UnknownProductError(f"no catalog entry for product {product_id!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._products)

    def __len__(self) -> int:
        return len(self._products)

    def with_purchase_rates(self, rates: Mapping[str, float]) -> "Catalog":
        """Fill ``hist_purchase_rate`` where the catalog leaves it empty."""
        return Catalog(
            p if p.hist_purchase_rate is not None else replace(p, hist_purchase_rate=float(rates.get(pid, 0.0)))
            for pid, p in self._products.items()
        )


def _opt_float(value: Optional[str]) -> Optional[float]:
    if value is None or value.strip() == "":
        return None
    out = float(value)
    if math.isnan(out):
        return None
    return out


def load_catalog(path: str | Path) -> Catalog:
    """Load a catalog CSV.

    Required header columns are ``CATALOG_COLUMNS``; ``hist_purchase_rate``
    and ``margin`` are read when present.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        missing = [c for c in CATALOG_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise CatalogError(f"catalog missing columns: {', '.join(missing)}")
        products = []
        for row in reader:
            products.append(
                Product(
                    product_id=row["product_id"],
                    name=row["name"],
                    department=row["department"],
                    aisle=row["aisle"],
                    category=row["category"],
                    brand=row["brand"],
                    price=_opt_float(row["price"]),
                    rating=_opt_float(row["rating"]),
                    hist_purchase_rate=_opt_float(row.get("hist_purchase_rate")),
                    margin=_opt_float(row.get("margin")),
                )
            )
    return Catalog(products)


def write_catalog(catalog: Catalog, path: str | Path) -> None:
    cols = list(CATALOG_COLUMNS)
    extra = [c for c in ("hist_purchase_rate", "margin") if any(getattr(p, c) is not None for p in catalog.values())]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols + extra)
        for pid in sorted(catalog):
            p = catalog[pid]
            row = [getattr(p, c) for c in cols + extra]
            writer.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
