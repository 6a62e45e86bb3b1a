"""Sessionize raw clickstream events into purchase and search baskets.

A session's *purchase basket* is the set of products bought in it; its
*search basket* is the set of products whose page was opened but which were
not bought in that session.  Baskets with fewer than two products carry no
co-occurrence signal and are kept out of the training stream, but every
session still contributes to :class:`PairStats`.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from itertools import combinations
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

from .catalog import Catalog, UnknownProductError

logger = logging.getLogger(__name__)

PURCHASE = "purchase"
SEARCH = "search"
VIEW = "view"
KINDS = (PURCHASE, SEARCH)
DEFAULT_SESSION_GAP = timedelta(minutes=30)


class MalformedEvent(ValueError):
    pass


@dataclass(frozen=True)
class SessionEvent:
    user_id: str
    timestamp: datetime
    product_id: str
    action: str
    session_id: Optional[str] = None
    units: int = 1
    price_paid: Optional[float] = None


@dataclass(frozen=True)
class Basket:
    session_id: str
    kind: str
    items: frozenset

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class Session:
    session_id: str
    user_id: str
    viewed: frozenset
    purchased: frozenset
    units: Dict[str, int] = field(default_factory=dict)

    @property
    def purchase(self) -> Basket:
        return Basket(self.session_id, PURCHASE, self.purchased)

    @property
    def search(self) -> Basket:
        return Basket(self.session_id, SEARCH, self.viewed - self.purchased)


@dataclass
class IngestResult:
    sessions: List[Session]
    rejected: int = 0

    def baskets(self, kind: str) -> List[Basket]:
        """Training baskets of one kind (size >= 2), ordered by session id."""
        out = []
        for s in self.sessions:
            b = s.purchase if kind == PURCHASE else s.search
            if len(b) >= 2:
                out.append(b)
        return out

    def all_baskets(self) -> List[Basket]:
        return sorted(self.baskets(PURCHASE) + self.baskets(SEARCH), key=lambda b: (b.session_id, b.kind))


def _parse_time(value) -> datetime:
    if isinstance(value, datetime):
        ts = value
    elif isinstance(value, (int, float)) and not isinstance(value, bool):
        ts = datetime.fromtimestamp(float(value), tz=timezone.utc)
    elif isinstance(value, str) and value:
        text = value[:-1] + "+00:00" if value.endswith("Z") else value
        ts = datetime.fromisoformat(text)
    else:
        raise MalformedEvent(f"bad timestamp {value!r}")
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def parse_event(record: Union[Mapping, SessionEvent]) -> SessionEvent:
    """Validate one raw record; raises :class:`MalformedEvent`."""
    if isinstance(record, SessionEvent):
        return record
    if not isinstance(record, Mapping):
        raise MalformedEvent("event is not an object")
    pid = record.get("product_id")
    user = record.get("user_id")
    if pid in (None, "") or user in (None, ""):
        raise MalformedEvent("missing product_id or user_id")
    if record.get("timestamp") in (None, ""):
        raise MalformedEvent("missing timestamp")
    try:
        ts = _parse_time(record["timestamp"])
    except (ValueError, OverflowError, OSError) as exc:
        raise MalformedEvent(str(exc)) from None
    action = record.get("action")
    if action not in (VIEW, PURCHASE):
        raise MalformedEvent(f"unknown action {action!r}")
    units = record.get("units", 1)
    if units is None:
        units = 1
    try:
        units = int(units)
    except (TypeError, ValueError):
        raise MalformedEvent(f"bad units {units!r}") from None
    if units < 1:
        raise MalformedEvent("units must be >= 1")
    price = record.get("price_paid")
    sid = record.get("session_id")
    return SessionEvent(
        user_id=str(user),
        timestamp=ts,
        product_id=str(pid),
        action=action,
        session_id=None if sid in (None, "") else str(sid),
        units=units,
        price_paid=None if price is None else float(price),
    )


def read_events(path: Union[str, Path]) -> Iterator[object]:
    """Yield decoded JSON-lines records; undecodable lines come through as ``None``."""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError:
                yield None


def ingest_sessions(events: Iterable, session_gap: timedelta = DEFAULT_SESSION_GAP) -> IngestResult:
    """Group events into sessions.

    Events are ordered by ``(user_id, timestamp)``.  A new session starts when
    the user has been inactive for at least ``session_gap`` or when the
    upstream ``session_id`` changes.  Bad records are counted, never raised.
    """
    rejected = 0
    parsed: List[Tuple[int, SessionEvent]] = []
    sid_owner: Dict[str, str] = {}
    for n, raw in enumerate(events):
        try:
            ev = parse_event(raw)
        except MalformedEvent as exc:
            rejected += 1
            logger.debug("rejected event %d: %s", n, exc)
            continue
        if ev.session_id is not None:
            owner = sid_owner.setdefault(ev.session_id, ev.user_id)
            if owner != ev.user_id:
                rejected += 1
                continue
        parsed.append((n, ev))
    if rejected:
        logger.warning("rejected %d malformed events", rejected)
    # input position breaks timestamp ties so ordering is fully determined
    parsed.sort(key=lambda t: (t[1].user_id, t[1].timestamp, t[0]))

    sessions: List[Session] = []
    cur: List[SessionEvent] = []
    seq: Dict[str, int] = defaultdict(int)

    def flush():
        if not cur:
            return
        first = cur[0]
        base = first.session_id if first.session_id is not None else first.user_id
        k = seq[base]
        seq[base] += 1
        if first.session_id is not None:
            sid = base if k == 0 else f"{base}.{k}"
        else:
            sid = f"{base}.{k}"
        viewed = frozenset(e.product_id for e in cur if e.action == VIEW)
        purchased = frozenset(e.product_id for e in cur if e.action == PURCHASE)
        units: Dict[str, int] = defaultdict(int)
        for e in cur:
            if e.action == PURCHASE:
                units[e.product_id] += e.units
        sessions.append(Session(sid, first.user_id, viewed, purchased, dict(units)))
        cur.clear()

    for _, ev in parsed:
        if cur:
            prev = cur[-1]
            if (
                ev.user_id != prev.user_id
                or ev.timestamp - prev.timestamp >= session_gap
                or ev.session_id != cur[0].session_id
            ):
                flush()
        cur.append(ev)
    flush()
    sessions.sort(key=lambda s: s.session_id)
    return IngestResult(sessions, rejected)


def _key(i: str, j: str) -> Tuple[str, str]:
    return (i, j) if i <= j else (j, i)


@dataclass
class PairStats:
    """Per-product and per-pair counts over all sessions.

    ``co_purchase`` is keyed by the lexicographically ordered pair, so
    lookups are symmetric by construction.
    """

    co_purchase: Dict[Tuple[str, str], int] = field(default_factory=dict)
    views: Dict[str, int] = field(default_factory=dict)
    purchases: Dict[str, int] = field(default_factory=dict)
    units: Dict[str, int] = field(default_factory=dict)
    basket_counts: Dict[str, int] = field(default_factory=lambda: {PURCHASE: 0, SEARCH: 0})
    _partners: Optional[Dict[str, Dict[str, int]]] = field(default=None, repr=False, compare=False)

    def co_purchase_count(self, i: str, j: str) -> int:
        return self.co_purchase.get(_key(i, j), 0)

    def partners(self, i: str) -> Dict[str, int]:
        """Co-purchase partners of ``i`` with nonzero counts."""
        if self._partners is None:
            idx: Dict[str, Dict[str, int]] = defaultdict(dict)
            for (a, b), c in self.co_purchase.items():
                idx[a][b] = c
                idx[b][a] = c
            self._partners = dict(idx)
        return self._partners.get(i, {})

    def known(self, pid: str) -> bool:
        return pid in self.views or pid in self.purchases

    def purchase_rates(self) -> Dict[str, float]:
        """Sessions purchasing a product over sessions viewing it, capped at 1."""
        out = {}
        for pid in set(self.views) | set(self.purchases):
            v = self.views.get(pid, 0)
            p = self.purchases.get(pid, 0)
            out[pid] = min(1.0, p / v) if v else (1.0 if p else 0.0)
        return out


def build_pair_stats(sessions: Iterable[Session]) -> PairStats:
    co: Counter = Counter()
    views: Counter = Counter()
    purchases: Counter = Counter()
    units: Counter = Counter()
    counts = {PURCHASE: 0, SEARCH: 0}
    for s in sessions:
        views.update(s.viewed)
        purchases.update(s.purchased)
        units.update(s.units)
        if s.purchased:
            counts[PURCHASE] += 1
        if s.viewed - s.purchased:
            counts[SEARCH] += 1
        for a, b in combinations(sorted(s.purchased), 2):
            co[(a, b)] += 1
    return PairStats(dict(co), dict(views), dict(purchases), dict(units), counts)


def co_purchase_rate(stats: PairStats, i: str, j: str) -> float:
    """Share of purchase baskets containing both ``i`` and ``j``."""
    if i == j:
        raise ValueError("co-purchase rate needs two distinct products")
    for pid in (i, j):
        if not stats.known(pid):
            raise UnknownProductError(f"no catalog entry for product {pid!r}")
    total = stats.basket_counts.get(PURCHASE, 0)
    if total == 0:
        return 0.0
    return stats.co_purchase_count(i, j) / total


def filter_vocabulary(
    baskets: Sequence[Basket], stats: PairStats, top_n: int
) -> Tuple[List[str], List[Basket]]:
    """Keep the ``top_n`` most viewed products and prune baskets to them.

    Ties are broken by purchase count, then by product id.
    """
    if top_n < 2:
        raise ValueError("top_n must be >= 2")
    products = set(stats.views) | set(stats.purchases)
    for b in baskets:
        products.update(b.items)
    if top_n > len(products):
        logger.warning("top_n=%d exceeds %d distinct products; keeping all", top_n, len(products))
    ranked = sorted(products, key=lambda p: (-stats.views.get(p, 0), -stats.purchases.get(p, 0), p))
    vocab = ranked[:top_n]
    keep = set(vocab)
    out = []
    for b in baskets:
        items = b.items & keep
        if len(items) >= 2:
            out.append(b if len(items) == len(b.items) else Basket(b.session_id, b.kind, frozenset(items)))
    return vocab, out


_SUMMARY_FIELDS = ("products", "departments", "aisles", "categories", "price")


def summarize_sessions(sessions: Iterable[Session], catalog: Catalog) -> Dict[str, Dict[str, Dict[str, float]]]:
    """Per-session summary, split by purchased vs viewed sets.

    Returns ``{field: {"purchased"|"viewed": {"mean", "sd", "median", "max", "n"}}}``.
    Sessions whose set is empty on one side are left out of that side.
    SD is the sample standard deviation (NaN with a single session).
    """
    columns: Dict[str, Dict[str, List[float]]] = {f: {"purchased": [], "viewed": []} for f in _SUMMARY_FIELDS}
    for s in sessions:
        for side, items in (("purchased", s.purchased), ("viewed", s.viewed)):
            if not items:
                continue
            prods = [catalog[i] for i in items]
            columns["products"][side].append(float(len(items)))
            columns["departments"][side].append(float(len({p.department for p in prods})))
            columns["aisles"][side].append(float(len({p.aisle for p in prods})))
            columns["categories"][side].append(float(len({p.category for p in prods})))
            columns["price"][side].append(float(sum(p.price or 0.0 for p in prods)))
    table: Dict[str, Dict[str, Dict[str, float]]] = {}
    for f, sides in columns.items():
        table[f] = {}
        for side, vals in sides.items():
            if not vals:
                table[f][side] = {"n": 0, "mean": math.nan, "sd": math.nan, "median": math.nan, "max": math.nan}
                continue
            table[f][side] = {
                "n": len(vals),
                "mean": statistics.fmean(vals),
                "sd": statistics.stdev(vals) if len(vals) > 1 else math.nan,
                "median": statistics.median(vals),
                "max": max(vals),
            }
    return table


# ---------------------------------------------------------------- file formats


def write_baskets(baskets: Iterable[Basket], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for b in baskets:
            fh.write(f"{b.session_id}\t{b.kind}\t{','.join(sorted(b.items))}\n")


def read_baskets(path: Union[str, Path], kind: Optional[str] = None) -> List[Basket]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            sid, k, items = line.split("\t")
            if kind is None or k == kind:
                out.append(Basket(sid, k, frozenset(items.split(",")) if items else frozenset()))
    return out


def write_stats(stats: PairStats, path: Union[str, Path], header: Optional[str] = None) -> None:
    """Long-format CSV: ``record,product_id,other_id,value``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record", "product_id", "other_id", "value"])
        for kind in KINDS:
            w.writerow(["baskets", kind, "", stats.basket_counts.get(kind, 0)])
        for name, table in (("view", stats.views), ("purchase", stats.purchases), ("units", stats.units)):
            for pid in sorted(table):
                w.writerow([name, pid, "", table[pid]])
        for (a, b) in sorted(stats.co_purchase):
            w.writerow(["co_purchase", a, b, stats.co_purchase[(a, b)]])


def read_stats(path: Union[str, Path]) -> PairStats:
    stats = PairStats()
    tables = {"view": stats.views, "purchase": stats.purchases, "units": stats.units}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(line for line in fh if not line.startswith("#")):
            rec, value = row["record"], int(row["value"])
            if rec == "baskets":
                stats.basket_counts[row["product_id"]] = value
            elif rec == "co_purchase":
                stats.co_purchase[_key(row["product_id"], row["other_id"])] = value
            else:
                tables[rec][row["product_id"]] = value
    return stats
