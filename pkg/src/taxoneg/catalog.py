"""Item catalog, canonical taxonomy and engagement aggregation."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

logger = logging.getLogger(__name__)

ROOT = "__root__"
EVENT_KINDS = ("click", "add_to_cart", "purchase")
DEFAULT_HISTORY_WINDOW = 10


class CatalogError(ValueError):
    pass


@dataclass(frozen=True)
class Item:
    item_id: str
    title: str
    brand: str = ""
    attributes: tuple[tuple[str, str], ...] = ()
    taxonomy_path: tuple[str, ...] = ()

    @property
    def leaf(self) -> str:
        return self.taxonomy_path[-1]


def fold_item_text(item: Item) -> str:
    """Title, brand and attribute values lowercased and joined by single spaces."""
    parts = [item.title, item.brand, *(v for _, v in item.attributes)]
    return " ".join(p.strip().lower() for p in parts if p and p.strip())


@dataclass
class Taxonomy:
    """Category forest under a single sentinel root.

    ``bucket[node]`` lists (sorted, deduplicated) every item whose leaf is
    ``node`` or one of its descendants.
    """

    nodes: set[str]
    parent: dict[str, str]
    children: dict[str, list[str]]
    bucket: dict[str, list[str]]

    @classmethod
    def from_items(cls, items: Iterable[Item]) -> "Taxonomy":
        parent: dict[str, str] = {}
        children: dict[str, list[str]] = defaultdict(list)
        members: dict[str, set[str]] = defaultdict(set)
        for item in items:
            prev = ROOT
            for node in item.taxonomy_path:
                known = parent.get(node)
                if known is None:
                    parent[node] = prev
                    children[prev].append(node)
                elif known != prev:
                    raise CatalogError(
                        f"category {node!r} has two parents: {known!r} and {prev!r}"
                    )
                prev = node
            members[ROOT].add(item.item_id)
            for node in item.taxonomy_path:
                members[node].add(item.item_id)
        bucket = {node: sorted(ids) for node, ids in members.items()}
        kids = {node: sorted(c) for node, c in children.items()}
        return cls(nodes=set(parent), parent=parent, children=kids, bucket=bucket)

    def ancestor(self, node: str, levels: int = 1) -> str:
        if node not in self.parent:
            raise KeyError(f"unknown category {node!r}")
        for _ in range(levels):
            if node == ROOT:
                break
            node = self.parent[node]
        return node

    def depth(self, node: str) -> int:
        d = 0
        while node != ROOT:
            node = self.parent[node]
            d += 1
        return d


@dataclass
class Catalog:
    items: dict[str, Item]
    taxonomy: Taxonomy
    multi_path_items: list[str] = field(default_factory=list)
    depth_one_items: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.ids = sorted(self.items)
        self.index = {item_id: i for i, item_id in enumerate(self.ids)}
        self._sibling_maps: dict[int, dict[str, list[str]]] = {}

    def sibling_map(self, levels: int = 1) -> dict[str, list[str]]:
        """item_id -> candidate bucket ``levels`` above its leaf, built once."""
        m = self._sibling_maps.get(levels)
        if m is None:
            m = {i: candidate_siblings(self.taxonomy, it, levels) for i, it in self.items.items()}
            self._sibling_maps[levels] = m
        return m

    def __len__(self) -> int:
        return len(self.items)

    def __contains__(self, item_id) -> bool:
        return item_id in self.items

    def __getitem__(self, item_id: str) -> Item:
        return self.items[item_id]

    @classmethod
    def from_items(cls, items: Iterable[Item], **kwargs) -> "Catalog":
        by_id: dict[str, Item] = {}
        for item in items:
            if item.item_id in by_id:
                raise CatalogError(f"duplicate item_id {item.item_id!r}")
            _validate_item(item)
            by_id[item.item_id] = item
        if not by_id:
            raise CatalogError("empty catalog")
        cat = cls(items=by_id, taxonomy=Taxonomy.from_items(by_id.values()), **kwargs)
        cat.depth_one_items = sorted(i for i, it in by_id.items() if len(it.taxonomy_path) == 1)
        return cat


def _validate_item(item: Item) -> None:
    if not item.item_id:
        raise CatalogError("item without item_id")
    if not item.title.strip():
        raise CatalogError(f"item {item.item_id!r} has an empty title")
    if not item.taxonomy_path:
        raise CatalogError(f"item {item.item_id!r} has no taxonomy path")


def item_from_record(rec: dict) -> tuple[Item, bool]:
    """Build an Item from one catalog JSON object.

    Returns the item and whether several taxonomy paths had to be reduced
    to the first-listed (primary) one.
    """
    paths = rec.get("taxonomy_paths")
    multi = False
    if paths:
        path = paths[0]
        multi = len(paths) > 1
    else:
        path = rec["taxonomy_path"]
    if not isinstance(path, list) or not all(isinstance(p, str) for p in path):
        raise TypeError("taxonomy path must be a list of strings")
    attrs = rec.get("attributes") or {}
    item = Item(
        item_id=str(rec["item_id"]),
        title=str(rec["title"]),
        brand=str(rec.get("brand") or ""),
        attributes=tuple((str(k), str(v)) for k, v in attrs.items()),
        taxonomy_path=tuple(path),
    )
    return item, multi


def load_catalog(path) -> Catalog:
    path = Path(path)
    items: list[Item] = []
    seen: set[str] = set()
    multi: list[str] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                item, was_multi = item_from_record(json.loads(line))
                _validate_item(item)
            except (ValueError, KeyError, TypeError) as exc:
                raise CatalogError(f"{path}:{lineno}: malformed item record ({exc})") from exc
            if item.item_id in seen:
                raise CatalogError(f"{path}:{lineno}: duplicate item_id {item.item_id!r}")
            seen.add(item.item_id)
            if was_multi:
                multi.append(item.item_id)
            items.append(item)
    if not items:
        raise CatalogError(f"{path}: empty catalog")
    if multi:
        logger.warning("%d items listed several taxonomy paths; kept the first", len(multi))
    return Catalog.from_items(items, multi_path_items=multi)


def item_to_record(item: Item) -> dict:
    return {
        "item_id": item.item_id,
        "title": item.title,
        "brand": item.brand,
        "attributes": dict(item.attributes),
        "taxonomy_path": list(item.taxonomy_path),
    }


def write_catalog(items: Iterable[Item], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for item in items:
            fh.write(json.dumps(item_to_record(item), sort_keys=True) + "\n")


def parent_category(taxonomy: Taxonomy, item: Item, levels: int = 1) -> str:
    """Category ``levels`` steps above the item's leaf (root sentinel at most)."""
    leaf = item.taxonomy_path[-1]
    if leaf not in taxonomy.parent:
        raise KeyError(f"unknown category {leaf!r} for item {item.item_id!r}")
    return taxonomy.ancestor(leaf, levels)


def candidate_siblings(taxonomy: Taxonomy, item: Item, levels: int = 1) -> list[str]:
    return taxonomy.bucket.get(parent_category(taxonomy, item, levels), [])


# --- engagement -----------------------------------------------------------


@dataclass(frozen=True)
class EngagementEvent:
    customer_id: str
    query_text: str
    item_id: str
    event_kind: str
    timestamp: int

    def __post_init__(self):
        if self.event_kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.event_kind!r}")
        if self.timestamp < 0:
            raise ValueError("negative timestamp")


@dataclass
class EngagementAggregate:
    """Per-(query, customer) item counts by event kind."""

    counts: dict[tuple[str, str], dict[str, Counter]]
    query_purchases: dict[str, Counter]
    query_frequency: Counter
    skipped: int = 0
    counted: int = 0

    def positives(self, query_text: str, customer_id: str | None = None) -> set[str]:
        if customer_id is not None:
            cell = self.counts.get((query_text, customer_id))
            return set(cell["purchase"]) if cell else set()
        return set(self.query_purchases.get(query_text, ()))

    def keys(self) -> list[tuple[str, str]]:
        return sorted(self.counts)


def aggregate_engagement(events: Iterable[EngagementEvent], catalog: Catalog | None = None) -> EngagementAggregate:
    counts: dict[tuple[str, str], dict[str, Counter]] = {}
    query_purchases: dict[str, Counter] = defaultdict(Counter)
    freq: Counter = Counter()
    skipped = counted = 0
    for ev in events:
        if catalog is not None and ev.item_id not in catalog:
            skipped += 1
            continue
        counted += 1
        cell = counts.setdefault(
            (ev.query_text, ev.customer_id), {k: Counter() for k in EVENT_KINDS}
        )
        cell[ev.event_kind][ev.item_id] += 1
        freq[ev.query_text] += 1
        if ev.event_kind == "purchase":
            query_purchases[ev.query_text][ev.item_id] += 1
    if skipped:
        logger.warning("skipped %d events with unknown item ids", skipped)
    return EngagementAggregate(
        counts=counts,
        query_purchases=dict(query_purchases),
        query_frequency=freq,
        skipped=skipped,
        counted=counted,
    )


ENGAGEMENT_COLUMNS = ("customer_id", "query_text", "item_id", "event_kind", "timestamp")


def load_engagement(path) -> list[EngagementEvent]:
    events = []
    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        for lineno, row in enumerate(reader, 1):
            if lineno == 1 and tuple(row) == ENGAGEMENT_COLUMNS:
                continue
            if len(row) != 5:
                raise CatalogError(f"{path}:{lineno}: expected 5 columns, got {len(row)}")
            try:
                events.append(EngagementEvent(row[0], row[1], row[2], row[3], int(row[4])))
            except ValueError as exc:
                raise CatalogError(f"{path}:{lineno}: {exc}") from exc
    return events


def write_engagement(events: Iterable[EngagementEvent], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(ENGAGEMENT_COLUMNS) + "\n")
        for ev in events:
            fh.write(f"{ev.customer_id}\t{ev.query_text}\t{ev.item_id}\t{ev.event_kind}\t{ev.timestamp}\n")


# --- customers ------------------------------------------------------------


@dataclass(frozen=True)
class CustomerContext:
    customer_id: str
    profile_features: np.ndarray
    purchase_history: tuple[str, ...] = ()


def make_context(customer_id: str, features, history, dim: int, window: int = DEFAULT_HISTORY_WINDOW) -> CustomerContext:
    feats = np.asarray(features, dtype=np.float64)
    if feats.shape != (dim,):
        raise CatalogError(
            f"customer {customer_id!r}: expected {dim} profile features, got {feats.size}"
        )
    return CustomerContext(customer_id, feats, tuple(history)[-window:] if window else ())


def load_customers(path, dim: int, window: int = DEFAULT_HISTORY_WINDOW) -> dict[str, CustomerContext]:
    out: dict[str, CustomerContext] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ctx = make_context(
                    str(rec["customer_id"]), rec["profile_features"],
                    rec.get("purchase_history", []), dim, window,
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise CatalogError(f"{path}:{lineno}: malformed customer record ({exc})") from exc
            out[ctx.customer_id] = ctx
    return out
