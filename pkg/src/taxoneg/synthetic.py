"""Desk-scale synthetic catalog, engagement log and customer profiles.

Every category gets a pseudo-word name. Leaves additionally carry a *style*
word shared by all leaves in the same child position (think "cordless" vs
"corded" across tool types). Each customer prefers one style. A query is
either *specific* (names a leaf) or *ambiguous* (names only a parent); the
purchases for an ambiguous query land in the customer's preferred-style leaf
under that parent. Truth for every query and customer is written out so
that Recall@k has an unambiguous target.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .catalog import EngagementEvent, Item, write_catalog, write_engagement

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st", "tr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]
COLORS = ["red", "blue", "green", "black", "white", "grey", "brown", "yellow"]
SIZES = ["small", "medium", "large"]
MODIFIERS = ["best", "cheap", "new", "sale", "pro", "deal", "top", "buy", "premium", "budget",
             "value", "quality", "outdoor", "indoor", "home", "heavy duty", "compact", "kit"]


@dataclass
class SyntheticSpec:
    branching: int = 4
    depth: int = 3
    items_per_leaf: int = 10
    n_customers: int = 200
    n_queries: int = 400
    seed: int = 0
    noise_rate: float = 0.1
    ambiguous_fraction: float = 0.25
    purchase_rate: float = 0.7
    history_window: int = 10
    d_cust: int = 8
    mean_searches: float = 12.0
    n_brands: int = 12
    leaf_name_rate: float = 0.5
    parent_in_query_rate: float = 0.5
    modifier_rate: float = 0.5
    style_scope: str = "branch"

    def __post_init__(self):
        for name in ("branching", "depth", "items_per_leaf", "n_customers", "n_queries",
                     "history_window", "d_cust", "n_brands"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("noise_rate", "ambiguous_fraction", "purchase_rate", "leaf_name_rate",
                     "parent_in_query_rate", "modifier_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.style_scope not in ("branch", "global"):
            raise ValueError("style_scope must be 'branch' or 'global'")
        if self.depth == 1 and self.ambiguous_fraction > 0:
            # no parent category to be ambiguous about
            self.ambiguous_fraction = 0.0

    @property
    def n_leaves(self) -> int:
        return self.branching ** self.depth

    @property
    def n_items(self) -> int:
        return self.n_leaves * self.items_per_leaf


class _Words:
    def __init__(self, rng: np.random.Generator, reserved=()):
        self.rng = rng
        self.used = set(reserved)

    def __call__(self, syllables: int = 3) -> str:
        while True:
            w = "".join(
                _ONSETS[self.rng.integers(len(_ONSETS))] + _VOWELS[self.rng.integers(len(_VOWELS))]
                for _ in range(syllables)
            )
            if w not in self.used:
                self.used.add(w)
                return w


@dataclass
class SyntheticData:
    items: list[Item]
    events: list[EngagementEvent]
    customers: list[dict]
    truth: dict

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "catalog": out / "catalog.jsonl",
            "engagement": out / "engagement.tsv",
            "customers": out / "customers.jsonl",
            "truth": out / "truth.json",
        }
        write_catalog(self.items, paths["catalog"])
        write_engagement(self.events, paths["engagement"])
        with paths["customers"].open("w", encoding="utf-8", newline="\n") as fh:
            for rec in self.customers:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        paths["truth"].write_text(json.dumps(self.truth, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return paths


def generate(spec: SyntheticSpec) -> SyntheticData:
    rng = np.random.default_rng(spec.seed)
    words = _Words(rng, reserved=set(COLORS) | set(SIZES) | {w for m in MODIFIERS for w in m.split()})
    # style words per child position; "branch" scope gives each top-level
    # category its own set, "global" shares one set across the catalog
    n_sets = spec.branching if spec.style_scope == "branch" else 1
    style_sets = [[words(2) for _ in range(spec.branching)] for _ in range(n_sets)]
    brands = [words(2).capitalize() for _ in range(spec.n_brands)]

    # balanced taxonomy: node id = "c" + dotted child positions
    names: dict[str, str] = {}
    leaves: list[tuple[str, ...]] = []

    def grow(path: tuple[str, ...], level: int):
        for j in range(spec.branching):
            node = (path[-1] if path else "c") + ("." if path else "") + str(j)
            names[node] = words()
            child = path + (node,)
            if level + 1 == spec.depth:
                leaves.append(child)
            else:
                grow(child, level + 1)

    grow((), 0)
    leaf_style = {path[-1]: int(path[-1].rsplit(".", 1)[-1].lstrip("c")) for path in leaves}

    items: list[Item] = []
    leaf_items: dict[str, list[str]] = {}
    width = len(str(spec.n_items))
    for path in leaves:
        leaf = path[-1]
        ids = []
        for _ in range(spec.items_per_leaf):
            item_id = f"i{len(items):0{width}d}"
            styles = style_sets[int(path[0][1:]) % n_sets]
            title_words = [names[n] for n in path[:-1]] + [styles[leaf_style[leaf]], words(2)]
            if rng.random() < spec.leaf_name_rate:
                title_words.insert(len(path) - 1, names[leaf])
            items.append(Item(
                item_id=item_id,
                title=" ".join(title_words),
                brand=brands[rng.integers(len(brands))],
                attributes=(("color", COLORS[rng.integers(len(COLORS))]),
                            ("size", SIZES[rng.integers(len(SIZES))])),
                taxonomy_path=path,
            ))
            ids.append(item_id)
        leaf_items[leaf] = ids
    all_ids = [it.item_id for it in items]

    parents = sorted({p[-2] for p in leaves}) if spec.depth > 1 else []
    children_by_style = {
        p: [f"{p}.{j}" for j in range(spec.branching)] for p in parents
    }

    # queries
    leaf_order = [leaves[j][-1] for j in rng.permutation(len(leaves))]
    parent_order = [parents[j] for j in rng.permutation(len(parents))] if parents else []
    queries: dict[str, dict] = {}
    n_amb = int(round(spec.n_queries * spec.ambiguous_fraction)) if parents else 0
    attempts = 0
    while len(queries) < spec.n_queries:
        attempts += 1
        if attempts > 1000 * spec.n_queries:
            raise ValueError("could not generate enough distinct queries")
        j = len(queries)
        if j < n_amb:
            parent = parent_order[j % len(parent_order)]
            text = f"{names[parent]} {MODIFIERS[rng.integers(len(MODIFIERS))]}"
            if rng.random() < 0.5:
                text = f"{MODIFIERS[rng.integers(len(MODIFIERS))]} {text}"
            info = {"kind": "ambiguous", "category": parent}
        else:
            leaf = leaf_order[(j - n_amb) % len(leaf_order)]
            parts = [names[leaf]]
            if spec.depth > 1 and rng.random() < spec.parent_in_query_rate:
                parts.append(names[leaf.rsplit(".", 1)[0]])
            if rng.random() < spec.modifier_rate:
                parts.append(MODIFIERS[rng.integers(len(MODIFIERS))])
            rng.shuffle(parts)
            text = " ".join(parts)
            info = {"kind": "specific", "category": leaf}
        if text not in queries:
            queries[text] = info

    # customers
    customer_ids = [f"u{j:0{len(str(spec.n_customers))}d}" for j in range(spec.n_customers)]
    cust_style = {cid: int(rng.integers(spec.branching)) for cid in customer_ids}
    customers = []
    for cid in customer_ids:
        s = cust_style[cid]
        hist = []
        for _ in range(spec.history_window):
            if rng.random() < spec.noise_rate or not parents:
                hist.append(all_ids[rng.integers(len(all_ids))])
            else:
                p = parents[rng.integers(len(parents))]
                pool = leaf_items[children_by_style[p][s]]
                hist.append(pool[rng.integers(len(pool))])
        feats = rng.uniform(0.0, 0.4, spec.d_cust)
        feats[s % spec.d_cust] += 0.6
        customers.append({
            "customer_id": cid,
            "profile_features": [round(float(x), 6) for x in feats],
            "purchase_history": hist,
        })

    def truth_leaf(query: str, cid: str) -> str:
        info = queries[query]
        if info["kind"] == "specific":
            return info["category"]
        return children_by_style[info["category"]][cust_style[cid]]

    # engagement: Zipf-like search volume per query
    qlist = list(queries)
    ranks = rng.permutation(len(qlist)) + 1
    weights = 1.0 / ranks ** 0.8
    volumes = np.maximum(1, np.round(weights / weights.mean() * spec.mean_searches)).astype(int)
    events: list[EngagementEvent] = []
    ts = 1_600_000_000
    for query, vol in zip(qlist, volumes):
        for _ in range(int(vol)):
            cid = customer_ids[rng.integers(len(customer_ids))]
            pool = leaf_items[truth_leaf(query, cid)]
            ts += int(rng.integers(1, 60))
            clicked = pool[rng.integers(len(pool))]
            events.append(EngagementEvent(cid, query, clicked, "click", ts))
            if rng.random() < spec.purchase_rate:
                if rng.random() < spec.noise_rate:
                    bought = all_ids[rng.integers(len(all_ids))]
                else:
                    bought = pool[rng.integers(len(pool))]
                ts += int(rng.integers(1, 60))
                events.append(EngagementEvent(cid, query, bought, "add_to_cart", ts))
                ts += int(rng.integers(1, 60))
                events.append(EngagementEvent(cid, query, bought, "purchase", ts))

    truth = {
        "spec": asdict(spec),
        "queries": queries,
        "customer_style": cust_style,
        "children_by_style": children_by_style,
    }
    return SyntheticData(items, events, customers, truth)


def truth_items(truth: dict, taxonomy, query: str, customer_id: str | None = None) -> frozenset:
    """Planted relevant items for a query (and, for ambiguous queries, a
    customer). Without a customer an ambiguous query's truth is its whole
    parent category."""
    info = truth["queries"][query]
    cat = info["category"]
    if info["kind"] == "ambiguous" and customer_id is not None:
        cat = truth["children_by_style"][cat][truth["customer_style"][customer_id]]
    return frozenset(taxonomy.bucket.get(cat, ()))


def bench_catalog(n_items: int, bucket_size: int = 50, leaf_size: int = 10, vocab: int = 100, seed: int = 0):
    """Catalog of ``n_items`` under parents of exactly ``bucket_size`` items,
    with titles drawn from a fixed small vocabulary (so postings grow with
    the catalog)."""
    from .catalog import Catalog

    if n_items % bucket_size or bucket_size % leaf_size:
        raise ValueError("n_items must be a multiple of bucket_size, and bucket_size of leaf_size")
    rng = np.random.default_rng(seed)
    words = _Words(rng)
    vocab_words = [words(2) for _ in range(vocab)]
    items = []
    width = len(str(n_items))
    n_parents = n_items // bucket_size
    tops = max(1, int(math.sqrt(n_parents)))
    picks = rng.integers(vocab, size=(n_items, 5))
    for j in range(n_items):
        p = j // bucket_size
        leaf = (j % bucket_size) // leaf_size
        path = (f"t{p % tops}", f"t{p % tops}.p{p}", f"t{p % tops}.p{p}.l{leaf}")
        title = " ".join(vocab_words[w] for w in picks[j])
        items.append(Item(f"b{j:0{width}d}", title, "", (), path))
    return Catalog.from_items(items), vocab_words
