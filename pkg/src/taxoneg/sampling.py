"""Negative samplers and triplet construction.

The taxonomy sampler draws uniformly (with replacement) from the items under
the positive item's parent category and rejects anything in the positive
set, giving up after ``max_attempts`` draws.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .catalog import (
    Catalog,
    CustomerContext,
    EngagementAggregate,
    Item,
    candidate_siblings,
)
from .encoder import encode_query_personalized, fnv1a_64
from .lexical import InvertedIndex, bm25_topk

logger = logging.getLogger(__name__)

SAMPLERS = ("random", "bm25", "ance", "tb_hns")
SEP = " [SEP] "
RANDOM_REJECTION_CAP = 64


@dataclass(frozen=True)
class PositiveSet:
    query_key: tuple[str, str | None]
    items: frozenset

    def __contains__(self, item_id) -> bool:
        return item_id in self.items

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(sorted(self.items))


@dataclass(frozen=True)
class Triplet:
    query_side: str
    positive: str
    negative: str | None
    query_text: str = ""
    customer_id: str | None = None
    sampler: str = ""
    rho: float | None = None

    def __post_init__(self):
        if not self.query_text:
            object.__setattr__(self, "query_text", self.query_side.split(SEP, 1)[0])


@dataclass
class SamplerStats:
    attempts_total: int = 0
    negatives_emitted: int = 0
    none_returned: int = 0
    rho_histogram: list[int] = field(default_factory=lambda: [0] * 10)
    anomalies: Counter = field(default_factory=Counter)

    @property
    def calls(self) -> int:
        return self.negatives_emitted + self.none_returned

    def record(self, negative, attempts: int = 0) -> None:
        self.attempts_total += attempts
        if negative is None:
            self.none_returned += 1
        else:
            self.negatives_emitted += 1

    def record_rho(self, value: float) -> None:
        self.rho_histogram[min(int(value * 10), 9)] += 1

    def to_dict(self) -> dict:
        return {
            "attempts_total": self.attempts_total,
            "negatives_emitted": self.negatives_emitted,
            "none_returned": self.none_returned,
            "rho_histogram": list(self.rho_histogram),
            "anomalies": dict(sorted(self.anomalies.items())),
        }


# --- taxonomy-based hard negatives ------------------------------------------


def draw_excluding(candidates, positives, max_attempts: int, rng: np.random.Generator):
    """Up to ``max_attempts`` uniform draws from ``candidates``; the first one
    outside ``positives`` wins. Returns ``(item_or_None, attempts)``."""
    n = len(candidates)
    if n == 0:
        return None, 0
    for attempt in range(1, max_attempts + 1):
        cand = candidates[int(rng.integers(n))]
        if cand not in positives:
            return cand, attempt
    return None, max_attempts


def sample_tb_hns(
    catalog: Catalog,
    query_item: Item | str,
    positives,
    max_attempts: int = 10,
    rng: np.random.Generator | None = None,
    levels: int = 1,
    stats: SamplerStats | None = None,
) -> str | None:
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    item_id = query_item if isinstance(query_item, str) else query_item.item_id
    candidates = catalog.sibling_map(levels).get(item_id)
    if candidates is None:
        raise KeyError(f"unknown item {item_id!r}")
    rng = rng if rng is not None else np.random.default_rng()
    excluded = _with_self(positives, item_id)
    neg, attempts = draw_excluding(candidates, excluded, max_attempts, rng)
    if stats is not None:
        if not candidates:
            stats.anomalies["empty_bucket"] += 1
        stats.record(neg, attempts)
    return neg


def _with_self(positives, item_id: str):
    if item_id in positives:
        return positives
    return set(positives) | {item_id}


def rho(catalog: Catalog, query_item: Item | str, positives, levels: int = 1) -> float:
    """Fraction of the candidate bucket that is positive (query item included)."""
    if isinstance(query_item, str):
        query_item = catalog[query_item]
    bucket = candidate_siblings(catalog.taxonomy, query_item, levels)
    if not bucket:
        raise ValueError(f"empty candidate bucket for {query_item.item_id!r}")
    excluded = _with_self(positives, query_item.item_id)
    return sum(1 for i in bucket if i in excluded) / len(bucket)


# --- baselines --------------------------------------------------------------


def sample_random(catalog: Catalog, positives, rng: np.random.Generator) -> str:
    ids = catalog.ids
    for _ in range(RANDOM_REJECTION_CAP):
        cand = ids[int(rng.integers(len(ids)))]
        if cand not in positives:
            return cand
    complement = [i for i in ids if i not in positives]
    if not complement:
        raise ValueError("every catalog item is a positive; no random negative exists")
    return complement[int(rng.integers(len(complement)))]


def sample_bm25_negative(
    index: InvertedIndex, query_text: str, positives, pool_k: int, rng: np.random.Generator
) -> str | None:
    if pool_k < 1:
        raise ValueError("pool_k must be >= 1")
    pool = [i for i, _ in bm25_topk(index, query_text, pool_k) if i not in positives]
    if not pool:
        return None
    return pool[int(rng.integers(len(pool)))]


def ance_candidates(
    params,
    ann,
    query_text: str,
    context: CustomerContext | None,
    positives,
    pool_k: int,
    catalog: Catalog,
) -> list[str]:
    """Retrieved ids (best first) outside the positive set."""
    from .ann import search

    if ann.d != params.d:
        raise ValueError(f"index dimension {ann.d} does not match encoder dimension {params.d}")
    q = encode_query_personalized(params, query_text, context, catalog)
    nprobe = ann.n_clusters if ann.kind == "ivf" else 1
    hits = search(ann, q, pool_k, nprobe)
    return [i for i, _ in hits if i not in positives]


def mine_ance_negatives(
    params,
    ann,
    queries: Iterable[tuple[str, str | None]],
    positives: Mapping,
    pool_k: int,
    catalog: Catalog,
    customers: Mapping[str, CustomerContext] | None = None,
) -> dict:
    """Highest-scoring retrieved non-positive for each query key (None if all
    retrieved items are positive)."""
    if pool_k < 1:
        raise ValueError("pool_k must be >= 1")
    customers = customers or {}
    out = {}
    for key in queries:
        query_text, cid = key
        ctx = customers.get(cid) if cid else None
        survivors = ance_candidates(params, ann, query_text, ctx, positives[key], pool_k, catalog)
        out[key] = survivors[0] if survivors else None
    return out


# --- triplet building -------------------------------------------------------


@dataclass
class SamplerConfig:
    name: str = "tb_hns"
    max_attempts: int = 10
    levels: int = 1
    n_neg: int = 1
    pool_k: int = 20
    personalized_scope: str = "customer"  # P per (query, customer) in personalized mode

    def __post_init__(self):
        if self.name not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.name!r}; choose from {SAMPLERS}")
        if self.max_attempts < 1 or self.n_neg < 1 or self.pool_k < 1 or self.levels < 1:
            raise ValueError("sampler counts must be >= 1")
        if self.personalized_scope not in ("customer", "query"):
            raise ValueError("personalized_scope must be 'customer' or 'query'")


def key_seed(base: int, *parts) -> np.random.Generator:
    """Generator for one query key, independent of processing order."""
    h = fnv1a_64("\x1f".join("" if p is None else str(p) for p in parts).encode("utf-8"))
    return np.random.default_rng([base & 0xFFFFFFFFFFFFFFFF, h])


def _clean(text: str) -> str:
    return " ".join(text.split())


def query_side(query_text: str, context: CustomerContext | None, catalog: Catalog) -> str:
    if context is None:
        return _clean(query_text)
    titles = " ; ".join(_clean(catalog[i].title) for i in context.purchase_history if i in catalog)
    feats = ",".join(f"{x:.6g}" for x in context.profile_features)
    return f"{_clean(query_text)}{SEP}{titles}{SEP}{feats}"


def positive_sets(agg: EngagementAggregate, personalized: bool, scope: str = "customer") -> dict:
    """Map query key -> PositiveSet, skipping keys without purchases."""
    out = {}
    if personalized:
        for q, cid in agg.keys():
            items = agg.positives(q) if scope == "query" else agg.positives(q, cid)
            if items:
                out[(q, cid)] = PositiveSet((q, cid), frozenset(items))
    else:
        for q in sorted(agg.query_purchases):
            items = agg.positives(q)
            if items:
                out[(q, None)] = PositiveSet((q, None), frozenset(items))
    return out


def build_triplets(
    agg: EngagementAggregate,
    catalog: Catalog,
    sampler: SamplerConfig,
    personalized: bool,
    rng,
    customers: Mapping[str, CustomerContext] | None = None,
    bm25_index: InvertedIndex | None = None,
    ance: tuple | None = None,
    keys: Iterable | None = None,
) -> tuple[list[Triplet], SamplerStats]:
    """One triplet per (query key, purchased item) and requested negative.

    ``rng`` may be a seed or a Generator; each key draws from its own
    generator derived from it, so results do not depend on key order.
    ``ance`` is ``(params, ann_index)`` for the ANCE sampler. ``keys``
    restricts the build to a subset of query keys.
    """
    base = int(rng.integers(2**63)) if isinstance(rng, np.random.Generator) else int(rng)
    customers = customers or {}
    stats = SamplerStats()
    psets = positive_sets(agg, personalized, sampler.personalized_scope)
    if keys is not None:
        wanted = set(keys)
        psets = {k: v for k, v in psets.items() if k in wanted}
    if sampler.name == "bm25" and bm25_index is None:
        raise ValueError("bm25 sampler needs an inverted index")
    if sampler.name == "ance" and ance is None:
        raise ValueError("ance sampler needs (params, ann_index)")

    triplets: list[Triplet] = []
    for key in sorted(psets, key=lambda k: (k[0], k[1] or "")):
        pset = psets[key]
        query_text, cid = key
        ctx = customers.get(cid) if (personalized and cid) else None
        if personalized and cid and ctx is None:
            stats.anomalies["unknown_customer"] += 1
        side = query_side(query_text, ctx, catalog)
        key_rng = key_seed(base, sampler.name, query_text, cid)
        ance_pool = None
        if sampler.name == "ance":
            params, ann = ance
            ance_pool = ance_candidates(params, ann, query_text, ctx, pset, sampler.pool_k, catalog)
        for pos in pset:
            excluded = _with_self(pset.items, pos)
            r = rho(catalog, pos, excluded, sampler.levels)
            stats.record_rho(r)
            for j in range(sampler.n_neg):
                neg = _sample_one(sampler, catalog, pos, excluded, query_text, key_rng,
                                  bm25_index, ance_pool, j, stats)
                triplets.append(Triplet(side, pos, neg, query_text, cid if personalized else None,
                                        sampler.name, r))
    triplets.sort(key=lambda t: (t.query_side, t.customer_id or "", t.positive, t.negative or ""))
    return triplets, stats


def _sample_one(sampler, catalog, pos, excluded, query_text, rng, bm25_index, ance_pool, j, stats):
    name = sampler.name
    if name == "tb_hns":
        return sample_tb_hns(catalog, pos, excluded, sampler.max_attempts, rng, sampler.levels, stats)
    if name == "random":
        try:
            neg = sample_random(catalog, excluded, rng)
        except ValueError:
            neg = None
            stats.anomalies["catalog_all_positive"] += 1
        stats.record(neg, 1)
        return neg
    if name == "bm25":
        neg = sample_bm25_negative(bm25_index, query_text, excluded, sampler.pool_k, rng)
        stats.record(neg, 1)
        return neg
    pool = [i for i in ance_pool if i not in excluded]
    neg = pool[j] if j < len(pool) else None
    stats.record(neg, 1)
    return neg


# --- triplet file -----------------------------------------------------------

TRIPLET_COLUMNS = ("query_side", "positive_id", "negative_id", "sampler_name", "rho", "customer_id")


def write_triplets(triplets: Iterable[Triplet], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(TRIPLET_COLUMNS) + "\n")
        for t in triplets:
            r = "" if t.rho is None else f"{t.rho:.6f}"
            fh.write(f"{t.query_side}\t{t.positive}\t{t.negative or ''}\t{t.sampler}\t{r}\t{t.customer_id or ''}\n")


def read_triplets(path) -> list[Triplet]:
    out = []
    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = next(reader, None)
        if header is None or tuple(header[:5]) != TRIPLET_COLUMNS[:5]:
            raise ValueError(f"{path}: missing triplet header")
        for lineno, row in enumerate(reader, 2):
            if len(row) not in (5, 6):
                raise ValueError(f"{path}:{lineno}: expected 5 or 6 columns")
            cid = row[5] if len(row) == 6 and row[5] else None
            out.append(Triplet(
                query_side=row[0], positive=row[1], negative=row[2] or None,
                customer_id=cid, sampler=row[3], rho=float(row[4]) if row[4] else None,
            ))
    return out


def write_stats(stats: SamplerStats, path) -> None:
    Path(path).write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
