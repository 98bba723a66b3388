"""Okapi BM25 over an inverted index of folded item text."""

from __future__ import annotations

import heapq
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass

from .catalog import Catalog, fold_item_text

_SPLIT = re.compile(r"[^0-9a-z]+")


def tokenize(text: str) -> list[str]:
    return [t for t in _SPLIT.split(text.lower()) if t]


@dataclass
class InvertedIndex:
    postings: dict[str, list[tuple[str, int]]]
    doc_len: dict[str, int]
    avg_doc_len: float
    doc_count: int
    k1: float = 1.2
    b: float = 0.75

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log((self.doc_count - df + 0.5) / (df + 0.5) + 1.0)


def build_inverted_index(catalog: Catalog, k1: float = 1.2, b: float = 0.75) -> InvertedIndex:
    if len(catalog) == 0:
        raise ValueError("cannot index an empty catalog")
    return index_texts(((i, fold_item_text(catalog[i])) for i in catalog.ids), k1=k1, b=b)


def index_texts(docs, k1: float = 1.2, b: float = 0.75) -> InvertedIndex:
    postings: dict[str, list[tuple[str, int]]] = defaultdict(list)
    doc_len: dict[str, int] = {}
    for doc_id, text in sorted(docs):
        toks = tokenize(text)
        doc_len[doc_id] = len(toks)
        for term, tf in Counter(toks).items():
            postings[term].append((doc_id, tf))
    if not doc_len:
        raise ValueError("cannot index an empty catalog")
    return InvertedIndex(
        postings=dict(postings),
        doc_len=doc_len,
        avg_doc_len=sum(doc_len.values()) / len(doc_len),
        doc_count=len(doc_len),
        k1=k1,
        b=b,
    )


def bm25_scores(index: InvertedIndex, query_text: str) -> dict[str, float]:
    """Okapi BM25 for every document sharing a term with the query. A term
    repeated in the query contributes once per occurrence."""
    scores: dict[str, float] = defaultdict(float)
    k1, b, avg = index.k1, index.b, index.avg_doc_len
    for term in tokenize(query_text):
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for doc_id, tf in plist:
            norm = k1 * (1.0 - b + b * index.doc_len[doc_id] / avg)
            scores[doc_id] += idf * tf * (k1 + 1.0) / (tf + norm)
    return scores


def bm25_topk(index: InvertedIndex, query_text: str, k: int) -> list[tuple[str, float]]:
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = bm25_scores(index, query_text)
    return heapq.nsmallest(k, scores.items(), key=lambda kv: (-kv[1], kv[0]))
