"""Exact and IVF (k-means inverted file) top-k inner-product search."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

KINDS = ("exact", "ivf")
INDEX_MAGIC = b"TXNGANN\x00"
INDEX_VERSION = 1
KMEANS_MAX_ITER = 50
KMEANS_TOL = 1e-4


@dataclass
class AnnIndex:
    kind: str
    vectors: np.ndarray
    ids: list[str]
    centroids: np.ndarray | None = None
    labels: np.ndarray | None = None
    inertia_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate ids in index")
        order = sorted(range(len(self.ids)), key=self.ids.__getitem__)
        self.id_rank = np.empty(len(self.ids), dtype=np.int64)
        self.id_rank[order] = np.arange(len(self.ids))
        self.assignments: dict[int, np.ndarray] = {}
        if self.kind == "ivf":
            for c in range(len(self.centroids)):
                self.assignments[c] = np.flatnonzero(self.labels == c)

    @property
    def n_items(self) -> int:
        return len(self.ids)

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    @property
    def n_clusters(self) -> int:
        return 0 if self.centroids is None else len(self.centroids)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen]).ravel()
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(free[rng.integers(len(free))])
        chosen.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[nxt:nxt + 1]).ravel())
    return x[chosen].copy()


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = KMEANS_MAX_ITER, tol: float = KMEANS_TOL):
    """Lloyd's algorithm from a k-means++ start.

    Returns ``(centroids, labels, inertia_history)``; the history holds the
    inertia after every assignment step. An empty cluster keeps its centroid.
    """
    rng = np.random.default_rng(seed)
    centroids = kmeans_pp_init(x, k, rng)
    history: list[float] = []
    for _ in range(max_iter):
        dist = _sq_dists(x, centroids)
        labels = dist.argmin(axis=1)
        inertia = float(dist[np.arange(len(x)), labels].sum())
        history.append(inertia)
        if len(history) > 1:
            prev = history[-2]
            if prev == 0 or (prev - inertia) / prev < tol:
                break
        for c in range(k):
            members = labels == c
            if members.any():
                centroids[c] = x[members].mean(axis=0)
    return centroids, labels, history


def build_index(
    embeddings: Sequence[tuple[str, np.ndarray]] | tuple[list[str], np.ndarray],
    kind: str = "exact",
    n_clusters: int | None = None,
    seed: int = 0,
) -> AnnIndex:
    if isinstance(embeddings, tuple) and len(embeddings) == 2 and isinstance(embeddings[1], np.ndarray) \
            and embeddings[1].ndim == 2:
        ids, vectors = list(embeddings[0]), np.asarray(embeddings[1], dtype=np.float64)
    else:
        pairs = list(embeddings)
        if not pairs:
            raise ValueError("cannot index zero vectors")
        dims = {np.asarray(v).shape for _, v in pairs}
        if len(dims) != 1:
            raise ValueError(f"dimension mismatch among embeddings: {sorted(dims)}")
        ids = [i for i, _ in pairs]
        vectors = np.stack([np.asarray(v, dtype=np.float64) for _, v in pairs])
    if len(ids) == 0:
        raise ValueError("cannot index zero vectors")
    if len(ids) != len(vectors):
        raise ValueError("ids and vectors differ in length")
    if kind not in KINDS:
        raise ValueError(f"unknown index kind {kind!r}")
    if kind == "exact":
        return AnnIndex("exact", vectors, ids)
    if n_clusters is None or not 1 <= n_clusters <= len(ids):
        raise ValueError(f"ivf needs 1 <= n_clusters <= {len(ids)}, got {n_clusters}")
    centroids, labels, history = kmeans(vectors, n_clusters, seed)
    return AnnIndex("ivf", vectors, ids, centroids, labels, history)


def _rank(index: AnnIndex, rows: np.ndarray, scores: np.ndarray, k: int) -> list[tuple[str, float]]:
    order = np.lexsort((index.id_rank[rows], -scores))[:k]
    return [(index.ids[rows[j]], float(scores[j])) for j in order]


def search(index: AnnIndex, q: np.ndarray, k: int, nprobe: int = 1) -> list[tuple[str, float]]:
    """Top-k rows by inner product, ties broken by ascending id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (index.d,):
        raise ValueError(f"query has shape {q.shape}, index dimension is {index.d}")
    if index.kind == "exact":
        rows = np.arange(index.n_items)
    else:
        if not 1 <= nprobe <= index.n_clusters:
            raise ValueError(f"nprobe must be in [1, {index.n_clusters}]")
        cscores = index.centroids @ q
        probe = np.lexsort((np.arange(index.n_clusters), -cscores))[:nprobe]
        # sorted row order keeps the scores bit-identical to a full scan
        rows = np.sort(np.concatenate([index.assignments[int(c)] for c in probe]))
    scores = index.vectors[rows] @ q
    return _rank(index, rows, scores, k)


def filter_results(results, min_score: float = float("-inf"), in_stock: Callable[[str], bool] | None = None):
    return [
        (i, s) for i, s in results
        if s >= min_score and (in_stock is None or in_stock(i))
    ]


# --- persistence ----------------------------------------------------------

_HEADER = struct.Struct("<8sIIQII")  # magic, version, kind, n_items, d, n_clusters


def save_index(index: AnnIndex, path) -> None:
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, KINDS.index(index.kind),
                              index.n_items, index.d, index.n_clusters))
        for item_id in index.ids:
            raw = item_id.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
        fh.write(np.ascontiguousarray(index.vectors, dtype="<f8").tobytes())
        if index.kind == "ivf":
            fh.write(np.ascontiguousarray(index.centroids, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(index.labels, dtype="<u4").tobytes())


def load_index(path) -> AnnIndex:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated index header")
    magic, version, kind, n, d, nc = _HEADER.unpack_from(data)
    if magic != INDEX_MAGIC or version != INDEX_VERSION or kind >= len(KINDS):
        raise ValueError(f"{path}: not a version {INDEX_VERSION} index file")
    off = _HEADER.size
    ids = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4
        ids.append(data[off:off + ln].decode("utf-8"))
        off += ln

    def take(dtype, count, shape):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(shape)
        off += arr.nbytes
        return arr

    vectors = take("<f8", n * d, (n, d)).astype(np.float64)
    if KINDS[kind] == "exact":
        idx = AnnIndex("exact", vectors, ids)
    else:
        centroids = take("<f8", nc * d, (nc, d)).astype(np.float64)
        labels = take("<u4", n, (n,)).astype(np.int64)
        idx = AnnIndex("ivf", vectors, ids, centroids, labels)
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return idx
