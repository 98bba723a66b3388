"""Hashed bag-of-tokens two-tower encoder with an optional customer fusion layer.

Query tower:  tanh(mean(E[tokens]) @ Wq + bq)
Item tower:   tanh(mean(E[tokens]) @ Wi + bi)
Fusion:       tanh(concat(q, c, h) @ Wf + bf), h = mean item embedding of history
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from .catalog import Catalog, CustomerContext, Item, fold_item_text
from .lexical import tokenize

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

PARAMS_MAGIC = b"TXNGPRM\x00"
PARAMS_VERSION = 1


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


@lru_cache(maxsize=1 << 18)
def _hash_token(token: str, vocab_buckets: int) -> int:
    return fnv1a_64(token.encode("utf-8")) % vocab_buckets


def tokenize_and_hash(text: str, vocab_buckets: int) -> list[int]:
    return [_hash_token(t, vocab_buckets) for t in tokenize(text)]


@dataclass
class ModelParams:
    token_embeddings: np.ndarray
    query_proj: np.ndarray
    query_bias: np.ndarray
    item_proj: np.ndarray
    item_bias: np.ndarray
    fusion: np.ndarray | None = None
    fusion_bias: np.ndarray | None = None
    d_cust: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def vocab_buckets(self) -> int:
        return self.token_embeddings.shape[0]

    @property
    def d_tok(self) -> int:
        return self.token_embeddings.shape[1]

    @property
    def d(self) -> int:
        return self.query_proj.shape[1]

    @property
    def personalized(self) -> bool:
        return self.fusion is not None

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            f.name: getattr(self, f.name)
            for f in fields(self)
            if isinstance(getattr(self, f.name), np.ndarray)
        }

    def validate(self) -> None:
        v, dt = self.token_embeddings.shape
        d = self.query_proj.shape[1]
        if v < 1:
            raise ValueError("vocab_buckets must be >= 1")
        shapes = {
            "query_proj": (dt, d),
            "query_bias": (d,),
            "item_proj": (dt, d),
            "item_bias": (d,),
        }
        if self.fusion is not None:
            shapes["fusion"] = (2 * d + self.d_cust, d)
            shapes["fusion_bias"] = (d,)
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr is None or arr.shape != shape:
                got = None if arr is None else arr.shape
                raise ValueError(f"{name} has shape {got}, expected {shape}")
        for name, arr in self.arrays().items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")

    def copy(self) -> "ModelParams":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        for name, arr in self.arrays().items():
            kw[name] = arr.copy()
        return ModelParams(**kw)


def init_params(
    vocab_buckets: int = 1 << 16,
    d_tok: int = 64,
    d: int = 64,
    d_cust: int = 8,
    personalized: bool = False,
    seed: int = 0,
) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    a = 1.0 / np.sqrt(d_tok)
    params = dict(
        token_embeddings=rng.uniform(-a, a, (vocab_buckets, d_tok)),
        query_proj=rng.uniform(-a, a, (d_tok, d)),
        query_bias=np.zeros(d),
        item_proj=rng.uniform(-a, a, (d_tok, d)),
        item_bias=np.zeros(d),
    )
    if personalized:
        f = 1.0 / np.sqrt(2 * d + d_cust)
        params["fusion"] = rng.uniform(-f, f, (2 * d + d_cust, d))
        params["fusion_bias"] = np.zeros(d)
    return ModelParams(**params, d_cust=d_cust if personalized else 0)


def _tower(params: ModelParams, tower: str) -> tuple[np.ndarray, np.ndarray]:
    if tower == "query":
        return params.query_proj, params.query_bias
    if tower == "item":
        return params.item_proj, params.item_bias
    raise ValueError(f"unknown tower {tower!r}")


def pooled_tokens(params: ModelParams, text: str) -> np.ndarray:
    idx = tokenize_and_hash(text, params.vocab_buckets)
    if not idx:
        return np.zeros(params.d_tok)
    return params.token_embeddings[idx].mean(axis=0)


def encode_text(params: ModelParams, tower: str, text: str) -> np.ndarray:
    w, b = _tower(params, tower)
    return np.tanh(pooled_tokens(params, text) @ w + b)


def encode_texts(params: ModelParams, tower: str, texts) -> np.ndarray:
    w, b = _tower(params, tower)
    texts = list(texts)
    if not texts:
        return np.zeros((0, params.d))
    pooled = np.stack([pooled_tokens(params, t) for t in texts])
    return np.tanh(pooled @ w + b)


def encode_item(params: ModelParams, item: Item) -> np.ndarray:
    return encode_text(params, "item", fold_item_text(item))


def encode_catalog(params: ModelParams, catalog: Catalog, ids=None) -> np.ndarray:
    ids = catalog.ids if ids is None else ids
    return encode_texts(params, "item", (fold_item_text(catalog[i]) for i in ids))


def history_ids(context: CustomerContext | None, catalog: Catalog, skipped: Counter | None = None) -> list[str]:
    if context is None:
        return []
    kept = [i for i in context.purchase_history if i in catalog]
    if skipped is not None and len(kept) != len(context.purchase_history):
        skipped["unknown_history_item"] += len(context.purchase_history) - len(kept)
    return kept


def encode_query_personalized(
    params: ModelParams,
    query_text: str,
    context: CustomerContext | None,
    catalog: Catalog,
    skipped: Counter | None = None,
) -> np.ndarray:
    q = encode_text(params, "query", query_text)
    if not params.personalized:
        return q
    if context is None:
        c = np.zeros(params.d_cust)
        h = np.zeros(params.d)
    else:
        c = np.asarray(context.profile_features, dtype=np.float64)
        if c.shape != (params.d_cust,):
            raise ValueError(f"profile features have shape {c.shape}, model expects ({params.d_cust},)")
        hist = history_ids(context, catalog, skipped)
        h = encode_catalog(params, catalog, hist).mean(axis=0) if hist else np.zeros(params.d)
    return np.tanh(np.concatenate([q, c, h]) @ params.fusion + params.fusion_bias)


def score(q: np.ndarray, i: np.ndarray) -> float:
    q = np.asarray(q)
    i = np.asarray(i)
    if q.shape != i.shape:
        raise ValueError(f"dimension mismatch: {q.shape} vs {i.shape}")
    return float(q @ i)


# --- persistence ----------------------------------------------------------

_HEADER = struct.Struct("<8sIIIIII")  # magic, version, vocab, d_tok, d, d_cust, has_fusion


def save_params(params: ModelParams, path) -> None:
    with Path(path).open("wb") as fh:
        fh.write(
            _HEADER.pack(
                PARAMS_MAGIC, PARAMS_VERSION, params.vocab_buckets, params.d_tok,
                params.d, params.d_cust, int(params.personalized),
            )
        )
        for arr in params.arrays().values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path) -> ModelParams:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated params header")
    magic, version, vocab, d_tok, d, d_cust, has_fusion = _HEADER.unpack_from(data)
    if magic != PARAMS_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != PARAMS_VERSION:
        raise ValueError(f"{path}: unsupported params version {version}")
    if has_fusion not in (0, 1):
        raise ValueError(f"{path}: bad fusion flag {has_fusion}")
    shapes = [
        ("token_embeddings", (vocab, d_tok)),
        ("query_proj", (d_tok, d)),
        ("query_bias", (d,)),
        ("item_proj", (d_tok, d)),
        ("item_bias", (d,)),
    ]
    if has_fusion:
        shapes += [("fusion", (2 * d + d_cust, d)), ("fusion_bias", (d,))]
    expected = _HEADER.size + 8 * sum(int(np.prod(s)) for _, s in shapes)
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    off = _HEADER.size
    kw = {}
    for name, shape in shapes:
        n = int(np.prod(shape))
        kw[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    return ModelParams(**kw, d_cust=d_cust if has_fusion else 0)
