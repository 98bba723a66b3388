"""scikit-learn style wrappers around the functional core.

These give the usual ``fit`` / ``transform`` / ``kneighbors`` surface plus
``get_params`` / ``set_params`` for grid search. They hold no logic of their
own beyond input checking; everything delegates to the module functions.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .ann import build_index, search
from .catalog import Catalog
from .encoder import encode_catalog, encode_query_personalized, encode_texts
from .lexical import bm25_scores, bm25_topk, index_texts
from .sampling import rho, sample_tb_hns
from .training import TrainConfig, train


def _seed(random_state) -> int:
    if random_state is None:
        return 0
    if isinstance(random_state, (int, np.integer)):
        return int(random_state)
    raise TypeError("random_state must be an int or None")


class TwoTowerEncoder(TransformerMixin, BaseEstimator):
    """Hashed bag-of-tokens two-tower encoder trained with MNRL.

    ``fit`` takes a list of :class:`~taxoneg.sampling.Triplet` and the
    catalog they refer to; ``transform`` maps query strings to vectors.
    """

    def __init__(self, vocab_buckets=1 << 16, d_tok=64, d=64, d_cust=8, learning_rate=0.05,
                 epochs=10, batch_size=32, mode="non_personalized", in_batch_negatives=True,
                 random_state=None):
        self.vocab_buckets = vocab_buckets
        self.d_tok = d_tok
        self.d = d
        self.d_cust = d_cust
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.mode = mode
        self.in_batch_negatives = in_batch_negatives
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, epochs=self.epochs, batch_size=self.batch_size,
            seed=_seed(self.random_state), mode=self.mode, in_batch_negatives=self.in_batch_negatives,
            vocab_buckets=self.vocab_buckets, d_tok=self.d_tok, d=self.d, d_cust=self.d_cust,
        )

    def fit(self, X, y=None, *, catalog: Catalog, customers=None, personalized_triplets=()):
        cfg = self._config()
        if not isinstance(catalog, Catalog):
            raise TypeError("catalog must be a Catalog")
        self.params_, self.loss_history_ = train(catalog, list(personalized_triplets), list(X), cfg, customers)
        self.catalog_ = catalog
        return self

    def transform(self, X, contexts=None):
        """Query vectors, one row per string in ``X``."""
        check_is_fitted(self, "params_")
        texts = list(X)
        if contexts is None:
            return encode_texts(self.params_, "query", texts)
        if len(contexts) != len(texts):
            raise ValueError("contexts and queries differ in length")
        return np.stack([encode_query_personalized(self.params_, q, c, self.catalog_)
                         for q, c in zip(texts, contexts)])

    def transform_items(self, ids=None):
        check_is_fitted(self, "params_")
        return encode_catalog(self.params_, self.catalog_, ids)


class BM25Retriever(BaseEstimator):
    """Okapi BM25 over ``(doc_id, text)`` pairs."""

    def __init__(self, k1=1.2, b=0.75):
        self.k1 = k1
        self.b = b

    def fit(self, X, y=None):
        docs = list(X)
        if not docs:
            raise ValueError("BM25Retriever needs at least one document")
        self.index_ = index_texts(docs, self.k1, self.b)
        return self

    def score(self, query: str) -> dict[str, float]:
        check_is_fitted(self, "index_")
        return bm25_scores(self.index_, query)

    def kneighbors(self, X, n_neighbors=10):
        """Top-``n_neighbors`` ``(doc_id, score)`` lists, one per query."""
        check_is_fitted(self, "index_")
        return [bm25_topk(self.index_, q, n_neighbors) for q in X]


class IVFIndex(BaseEstimator):
    """Inner-product search, exact or inverted-file over k-means cells."""

    def __init__(self, kind="ivf", n_clusters=16, nprobe=1, random_state=None):
        self.kind = kind
        self.n_clusters = n_clusters
        self.nprobe = nprobe
        self.random_state = random_state

    def fit(self, X, y=None, ids=None):
        X = check_array(X, dtype=np.float64)
        ids = [str(j) for j in range(len(X))] if ids is None else [str(i) for i in ids]
        self.index_ = build_index((ids, X), self.kind, self.n_clusters if self.kind == "ivf" else None,
                                  _seed(self.random_state))
        self.n_features_in_ = X.shape[1]
        return self

    def kneighbors(self, X, n_neighbors=10, return_distance=True):
        """Returns ``(scores, ids)`` arrays of shape (n_queries, n_neighbors);
        higher score is closer."""
        check_is_fitted(self, "index_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, index has {self.n_features_in_}")
        k = min(n_neighbors, self.index_.n_items)
        nprobe = self.nprobe if self.index_.kind == "ivf" else 1
        hits = [search(self.index_, q, k, nprobe) for q in X]
        ids = np.array([[i for i, _ in h] for h in hits], dtype=object)
        if not return_distance:
            return ids
        return np.array([[s for _, s in h] for h in hits]), ids


class TaxonomyHardNegativeSampler(BaseEstimator):
    """Draw negatives from the positive item's parent category bucket."""

    def __init__(self, max_attempts=10, levels=1, random_state=None):
        self.max_attempts = max_attempts
        self.levels = levels
        self.random_state = random_state

    def fit(self, X, y=None):
        if not isinstance(X, Catalog):
            raise TypeError("fit expects a Catalog")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self.catalog_ = X
        self.rng_ = np.random.default_rng(_seed(self.random_state))
        return self

    def sample(self, item_id: str, positives=frozenset()) -> str | None:
        check_is_fitted(self, "catalog_")
        return sample_tb_hns(self.catalog_, item_id, positives, self.max_attempts, self.rng_, self.levels)

    def positive_density(self, item_id: str, positives=frozenset()) -> float:
        check_is_fitted(self, "catalog_")
        return rho(self.catalog_, item_id, positives, self.levels)
