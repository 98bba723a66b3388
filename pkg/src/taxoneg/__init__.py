"""Taxonomy-based hard-negative sampling for two-tower product retrieval."""

__version__ = "0.1.0"

from .catalog import Catalog, Item, Taxonomy, load_catalog
from .encoder import ModelParams, init_params
from .estimators import BM25Retriever, IVFIndex, TaxonomyHardNegativeSampler, TwoTowerEncoder
from .sampling import Triplet, sample_tb_hns
from .training import TrainConfig, mnrl_loss, train

__all__ = [
    "BM25Retriever",
    "Catalog",
    "IVFIndex",
    "Item",
    "ModelParams",
    "Taxonomy",
    "TaxonomyHardNegativeSampler",
    "TrainConfig",
    "Triplet",
    "TwoTowerEncoder",
    "init_params",
    "load_catalog",
    "mnrl_loss",
    "sample_tb_hns",
    "train",
]
