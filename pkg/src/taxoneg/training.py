"""Multiple-negatives ranking loss, hand-written backprop and the SGD loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .catalog import Catalog, CustomerContext, fold_item_text
from .encoder import ModelParams, init_params, tokenize_and_hash
from .sampling import Triplet

logger = logging.getLogger(__name__)

MODES = ("non_personalized", "personalized", "combined")


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    mode: str = "non_personalized"
    in_batch_negatives: bool = True
    ance_refresh_epochs: int | None = None
    vocab_buckets: int = 1 << 16
    d_tok: int = 64
    d: int = 64
    d_cust: int = 8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("batch_size", "vocab_buckets", "d_tok", "d", "d_cust"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.ance_refresh_epochs is not None and self.ance_refresh_epochs < 1:
            raise ValueError("ance_refresh_epochs must be >= 1")

    @property
    def personalized(self) -> bool:
        return self.mode != "non_personalized"


def _parse_value(raw: str, typ):
    raw = raw.strip()
    if raw.lower() in ("", "none", "null"):
        return None
    if "bool" in str(typ):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if "int" in str(typ):
        return int(raw)
    if "float" in str(typ):
        return float(raw)
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def train_config_from_dict(raw: dict[str, str], **overrides) -> TrainConfig:
    types = {f.name: f.type for f in fields(TrainConfig)}
    kw = {}
    for key, value in raw.items():
        if key in types:
            kw[key] = _parse_value(value, types[key])
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**kw)


@dataclass
class LossReport:
    epoch: int
    mean_loss: float
    triplets_seen: int
    grad_norm: float


def write_loss_reports(reports: Sequence[LossReport], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "triplets_seen", "grad_norm"])
        for r in reports:
            w.writerow([r.epoch, repr(r.mean_loss), r.triplets_seen, repr(r.grad_norm)])


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, reports):
        super().__init__(msg)
        self.reports = reports


# --- loss -----------------------------------------------------------------


def mnrl_loss(sim_qp: float, sim_qn) -> float:
    """-log softmax of the positive score against the negative scores."""
    diffs = np.asarray(sim_qn, dtype=np.float64) - sim_qp
    if diffs.size == 0:
        return 0.0
    m = max(0.0, float(diffs.max()))
    return m + math.log(math.exp(-m) + float(np.exp(diffs - m).sum()))


def _mnrl_with_grad(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss and d(loss)/d(logits) where logits[0] is the positive."""
    m = logits.max()
    e = np.exp(logits - m)
    z = e.sum()
    loss = max(0.0, float(m + math.log(z) - logits[0]))
    grad = e / z
    grad[0] -= 1.0
    return loss, grad


# --- gradients ------------------------------------------------------------


@dataclass
class Gradients:
    """Parameter gradients; token-embedding rows are stored sparsely."""

    token_rows: np.ndarray
    token_grad: np.ndarray
    query_proj: np.ndarray
    query_bias: np.ndarray
    item_proj: np.ndarray
    item_bias: np.ndarray
    fusion: np.ndarray | None = None
    fusion_bias: np.ndarray | None = None

    def dense(self, params: ModelParams) -> dict[str, np.ndarray]:
        te = np.zeros_like(params.token_embeddings)
        te[self.token_rows] = self.token_grad
        out = {"token_embeddings": te}
        for name in ("query_proj", "query_bias", "item_proj", "item_bias", "fusion", "fusion_bias"):
            val = getattr(self, name)
            if val is not None:
                out[name] = val
        return out

    def norm(self) -> float:
        total = float((self.token_grad ** 2).sum())
        for name in ("query_proj", "query_bias", "item_proj", "item_bias", "fusion", "fusion_bias"):
            val = getattr(self, name)
            if val is not None:
                total += float((val ** 2).sum())
        return math.sqrt(total)


class _PooledTexts:
    """Mean-pooled token embeddings for a list of texts, with the pooling
    matrix kept for the backward pass."""

    def __init__(self, params: ModelParams, texts: Sequence[str]):
        idx_lists = [tokenize_and_hash(t, params.vocab_buckets) for t in texts]
        flat = [i for lst in idx_lists for i in lst]
        self.rows, inverse = np.unique(np.asarray(flat, dtype=np.int64), return_inverse=True)
        self.pool = np.zeros((len(texts), len(self.rows)))
        pos = 0
        for j, lst in enumerate(idx_lists):
            if lst:
                np.add.at(self.pool[j], inverse[pos:pos + len(lst)], 1.0 / len(lst))
                pos += len(lst)
        self.pooled = self.pool @ params.token_embeddings[self.rows]

    def tower(self, w: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.tanh(self.pooled @ w + b)

    def backward(self, w: np.ndarray, y: np.ndarray, dy: np.ndarray):
        dz = dy * (1.0 - y * y)
        dpooled = dz @ w.T
        return self.pooled.T @ dz, dz.sum(axis=0), self.pool.T @ dpooled


def _negatives(batch: Sequence[Triplet], in_batch: bool) -> list[list[str]]:
    out = []
    for t in batch:
        negs = []
        if t.negative is not None:
            negs.append(t.negative)
        if in_batch:
            negs.extend(o.positive for o in batch)
        seen = {t.positive}
        uniq = []
        for n in negs:
            if n not in seen:
                seen.add(n)
                uniq.append(n)
        out.append(uniq)
    return out


def batch_loss(
    params: ModelParams,
    batch: Sequence[Triplet],
    catalog: Catalog,
    config: TrainConfig,
    customers: dict[str, CustomerContext] | None = None,
) -> tuple[float, Gradients]:
    """Mean MNRL over the usable triplets of a batch and its gradients.

    A triplet's negatives are its explicit negative plus, when in-batch
    negatives are on, the other positives in the batch (deduplicated by id,
    never its own positive). Triplets left without any negative are skipped.
    """
    if not batch:
        raise ValueError("empty batch")
    negs = _negatives(batch, config.in_batch_negatives)
    anchors = [j for j, n in enumerate(negs) if n]
    if not anchors:
        raise ValueError("batch has no usable triplet (no negatives available)")
    customers = customers or {}
    d = params.d

    contexts: list[CustomerContext | None] = []
    for j in anchors:
        cid = batch[j].customer_id
        contexts.append(customers.get(cid) if cid else None)

    item_ids: list[str] = []
    item_pos: dict[str, int] = {}

    def _slot(item_id: str) -> int:
        if item_id not in item_pos:
            item_pos[item_id] = len(item_ids)
            item_ids.append(item_id)
        return item_pos[item_id]

    cand = [[_slot(batch[j].positive)] + [_slot(n) for n in negs[j]] for j in anchors]
    hist_slots: list[list[int]] = []
    if params.personalized:
        for ctx in contexts:
            hist = [] if ctx is None else [h for h in ctx.purchase_history if h in catalog]
            hist_slots.append([_slot(h) for h in hist])

    items = _PooledTexts(params, [fold_item_text(catalog[i]) for i in item_ids])
    y_items = items.tower(params.item_proj, params.item_bias)
    queries = _PooledTexts(params, [batch[j].query_text for j in anchors])
    q = queries.tower(params.query_proj, params.query_bias)

    if params.personalized:
        n_a = len(anchors)
        h_mix = np.zeros((n_a, len(item_ids)))
        c = np.zeros((n_a, params.d_cust))
        for a, (ctx, slots) in enumerate(zip(contexts, hist_slots)):
            if ctx is not None:
                c[a] = ctx.profile_features
            for s in slots:
                h_mix[a, s] += 1.0 / len(slots)
        x = np.concatenate([q, c, h_mix @ y_items], axis=1)
        u = np.tanh(x @ params.fusion + params.fusion_bias)
    else:
        u = q

    sims = u @ y_items.T
    d_sims = np.zeros_like(sims)
    total = 0.0
    scale = 1.0 / len(anchors)
    for a, slots in enumerate(cand):
        loss, g = _mnrl_with_grad(sims[a, slots])
        total += loss
        np.add.at(d_sims[a], slots, g * scale)
    mean_loss = total * scale

    du = d_sims @ y_items
    dy_items = d_sims.T @ u
    grads: dict[str, np.ndarray | None] = {"fusion": None, "fusion_bias": None}
    if params.personalized:
        dzf = du * (1.0 - u * u)
        grads["fusion"] = x.T @ dzf
        grads["fusion_bias"] = dzf.sum(axis=0)
        dx = dzf @ params.fusion.T
        dq = dx[:, :d]
        dy_items = dy_items + h_mix.T @ dx[:, d + params.d_cust:]
    else:
        dq = du

    grads["item_proj"], grads["item_bias"], d_item_rows = items.backward(params.item_proj, y_items, dy_items)
    grads["query_proj"], grads["query_bias"], d_query_rows = queries.backward(params.query_proj, q, dq)

    rows = np.union1d(items.rows, queries.rows)
    token_grad = np.zeros((len(rows), params.d_tok))
    token_grad[np.searchsorted(rows, items.rows)] += d_item_rows
    token_grad[np.searchsorted(rows, queries.rows)] += d_query_rows
    return mean_loss, Gradients(token_rows=rows, token_grad=token_grad, **grads)


def apply_sgd(params: ModelParams, grads: Gradients, lr: float) -> None:
    params.token_embeddings[grads.token_rows] -= lr * grads.token_grad
    params.query_proj -= lr * grads.query_proj
    params.query_bias -= lr * grads.query_bias
    params.item_proj -= lr * grads.item_proj
    params.item_bias -= lr * grads.item_bias
    if params.personalized and grads.fusion is not None:
        params.fusion -= lr * grads.fusion
        params.fusion_bias -= lr * grads.fusion_bias


def _usable(batch, in_batch: bool) -> bool:
    return any(_negatives(batch, in_batch))


def train(
    catalog: Catalog,
    triplets_per: Sequence[Triplet],
    triplets_nper: Sequence[Triplet],
    config: TrainConfig,
    customers: dict[str, CustomerContext] | None = None,
    init: ModelParams | None = None,
    remine: Callable[[ModelParams], tuple[list[Triplet], list[Triplet]]] | None = None,
) -> tuple[ModelParams, list[LossReport]]:
    """Plain minibatch SGD over the triplet lists selected by ``config.mode``.

    ``remine`` is called with the current parameters every
    ``config.ance_refresh_epochs`` epochs (after the first) and must return
    fresh ``(personalized, non_personalized)`` triplet lists.
    """
    triplets_per = list(triplets_per)
    triplets_nper = list(triplets_nper)
    data = _select(config.mode, triplets_per, triplets_nper)
    params = init.copy() if init is not None else init_params(
        config.vocab_buckets, config.d_tok, config.d, config.d_cust,
        personalized=config.personalized, seed=config.seed,
    )
    if params.personalized != config.personalized:
        raise ValueError("initial params do not match the training mode")
    rng = np.random.default_rng(config.seed)
    reports: list[LossReport] = []
    for epoch in range(config.epochs):
        if remine is not None and config.ance_refresh_epochs and epoch > 0 \
                and epoch % config.ance_refresh_epochs == 0:
            triplets_per, triplets_nper = remine(params)
            data = _select(config.mode, triplets_per, triplets_nper)
        order = rng.permutation(len(data))
        loss_sum = 0.0
        seen = 0
        norms = []
        for start in range(0, len(order), config.batch_size):
            batch = [data[k] for k in order[start:start + config.batch_size]]
            if not _usable(batch, config.in_batch_negatives):
                continue
            loss, grads = batch_loss(params, batch, catalog, config, customers)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}", reports)
            gnorm = grads.norm()
            # tanh keeps the loss bounded, so an overflowing step is the other symptom
            if not math.isfinite(config.learning_rate * gnorm):
                raise TrainingDiverged(f"non-finite update in epoch {epoch}", reports)
            apply_sgd(params, grads, config.learning_rate)
            loss_sum += loss * len(batch)
            seen += len(batch)
            norms.append(gnorm)
        report = LossReport(
            epoch=epoch,
            mean_loss=loss_sum / seen if seen else 0.0,
            triplets_seen=seen,
            grad_norm=float(np.mean(norms)) if norms else 0.0,
        )
        logger.info("epoch %d: loss %.5f (%d triplets)", epoch, report.mean_loss, seen)
        reports.append(report)
    return params, reports


def _select(mode: str, per: list[Triplet], nper: list[Triplet]) -> list[Triplet]:
    if mode == "non_personalized":
        data = nper
    elif mode == "personalized":
        data = per
    else:
        data = per + nper
    if not data:
        raise ValueError(f"no triplets supplied for mode {mode!r}")
    return data
