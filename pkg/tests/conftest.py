import json
from pathlib import Path

import numpy as np
import pytest

from taxoneg.catalog import Catalog, Item


def tool_items():
    """Small hand-built catalog: home > flooring > {carpet, hardwood}, tools > drills."""
    spec = [
        ("c1", "plush carpet roll", "Softy", {"color": "beige"}, ["home", "flooring", "carpet"]),
        ("c2", "berber carpet tile", "Softy", {"color": "grey"}, ["home", "flooring", "carpet"]),
        ("h1", "oak hardwood plank", "Woodco", {"color": "brown"}, ["home", "flooring", "hardwood"]),
        ("h2", "maple hardwood plank", "Woodco", {}, ["home", "flooring", "hardwood"]),
        ("l1", "led ceiling lamp", "", {"color": "white"}, ["home", "lighting", "lamps"]),
        ("d1", "cordless drill kit", "Boltx", {"voltage": "18v"}, ["tools", "power", "drills"]),
        ("d2", "corded hammer drill", "Boltx", {"voltage": "120v"}, ["tools", "power", "drills"]),
        ("s1", "circular saw", "Boltx", {}, ["tools", "power", "saws"]),
        ("w1", "adjustable wrench", "Grip", {}, ["tools"]),
    ]
    return [Item(i, t, b, tuple(a.items()), tuple(p)) for i, t, b, a, p in spec]


@pytest.fixture
def tool_catalog() -> Catalog:
    return Catalog.from_items(tool_items())


def random_catalog(rng: np.random.Generator, max_branch: int = 3, max_depth: int = 3, max_items: int = 6) -> Catalog:
    """Random ragged taxonomy with at least one item."""
    items = []

    def grow(path, depth):
        n_children = int(rng.integers(0, max_branch + 1)) if depth < max_depth else 0
        if n_children == 0 or depth == max_depth:
            for _ in range(int(rng.integers(1, max_items + 1))):
                items.append(Item(f"it{len(items):04d}", f"item {len(items)}", "", (), tuple(path)))
            return
        for j in range(n_children):
            grow(path + [f"{path[-1]}.{j}"], depth + 1)

    for top in range(int(rng.integers(1, max_branch + 1))):
        grow([f"t{top}"], 1)
    return Catalog.from_items(items)


def write_jsonl(path: Path, records) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def gradient_fixture(personalized: bool, in_batch: bool, seed: int = 0):
    """d=4, d_tok=4 model, 8 random triplets over a tiny catalog, optional customers."""
    from taxoneg.catalog import make_context
    from taxoneg.encoder import init_params
    from taxoneg.sampling import Triplet
    from taxoneg.training import TrainConfig

    rng = np.random.default_rng(seed)
    words = ["red", "blue", "drill", "saw", "kit", "oak", "lamp", "rug", "bit", "pro"]
    items = [Item(f"i{j}", " ".join(rng.choice(words, size=3)), "", (), ("a", f"l{j % 3}")) for j in range(12)]
    cat = Catalog.from_items(items)
    customers = {f"u{j}": make_context(f"u{j}", rng.uniform(0, 1, 3), list(rng.choice(cat.ids, size=j + 1)), dim=3)
                 for j in range(3)}
    trips = []
    for j in range(8):
        pos, neg = rng.choice(cat.ids, size=2, replace=False)
        trips.append(Triplet(" ".join(rng.choice(words, size=2)), str(pos),
                             None if j == 3 else str(neg), customer_id=f"u{j % 4}" if personalized else None))
    params = init_params(vocab_buckets=16, d_tok=4, d=4, d_cust=3, personalized=personalized, seed=seed)
    for arr in params.arrays().values():
        # move off the zero-bias init so every group has a generic gradient
        arr += rng.uniform(-0.3, 0.3, arr.shape)
    cfg = TrainConfig(mode="personalized" if personalized else "non_personalized",
                      in_batch_negatives=in_batch, vocab_buckets=16, d_tok=4, d=4, d_cust=3)
    return params, trips, cat, cfg, customers


def finite_difference_errors(params, trips, cat, cfg, customers, eps=1e-5):
    """Largest entry-wise relative error between analytic and central-difference
    gradients, per parameter group."""
    from taxoneg.training import batch_loss

    _, grads = batch_loss(params, trips, cat, cfg, customers)
    analytic = grads.dense(params)
    worst = {}
    for name, arr in params.arrays().items():
        g = analytic[name]
        err = 0.0
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            up, _ = batch_loss(params, trips, cat, cfg, customers)
            arr[idx] = old - eps
            down, _ = batch_loss(params, trips, cat, cfg, customers)
            arr[idx] = old
            num = (up - down) / (2 * eps)
            scale = max(abs(num), abs(g[idx]))
            if scale > 1e-10:
                err = max(err, abs(num - g[idx]) / scale)
        worst[name] = err
    return worst
