import json

import pytest

from taxoneg.catalog import aggregate_engagement, load_catalog, load_customers, load_engagement
from taxoneg.synthetic import SyntheticSpec, bench_catalog, generate, truth_items


def test_standard_spec_counts(tmp_path):
    paths = generate(SyntheticSpec(seed=0)).write(tmp_path)
    lines = paths["catalog"].read_text().splitlines()
    assert len(lines) == 4 ** 3 * 10 == 640
    cat = load_catalog(paths["catalog"])
    assert all(len(it.taxonomy_path) == 3 for it in cat.items.values())
    assert len(load_customers(paths["customers"], 8)) == 200
    truth = json.loads(paths["truth"].read_text())
    assert len(truth["queries"]) == 400


def test_same_seed_same_bytes(tmp_path):
    a = generate(SyntheticSpec(seed=4, n_queries=50, n_customers=20)).write(tmp_path / "a")
    b = generate(SyntheticSpec(seed=4, n_queries=50, n_customers=20)).write(tmp_path / "b")
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes()


def test_single_leaf(tmp_path):
    paths = generate(SyntheticSpec(branching=1, depth=1, items_per_leaf=3, n_queries=3, n_customers=2)).write(tmp_path)
    cat = load_catalog(paths["catalog"])
    assert len(cat) == 3
    leaf = next(iter(cat.items.values())).leaf
    assert cat.taxonomy.bucket[leaf] == cat.ids


def test_purchases_concentrate_in_truth(tmp_path):
    spec = SyntheticSpec(seed=2, noise_rate=0.1)
    paths = generate(spec).write(tmp_path)
    cat = load_catalog(paths["catalog"])
    agg = aggregate_engagement(load_engagement(paths["engagement"]), cat)
    truth = json.loads(paths["truth"].read_text())
    inside = total = 0
    for (q, cid), cell in agg.counts.items():
        rel = truth_items(truth, cat.taxonomy, q, cid)
        for item, n in cell["purchase"].items():
            total += n
            inside += n * (item in rel)
    assert 0.85 < inside / total < 0.95  # 10% noise, a few noisy picks land in the truth leaf anyway


def test_ambiguous_truth_depends_on_customer(tmp_path):
    data = generate(SyntheticSpec(seed=1, ambiguous_fraction=0.5, n_queries=40))
    cat = load_catalog(data.write(tmp_path)["catalog"])
    q = next(q for q, info in data.truth["queries"].items() if info["kind"] == "ambiguous")
    by_style = {}
    for cid, style in data.truth["customer_style"].items():
        by_style.setdefault(style, truth_items(data.truth, cat.taxonomy, q, cid))
    assert len(set(by_style.values())) == len(by_style) > 1
    whole = truth_items(data.truth, cat.taxonomy, q)
    assert all(s < whole for s in by_style.values())


def test_invalid_spec():
    with pytest.raises(ValueError):
        SyntheticSpec(branching=0)
    with pytest.raises(ValueError):
        SyntheticSpec(noise_rate=1.5)
    with pytest.raises(ValueError):
        SyntheticSpec(style_scope="local")


def test_bench_catalog_bucket_size():
    cat, _ = bench_catalog(1000, bucket_size=50)
    assert len(cat) == 1000
    for item in list(cat.items.values())[:20]:
        assert len(cat.taxonomy.bucket[item.taxonomy_path[-2]]) == 50
    with pytest.raises(ValueError):
        bench_catalog(1001, 50)
