import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special

from taxoneg.ann import build_index, search
from taxoneg.bench import bench_samplers
from taxoneg.catalog import Catalog, Item
from taxoneg.encoder import encode_catalog, encode_text, init_params
from taxoneg.evaluation import (
    DegenerateTestError,
    EvalCase,
    evaluate_model,
    frequency_segment,
    latency_percentile,
    normalized_entropy,
    paired_t_test,
    recall_at_k,
    regularized_incomplete_beta,
    segment_recalls,
    specificity_segment,
    student_t_two_sided_p,
)


def t_two_sided_oracle(t, df):
    """2 * P(T > |t|) by adaptive quadrature of the Student t density."""
    c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(df * math.pi)
    pdf = lambda x: c * (1 + x * x / df) ** (-(df + 1) / 2)  # noqa: E731
    tail, _ = integrate.quad(pdf, abs(t), np.inf, epsabs=1e-14, epsrel=1e-12)
    return 2 * tail


def test_recall_basics():
    assert recall_at_k(["a", "b", "c", "x"], {"a", "b"}, 3) == 1.0
    assert recall_at_k(["x", "y"], {"a"}, 2) == 0.0
    assert recall_at_k(["a", "x", "b", "c"], {"a", "b", "c"}, 3) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        recall_at_k(["a"], set(), 1)
    with pytest.raises(ValueError):
        recall_at_k(["a"], {"a"}, 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 30), max_size=30, unique=True), st.sets(st.integers(0, 30), min_size=1))
def test_recall_monotone_in_k(pred, truth):
    pred = [str(p) for p in pred]
    truth = {str(t) for t in truth}
    vals = [recall_at_k(pred, truth, k) for k in range(1, 32)]
    assert vals == sorted(vals)


def test_entropy_examples():
    assert normalized_entropy({"a": 4}) == 0.0
    assert specificity_segment({"a": 4}) == "specific"
    assert normalized_entropy({str(j): 3 for j in range(10)}) == pytest.approx(1.0, abs=1e-15)
    assert specificity_segment({str(j): 3 for j in range(10)}) == "general"
    want = (-0.75 * math.log(0.75) - 0.25 * math.log(0.25)) / math.log(2)
    assert normalized_entropy({"a": 3, "b": 1}) == pytest.approx(want, abs=1e-15)
    assert normalized_entropy({"a": 3, "b": 0}) == 0.0
    with pytest.raises(ValueError):
        normalized_entropy({"a": 0})
    with pytest.raises(ValueError):
        specificity_segment({"a": 1}, threshold=1.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=12), st.integers(1, 9))
def test_entropy_scale_invariant(counts, c):
    dist = {str(j): v for j, v in enumerate(counts)}
    scaled = {k: v * c for k, v in dist.items()}
    assert normalized_entropy(scaled) == pytest.approx(normalized_entropy(dist), abs=1e-12)
    assert specificity_segment(scaled, 0.5) == specificity_segment(dist, 0.5) or \
        abs(normalized_entropy(dist) - 0.5) < 1e-12


def case(q, freq):
    return EvalCase(q, frozenset({"x"}), query_frequency=freq)


def test_frequency_segment():
    cases = [case(f"q{j}", 5) for j in range(6)]
    labels = frequency_segment(cases, 0.5)
    assert labels == ["head"] * 3 + ["tail"] * 3
    assert frequency_segment([case("only", 1)], 0.1) == ["head"]
    rng = np.random.default_rng(0)
    freqs = rng.permutation(1000)[:100]
    cases = [case(f"q{j}", int(f)) for j, f in enumerate(freqs)]
    labels = frequency_segment(cases, 0.1)
    top = set(np.argsort(-freqs)[:10])
    assert {j for j, lab in enumerate(labels) if lab == "head"} == top
    with pytest.raises(ValueError):
        frequency_segment([], 0.1)
    with pytest.raises(ValueError):
        frequency_segment(cases, 0.0)


def test_eval_case_validation():
    with pytest.raises(ValueError):
        EvalCase("q", frozenset())
    with pytest.raises(ValueError):
        EvalCase("q", frozenset({"a"}), purchase_distribution={"a": -1})


def test_t_test_hand_example():
    t, p = paired_t_test([0, 0, 0, 0], [1, 1, 1, -1])
    assert t == pytest.approx(1.0, abs=1e-15)
    assert p == pytest.approx(t_two_sided_oracle(1.0, 3), abs=1e-10)


def test_t_test_degenerate():
    with pytest.raises(DegenerateTestError, match="degenerate"):
        paired_t_test([1, 2, 3], [1, 2, 3])
    with pytest.raises(DegenerateTestError):
        paired_t_test([1, 2, 3], [2, 3, 4])  # constant shift
    with pytest.raises(ValueError):
        paired_t_test([1], [2])
    with pytest.raises(ValueError):
        paired_t_test([1, 2], [1, 2, 3])


def test_t_test_n10_against_quadrature():
    rng = np.random.default_rng(10)
    before, after = rng.normal(size=10), rng.normal(0.4, 1, size=10)
    t, p = paired_t_test(before, after)
    d = after - before
    assert t == pytest.approx(d.mean() / (d.std(ddof=1) / math.sqrt(10)), abs=1e-12)
    assert p == pytest.approx(t_two_sided_oracle(t, 9), abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.05, 60), st.floats(0.05, 60), st.floats(0, 1))
def test_incomplete_beta_matches_scipy(a, b, x):
    assert regularized_incomplete_beta(a, b, x) == pytest.approx(special.betainc(a, b, x), abs=1e-10)


def test_p_value_extremes():
    assert student_t_two_sided_p(0.0, 5) == pytest.approx(1.0, abs=1e-15)
    assert student_t_two_sided_p(float("inf"), 5) == 0.0
    assert student_t_two_sided_p(50.0, 100) < 1e-60


def test_latency_percentile():
    assert latency_percentile(list(range(1, 101)), 0.95) == 95
    assert latency_percentile([7.5], 0.3) == 7.5
    assert latency_percentile(list(range(1, 101)), 0.1) == 10  # 0.1 * 100 is exactly 10
    rng = np.random.default_rng(1)
    xs = rng.exponential(size=1000).tolist()
    assert latency_percentile(xs, 0.95) == sorted(xs)[949]
    assert latency_percentile(xs, 1.0) == max(xs)
    with pytest.raises(ValueError):
        latency_percentile([], 0.5)


def test_segment_recall_weighted_mean():
    rng = np.random.default_rng(2)
    per_case = [{8: float(rng.random()), 24: float(rng.random())} for _ in range(30)]
    labels = [("head", "tail", "mid")[j % 3] for j in range(30)]
    seg = segment_recalls(per_case, labels)
    for k in (8, 24):
        overall = np.mean([r[k] for r in per_case])
        weighted = sum(s["n"] * s[str(k)] for s in seg.values()) / 30
        assert weighted == pytest.approx(overall, abs=1e-12)


def eval_fixture(n_cases=50):
    rng = np.random.default_rng(3)
    words = [f"w{j}" for j in range(25)]
    items = [Item(f"i{j:03d}", " ".join(rng.choice(words, 3)), "", (), ("x",)) for j in range(120)]
    cat = Catalog.from_items(items)
    params = init_params(vocab_buckets=512, d_tok=8, d=8, seed=2)
    idx = build_index((cat.ids, encode_catalog(params, cat)), "exact")
    cases = [EvalCase(" ".join(rng.choice(words, 2)), frozenset(rng.choice(cat.ids, 5, replace=False)))
             for _ in range(n_cases)]
    return cat, params, idx, cases


def test_evaluate_model_matches_recomputation():
    cat, params, idx, cases = eval_fixture()
    ks = (8, 12, 24, 100)
    rep = evaluate_model(params, idx, cases, cat, ks, personalized=False)
    per = []
    X = encode_catalog(params, cat)
    for c in cases:
        s = X @ encode_text(params, "query", c.query_text)
        ranked = [cat.ids[j] for j in sorted(range(len(cat)), key=lambda j: (-s[j], cat.ids[j]))]
        per.append({k: len(set(ranked[:k]) & c.truth) / len(c.truth) for k in ks})
    for k in ks:
        assert rep["recall_at"][k] == pytest.approx(np.mean([r[k] for r in per]), abs=1e-12)
    again = evaluate_model(params, idx, cases, cat, ks, personalized=False)
    assert again["recall_at"] == rep["recall_at"] and again["per_case"] == rep["per_case"]
    assert len(rep["latency_ms"]) == len(cases)


def test_evaluate_model_rank_one():
    cat, params, idx, cases = eval_fixture(1)
    top = search(idx, encode_text(params, "query", cases[0].query_text), 1)[0][0]
    rep = evaluate_model(params, idx, [EvalCase(cases[0].query_text, frozenset({top}))], cat, (8,))
    assert rep["recall_at"][8] == 1.0


def test_evaluate_model_dim_mismatch():
    cat, params, idx, cases = eval_fixture(2)
    other = init_params(vocab_buckets=512, d_tok=8, d=6, seed=2)
    with pytest.raises(ValueError):
        evaluate_model(other, idx, cases, cat, (8,))


def test_bench_zero_trials():
    assert bench_samplers([1000], trials=0) == []


def test_bench_rows():
    rows = bench_samplers([500, 1000], bucket_size=50, samplers=("tb_hns", "random"), trials=50, repeats=1)
    assert [(r["sampler"], r["n_items"]) for r in rows] == [("tb_hns", 500), ("random", 500),
                                                            ("tb_hns", 1000), ("random", 1000)]
    assert all(r["mean_ns"] > 0 and r["p95_ns"] > 0 for r in rows)
