import math
import re

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from taxoneg.catalog import Item, make_context
from taxoneg.encoder import (
    encode_catalog,
    encode_item,
    encode_query_personalized,
    encode_text,
    fnv1a_64,
    init_params,
    load_params,
    save_params,
    score,
    tokenize_and_hash,
)


def oracle_fnv(token: str) -> int:
    # independent formulation: wrapping uint64 arithmetic instead of masking
    with np.errstate(over="ignore"):
        h = np.uint64(14695981039346656037)
        for byte in token.encode("utf-8"):
            h = np.uint64(h ^ np.uint64(byte)) * np.uint64(1099511628211)
    return int(h)


def oracle_encode(params, tower, text):
    """Straight-line loops: mean over token rows, affine, tanh."""
    w = params.query_proj if tower == "query" else params.item_proj
    b = params.query_bias if tower == "query" else params.item_bias
    toks = [t for t in re.split(r"[^0-9a-z]+", text.lower()) if t]
    pooled = [0.0] * params.d_tok
    for t in toks:
        row = params.token_embeddings[oracle_fnv(t) % params.vocab_buckets]
        for j in range(params.d_tok):
            pooled[j] += row[j] / len(toks)
    out = []
    for k in range(params.d):
        s = b[k]
        for j in range(params.d_tok):
            s += pooled[j] * w[j, k]
        out.append(math.tanh(s))
    return np.array(out)


def small(personalized=False, seed=0):
    return init_params(vocab_buckets=97, d_tok=5, d=4, d_cust=3, personalized=personalized, seed=seed)


def test_fnv_published_vectors():
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64(b"foobar") == 0x85944171F73967E8


def test_tokenize_and_hash():
    assert tokenize_and_hash("", 1 << 16) == []
    a, b = tokenize_and_hash("Drill drill", 1 << 16)
    assert a == b
    assert tokenize_and_hash("cordless drill", 1 << 16) == [oracle_fnv("cordless") % (1 << 16),
                                                            oracle_fnv("drill") % (1 << 16)]


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet="abcxyz019", min_size=0, max_size=12))
def test_fnv_matches_oracle(token):
    assert fnv1a_64(token.encode()) == oracle_fnv(token)


def test_empty_text_is_tanh_bias():
    p = small()
    p.query_bias[:] = [0.1, -0.2, 0.3, 0.0]
    np.testing.assert_array_equal(encode_text(p, "query", ""), np.tanh(p.query_bias))


def test_single_token_projection():
    p = small()
    row = p.token_embeddings[tokenize_and_hash("drill", 97)[0]]
    np.testing.assert_allclose(encode_text(p, "item", "drill"), np.tanh(row @ p.item_proj + p.item_bias), atol=1e-15)


def test_two_tokens_match_oracle():
    p = small(seed=3)
    p.item_bias[:] = 0.05
    for tower in ("query", "item"):
        np.testing.assert_allclose(encode_text(p, tower, "Cordless drill"), oracle_encode(p, tower, "cordless drill"),
                                   atol=1e-12)


def test_unknown_tower():
    with pytest.raises(ValueError):
        encode_text(small(), "user", "x")


def test_encode_item(tool_catalog):
    p = small()
    bare = Item("x", "Oak Plank", "", (), ("a",))
    np.testing.assert_array_equal(encode_item(p, bare), encode_text(p, "item", "Oak Plank"))
    twin = Item("y", "Oak Plank", "", (), ("b",))
    np.testing.assert_array_equal(encode_item(p, bare), encode_item(p, twin))
    it = tool_catalog["c1"]
    np.testing.assert_allclose(encode_item(p, it), oracle_encode(p, "item", "plush carpet roll softy beige"), atol=1e-12)
    np.testing.assert_array_equal(encode_catalog(p, tool_catalog)[tool_catalog.index["c1"]], encode_item(p, it))


def test_personalized_fallbacks(tool_catalog):
    p = small(personalized=True, seed=1)
    q = encode_text(p, "query", "carpet")
    zero = np.tanh(np.concatenate([q, np.zeros(3), np.zeros(4)]) @ p.fusion + p.fusion_bias)
    np.testing.assert_allclose(encode_query_personalized(p, "carpet", None, tool_catalog), zero, atol=1e-15)
    ctx0 = make_context("u", [0, 0, 0], [], dim=3)
    np.testing.assert_allclose(encode_query_personalized(p, "carpet", ctx0, tool_catalog), zero, atol=1e-15)
    # non-personalized model ignores context entirely
    np.testing.assert_array_equal(encode_query_personalized(small(), "carpet", ctx0, tool_catalog),
                                  encode_text(small(), "query", "carpet"))


def test_personalized_matches_oracle(tool_catalog):
    p = small(personalized=True, seed=2)
    p.fusion_bias[:] = [0.01, 0.02, -0.03, 0.04]
    ctx = make_context("u", [0.2, 0.5, 0.9], ["c1", "ghost", "d2"], dim=3)
    q = oracle_encode(p, "query", "carpet tile")
    h1 = oracle_encode(p, "item", "plush carpet roll softy beige")
    h2 = oracle_encode(p, "item", "corded hammer drill boltx 120v")
    x = list(q) + [0.2, 0.5, 0.9] + [(a + b) / 2 for a, b in zip(h1, h2)]
    want = [math.tanh(p.fusion_bias[k] + sum(x[j] * p.fusion[j, k] for j in range(len(x)))) for k in range(4)]
    from collections import Counter
    skipped = Counter()
    got = encode_query_personalized(p, "carpet tile", ctx, tool_catalog, skipped)
    np.testing.assert_allclose(got, want, atol=1e-12)
    assert skipped["unknown_history_item"] == 1


def test_history_of_one_is_that_item(tool_catalog):
    p = small(personalized=True, seed=4)
    ctx = make_context("u", [0, 0, 0], ["h1"], dim=3)
    q = encode_text(p, "query", "x")
    h = encode_item(p, tool_catalog["h1"])
    want = np.tanh(np.concatenate([q, np.zeros(3), h]) @ p.fusion + p.fusion_bias)
    np.testing.assert_array_equal(encode_query_personalized(p, "x", ctx, tool_catalog), want)


def test_feature_dim_mismatch(tool_catalog):
    p = small(personalized=True)
    with pytest.raises(ValueError):
        encode_query_personalized(p, "x", make_context("u", [1.0], [], dim=1), tool_catalog)


def test_score():
    assert score(np.zeros(3), np.array([1.0, 2.0, 3.0])) == 0.0
    assert score(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
    q, i = np.array([0.5, -1.25, 2.0]), np.array([4.0, 0.8, -0.5])
    assert score(q, i) == pytest.approx(0.5 * 4.0 + -1.25 * 0.8 + 2.0 * -0.5, abs=1e-15)
    with pytest.raises(ValueError):
        score(np.zeros(3), np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-10, 10))
def test_score_symmetric_bilinear(seed, alpha):
    rng = np.random.default_rng(seed)
    q, i = rng.normal(size=8), rng.normal(size=8)
    assert score(q, i) == score(i, q)
    assert score(alpha * q, i) == pytest.approx(alpha * score(q, i), rel=1e-9, abs=1e-9)


def test_ranking_invariant_to_positive_scale():
    rng = np.random.default_rng(0)
    X, q = rng.normal(size=(50, 6)), rng.normal(size=6)
    assert np.argsort(-(X @ q), kind="stable").tolist() == np.argsort(-((3.7 * X) @ q), kind="stable").tolist()


def test_encoding_pure():
    p = small(seed=8)
    assert encode_text(p, "query", "red saw").tobytes() == encode_text(p, "query", "red saw").tobytes()


def test_params_roundtrip(tmp_path):
    for personalized in (False, True):
        p = small(personalized, seed=5)
        save_params(p, tmp_path / "m.bin")
        back = load_params(tmp_path / "m.bin")
        for name, arr in p.arrays().items():
            assert back.arrays()[name].tobytes() == arr.tobytes()
        assert back.d_cust == p.d_cust and back.personalized == personalized
    data = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "short.bin").write_bytes(data[:-8])
    with pytest.raises(ValueError, match="bytes"):
        load_params(tmp_path / "short.bin")
    (tmp_path / "magic.bin").write_bytes(b"X" + data[1:])
    with pytest.raises(ValueError, match="magic"):
        load_params(tmp_path / "magic.bin")


def test_non_finite_params_rejected():
    p = small()
    p.item_bias[0] = np.nan
    with pytest.raises(ValueError):
        p.validate()
