"""Offline retrieval metrics, query segmentation, significance and latency."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .catalog import Catalog, CustomerContext
from .encoder import encode_query_personalized

DEFAULT_KS = (8, 12, 24, 100)


@dataclass
class EvalCase:
    query_text: str
    truth: frozenset
    context: CustomerContext | None = None
    query_frequency: int = 0
    purchase_distribution: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.truth:
            raise ValueError(f"case {self.query_text!r} has an empty truth set")
        if self.query_frequency < 0 or any(c < 0 for c in self.purchase_distribution.values()):
            raise ValueError("counts must be >= 0")


def recall_at_k(predicted: Sequence[str], truth, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    truth = set(truth)
    if not truth:
        raise ValueError("empty truth set")
    return len(set(predicted[:k]) & truth) / len(truth)


def evaluate_model(
    params,
    index,
    cases: Sequence[EvalCase],
    catalog: Catalog,
    ks: Sequence[int] = DEFAULT_KS,
    nprobe: int = 1,
    personalized: bool = True,
) -> dict:
    """Encode each case, search, and compute Recall@k.

    Returns ``recall_at`` (means), ``per_case`` (one recall map per case),
    and per-query search latencies in milliseconds. With ``personalized``
    off, customer context is ignored even if the model could use it.
    """
    from .ann import search

    if index.d != params.d:
        raise ValueError(f"index dimension {index.d} != encoder dimension {params.d}")
    kmax = max(ks)
    per_case = []
    latencies = []
    for case in cases:
        ctx = case.context if personalized else None
        q = encode_query_personalized(params, case.query_text, ctx, catalog)
        t0 = time.perf_counter()
        hits = search(index, q, min(kmax, index.n_items), nprobe)
        latencies.append((time.perf_counter() - t0) * 1e3)
        ranked = [i for i, _ in hits]
        per_case.append({k: recall_at_k(ranked, case.truth, k) for k in ks})
    means = {k: float(np.mean([r[k] for r in per_case])) if per_case else 0.0 for k in ks}
    return {"recall_at": means, "per_case": per_case, "latency_ms": latencies}


def normalized_entropy(distribution: Mapping[str, int]) -> float:
    counts = np.array([c for c in distribution.values() if c > 0], dtype=np.float64)
    if counts.size == 0:
        raise ValueError("purchase distribution has no positive counts")
    if counts.size == 1:
        return 0.0
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum() / math.log(counts.size))


def specificity_segment(case: EvalCase | Mapping[str, int], threshold: float = 0.5) -> str:
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    dist = case.purchase_distribution if isinstance(case, EvalCase) else case
    return "specific" if normalized_entropy(dist) < threshold else "general"


def _exact(p: float) -> Fraction:
    # decimal reading of the float, so 0.1 * 100 is exactly 10
    return Fraction(repr(float(p)))


def frequency_segment(cases: Sequence[EvalCase], head_percentile: float = 0.1) -> list[str]:
    """Label cases head/tail; the ceil(p*n) most frequent (ties by query
    text) are head."""
    if not cases:
        raise ValueError("no cases to segment")
    if not 0 < head_percentile < 1:
        raise ValueError("head_percentile must be in (0, 1)")
    order = sorted(range(len(cases)), key=lambda j: (-cases[j].query_frequency, cases[j].query_text, j))
    n_head = max(1, math.ceil(_exact(head_percentile) * len(cases)))
    labels = ["tail"] * len(cases)
    for j in order[:n_head]:
        labels[j] = "head"
    return labels


# --- paired t-test ----------------------------------------------------------


def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-16) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must be in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: float) -> float:
    if math.isinf(t):
        return 0.0
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


class DegenerateTestError(ValueError):
    pass


def paired_t_test(before: Sequence[float], after: Sequence[float]) -> tuple[float, float]:
    """Paired t statistic of ``after - before`` and its two-sided p-value."""
    x = np.asarray(before, dtype=np.float64)
    y = np.asarray(after, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("before and after must be equal-length 1-D sequences")
    n = len(x)
    if n < 2:
        raise ValueError("need at least two pairs")
    diff = y - x
    sd = float(np.std(diff, ddof=1))
    if sd == 0.0:
        raise DegenerateTestError("degenerate: differences have zero variance")
    t = float(diff.mean()) * math.sqrt(n) / sd
    return t, student_t_two_sided_p(t, n - 1)


# --- latency ----------------------------------------------------------------


def latency_percentile(samples_ms: Sequence[float], q: float = 0.95) -> float:
    """Smallest sample v with P(sample <= v) >= q."""
    if len(samples_ms) == 0:
        raise ValueError("no latency samples")
    if not 0 < q <= 1:
        raise ValueError("q must be in (0, 1]")
    ordered = sorted(samples_ms)
    rank = math.ceil(_exact(q) * len(ordered))
    return float(ordered[max(rank, 1) - 1])


# --- reports ----------------------------------------------------------------


def segment_recalls(per_case: Sequence[Mapping[int, float]], labels: Sequence[str]) -> dict:
    out: dict[str, dict] = {}
    for label in sorted(set(labels)):
        rows = [r for r, lab in zip(per_case, labels) if lab == label]
        out[label] = {"n": len(rows), **{str(k): float(np.mean([r[k] for r in rows])) for k in rows[0]}}
    return out


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(rows: Sequence[Mapping], path, columns: Sequence[str]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({c: row[c] for c in columns})
