"""Sampler comparison and personalization experiment on one dataset."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


from .ann import build_index
from .catalog import (
    DEFAULT_HISTORY_WINDOW,
    Catalog,
    aggregate_engagement,
    load_catalog,
    load_customers,
    load_engagement,
)
from .encoder import ModelParams, encode_catalog, fnv1a_64, init_params
from .evaluation import (
    DEFAULT_KS,
    DegenerateTestError,
    EvalCase,
    evaluate_model,
    frequency_segment,
    paired_t_test,
    segment_recalls,
    specificity_segment,
    write_json,
)
from .lexical import build_inverted_index
from .sampling import SAMPLERS, SamplerConfig, build_triplets, write_stats, write_triplets
from .synthetic import truth_items
from .training import TrainConfig, train, write_loss_reports

logger = logging.getLogger(__name__)

# Desk-scale schedule for the sampler comparison. The library default
# (lr 0.05, 10 epochs) barely moves a randomly initialized encoder.
EXPERIMENT_TRAIN_DEFAULTS = {"learning_rate": 1.0, "epochs": 20}


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"stage {stage} failed: {exc}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    catalog: str = ""
    engagement: str = ""
    customers: str = ""
    truth: str = ""
    out_dir: str = "experiment_out"
    samplers: tuple[str, ...] = ("random", "bm25", "tb_hns")
    seed: int = 0
    max_attempts: int = 10
    levels: int = 1
    n_neg: int = 1
    pool_k: int = 20
    personalization: bool = True
    personalized_mode: str = "personalized"
    test_fraction: float = 0.2
    ks: tuple[int, ...] = DEFAULT_KS
    ann_kind: str = "exact"
    n_clusters: int = 16
    nprobe: int = 4
    entropy_threshold: float = 0.5
    head_percentile: float = 0.1
    history_window: int = DEFAULT_HISTORY_WINDOW
    write_triplets: bool = True
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**EXPERIMENT_TRAIN_DEFAULTS))

    def __post_init__(self):
        for s in self.samplers:
            if s not in SAMPLERS:
                raise ValueError(f"unknown sampler {s!r}")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must be in (0, 1)")

    @classmethod
    def from_dict(cls, raw: dict[str, str], **overrides) -> "ExperimentConfig":
        from .training import _parse_value, train_config_from_dict

        own = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, value in raw.items():
            if key in ("samplers", "ks"):
                items = [v.strip() for v in value.split(",") if v.strip()]
                kw[key] = tuple(int(v) for v in items) if key == "ks" else tuple(items)
            elif key in own and key != "train":
                kw[key] = _parse_value(value, own[key])
        seed = overrides.get("seed")
        kw.update({k: v for k, v in overrides.items() if v is not None})
        train_raw = {k[len("train."):] if k.startswith("train.") else k: v for k, v in raw.items()}
        kw["train"] = train_config_from_dict({**{k: str(v) for k, v in EXPERIMENT_TRAIN_DEFAULTS.items()},
                                              **train_raw}, seed=seed)
        return cls(**kw)


def is_test_query(query: str, seed: int, fraction: float) -> bool:
    h = fnv1a_64(f"{seed}\x1f{query}".encode("utf-8"))
    return (h % 1_000_000) < fraction * 1_000_000


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise StageError(name, exc) from exc


def _index_for(params: ModelParams, catalog: Catalog, cfg: ExperimentConfig):
    vecs = encode_catalog(params, catalog)
    n_clusters = min(cfg.n_clusters, len(catalog)) if cfg.ann_kind == "ivf" else None
    return build_index((catalog.ids, vecs), cfg.ann_kind, n_clusters, cfg.seed)


def _nprobe(index, cfg) -> int:
    return min(cfg.nprobe, index.n_clusters) if index.kind == "ivf" else 1


def build_cases(agg, catalog, test_queries, customers, truth, personalized: bool) -> list[EvalCase]:
    cases = []
    if personalized:
        keys = [(q, c) for q, c in agg.keys() if q in test_queries]
    else:
        keys = [(q, None) for q in sorted(test_queries)]
    for q, cid in keys:
        if truth is not None:
            rel = truth_items(truth, catalog.taxonomy, q, cid)
        elif cid is None:
            rel = frozenset(agg.positives(q))
        else:
            rel = frozenset(agg.positives(q, cid))
        if not rel:
            continue
        cases.append(EvalCase(
            query_text=q,
            truth=rel,
            context=customers.get(cid) if cid else None,
            query_frequency=agg.query_frequency.get(q, 0),
            purchase_distribution=dict(agg.query_purchases.get(q, {})),
        ))
    return cases


def train_with_sampler(sampler_name, cfg, catalog, agg, customers, train_keys, personalized, bm25=None):
    scfg = SamplerConfig(sampler_name, cfg.max_attempts, cfg.levels, cfg.n_neg, cfg.pool_k)
    mode = cfg.personalized_mode if personalized else "non_personalized"
    tcfg = TrainConfig(**{**asdict(cfg.train), "mode": mode})
    init = init_params(tcfg.vocab_buckets, tcfg.d_tok, tcfg.d, tcfg.d_cust,
                       personalized=tcfg.personalized, seed=tcfg.seed)
    per_keys = [k for k in train_keys if k[1] is not None]
    nper_keys = [k for k in train_keys if k[1] is None]

    def make(params):
        ance = (params, _index_for(params, catalog, cfg)) if sampler_name == "ance" else None
        per = nper = []
        stats = None
        if mode in ("personalized", "combined"):
            per, stats = build_triplets(agg, catalog, scfg, True, cfg.seed, customers, bm25, ance, per_keys)
        if mode in ("non_personalized", "combined"):
            nper, nstats = build_triplets(agg, catalog, scfg, False, cfg.seed, customers, bm25, ance, nper_keys)
            stats = stats or nstats
        return per, nper, stats

    per, nper, stats = _stage(f"mine:{sampler_name}", make, init)
    remine = None
    if sampler_name == "ance":
        tcfg.ance_refresh_epochs = tcfg.ance_refresh_epochs or 1
        remine = lambda p: make(p)[:2]  # noqa: E731
    params, reports = _stage(f"train:{sampler_name}", train, catalog, per, nper, tcfg,
                             customers, init, remine)
    return params, reports, per + nper, stats


def run_experiment(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    catalog = _stage("ingest", load_catalog, cfg.catalog)
    events = _stage("ingest", load_engagement, cfg.engagement)
    customers = _stage("ingest", load_customers, cfg.customers, cfg.train.d_cust, cfg.history_window) \
        if cfg.customers else {}
    truth = json.loads(Path(cfg.truth).read_text(encoding="utf-8")) if cfg.truth else None
    agg = aggregate_engagement(events, catalog)

    queries = sorted(agg.query_frequency)
    test_queries = {q for q in queries if is_test_query(q, cfg.seed, cfg.test_fraction)}
    train_nper = [(q, None) for q in queries if q not in test_queries]
    train_per = [(q, c) for q, c in agg.keys() if q not in test_queries]
    bm25 = build_inverted_index(catalog) if "bm25" in cfg.samplers else None

    nper_cases = build_cases(agg, catalog, test_queries, customers, truth, personalized=False)
    report: dict = {
        "seed": cfg.seed,
        "n_items": len(catalog),
        "n_test_queries": len(test_queries),
        "n_cases": len(nper_cases),
        "ks": list(cfg.ks),
        "samplers": {},
        "skipped_events": agg.skipped,
    }
    models: dict[str, ModelParams] = {}
    for name in cfg.samplers:
        logger.info("sampler %s", name)
        params, reports, triplets, stats = train_with_sampler(
            name, cfg, catalog, agg, customers, train_nper, personalized=False, bm25=bm25)
        models[name] = params
        index = _stage(f"index:{name}", _index_for, params, catalog, cfg)
        res = _stage(f"eval:{name}", evaluate_model, params, index, nper_cases, catalog,
                     cfg.ks, _nprobe(index, cfg), False)
        report["samplers"][name] = {
            "recall_at": {str(k): v for k, v in res["recall_at"].items()},
            "triplets": len(triplets),
            "final_loss": reports[-1].mean_loss if reports else None,
        }
        write_loss_reports(reports, out / f"loss_{name}.csv")
        write_stats(stats, out / f"stats_{name}.json")
        if cfg.write_triplets:
            write_triplets(triplets, out / f"triplets_{name}.tsv")

    with (out / "comparison.tsv").open("w", encoding="utf-8", newline="") as fh:
        fh.write("sampler\t" + "\t".join(f"recall@{k}" for k in cfg.ks) + "\n")
        for name in cfg.samplers:
            rec = report["samplers"][name]["recall_at"]
            fh.write(name + "\t" + "\t".join(f"{rec[str(k)]:.6f}" for k in cfg.ks) + "\n")

    if cfg.personalization and customers:
        report["personalization"] = _stage(
            "personalization", personalization_comparison, cfg, catalog, agg, customers,
            truth, test_queries, train_per, train_nper, models.get("tb_hns"), bm25, out)
    write_json(report, out / "report.json")
    return report


def personalization_comparison(cfg, catalog, agg, customers, truth, test_queries,
                               train_per, train_nper, base_model, bm25, out):
    """Non-personalized vs personalized model on (query, customer) cases."""
    if base_model is None:
        base_model, _, _, _ = train_with_sampler("tb_hns", cfg, catalog, agg, customers,
                                                 train_nper, False, bm25)
    keys = train_per + (train_nper if cfg.personalized_mode == "combined" else [])
    per_model, reports, triplets, stats = train_with_sampler(
        "tb_hns", cfg, catalog, agg, customers, keys, True, bm25)
    write_loss_reports(reports, out / "loss_personalized.csv")
    write_stats(stats, out / "stats_personalized.json")
    if cfg.write_triplets:
        write_triplets(triplets, out / "triplets_personalized.tsv")

    cases = build_cases(agg, catalog, test_queries, customers, truth, personalized=True)
    results = {}
    for label, params in (("non_personalized", base_model), ("personalized", per_model)):
        index = _index_for(params, catalog, cfg)
        results[label] = evaluate_model(params, index, cases, catalog, cfg.ks, _nprobe(index, cfg), True)

    k0 = cfg.ks[0]
    before = [r[k0] for r in results["non_personalized"]["per_case"]]
    after = [r[k0] for r in results["personalized"]["per_case"]]
    try:
        t, p = paired_t_test(before, after)
    except DegenerateTestError:
        t, p = None, None

    spec_labels = [
        specificity_segment(c, cfg.entropy_threshold) if any(c.purchase_distribution.values()) else "unknown"
        for c in cases
    ]
    freq_labels = frequency_segment(cases, cfg.head_percentile)
    segments = {}
    for label in results:
        pc = results[label]["per_case"]
        segments[label] = {
            "specificity": segment_recalls(pc, spec_labels),
            "frequency": segment_recalls(pc, freq_labels),
        }
    return {
        "n_cases": len(cases),
        "recall_at": {lab: {str(k): v for k, v in r["recall_at"].items()} for lab, r in results.items()},
        "metric_for_test": f"recall@{k0}",
        "t_statistic": t,
        "p_value": p,
        "per_segment": segments,
        "per_case_recall": {lab: [r[k0] for r in res["per_case"]] for lab, res in results.items()},
    }
