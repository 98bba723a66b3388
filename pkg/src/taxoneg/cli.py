"""Command-line entry point: ``taxoneg <command> ...``.

Errors are reported on stderr as a single ``ERROR\t<command>\t<message>``
line with exit status 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from . import __version__

logger = logging.getLogger("taxoneg")


def _csv_ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _csv_strs(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


# --- commands ---------------------------------------------------------------


def cmd_generate(args) -> int:
    from .synthetic import SyntheticSpec, generate

    spec = SyntheticSpec(
        branching=args.branching, depth=args.depth, items_per_leaf=args.items_per_leaf,
        n_customers=args.customers, n_queries=args.queries, seed=args.seed,
        noise_rate=args.noise, ambiguous_fraction=args.ambiguous_fraction,
    )
    paths = generate(spec).write(args.out)
    for name, path in paths.items():
        print(f"{name}\t{path}")
    return 0


def cmd_ingest(args) -> int:
    from .catalog import aggregate_engagement, load_catalog, load_customers, load_engagement

    catalog = load_catalog(args.catalog)
    tax = catalog.taxonomy
    report = {
        "items": len(catalog),
        "categories": len(tax.nodes),
        "multi_path_items": len(catalog.multi_path_items),
        "depth_one_items": len(catalog.depth_one_items),
    }
    if args.engagement:
        events = load_engagement(args.engagement)
        agg = aggregate_engagement(events, catalog)
        report.update(events=len(events), events_counted=agg.counted, events_skipped=agg.skipped,
                      query_customer_keys=len(agg.counts), queries=len(agg.query_frequency))
    if args.customers:
        report["customers"] = len(load_customers(args.customers, args.d_cust, args.history_window))
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def _load_inputs(args):
    from .catalog import aggregate_engagement, load_catalog, load_customers, load_engagement

    catalog = load_catalog(args.catalog)
    agg = aggregate_engagement(load_engagement(args.engagement), catalog) if getattr(args, "engagement", None) else None
    customers = load_customers(args.customers, args.d_cust, args.history_window) \
        if getattr(args, "customers", None) else {}
    return catalog, agg, customers


def cmd_mine(args) -> int:
    from .ann import build_index
    from .encoder import encode_catalog, init_params, load_params
    from .lexical import build_inverted_index
    from .sampling import SamplerConfig, build_triplets, write_stats, write_triplets

    catalog, agg, customers = _load_inputs(args)
    scfg = SamplerConfig(args.sampler, args.max_attempts, args.levels, args.n_neg, args.pool_k)
    bm25 = build_inverted_index(catalog) if args.sampler == "bm25" else None
    ance = None
    if args.sampler == "ance":
        params = load_params(args.params) if args.params else init_params(
            personalized=args.personalized, seed=args.seed)
        ance = (params, build_index((catalog.ids, encode_catalog(params, catalog)), "exact"))
    triplets, stats = build_triplets(agg, catalog, scfg, args.personalized, args.seed,
                                     customers, bm25, ance)
    write_triplets(triplets, args.out)
    if args.stats:
        write_stats(stats, args.stats)
    print(f"triplets\t{len(triplets)}\nnegatives\t{stats.negatives_emitted}\nnone\t{stats.none_returned}")
    return 0


def _train_config(args, **extra):
    from .training import parse_config_text, train_config_from_dict

    raw = parse_config_text(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    return train_config_from_dict(raw, seed=args.seed, **extra)


def cmd_train(args) -> int:
    from .catalog import load_catalog, load_customers
    from .encoder import save_params
    from .sampling import read_triplets
    from .training import train, write_loss_reports

    cfg = _train_config(args, mode=args.mode, epochs=args.epochs)
    catalog = load_catalog(args.catalog)
    customers = load_customers(args.customers, cfg.d_cust, args.history_window) if args.customers else {}
    nper = [t for p in args.triplets for t in read_triplets(p)]
    per = [t for p in args.per_triplets for t in read_triplets(p)]
    params, reports = train(catalog, per, nper, cfg, customers)
    save_params(params, args.out)
    if args.losses:
        write_loss_reports(reports, args.losses)
    for r in reports:
        print(f"{r.epoch}\t{r.mean_loss:.6f}\t{r.triplets_seen}\t{r.grad_norm:.6f}")
    return 0


def cmd_build_ann(args) -> int:
    from .ann import build_index, save_index
    from .catalog import load_catalog
    from .encoder import encode_catalog, load_params

    catalog = load_catalog(args.catalog)
    params = load_params(args.params)
    index = build_index((catalog.ids, encode_catalog(params, catalog)), args.kind,
                        args.clusters if args.kind == "ivf" else None, args.seed)
    save_index(index, args.out)
    print(f"items\t{index.n_items}\nclusters\t{index.n_clusters}")
    return 0


def cmd_search(args) -> int:
    from .ann import filter_results, load_index, search
    from .catalog import load_catalog, load_customers
    from .encoder import encode_query_personalized, load_params

    catalog = load_catalog(args.catalog)
    params = load_params(args.params)
    index = load_index(args.index)
    if index.d != params.d:
        raise ValueError(f"index dimension {index.d} != model dimension {params.d}")
    ctx = None
    if args.customer:
        customers = load_customers(args.customers, params.d_cust or args.d_cust, args.history_window) \
            if args.customers else {}
        ctx = customers.get(args.customer)
        if ctx is None:
            logger.warning("unknown customer %r; searching without personalization", args.customer)
    q = encode_query_personalized(params, args.query, ctx, catalog)
    nprobe = min(args.nprobe, index.n_clusters) if index.kind == "ivf" else 1
    hits = search(index, q, min(args.k, index.n_items), nprobe)
    for item_id, s in filter_results(hits, args.min_score):
        print(f"{item_id}\t{s:.6f}\t{catalog[item_id].title}")
    return 0


def cmd_index_build(args) -> int:
    from .catalog import load_catalog
    from .lexical import build_inverted_index

    index = build_inverted_index(load_catalog(args.catalog), args.k1, args.b)
    payload = {
        "k1": index.k1, "b": index.b, "doc_len": index.doc_len,
        "postings": {t: [[i, tf] for i, tf in p] for t, p in sorted(index.postings.items())},
    }
    Path(args.out).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")
    print(f"docs\t{index.doc_count}\nterms\t{len(index.postings)}")
    return 0


def load_bm25(path):
    from .lexical import InvertedIndex

    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    doc_len = {k: int(v) for k, v in raw["doc_len"].items()}
    return InvertedIndex(
        postings={t: [(i, int(tf)) for i, tf in p] for t, p in raw["postings"].items()},
        doc_len=doc_len,
        avg_doc_len=sum(doc_len.values()) / len(doc_len),
        doc_count=len(doc_len),
        k1=float(raw["k1"]),
        b=float(raw["b"]),
    )


def cmd_index_query(args) -> int:
    from .lexical import bm25_topk

    for item_id, s in bm25_topk(load_bm25(args.index), args.query, args.k):
        print(f"{item_id}\t{s:.6f}")
    return 0


def cmd_eval_run(args) -> int:
    from .ann import load_index
    from .encoder import load_params
    from .evaluation import evaluate_model, latency_percentile, write_json
    from .experiment import build_cases, is_test_query

    catalog, agg, customers = _load_inputs(args)
    params = load_params(args.params)
    index = load_index(args.index)
    truth = json.loads(Path(args.truth).read_text(encoding="utf-8")) if args.truth else None
    queries = sorted(agg.query_frequency)
    test = {q for q in queries if args.all_queries or is_test_query(q, args.seed, args.test_fraction)}
    cases = build_cases(agg, catalog, test, customers, truth, personalized=args.personalized)
    ks = _csv_ints(args.ks)
    nprobe = min(args.nprobe, index.n_clusters) if index.kind == "ivf" else 1
    res = evaluate_model(params, index, cases, catalog, ks, nprobe, args.personalized)
    report = {
        "n_cases": len(cases),
        "recall_at": {str(k): v for k, v in res["recall_at"].items()},
        "latency_p95": latency_percentile(res["latency_ms"], 0.95) if cases else None,
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        write_json(report, args.out)
    print(text)
    return 0


def cmd_eval_segment(args) -> int:
    from .catalog import aggregate_engagement, load_catalog, load_engagement
    from .evaluation import EvalCase, frequency_segment, normalized_entropy, specificity_segment

    catalog = load_catalog(args.catalog)
    agg = aggregate_engagement(load_engagement(args.engagement), catalog)
    queries = sorted(q for q in agg.query_purchases if agg.query_purchases[q])
    cases = [EvalCase(q, frozenset(agg.query_purchases[q]), None, agg.query_frequency[q],
                      dict(agg.query_purchases[q])) for q in queries]
    freq = frequency_segment(cases, args.head_percentile)
    print("query\tfrequency\tentropy\tspecificity\tvolume")
    for case, vol in zip(cases, freq):
        h = normalized_entropy(case.purchase_distribution)
        spec = specificity_segment(case, args.threshold)
        print(f"{case.query_text}\t{case.query_frequency}\t{h:.6f}\t{spec}\t{vol}")
    return 0


def cmd_bench(args) -> int:
    from .bench import BENCH_COLUMNS, bench_samplers
    from .evaluation import write_csv

    rows = bench_samplers(_csv_ints(args.sizes), args.bucket, _csv_strs(args.samplers),
                          args.trials, args.seed, args.pool_k)
    if args.out:
        write_csv(rows, args.out, BENCH_COLUMNS)
    print("\t".join(BENCH_COLUMNS))
    for r in rows:
        print("\t".join(str(r[c]) for c in BENCH_COLUMNS))
    return 0


def cmd_experiment(args) -> int:
    from .experiment import ExperimentConfig, run_experiment
    from .training import parse_config_text

    raw = parse_config_text(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    base = Path(args.config).parent if args.config else Path(".")
    for key in ("catalog", "engagement", "customers", "truth", "out_dir"):
        if raw.get(key) and not Path(raw[key]).is_absolute():
            raw[key] = str(base / raw[key])
    overrides = {"seed": args.seed, "out_dir": args.out_dir}
    for key in ("catalog", "engagement", "customers", "truth"):
        overrides[key] = getattr(args, key)
    cfg = ExperimentConfig.from_dict(raw, **overrides)
    report = run_experiment(cfg)
    print(Path(cfg.out_dir, "comparison.tsv").read_text(encoding="utf-8"), end="")
    pers = report.get("personalization")
    if pers:
        print(f"personalization\tt={pers['t_statistic']}\tp={pers['p_value']}")
    return 0


# --- parser -----------------------------------------------------------------


def _common_data(p, engagement=True, customers=True):
    p.add_argument("--catalog", required=True)
    if engagement:
        p.add_argument("--engagement", required=True)
    if customers:
        p.add_argument("--customers")
        p.add_argument("--d-cust", type=int, default=8)
        p.add_argument("--history-window", type=int, default=10)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="taxoneg", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic catalog, engagement log and customers")
    p.add_argument("--out", required=True)
    p.add_argument("--branching", type=int, default=4)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--items-per-leaf", type=int, default=10)
    p.add_argument("--customers", type=int, default=200)
    p.add_argument("--queries", type=int, default=400)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--ambiguous-fraction", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ingest", help="validate inputs and report counts")
    p.add_argument("--catalog", required=True)
    p.add_argument("--engagement")
    p.add_argument("--customers")
    p.add_argument("--d-cust", type=int, default=8)
    p.add_argument("--history-window", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("mine", help="build a triplet file with one negative sampler")
    _common_data(p)
    p.add_argument("--sampler", choices=("random", "bm25", "ance", "tb_hns"), default="tb_hns")
    p.add_argument("--personalized", action="store_true")
    p.add_argument("--max-attempts", type=int, default=10)
    p.add_argument("--levels", type=int, default=1, help="1 = parent, 2 = grandparent")
    p.add_argument("--n-neg", type=int, default=1)
    p.add_argument("--pool-k", type=int, default=20)
    p.add_argument("--params", help="encoder params for ance mining")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--stats")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("train", help="train the two-tower encoder")
    p.add_argument("--catalog", required=True)
    p.add_argument("--triplets", nargs="*", default=[], help="non-personalized triplet files")
    p.add_argument("--per-triplets", nargs="*", default=[], help="personalized triplet files")
    p.add_argument("--customers")
    p.add_argument("--history-window", type=int, default=10)
    p.add_argument("--config")
    p.add_argument("--mode", choices=("non_personalized", "personalized", "combined"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--losses")
    p.set_defaults(func=cmd_train)

    def add_build_ann(p):
        p.add_argument("--catalog", required=True)
        p.add_argument("--params", required=True)
        p.add_argument("--kind", choices=("exact", "ivf"), default="exact")
        p.add_argument("--clusters", type=int, default=16)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)
        p.set_defaults(func=cmd_build_ann)

    add_build_ann(sub.add_parser("build-ann", help="embed the catalog and build an ANN index"))

    p = sub.add_parser("search", help="retrieve items for one query")
    p.add_argument("--catalog", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--customer")
    p.add_argument("--customers")
    p.add_argument("--d-cust", type=int, default=8)
    p.add_argument("--history-window", type=int, default=10)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--nprobe", type=int, default=4)
    p.add_argument("--min-score", type=float, default=float("-inf"))
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("index", help="lexical (BM25) and ANN index tools")
    isub = p.add_subparsers(dest="index_command", required=True)
    q = isub.add_parser("build", help="build a BM25 inverted index")
    q.add_argument("--catalog", required=True)
    q.add_argument("--k1", type=float, default=1.2)
    q.add_argument("--b", type=float, default=0.75)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_index_build)
    q = isub.add_parser("query", help="BM25 top-k as TSV")
    q.add_argument("--index", required=True)
    q.add_argument("--query", required=True)
    q.add_argument("--k", type=int, default=10)
    q.set_defaults(func=cmd_index_query)
    add_build_ann(isub.add_parser("build-ann", help="same as the top-level build-ann"))

    p = sub.add_parser("eval", help="evaluation tools")
    esub = p.add_subparsers(dest="eval_command", required=True)
    q = esub.add_parser("run", help="Recall@k and search latency on held-out queries")
    _common_data(q)
    q.add_argument("--params", required=True)
    q.add_argument("--index", required=True)
    q.add_argument("--truth")
    q.add_argument("--personalized", action="store_true")
    q.add_argument("--test-fraction", type=float, default=0.2)
    q.add_argument("--all-queries", action="store_true")
    q.add_argument("--ks", default="8,12,24,100")
    q.add_argument("--nprobe", type=int, default=4)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out")
    q.set_defaults(func=cmd_eval_run)
    q = esub.add_parser("segment", help="specific/general and head/tail labels per query")
    q.add_argument("--catalog", required=True)
    q.add_argument("--engagement", required=True)
    q.add_argument("--threshold", type=float, default=0.5)
    q.add_argument("--head-percentile", type=float, default=0.1)
    q.set_defaults(func=cmd_eval_segment)

    def add_bench(q):
        q.add_argument("--sizes", default="10000,100000")
        q.add_argument("--bucket", type=int, default=50)
        q.add_argument("--samplers", default="tb_hns,random,bm25")
        q.add_argument("--trials", type=int, default=2000)
        q.add_argument("--pool-k", type=int, default=20)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--out")
        q.set_defaults(func=cmd_bench)

    add_bench(esub.add_parser("bench", help="sampler cost versus catalog size"))
    add_bench(sub.add_parser("bench", help="sampler cost versus catalog size"))

    p = sub.add_parser("experiment", help="sampler comparison + personalization study")
    p.add_argument("--config")
    p.add_argument("--catalog")
    p.add_argument("--engagement")
    p.add_argument("--customers")
    p.add_argument("--truth")
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    name = args.command + (f" {getattr(args, 'index_command', '') or getattr(args, 'eval_command', '')}"
                           if args.command in ("index", "eval") else "")
    try:
        return args.func(args)
    except BrokenPipeError:
        # downstream closed the pipe (e.g. `| head`); not an error
        sys.stderr.close()
        return 0
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"ERROR\t{name}\t{type(exc).__name__}: {msg}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
