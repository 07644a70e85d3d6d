"""Command-line entry point wiring the whole system.

Verbs: synth, train, assign, retrieve, eval, analyze-utilization,
export-tree.  Exit codes: 0 success, 1 usage error, 2 runtime failure.
Artifacts are written atomically (temp file + rename); report commands
render matplotlib figures next to their delimited outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import evalkit as ev
from . import idstore
from . import plots
from . import textdata as td
from . import trainer as tr
from .ids import format_docid

log = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def write_atomic(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _render_atomic(render, path) -> None:
    tmp = f"{path}.tmp.png"
    render(tmp)
    os.replace(tmp, path)


def _load_pairs_auto(path):
    fmt = "jsonl" if str(path).endswith((".jsonl", ".ndjson")) else "tsv"
    return td.load_pairs(path, fmt=fmt)


def _load_bundle(path) -> tr.ModelBundle:
    bundle, _ = tr.load_checkpoint(path)
    return bundle


def _load_store(path, bundle):
    return idstore.load(path, bundle.space)


# -- commands -------------------------------------------------------------

def cmd_synth(args) -> int:
    records = td.synth_corpus(args.clusters, args.docs_per_cluster,
                              args.queries_per_doc, args.vocab_size,
                              args.seed)
    os.makedirs(args.out, exist_ok=True)
    sidecar = td.cluster_sidecar(records, args.clusters,
                                 args.docs_per_cluster, args.queries_per_doc)
    train_recs, held = (records, [])
    if args.holdout > 0:
        train_recs, held = td.holdout_queries(records, args.holdout, args.seed)
    tmp = os.path.join(args.out, "pairs.tsv.tmp")
    td.dump_pairs(train_recs, tmp)
    os.replace(tmp, os.path.join(args.out, "pairs.tsv"))
    if held:
        tmp = os.path.join(args.out, "valid.tsv.tmp")
        td.dump_pairs(held, tmp)
        os.replace(tmp, os.path.join(args.out, "valid.tsv"))
    write_atomic(os.path.join(args.out, "clusters.tsv"),
                 "".join(f"{k}\t{c}\n" for k, c in sidecar))
    print(f"wrote {len(train_recs)} train pairs"
          + (f", {len(held)} held-out pairs" if held else "")
          + f", {len(sidecar)} documents to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = tr.TrainConfig()
    if args.config:
        cfg = tr.load_config(args.config, cfg)
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.indexer:
        overrides.append(f"indexer={args.indexer}")
    if args.disable_loss:
        overrides.append(f"disable_loss={args.disable_loss}")
    cfg = tr.apply_overrides(cfg, overrides)
    records = _load_pairs_auto(args.corpus)
    result = tr.train(cfg, records, out_dir=args.out)
    if result.metrics:
        _render_atomic(lambda p: plots.save_loss_curves(result.metrics, p),
                       os.path.join(args.out, "loss_curves.png"))
    print(f"trained {result.bundle.step} steps; checkpoint at "
          f"{result.checkpoint_path}")
    return 0


def _load_docs(args):
    if args.docs_format == "lines":
        with open(args.docs, encoding="utf-8") as fh:
            texts = [line.rstrip("\n") for line in fh if line.strip()]
        return [(td.content_key(t), t) for t in texts]
    return td.distinct_documents(_load_pairs_auto(args.docs))


def cmd_assign(args) -> int:
    bundle = _load_bundle(args.checkpoint)
    docs = _load_docs(args)
    assignments = bundle.assign_documents(docs)
    store = idstore.build(assignments, bundle.space)
    tmp = f"{args.out}.tmp"
    idstore.save(store, tmp)
    os.replace(tmp, args.out)
    print(f"assigned {store.total_documents} documents to "
          f"{store.unique_id_count()} identifiers -> {args.out}")
    return 0


def cmd_retrieve(args) -> int:
    bundle = _load_bundle(args.checkpoint)
    if bundle.query_is_empty(args.query):
        raise UsageError("query has no in-vocabulary tokens")
    store = _load_store(args.index, bundle)
    ranked = bundle.rank_queries([args.query], beam=args.beam)[0]
    budget = args.limit
    rows = []
    for doc_id, lp in ranked:
        if budget <= 0:
            break
        keys = store.lookup(doc_id, limit=min(args.limit, budget))
        rows.append((doc_id, lp, keys))
        budget -= len(keys)
    if args.format == "records":
        for doc_id, lp, keys in rows:
            print(json.dumps({"id": format_docid(doc_id), "log_prob": lp,
                              "documents": keys}, sort_keys=True))
    else:
        total = sum(len(k) for _, _, k in rows)
        print(f"query: {args.query}\n{len(rows)} identifiers, "
              f"{total} documents")
        for doc_id, lp, keys in rows:
            head = ", ".join(keys[:5]) + (" ..." if len(keys) > 5 else "")
            print(f"  {format_docid(doc_id):>24}  {lp:9.4f}  "
                  f"[{len(keys)}] {head}")
    return 0


def cmd_eval(args) -> int:
    bundle = _load_bundle(args.checkpoint)
    store = _load_store(args.index, bundle)
    pairs = _load_pairs_auto(args.pairs)
    split_labels = None
    if args.train_index:
        train_store = _load_store(args.train_index, bundle)
        train_keys = {k for _, keys in train_store.items() for k in keys}
        eval_docs = td.distinct_documents(pairs)
        assignments = [(key, doc_id) for doc_id, key in
                       bundle.assign_documents(eval_docs)]
        split_labels = ev.classify_new_docs(train_keys, train_store.ids(),
                                            assignments)
    rankings = bundle.rank_queries([p.query for p in pairs], beam=args.beam)
    metrics = ev.evaluate_rankings(rankings, store, [p.key for p in pairs],
                                   split_labels=split_labels)
    stats = {"unique_ids": store.unique_id_count(),
             "documents": store.total_documents,
             "max_posting": max(store.utilization_histogram(), default=0)}
    report = ev.report_text(metrics, config_hash=bundle.config.config_hash(),
                            store_stats=stats)
    doc = metrics.to_dict()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_atomic(os.path.join(args.out, "report.json"), report)
        lines = ["split,metric,value"]
        scopes = [("full", doc)] + sorted(doc.get("per_split", {}).items())
        for name, scope in scopes:
            for k, v in sorted(scope["recall_expected"].items(), key=lambda t: int(t[0])):
                lines.append(f"{name},recall_expected@{k},{v}")
            for k, v in sorted(scope["recall_deterministic"].items(), key=lambda t: int(t[0])):
                lines.append(f"{name},recall_deterministic@{k},{v}")
            lines.append(f"{name},mrr10_expected,{scope['mrr10_expected']}")
            lines.append(f"{name},mrr10_deterministic,{scope['mrr10_deterministic']}")
            lines.append(f"{name},docs_per_query,{scope['docs_per_query']}")
            lines.append(f"{name},n_queries,{scope['n_queries']}")
        write_atomic(os.path.join(args.out, "metrics.csv"),
                     "\n".join(lines) + "\n")
        _render_atomic(lambda p: plots.save_metrics_by_split(doc, p),
                       os.path.join(args.out, "metrics_by_split.png"))
    print(report, end="")
    return 0


def cmd_analyze(args) -> int:
    space_src = args.checkpoint
    if space_src:
        bundle = _load_bundle(space_src)
        space = bundle.space
    else:
        from .ids import IdSpace
        space = IdSpace(args.code_len, args.codes_per_pos)
    store = idstore.load(args.index, space)
    hist = store.utilization_histogram()
    os.makedirs(args.out, exist_ok=True)
    write_atomic(os.path.join(args.out, "histogram.csv"),
                 ev.histogram_csv(hist))
    _render_atomic(lambda p: plots.save_utilization_histogram(
        hist, p, title=os.path.basename(args.index)),
        os.path.join(args.out, "histogram.png"))
    summary = {"unique_ids": store.unique_id_count(),
               "documents": store.total_documents,
               "max_posting": max(hist, default=0),
               "mean_posting": (store.total_documents /
                                max(store.unique_id_count(), 1))}
    write_atomic(os.path.join(args.out, "stats.json"),
                 json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_export_tree(args) -> int:
    space_src = args.checkpoint
    if space_src:
        space = _load_bundle(space_src).space
    else:
        from .ids import IdSpace
        space = IdSpace(args.code_len, args.codes_per_pos)
    store = idstore.load(args.index, space)
    tree = idstore.export_prefix_tree(store, max_depth=args.max_depth,
                                      min_posting=args.min_posting)
    write_atomic(args.out, json.dumps(tree, indent=2, sort_keys=True) + "\n")
    print(f"exported {idstore.tree_leaf_count(tree)} identifier paths "
          f"to {args.out}")
    return 0


# -- argument wiring ---------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="genidx",
                     description="end-to-end learned document identifiers: "
                                 "train, assign, retrieve, evaluate, analyze")
    parser.add_argument("--verbose", action="store_true",
                        help="log progress details to stderr")
    sub = parser.add_subparsers(dest="verb", metavar="verb",
                            parser_class=_Parser)

    p = sub.add_parser("synth",
                       help="generate a clustered synthetic corpus")
    p.add_argument("--clusters", type=int, default=16)
    p.add_argument("--docs-per-cluster", type=int, default=125)
    p.add_argument("--queries-per-doc", type=int, default=2)
    p.add_argument("--vocab-size", type=int, default=4096)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--holdout", type=float, default=0.0,
                   help="fraction of pairs moved to valid.tsv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train",
                       help="train encoder, indexer, and decoder")
    p.add_argument("--corpus", required=True, help="pair file (tsv or jsonl)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config override (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--indexer", choices=["mlp", "pq", "rq"])
    p.add_argument("--disable-loss", metavar="CSV",
                   help="subset of di,bot,ib to switch off")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("assign",
                       help="assign identifiers to documents")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--docs", required=True)
    p.add_argument("--docs-format", choices=["pairs", "lines"],
                   default="pairs",
                   help="pair file (documents deduped by key) or one "
                        "document per line")
    p.add_argument("--out", required=True, help="index file (tsv)")
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("retrieve",
                       help="decode identifiers for a query and expand them")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--limit", type=int, default=idstore.DEFAULT_LOOKUP_LIMIT)
    p.add_argument("--format", choices=["text", "records"], default="text")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval",
                       help="retrieval metrics over a pair file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--out", help="report directory (json, csv, figures)")
    p.add_argument("--train-index",
                   help="training-time index for new-document splits")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-utilization",
                       help="posting-size histogram and store statistics")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", help="source of the identifier layout")
    p.add_argument("--code-len", type=int, default=4)
    p.add_argument("--codes-per-pos", type=int, default=256)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("export-tree",
                       help="nested prefix-tree view of the identifier space")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", help="source of the identifier layout")
    p.add_argument("--code-len", type=int, default=4)
    p.add_argument("--codes-per-pos", type=int, default=256)
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--min-posting", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_tree)
    return parser


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "verb", None):
            parser.print_usage(sys.stderr)
            return 1
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"genidx: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:           # argparse --help
        return int(exc.code or 0)
    except (tr.ConfigError, td.CorpusError) as exc:
        print(f"genidx: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:            # noqa: BLE001 - boundary of the CLI
        log.debug("unhandled failure", exc_info=True)
        print(f"genidx: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))
