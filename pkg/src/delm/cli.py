"""Command-line entry point: one binary, verb-noun subcommands, every stage of
the offline/online split reachable individually or as `pipeline all`.

Exit codes: 0 success, 2 usage errors, 1 data errors (printed as a single
"category: message" line on stderr).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from delm import __version__
from delm import analysis as A
from delm import corpus as C
from delm import pipeline as P
from delm import retrieval as R
from delm import store as ST
from delm import training as T
from delm import utility as U
from delm.binfmt import CorruptFileError
from delm.config import ConfigError, default_config, load_config
from delm.model import load_checkpoint


def _config_from(args) -> "Config":
    cfg = load_config(args.config) if args.config else default_config()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.override(seed=args.seed)
    if getattr(args, "timings", False):
        cfg = cfg.override(deterministic=False)
    return cfg


def _workdir(args) -> Path:
    wd = Path(args.workdir)
    if not wd.exists():
        raise FileNotFoundError(f"workdir {wd} does not exist")
    return wd


# --------------------------------------------------------------------------
# command implementations
# --------------------------------------------------------------------------

def cmd_pipeline_all(args) -> int:
    cfg = _config_from(args)
    stages = args.stages.split(",") if args.stages else None
    Path(args.workdir).mkdir(parents=True, exist_ok=True)
    manifest = P.run_pipeline(cfg, args.workdir, stages)
    print(manifest)
    return 0


def _run_stage(args, stage_name: str) -> int:
    cfg = _config_from(args)
    P.run_pipeline(cfg, _workdir(args) if stage_name != "synth" else Path(args.workdir),
                   [stage_name])
    return 0


def cmd_corpus_synth(args) -> int:
    Path(args.workdir).mkdir(parents=True, exist_ok=True)
    return _run_stage(args, "synth")


def cmd_vocab_build(args) -> int:
    return _run_stage(args, "vocab")


def cmd_corpus_windows(args) -> int:
    return _run_stage(args, "windows")


def cmd_index_bm25_build(args) -> int:
    return _run_stage(args, "bm25")


def cmd_index_bm25_query(args) -> int:
    wd = _workdir(args)
    vocab = C.Vocabulary.load(wd / "vocab.txt")
    index = R.bm25_load(wd / "bm25.bin")
    hits = R.bm25_topk(index, C.tokenize(vocab, args.query), args.k)
    for cid, score in hits:
        print(f"{cid}\t{score:.6f}")
    return 0


def cmd_index_ann_build(args) -> int:
    wd = _workdir(args)
    embedder = R.load_embedder(wd / "retriever.ckpt")
    win = np.load(wd / "windows_tokens.npy").astype(np.int64)
    keys = R.embed_many(embedder, list(win), "document")
    R.vector_index_save(R.VectorIndex(keys=keys), wd / "ann.keys")
    print(wd / "ann.keys")
    return 0


def cmd_index_ann_query(args) -> int:
    wd = _workdir(args)
    vocab = C.Vocabulary.load(wd / "vocab.txt")
    embedder = R.load_embedder(wd / "retriever.ckpt")
    index = R.vector_index_load(wd / "ann.keys")
    q = R.embed(embedder, C.tokenize(vocab, args.query), "query")
    for cid, score in R.vec_topk(index, q, args.k):
        print(f"{cid}\t{score:.6f}")
    return 0


def cmd_mine(args) -> int:
    return _run_stage(args, "mine")


def cmd_utility_estimate(args) -> int:
    return _run_stage(args, "utility-table")


def cmd_utility_score(args) -> int:
    wd = _workdir(args)
    cfg = _config_from(args)
    table = U.load_table(wd / "utility.jsonl", min_count=cfg.utility_min_count)
    triplets = P.load_triplets(wd, args.split)
    if not 0 <= args.index < len(triplets):
        raise ValueError(f"triplet index {args.index} out of range")
    x, y, contexts = triplets[args.index]
    for i, c in enumerate(contexts):
        print(f"context {i}\tU_hat {U.proxy_utility(table, x, y, c):.6f}")
    return 0


def cmd_utility_select(args) -> int:
    wd = _workdir(args)
    cfg = _config_from(args)
    vocab = C.Vocabulary.load(wd / "vocab.txt")
    win = np.load(wd / "windows_tokens.npy").astype(np.int64)
    bm25 = R.bm25_load(wd / "bm25.bin")
    table = U.load_table(wd / "utility.jsonl", min_count=cfg.utility_min_count)
    triplets = P.load_triplets(wd, "train")
    n_dropped = 0
    for i, (x, y, _) in enumerate(triplets):
        if len(C.content(x)) == 0:
            n_dropped += 1
            continue
        cands = R.bm25_topk(bm25, x, cfg.mine_candidates)
        valid = [R.overlap_ok(y, win[cid], cfg.overlap_threshold) for cid, _ in cands]
        utils = [(cid, U.proxy_utility(table, x, y, win[cid])) for cid, _ in cands]
        sel = U.select_triplets(utils, valid)
        if sel is None:
            n_dropped += 1
            continue
        print(json.dumps({"triplet": i, "positive": sel.positive_id,
                          "hard_negative": sel.hard_negative_id}, sort_keys=True))
    print(f"# dropped: {n_dropped}", file=sys.stderr)
    return 0


def cmd_lm_train(args) -> int:
    return _run_stage(args, "train-lm-without" if args.no_retrieval else "train-lm-with")


def cmd_retriever_train(args) -> int:
    return _run_stage(args, "retriever")


def cmd_qa_train(args) -> int:
    return _run_stage(args, "qa")


def cmd_store_build(args) -> int:
    return _run_stage(args, "store")


def cmd_store_lookup(args) -> int:
    wd = _workdir(args)
    with ST.store_open(wd / "store") as store:
        enc = ST.lookup(store, args.id)
    print(f"context {enc.context_id}: content_len {enc.content_len}, "
          f"shape {enc.h.shape[0]}x{enc.h.shape[1]}")
    if args.out:
        np.save(args.out, enc.h)
        print(args.out)
    return 0


def cmd_serve_query(args) -> int:
    wd = _workdir(args)
    vocab = C.Vocabulary.load(wd / "vocab.txt")
    embedder = R.load_embedder(wd / "retriever.ckpt")
    with ST.store_open(wd / "store") as store:
        results = ST.serve_query(store, embedder, C.tokenize(vocab, args.text), args.k)
        if len(results) < args.k:
            print(f"# store holds only {store.record_count} records", file=sys.stderr)
    for cid, enc in results:
        print(f"{cid}\tcontent_len {enc.content_len}")
    return 0


def cmd_serve_bench(args) -> int:
    cfg = _config_from(args).override(bench_k=args.k, bench_queries=args.queries)
    P.run_pipeline(cfg, _workdir(args), ["bench"])
    print((_workdir(args) / "reports" / "bench.txt").read_text(), end="")
    return 0


def cmd_analyze_bpb(args) -> int:
    wd = _workdir(args)
    cfg = _config_from(args)
    vocab = C.Vocabulary.load(wd / "vocab.txt")
    tag = "without" if args.no_retrieval else "with"
    params = load_checkpoint(wd / f"lm_{tag}.ckpt")
    threshold = float("inf") if args.no_filter else cfg.overlap_threshold
    res = A.eval_bpb(params, vocab, P.load_triplets(wd, args.split),
                     overlap_threshold=threshold,
                     with_retrieval=not args.no_retrieval)
    print(res.to_json(), end="")
    return 0


def cmd_analyze_breakdown(args) -> int:
    wd = _workdir(args)
    vocab = C.Vocabulary.load(wd / "vocab.txt")
    tagger = A.tagger_from_file(args.tags) if args.tags else A.coarse_tagger
    table = A.delta_breakdown(load_checkpoint(wd / "lm_with.ckpt"),
                              load_checkpoint(wd / "lm_without.ckpt"),
                              P.load_triplets(wd, args.split), vocab, tagger=tagger)
    print(table.to_text(), end="")
    return 0


def cmd_analyze_grounded(args) -> int:
    cfg = _config_from(args)
    P.run_pipeline(cfg, _workdir(args), ["grounded"])
    print((_workdir(args) / "reports" / "grounded.txt").read_text(), end="")
    return 0


def cmd_analyze_delta_html(args) -> int:
    cfg = _config_from(args)
    P.run_pipeline(cfg, _workdir(args), ["delta-html"])
    print(_workdir(args) / "reports" / "deltas.html")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, workdir: bool = True) -> None:
    if workdir:
        p.add_argument("--workdir", required=True, help="pipeline working directory")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    root = argparse.ArgumentParser(prog="delm",
                                   description="desk-scale retrieval-augmented LM "
                                               "with decoupled context encodings")
    root.add_argument("--version", action="version", version=f"delm {__version__}")
    sub = root.add_subparsers(dest="group", required=True)

    pipe = sub.add_parser("pipeline", help="run the end-to-end pipeline")
    pipe_sub = pipe.add_subparsers(dest="command", required=True)
    p = pipe_sub.add_parser("all", help="synth through bench, with manifest")
    _add_common(p)
    p.add_argument("--stages", help="comma-separated subset of stages to run")
    p.add_argument("--timings", action="store_true",
                   help="record real durations (disables byte-identical manifests)")
    p.set_defaults(func=cmd_pipeline_all)

    corpus = sub.add_parser("corpus", help="synthetic corpus generation")
    corpus_sub = corpus.add_subparsers(dest="command", required=True)
    p = corpus_sub.add_parser("synth", help="generate articles and QA pairs")
    _add_common(p)
    p.set_defaults(func=cmd_corpus_synth)
    p = corpus_sub.add_parser("windows", help="slice articles into context windows")
    _add_common(p)
    p.set_defaults(func=cmd_corpus_windows)

    vocab = sub.add_parser("vocab", help="vocabulary")
    vocab_sub = vocab.add_subparsers(dest="command", required=True)
    p = vocab_sub.add_parser("build", help="build the vocabulary file")
    _add_common(p)
    p.set_defaults(func=cmd_vocab_build)

    mine = sub.add_parser("mine", help="offline retrieval forming (x, y, c) triplets")
    _add_common(mine)
    mine.set_defaults(func=cmd_mine)

    index = sub.add_parser("index", help="retrieval indexes")
    index_sub = index.add_subparsers(dest="command", required=True)
    p = index_sub.add_parser("bm25", help="BM25 inverted index")
    bm25_sub = p.add_subparsers(dest="action", required=True)
    b = bm25_sub.add_parser("build")
    _add_common(b)
    b.set_defaults(func=cmd_index_bm25_build)
    b = bm25_sub.add_parser("query")
    _add_common(b)
    b.add_argument("--query", required=True, help="query text")
    b.add_argument("-k", type=int, default=5)
    b.set_defaults(func=cmd_index_bm25_query)
    p = index_sub.add_parser("ann", help="dense vector index (exact scan)")
    ann_sub = p.add_subparsers(dest="action", required=True)
    b = ann_sub.add_parser("build")
    _add_common(b)
    b.set_defaults(func=cmd_index_ann_build)
    b = ann_sub.add_parser("query")
    _add_common(b)
    b.add_argument("--query", required=True, help="query text")
    b.add_argument("-k", type=int, default=5)
    b.set_defaults(func=cmd_index_ann_query)

    util = sub.add_parser("utility", help="context utility estimation and selection")
    util_sub = util.add_subparsers(dest="command", required=True)
    p = util_sub.add_parser("estimate-table", help="estimate the condition table")
    _add_common(p)
    p.set_defaults(func=cmd_utility_estimate)
    p = util_sub.add_parser("score", help="proxy utility of one triplet's contexts")
    _add_common(p)
    p.add_argument("--split", default="eval", choices=("train", "eval"))
    p.add_argument("--index", type=int, required=True)
    p.set_defaults(func=cmd_utility_score)
    p = util_sub.add_parser("select-triplets", help="positive/hard-negative selection")
    _add_common(p)
    p.set_defaults(func=cmd_utility_select)

    lm = sub.add_parser("lm", help="language model training")
    lm_sub = lm.add_subparsers(dest="command", required=True)
    p = lm_sub.add_parser("train")
    _add_common(p)
    p.add_argument("--no-retrieval", action="store_true",
                   help="train the decoder-only baseline")
    p.set_defaults(func=cmd_lm_train)

    retr = sub.add_parser("retriever", help="dual-encoder training")
    retr_sub = retr.add_subparsers(dest="command", required=True)
    p = retr_sub.add_parser("train")
    _add_common(p)
    p.set_defaults(func=cmd_retriever_train)

    qa = sub.add_parser("qa", help="QA fine-tuning")
    qa_sub = qa.add_subparsers(dest="command", required=True)
    p = qa_sub.add_parser("train")
    _add_common(p)
    p.set_defaults(func=cmd_qa_train)

    store = sub.add_parser("store", help="encoding store")
    store_sub = store.add_subparsers(dest="command", required=True)
    p = store_sub.add_parser("build", help="precompute keys and encoder outputs")
    _add_common(p)
    p.set_defaults(func=cmd_store_build)
    p = store_sub.add_parser("lookup", help="read one record by id")
    _add_common(p)
    p.add_argument("--id", type=int, required=True)
    p.add_argument("--out", help="write the encoding matrix to this .npy file")
    p.set_defaults(func=cmd_store_lookup)

    serve = sub.add_parser("serve", help="online query path")
    serve_sub = serve.add_subparsers(dest="command", required=True)
    p = serve_sub.add_parser("query", help="embed, search, look up encodings")
    _add_common(p)
    p.add_argument("--text", required=True)
    p.add_argument("-k", type=int, default=2)
    p.set_defaults(func=cmd_serve_query)
    p = serve_sub.add_parser("bench", help="cached lookup vs encode-at-inference")
    _add_common(p)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--queries", type=int, default=20)
    p.set_defaults(func=cmd_serve_bench)

    ana = sub.add_parser("analyze", help="evaluation and reports")
    ana_sub = ana.add_subparsers(dest="command", required=True)
    p = ana_sub.add_parser("bpb", help="bits per byte with overlap filtering")
    _add_common(p)
    p.add_argument("--split", default="eval", choices=("train", "eval"))
    p.add_argument("--no-retrieval", action="store_true")
    p.add_argument("--no-filter", action="store_true", help="disable overlap filtering")
    p.set_defaults(func=cmd_analyze_bpb)
    p = ana_sub.add_parser("breakdown", help="per-class per-condition improvement")
    _add_common(p)
    p.add_argument("--split", default="eval", choices=("train", "eval"))
    p.add_argument("--tags", help="JSON file mapping token to class")
    p.set_defaults(func=cmd_analyze_breakdown)
    p = ana_sub.add_parser("grounded", help="grounded context-transfer analysis")
    _add_common(p)
    p.set_defaults(func=cmd_analyze_grounded)
    p = ana_sub.add_parser("delta-html", help="per-token delta visualization")
    _add_common(p)
    p.set_defaults(func=cmd_analyze_delta_html)

    return root


ERROR_CATEGORIES = (
    (FileNotFoundError, "io"),
    (PermissionError, "io"),
    (IsADirectoryError, "io"),
    (ConfigError, "config"),
    (CorruptFileError, "data"),
    (P.PipelineError, "pipeline"),
    (T.TrainingDiverged, "training"),
    (ValueError, "data"),
)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        for etype, category in ERROR_CATEGORIES:
            if isinstance(exc, etype):
                print(f"{category}: {exc}", file=sys.stderr)
                return 1
        raise


if __name__ == "__main__":
    sys.exit(main())
