"""End-to-end pipeline: synth -> vocab -> windows -> bm25 -> triplet mining ->
LM training (with and without retrieval) -> utility table -> retriever ->
store -> evaluation, analysis, and the latency bench, with a manifest tying
every stage to its input and output files.

Stages communicate through files under the workdir only. In deterministic
mode (the default) stage durations are recorded as null and torch runs single
threaded, so two runs with the same seed produce byte-identical artifacts.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from delm import analysis as A
from delm import corpus as C
from delm import retrieval as R
from delm import store as ST
from delm import training as T
from delm import utility as U
from delm.config import Config, save_config
from delm.model import ModelConfig, load_checkpoint, save_checkpoint

REPORTS = "reports"


class PipelineError(RuntimeError):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Manifest:
    seed: int
    deterministic: bool
    config_hash: str
    stages: list = field(default_factory=list)

    def record(self, name: str, workdir: Path, inputs: list[str], outputs: list[str],
               duration_s: float | None) -> None:
        self.stages.append({
            "name": name,
            "inputs": sorted(inputs),
            "outputs": [{"path": p, "sha256": _sha256(workdir / p)} for p in sorted(outputs)],
            "duration_s": None if self.deterministic else duration_s,
        })

    def save(self, path: Path) -> None:
        data = {"seed": self.seed, "deterministic": self.deterministic,
                "config_hash": self.config_hash, "stages": self.stages}
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, sort_keys=True, indent=2)
            f.write("\n")


@dataclass
class Stage:
    """One pipeline step: produces `outputs` from `inputs` (workdir-relative)."""

    name: str
    inputs: list[str]
    outputs: list[str]
    run: callable


# --------------------------------------------------------------------------
# File helpers
# --------------------------------------------------------------------------

def _save_triplets(dirpath: Path, xs, ys, ctx_ids, metas, n: int, s: int, k: int) -> None:
    dirpath.mkdir(parents=True, exist_ok=True)
    np.save(dirpath / "x.npy", np.stack(xs).astype(np.int32) if xs else np.zeros((0, n), np.int32))
    np.save(dirpath / "y.npy", np.stack(ys).astype(np.int32) if ys else np.zeros((0, s), np.int32))
    np.save(dirpath / "ctx.npy", np.array(ctx_ids, dtype=np.int64).reshape(len(xs), k))
    np.save(dirpath / "meta.npy", np.array(metas, dtype=np.int64).reshape(len(xs), 2))


def load_triplets(workdir: Path, split: str) -> list[tuple]:
    """(x, y, contexts) items with contexts resolved from the windows file."""
    d = workdir / f"triplets_{split}"
    xs = np.load(d / "x.npy").astype(np.int64)
    ys = np.load(d / "y.npy").astype(np.int64)
    ctx = np.load(d / "ctx.npy")
    win = np.load(workdir / "windows_tokens.npy").astype(np.int64)
    out = []
    for i in range(xs.shape[0]):
        contexts = [win[j] for j in ctx[i] if j >= 0]
        out.append((xs[i], ys[i], contexts))
    return out


def _load_windows(workdir: Path) -> tuple[np.ndarray, np.ndarray]:
    return (np.load(workdir / "windows_tokens.npy").astype(np.int64),
            np.load(workdir / "windows_meta.npy"))


def _model_config(cfg: Config, vocab_size: int, qa: bool = False) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size, d_model=cfg.d_model, n_heads=cfg.n_heads,
        n_enc_layers=cfg.n_enc_layers, n_dec_layers=cfg.n_dec_layers, d_ff=cfg.d_ff,
        max_ctx_len=cfg.qa_ctx_len if qa else cfg.window_len,
        max_input_len=cfg.input_len, max_target_len=cfg.target_len,
        k_contexts=cfg.qa_k_contexts if qa else cfg.k_contexts)


def _train_config(cfg: Config, prefix: str) -> T.TrainConfig:
    g = cfg.get
    if prefix == "lm":
        return T.TrainConfig(
            steps=g("lm_steps"), batch_size=g("lm_batch"), base_rate=g("lm_rate"),
            warmup_steps=g("lm_warmup"), sqrt_decay=g("lm_sqrt_decay"),
            tail_steps=g("lm_tail_steps"), tail_rate=g("lm_tail_rate"), seed=g("seed"),
            warm_start_fraction=g("warm_start_fraction"), warm_start_steps=g("warm_start_steps"),
            k_contexts=g("k_contexts"), eval_every=g("eval_every"),
            optimizer=g("lm_optimizer"), weight_decay=g("lm_weight_decay"),
            clip_norm=g("lm_clip_norm"))
    if prefix == "retriever":
        return T.TrainConfig(steps=g("retriever_steps"), batch_size=g("retriever_batch"),
                             base_rate=g("retriever_rate"), warmup_steps=50,
                             seed=g("seed"), eval_every=g("retriever_steps"),
                             optimizer="adam")
    return T.TrainConfig(steps=g("qa_steps"), batch_size=g("qa_batch"),
                         base_rate=g("qa_rate"), warmup_steps=100, seed=g("seed"),
                         eval_every=g("qa_eval_every"), k_contexts=g("qa_k_contexts"),
                         optimizer="adam")


def _vocab_sources(articles, qa) -> list[str]:
    return ([a.text for a in articles] + [q.question for q in qa]
            + [q.answer for q in qa]
            + [C.QA_PROMPT_TEMPLATE.format(question=""),
               C.QA_CONTEXT_TEMPLATE.format(title="", source="")])


def _mine_chunk(cfg: Config, bm25, win_tokens, ex: C.LMExample) -> list[int]:
    """Offline retrieval for one chunk: target-aware query, overlap filter."""
    query = np.concatenate([C.content(ex.input_x), C.content(ex.target_y)])
    picked = []
    for cid, _ in R.bm25_topk(bm25, query, cfg.mine_candidates):
        if R.overlap_ok(ex.target_y, win_tokens[cid], cfg.overlap_threshold):
            picked.append(cid)
            if len(picked) == cfg.k_contexts:
                break
    while len(picked) < cfg.k_contexts:
        picked.append(-1)
    return picked


def history_json(history: T.TrainHistory) -> str:
    return json.dumps([p.__dict__ for p in history.points], sort_keys=True, indent=2) + "\n"


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------

def stage_synth(cfg: Config, workdir: Path) -> None:
    articles, qa = C.gen_synthetic_corpus(
        cfg.seed, cfg.n_entities, cfg.n_attrs, cfg.n_fillers,
        heldout_fraction=cfg.heldout_fraction,
        filler_len_range=(cfg.filler_len_min, cfg.filler_len_max),
        replica_groups=None if cfg.replica_groups < 0 else cfg.replica_groups,
        replicas_per_group=cfg.replicas_per_group)
    C.save_corpus(workdir / "corpus.jsonl", articles)
    C.save_qa(workdir / "qa.jsonl", qa)


def stage_vocab(cfg: Config, workdir: Path) -> None:
    articles = C.load_corpus(workdir / "corpus.jsonl")
    qa = C.load_qa(workdir / "qa.jsonl")
    C.build_vocab(_vocab_sources(articles, qa)).save(workdir / "vocab.txt")


def stage_windows(cfg: Config, workdir: Path) -> None:
    articles = C.load_corpus(workdir / "corpus.jsonl")
    vocab = C.Vocabulary.load(workdir / "vocab.txt")
    tokens, meta = [], []
    for a in articles:
        for w in C.build_context_windows(C.tokenize(vocab, a.text),
                                         cfg.window_len, cfg.stride, a.id):
            tokens.append(w.tokens)
            meta.append((w.article_id, w.start_offset))
    np.save(workdir / "windows_tokens.npy", np.stack(tokens).astype(np.int32))
    np.save(workdir / "windows_meta.npy", np.array(meta, dtype=np.int64))


def stage_bm25(cfg: Config, workdir: Path) -> None:
    win, _ = _load_windows(workdir)
    index = R.bm25_build(list(win), k1=cfg.bm25_k1, b=cfg.bm25_b)
    R.bm25_save(index, workdir / "bm25.bin")


def _splits(cfg: Config, articles):
    """Training articles vs eval articles (held-out facts + reserved fillers)."""
    fillers = [a for a in articles if a.kind == "filler"]
    eval_f = {a.id for a in fillers[len(fillers) - cfg.eval_fillers:]} if cfg.eval_fillers else set()
    train_articles = [a for a in articles if not a.heldout and a.id not in eval_f]
    eval_articles = [a for a in articles if a.heldout or a.id in eval_f]
    return train_articles, eval_articles


def stage_mine(cfg: Config, workdir: Path) -> None:
    articles = C.load_corpus(workdir / "corpus.jsonl")
    vocab = C.Vocabulary.load(workdir / "vocab.txt")
    win, _ = _load_windows(workdir)
    bm25 = R.bm25_load(workdir / "bm25.bin")
    win_tokens = list(win)
    train_articles, eval_articles = _splits(cfg, articles)
    for split, arts in (("train", train_articles), ("eval", eval_articles)):
        xs, ys, ctx_ids, metas = [], [], [], []
        for a in arts:
            for ex in C.chunk_article(C.tokenize(vocab, a.text), cfg.target_len,
                                      cfg.input_len, a.id):
                xs.append(ex.input_x)
                ys.append(ex.target_y)
                ctx_ids.append(_mine_chunk(cfg, bm25, win_tokens, ex))
                metas.append((ex.article_id, ex.chunk_index))
        _save_triplets(workdir / f"triplets_{split}", xs, ys, ctx_ids, metas,
                       cfg.input_len, cfg.target_len, cfg.k_contexts)


def _stage_train_lm(cfg: Config, workdir: Path, with_retrieval: bool) -> None:
    vocab = C.Vocabulary.load(workdir / "vocab.txt")
    train = load_triplets(workdir, "train")
    evald = load_triplets(workdir, "eval")
    warm = None
    if cfg.warm_start_steps > 0:
        # warm start needs a utility table from an earlier run
        table_path = workdir / "utility.jsonl"
        if not table_path.exists():
            raise PipelineError(
                "warm_start_steps > 0 requires a prior utility.jsonl in the workdir")
        table = U.load_table(table_path, min_count=cfg.utility_min_count)
        warm = T.warm_start_subset(train, table, cfg.warm_start_fraction)
    params, history = T.train_lm(_model_config(cfg, vocab.size), _train_config(cfg, "lm"),
                                 train, with_retrieval, eval_triplets=evald,
                                 warm_start_triplets=warm)
    tag = "with" if with_retrieval else "without"
    save_checkpoint(params, workdir / f"lm_{tag}.ckpt")
    (workdir / f"history_{tag}.json").write_text(history_json(history))


def stage_train_with(cfg: Config, workdir: Path) -> None:
    _stage_train_lm(cfg, workdir, True)


def stage_train_without(cfg: Config, workdir: Path) -> None:
    _stage_train_lm(cfg, workdir, False)


def stage_utility_table(cfg: Config, workdir: Path) -> None:
    params_with = load_checkpoint(workdir / "lm_with.ckpt")
    params_without = load_checkpoint(workdir / "lm_without.ckpt")
    evald = load_triplets(workdir, "eval")
    table = U.estimate_table(params_with, params_without, evald,
                             min_count=cfg.utility_min_count)
    U.save_table(table, workdir / "utility.jsonl")


def stage_retriever(cfg: Config, workdir: Path) -> None:
    vocab = C.Vocabulary.load(workdir / "vocab.txt")
    win, _ = _load_windows(workdir)
    win_tokens = list(win)
    bm25 = R.bm25_load(workdir / "bm25.bin")
    table = U.load_table(workdir / "utility.jsonl", min_count=cfg.utility_min_count)
    train = load_triplets(workdir, "train")
    examples = []
    for x, y, _ in train:
        if len(C.content(x)) == 0:
            continue  # dropped: the serve-time query embeds x only
        cands = R.bm25_topk(bm25, x, cfg.mine_candidates)
        valid = [R.overlap_ok(y, win_tokens[cid], cfg.overlap_threshold)
                 for cid, _ in cands]
        utils = [(cid, U.proxy_utility(table, x, y, win_tokens[cid])) for cid, _ in cands]
        sel = U.select_triplets(utils, valid)
        if sel is None:
            continue
        hard = win_tokens[sel.hard_negative_id] if sel.hard_negative_id is not None else None
        examples.append(T.RetrieverExample(query=x, positive=win_tokens[sel.positive_id],
                                           hard_negative=hard))
    if not examples:
        raise PipelineError("no retriever training examples survived selection")
    n_eval = max(1, len(examples) // 5)
    train_ex, eval_ex = examples[:-n_eval], examples[-n_eval:]
    econfig = R.EmbedderConfig(vocab_size=vocab.size, d_model=cfg.embed_d_model,
                               out_dim=cfg.embed_dim,
                               max_len=max(cfg.window_len, cfg.input_len + cfg.target_len))
    rank_before = T.mean_positive_rank(R.init_embedder(econfig, cfg.seed), eval_ex)
    embedder = T.train_retriever(econfig, _train_config(cfg, "retriever"), train_ex)
    rank_after = T.mean_positive_rank(embedder, eval_ex)
    R.save_embedder(embedder, workdir / "retriever.ckpt")
    report = {"examples": len(examples), "eval_examples": len(eval_ex),
              "mean_positive_rank_init": rank_before,
              "mean_positive_rank_trained": rank_after}
    (workdir / REPORTS).mkdir(exist_ok=True)
    (workdir / REPORTS / "retriever_eval.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n")


def stage_store(cfg: Config, workdir: Path) -> None:
    params = load_checkpoint(workdir / "lm_with.ckpt")
    embedder = R.load_embedder(workdir / "retriever.ckpt")
    win, _ = _load_windows(workdir)
    ST.store_build(embedder, params, list(win), workdir / "store")


def stage_bpb(cfg: Config, workdir: Path) -> None:
    vocab = C.Vocabulary.load(workdir / "vocab.txt")
    evald = load_triplets(workdir, "eval")
    (workdir / REPORTS).mkdir(exist_ok=True)
    for tag, with_retrieval in (("with", True), ("without", False)):
        params = load_checkpoint(workdir / f"lm_{tag}.ckpt")
        res = A.eval_bpb(params, vocab, evald, overlap_threshold=cfg.overlap_threshold,
                         with_retrieval=with_retrieval)
        (workdir / REPORTS / f"bpb_{tag}.json").write_text(res.to_json())
        (workdir / REPORTS / f"bpb_{tag}.txt").write_text(res.to_text())


def stage_breakdown(cfg: Config, workdir: Path) -> None:
    vocab = C.Vocabulary.load(workdir / "vocab.txt")
    evald = load_triplets(workdir, "eval")
    params_with = load_checkpoint(workdir / "lm_with.ckpt")
    params_without = load_checkpoint(workdir / "lm_without.ckpt")
    table = A.delta_breakdown(params_with, params_without, evald, vocab)
    (workdir / REPORTS).mkdir(exist_ok=True)
    (workdir / REPORTS / "breakdown.json").write_text(table.to_json())
    (workdir / REPORTS / "breakdown.txt").write_text(table.to_text())


def _qa_setup(cfg: Config, workdir: Path):
    vocab = C.Vocabulary.load(workdir / "vocab.txt")
    articles = C.load_corpus(workdir / "corpus.jsonl")
    qa = C.load_qa(workdir / "qa.jsonl")
    ctx_bank = [C.format_qa_context(vocab, a.title, a.text, cfg.qa_ctx_len)
                for a in articles]
    bm25_qa = R.bm25_build(ctx_bank)
    return vocab, articles, qa, ctx_bank, bm25_qa


def _facts_by_attr(articles) -> dict[str, list[int]]:
    by_attr: dict[str, list[int]] = {}
    for a in articles:
        if a.kind == "fact":
            by_attr.setdefault(a.text.split()[3], []).append(a.id)
    return by_attr


def rank_pool(cfg: Config, vocab, bm25_qa, question: str, pool: list[int]) -> list[int]:
    """Order a candidate pool by BM25 score for the question, ties to lower id."""
    q_ids = C.tokenize(vocab, question)
    scored = sorted(((-R.bm25_score(bm25_qa, q_ids, c), c) for c in pool))
    return [c for _, c in scored]


def qa_training_items(cfg: Config, vocab, articles, qa, ctx_bank, bm25_qa):
    """(prompt, padded target, contexts) QA triplets.

    Unique facts use their generator-built candidate pools (gold plus
    same-attribute alternatives plus fillers). Replica articles contribute
    reading items: the same question string recurs across a replica group with
    different in-context answers, so fitting them requires copying from the
    context that matches the question, not recalling the question string.
    """
    rng = np.random.default_rng(cfg.seed)
    by_attr = _facts_by_attr(articles)
    fillers = [a.id for a in articles if a.kind == "filler"]
    items = []

    def build(question: str, answer: str, own_id: int, attr: str):
        pool = [own_id]
        same_attr = [f for f in by_attr.get(attr, []) if f != own_id]
        pool += [int(i) for i in rng.permutation(same_attr)[:6]]
        pool += [fillers[own_id % len(fillers)], fillers[(own_id + 1) % len(fillers)]]
        ranked = rank_pool(cfg, vocab, bm25_qa, question, pool)[: cfg.qa_k_contexts]
        prompt = C.tokenize(vocab, C.QA_PROMPT_TEMPLATE.format(question=question))
        target = np.concatenate([C.tokenize(vocab, answer), [C.EOS_ID]])
        return prompt, C.pad_to(target, cfg.target_len), [ctx_bank[c] for c in ranked]

    for q in qa:
        if q.heldout:
            continue
        items.append(build(q.question, q.answer, q.gold_fact_id,
                           q.question.split()[2]))
    for a in articles:
        if a.kind != "replica":
            continue
        toks = a.text.split()
        items.append(build(f"what is {toks[3]} of {toks[1]}", toks[5], a.id, toks[3]))
    return items


def qa_eval_items(cfg: Config, vocab, articles, qa, ctx_bank, bm25_qa,
                  questions) -> list[T.QAValItem]:
    """Evaluation items with pool-ranked contexts for the given questions."""
    out = []
    for q in questions:
        ranked = rank_pool(cfg, vocab, bm25_qa, q.question,
                           list(q.context_pool))[: cfg.qa_k_contexts]
        prompt = C.tokenize(vocab, C.QA_PROMPT_TEMPLATE.format(question=q.question))
        out.append(T.QAValItem(prompt=prompt,
                               contexts=[ctx_bank[c] for c in ranked],
                               answer=q.answer))
    return out


def stage_qa(cfg: Config, workdir: Path) -> None:
    vocab, articles, qa, ctx_bank, bm25_qa = _qa_setup(cfg, workdir)
    detok = lambda ids: C.detokenize(vocab, ids)
    trips = qa_training_items(cfg, vocab, articles, qa, ctx_bank, bm25_qa)
    held_qs = [q for q in qa if q.heldout and C.qa_answer_is_short(q.answer)]
    # held-out facts split into a validation third (checkpoint selection; their
    # values are never a training target) and a test remainder
    n_val = max(1, len(held_qs) // 3)
    val_items = qa_eval_items(cfg, vocab, articles, qa, ctx_bank, bm25_qa,
                              held_qs[:n_val])
    test_items = qa_eval_items(cfg, vocab, articles, qa, ctx_bank, bm25_qa,
                               held_qs[n_val:])
    qa_cfg = _model_config(cfg, vocab.size, qa=True)
    tc = _train_config(cfg, "qa")
    report = {}
    for tag, with_retrieval in (("with", True), ("without", False)):
        # fresh init: the saturated LM weights measurably suppress the
        # selective-copy circuit the QA task has to form
        params, history = T.finetune_qa(qa_cfg, tc, trips, val_items, detok,
                                        with_retrieval=with_retrieval,
                                        decode_len=cfg.qa_decode_len)
        save_checkpoint(params, workdir / f"qa_{tag}.ckpt")
        (workdir / f"qa_history_{tag}.json").write_text(history_json(history))
        report[f"em_heldout_{tag}"] = T.qa_eval_em(
            params, test_items, detok, cfg.qa_decode_len, with_retrieval=with_retrieval)
    report["n_heldout_test"] = len(test_items)
    report["n_heldout_val"] = len(val_items)
    (workdir / REPORTS).mkdir(exist_ok=True)
    (workdir / REPORTS / "qa_em.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n")


def grounded_items(cfg: Config, workdir: Path) -> list[A.GroundedItem]:
    """Held-out questions with ranked candidate pools; every eighth question
    gets a filler-only pool so the out-of-context branch is represented."""
    vocab, articles, qa, ctx_bank, bm25_qa = _qa_setup(cfg, workdir)
    filler_ids = [a.id for a in articles if a.kind == "filler"]
    items = []
    for qi, q in enumerate(q for q in qa if q.heldout):
        prompt, _ = C.format_qa(vocab, q, answer_included=False)
        if qi % 8 == 7 and len(filler_ids) > cfg.qa_k_contexts + 1:
            pool = filler_ids[: cfg.qa_k_contexts + 2]
        else:
            pool = rank_pool(cfg, vocab, bm25_qa, q.question, list(q.context_pool))
        if len(pool) <= cfg.qa_k_contexts:
            pool = pool + [f for f in filler_ids if f not in set(pool)]
        items.append(A.GroundedItem(prompt=prompt,
                                    candidates=[ctx_bank[c] for c in pool],
                                    gold_answer=q.answer))
    return items


def stage_grounded(cfg: Config, workdir: Path) -> None:
    vocab = C.Vocabulary.load(workdir / "vocab.txt")
    params = load_checkpoint(workdir / "qa_with.ckpt")
    items = grounded_items(cfg, workdir)
    report = A.grounded_analysis(params, items, cfg.qa_k_contexts, vocab,
                                 max_len=cfg.qa_decode_len)
    (workdir / REPORTS).mkdir(exist_ok=True)
    (workdir / REPORTS / "grounded.json").write_text(report.to_json())
    (workdir / REPORTS / "grounded.txt").write_text(report.to_text())


def stage_delta_html(cfg: Config, workdir: Path) -> None:
    vocab = C.Vocabulary.load(workdir / "vocab.txt")
    evald = load_triplets(workdir, "eval")
    params_with = load_checkpoint(workdir / "lm_with.ckpt")
    params_without = load_checkpoint(workdir / "lm_without.ckpt")
    examples = [A.token_deltas(params_with, params_without, t, vocab)
                for t in evald[:12]]
    (workdir / REPORTS).mkdir(exist_ok=True)
    A.emit_delta_html(examples, workdir / REPORTS / "deltas.html")


def stage_bench(cfg: Config, workdir: Path) -> None:
    params = load_checkpoint(workdir / "lm_with.ckpt")
    embedder = R.load_embedder(workdir / "retriever.ckpt")
    win, _ = _load_windows(workdir)
    queries = [win[i % len(win)] for i in range(cfg.bench_queries)]
    with ST.store_open(workdir / "store") as store:
        report = ST.bench_latency(store, params, embedder, queries, list(win),
                                  k=cfg.bench_k)
    if cfg.deterministic:
        report = report.redacted()
    (workdir / REPORTS).mkdir(exist_ok=True)
    (workdir / REPORTS / "bench.json").write_text(report.to_json())
    (workdir / REPORTS / "bench.txt").write_text(report.to_text())


STAGES: list[Stage] = [
    Stage("synth", [], ["corpus.jsonl", "qa.jsonl"], stage_synth),
    Stage("vocab", ["corpus.jsonl", "qa.jsonl"], ["vocab.txt"], stage_vocab),
    Stage("windows", ["corpus.jsonl", "vocab.txt"],
          ["windows_tokens.npy", "windows_meta.npy"], stage_windows),
    Stage("bm25", ["windows_tokens.npy"], ["bm25.bin"], stage_bm25),
    Stage("mine", ["corpus.jsonl", "vocab.txt", "windows_tokens.npy", "bm25.bin"],
          [f"triplets_{s}/{f}.npy" for s in ("train", "eval")
           for f in ("x", "y", "ctx", "meta")], stage_mine),
    Stage("train-lm-with", ["vocab.txt", "triplets_train/x.npy", "triplets_eval/x.npy",
                            "windows_tokens.npy"],
          ["lm_with.ckpt", "history_with.json"], stage_train_with),
    Stage("train-lm-without", ["vocab.txt", "triplets_train/x.npy", "triplets_eval/x.npy",
                               "windows_tokens.npy"],
          ["lm_without.ckpt", "history_without.json"], stage_train_without),
    Stage("utility-table", ["lm_with.ckpt", "lm_without.ckpt", "triplets_eval/x.npy",
                            "windows_tokens.npy"],
          ["utility.jsonl"], stage_utility_table),
    Stage("retriever", ["vocab.txt", "windows_tokens.npy", "bm25.bin", "utility.jsonl",
                        "triplets_train/x.npy"],
          ["retriever.ckpt", "reports/retriever_eval.json"], stage_retriever),
    Stage("store", ["lm_with.ckpt", "retriever.ckpt", "windows_tokens.npy"],
          ["store.keys", "store.values"], stage_store),
    Stage("bpb", ["vocab.txt", "lm_with.ckpt", "lm_without.ckpt", "triplets_eval/x.npy",
                  "windows_tokens.npy"],
          ["reports/bpb_with.json", "reports/bpb_with.txt",
           "reports/bpb_without.json", "reports/bpb_without.txt"], stage_bpb),
    Stage("breakdown", ["vocab.txt", "lm_with.ckpt", "lm_without.ckpt",
                        "triplets_eval/x.npy", "windows_tokens.npy"],
          ["reports/breakdown.json", "reports/breakdown.txt"], stage_breakdown),
    Stage("qa", ["vocab.txt", "corpus.jsonl", "qa.jsonl", "lm_with.ckpt",
                 "lm_without.ckpt"],
          ["qa_with.ckpt", "qa_without.ckpt", "qa_history_with.json",
           "qa_history_without.json", "reports/qa_em.json"], stage_qa),
    Stage("grounded", ["vocab.txt", "corpus.jsonl", "qa.jsonl", "qa_with.ckpt"],
          ["reports/grounded.json", "reports/grounded.txt"], stage_grounded),
    Stage("delta-html", ["vocab.txt", "lm_with.ckpt", "lm_without.ckpt",
                         "triplets_eval/x.npy", "windows_tokens.npy"],
          ["reports/deltas.html"], stage_delta_html),
    Stage("bench", ["lm_with.ckpt", "retriever.ckpt", "store.keys", "store.values",
                    "windows_tokens.npy"],
          ["reports/bench.json", "reports/bench.txt"], stage_bench),
]


def run_pipeline(cfg: Config, workdir: str | Path, stages: list[str] | None = None) -> Path:
    """Run the pipeline (or a named subset) and write manifest.json."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    if cfg.deterministic:
        torch.set_num_threads(1)
    config_path = workdir / "config.txt"
    save_config(cfg, config_path)
    manifest = Manifest(seed=cfg.seed, deterministic=cfg.deterministic,
                        config_hash=_sha256(config_path))
    selected = STAGES if stages is None else [s for s in STAGES if s.name in stages]
    if stages is not None and len(selected) != len(stages):
        missing = set(stages) - {s.name for s in STAGES}
        raise PipelineError(f"unknown stages: {sorted(missing)}")
    for stage in selected:
        t0 = time.perf_counter()
        stage.run(cfg, workdir)
        manifest.record(stage.name, workdir, stage.inputs, stage.outputs,
                        time.perf_counter() - t0)
    manifest.save(workdir / "manifest.json")
    return workdir / "manifest.json"
