"""Training loops: LM (with/without retrieval, optional warm start), the dual
encoder with in-batch softmax, and QA fine-tuning with prompt-masked loss.

All loops are deterministic given the config seed: parameter init, batch
order, and updates derive from seeded generators, and evaluation order is
fixed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from delm.corpus import PAD_ID, content, squad_normalize
from delm.model import (BatchItem, ModelConfig, ModelParams, _batch_loss_tensor,
                        decode_logits, encode_contexts, greedy_decode, init_params)
from delm.retrieval import Embedder, EmbedderConfig, init_embedder
from delm.utility import UtilityTable, proxy_utility

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised on invalid training configuration."""


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; message carries diagnostics."""


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale training configuration.

    The learning-rate schedule is warmup at a constant base rate, then
    square-root decay (rate * sqrt(warmup/step)) when enabled, with an
    optional fixed low-rate tail over the final tail_steps.
    """

    steps: int = 5000
    batch_size: int = 16
    base_rate: float = 0.05
    warmup_steps: int = 200
    sqrt_decay: bool = True
    tail_steps: int = 0
    tail_rate: float = 2e-4
    seed: int = 0
    warm_start_fraction: float = 0.1
    warm_start_steps: int = 0
    k_contexts: int = 2
    eval_every: int = 500
    optimizer: str = "sgd"   # "sgd" | "adam"
    clip_norm: float = 1.0   # 0 disables clipping
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise TrainingError("steps and batch_size must be >= 1")
        if self.base_rate <= 0 or (self.tail_steps and self.tail_rate <= 0):
            raise TrainingError("learning rates must be > 0")
        if not 0 < self.warm_start_fraction <= 1:
            raise TrainingError("warm_start_fraction must be in (0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise TrainingError(f"unknown optimizer {self.optimizer!r}")


def learning_rate(config: TrainConfig, step: int) -> float:
    """Rate at 1-indexed step: warmup constant, sqrt decay, optional tail."""
    if step < 1 or step > config.steps:
        raise TrainingError(f"step {step} outside 1..{config.steps}")
    if config.tail_steps and step > config.steps - config.tail_steps:
        return config.tail_rate
    if step <= config.warmup_steps or not config.sqrt_decay:
        return config.base_rate
    return config.base_rate * math.sqrt(config.warmup_steps / step)


@dataclass
class HistoryPoint:
    step: int
    train_loss: float
    eval_loss: float | None = None
    eval_accuracy: float | None = None


@dataclass
class TrainHistory:
    points: list[HistoryPoint] = field(default_factory=list)

    def record(self, point: HistoryPoint) -> None:
        if self.points and point.step <= self.points[-1].step:
            raise TrainingError("history steps must be strictly increasing")
        self.points.append(point)


def _make_optimizer(module: torch.nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    # decay never touches embeddings or norm gains: rarely-updated token rows
    # (held-out values seen only inside contexts) must keep their vectors, or
    # nothing unseen can ever win the tied output projection
    decay, no_decay = [], []
    for name, p in module.named_parameters():
        if "embedding" in name or p.dim() == 1:
            no_decay.append(p)
        else:
            decay.append(p)
    groups = [{"params": decay, "weight_decay": config.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    if config.optimizer == "adam":
        if config.weight_decay:
            return torch.optim.AdamW(groups, lr=config.base_rate)
        return torch.optim.Adam(module.parameters(), lr=config.base_rate)
    return torch.optim.SGD(groups, lr=config.base_rate)


def _step(module, opt, loss, lr, clip_norm, step, what):
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"{what}: non-finite loss {loss.item()!r} at step {step}")
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if clip_norm > 0:
        torch.nn.utils.clip_grad_norm_(module.parameters(), clip_norm)
    for group in opt.param_groups:
        group["lr"] = lr
    opt.step()


def evaluate_lm(params: ModelParams, triplets: Sequence[BatchItem],
                with_retrieval: bool, batch_size: int = 16) -> tuple[float, float]:
    """(mean NLL, token accuracy) over the non-PAD targets of a triplet set."""
    module = params.module
    total_nll = 0.0
    total_correct = 0
    total_tokens = 0
    with torch.no_grad():
        for i in range(0, len(triplets), batch_size):
            chunk = [(x, y, contexts if with_retrieval else [])
                     for x, y, contexts in triplets[i: i + batch_size]]
            loss, n_tok = _batch_loss_tensor(module, chunk)
            total_nll += float(loss.item()) * n_tok
            total_tokens += n_tok
            total_correct += _count_correct(module, chunk)
    return total_nll / total_tokens, total_correct / total_tokens


def _count_correct(module, chunk) -> int:
    """Teacher-forced per-token accuracy over the non-PAD targets of a chunk."""
    params = ModelParams(module.config, module)
    correct = 0
    for x, y, contexts in chunk:
        yc = content(np.asarray(y))
        if len(yc) == 0:
            continue
        encs = encode_contexts(params, contexts) if contexts else []
        # one leading PAD exposes the "nothing consumed yet" row even when x
        # has no content; the row predicting y_j is then lx + j
        xc = content(np.asarray(x))
        x_aug = np.concatenate([[PAD_ID], xc]).astype(np.int64)
        logits = decode_logits(params, x_aug, yc, encs)
        rows = logits[len(xc) + np.arange(len(yc))]
        correct += int((rows.argmax(axis=1) == yc).sum())
    return correct


def train_lm(model_config: ModelConfig, config: TrainConfig,
             triplets: Sequence[BatchItem], with_retrieval: bool,
             eval_triplets: Sequence[BatchItem] | None = None,
             warm_start_triplets: Sequence[BatchItem] | None = None,
             init: ModelParams | None = None) -> tuple[ModelParams, TrainHistory]:
    """Train the LM on (x, y, contexts) triplets.

    with_retrieval=False ignores contexts entirely, reducing to a decoder-only
    LM (encoder parameters keep their initialization). When warm start is
    configured, the first warm_start_steps batches draw only from
    warm_start_triplets.
    """
    if len(triplets) == 0:
        raise TrainingError("no training triplets")
    params = init if init is not None else init_params(model_config, config.seed)
    module = params.module
    opt = _make_optimizer(module, config)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    for step in range(1, config.steps + 1):
        pool = triplets
        if warm_start_triplets and config.warm_start_steps and step <= config.warm_start_steps:
            pool = warm_start_triplets
        idx = rng.integers(0, len(pool), config.batch_size)
        batch = [(pool[i][0], pool[i][1], pool[i][2] if with_retrieval else [])
                 for i in idx]
        loss, _ = _batch_loss_tensor(module, batch)
        _step(module, opt, loss, learning_rate(config, step), config.clip_norm,
              step, "lm")
        if step % config.eval_every == 0 or step == config.steps:
            point = HistoryPoint(step=step, train_loss=float(loss.item()))
            if eval_triplets:
                point.eval_loss, point.eval_accuracy = evaluate_lm(
                    params, eval_triplets, with_retrieval, config.batch_size)
            history.record(point)
    return params, history


# --------------------------------------------------------------------------
# Retriever training
# --------------------------------------------------------------------------

@dataclass
class RetrieverExample:
    query: np.ndarray
    positive: np.ndarray
    hard_negative: np.ndarray | None = None


def _in_batch_loss_tensor(embedder: Embedder,
                          batch: Sequence[RetrieverExample]) -> torch.Tensor:
    queries = embedder.forward_batch([ex.query for ex in batch], "query")
    cands = [ex.positive for ex in batch]
    cands += [ex.hard_negative for ex in batch if ex.hard_negative is not None]
    cand_vecs = embedder.forward_batch(cands, "document")
    sims = queries @ cand_vecs.t()
    targets = torch.arange(len(batch))
    return torch.nn.functional.cross_entropy(sims, targets)


def in_batch_softmax_loss(embedder: Embedder,
                          batch: Sequence[RetrieverExample]) -> float:
    """Mean over queries of -log softmax(sim to own positive) where the
    candidate set is every batch positive plus every batch hard negative."""
    if len(batch) == 0:
        raise TrainingError("empty retriever batch")
    if len(batch) == 1 and batch[0].hard_negative is None:
        log.warning("single-candidate batch: in-batch softmax loss is trivially 0")
    with torch.no_grad():
        return float(_in_batch_loss_tensor(embedder, batch).item())


def train_retriever(embedder_config: EmbedderConfig, config: TrainConfig,
                    examples: Sequence[RetrieverExample]) -> Embedder:
    """Minimize the in-batch softmax loss over selected (q, pos, hard-neg) triplets."""
    if len(examples) == 0:
        raise TrainingError("no retriever examples")
    embedder = init_embedder(embedder_config, config.seed)
    opt = _make_optimizer(embedder, config)
    rng = np.random.default_rng(config.seed)
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(examples), min(config.batch_size, len(examples)))
        loss = _in_batch_loss_tensor(embedder, [examples[i] for i in idx])
        _step(embedder, opt, loss, learning_rate(config, step), config.clip_norm,
              step, "retriever")
    return embedder


def mean_positive_rank(embedder: Embedder, examples: Sequence[RetrieverExample]) -> float:
    """Mean rank (1 = best) of each example's positive among all candidates."""
    if not examples:
        raise TrainingError("no examples to rank")
    with torch.no_grad():
        queries = embedder.forward_batch([e.query for e in examples], "query")
        cands = [e.positive for e in examples]
        cands += [e.hard_negative for e in examples if e.hard_negative is not None]
        vecs = embedder.forward_batch(cands, "document")
        sims = (queries @ vecs.t()).numpy()
    ranks = []
    for i in range(len(examples)):
        own = sims[i, i]
        ranks.append(1 + int((sims[i] > own).sum()))
    return float(np.mean(ranks))


# --------------------------------------------------------------------------
# Warm start
# --------------------------------------------------------------------------

def warm_start_subset(triplets: Sequence[BatchItem], table: UtilityTable,
                      fraction: float) -> list[BatchItem]:
    """The ceil(fraction * N) triplets with highest proxy utility (ties to the
    lower index). Utility is computed against the union of each triplet's
    contexts."""
    if not 0 < fraction <= 1:
        raise TrainingError("fraction must be in (0, 1]")
    utilities = [proxy_utility(table, x, y, list(contexts))
                 for x, y, contexts in triplets]
    take = math.ceil(fraction * len(triplets))
    order = sorted(range(len(triplets)), key=lambda i: (-utilities[i], i))
    keep = sorted(order[:take])
    return [triplets[i] for i in keep]


# --------------------------------------------------------------------------
# QA fine-tuning
# --------------------------------------------------------------------------

@dataclass
class QAValItem:
    prompt: np.ndarray
    contexts: list[np.ndarray]
    answer: str


def qa_exact_match(predicted: str, gold: str) -> bool:
    return squad_normalize(predicted) == squad_normalize(gold)


def qa_eval_em(params: ModelParams, items: Sequence[QAValItem],
               detok: Callable[[np.ndarray], str], max_len: int,
               with_retrieval: bool = True) -> float:
    """Exact-match rate of greedy decodes against gold answers."""
    if not items:
        raise TrainingError("no validation items")
    hits = 0
    for item in items:
        encs = (encode_contexts(params, item.contexts)
                if (with_retrieval and item.contexts) else [])
        out = greedy_decode(params, item.prompt, encs, max_len)
        if qa_exact_match(detok(out), item.answer):
            hits += 1
    return hits / len(items)


def finetune_qa(model_config: ModelConfig, config: TrainConfig,
                train_triplets: Sequence[BatchItem], val_items: Sequence[QAValItem],
                detok: Callable[[np.ndarray], str],
                init: ModelParams | None = None,
                with_retrieval: bool = True,
                decode_len: int | None = None) -> tuple[ModelParams, TrainHistory]:
    """Fine-tune on QA triplets (prompt, answer+EOS, formatted contexts).

    Loss is defined on the answer tokens and EOS only (the prompt is input x).
    The returned parameters are the checkpoint with the best validation exact
    match, evaluated every eval_every steps.
    """
    if len(train_triplets) == 0:
        raise TrainingError("no QA training triplets")
    if decode_len is None:
        decode_len = model_config.max_target_len
    params = init if init is not None else init_params(model_config, config.seed)
    module = params.module
    opt = _make_optimizer(module, config)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    best_em = -1.0
    best_state = {k: v.detach().clone() for k, v in module.state_dict().items()}
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(train_triplets), config.batch_size)
        batch = [(train_triplets[i][0], train_triplets[i][1],
                  train_triplets[i][2] if with_retrieval else []) for i in idx]
        loss, _ = _batch_loss_tensor(module, batch)
        _step(module, opt, loss, learning_rate(config, step), config.clip_norm,
              step, "qa")
        if step % config.eval_every == 0 or step == config.steps:
            em = qa_eval_em(params, val_items, detok, decode_len,
                            with_retrieval) if val_items else 0.0
            history.record(HistoryPoint(step=step, train_loss=float(loss.item()),
                                        eval_accuracy=em))
            if em > best_em:
                best_em = em
                best_state = {k: v.detach().clone() for k, v in module.state_dict().items()}
    module.load_state_dict(best_state)
    return params, history
