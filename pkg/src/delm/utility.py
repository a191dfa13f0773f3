"""Context utility: the exact log-likelihood improvement U, the per-condition
expectation table, the token-overlap proxy, and retriever triplet selection.

A token's condition is the pair (appears in input x?, appears in context c?),
judged by token-id membership in the non-PAD portions. The proxy consumes only
the two "in context" cells; all four are estimated and persisted for analysis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from delm.corpus import content
from delm.model import Encoding, ModelParams, encode_contexts, per_token_logprobs

DEFAULT_MIN_COUNT = 50
HARD_NEGATIVE_RATIO = 0.8

CONDITIONS = ((False, False), (False, True), (True, False), (True, True))


class UtilityError(ValueError):
    """Raised for invalid utility inputs."""


@dataclass
class UtilityCell:
    """Mean delta log-likelihood for one membership condition."""

    mean: float = 0.0
    count: int = 0
    per_token: dict[int, tuple[float, int]] = field(default_factory=dict)

    def value_for(self, token_id: int, min_count: int) -> float:
        if token_id in self.per_token:
            mean, count = self.per_token[token_id]
            if count >= min_count:
                return mean
        return self.mean


@dataclass
class UtilityTable:
    """Four condition cells keyed by (token in x?, token in c?)."""

    cells: dict[tuple[bool, bool], UtilityCell]
    min_count: int = DEFAULT_MIN_COUNT

    @classmethod
    def empty(cls, min_count: int = DEFAULT_MIN_COUNT) -> "UtilityTable":
        return cls(cells={c: UtilityCell() for c in CONDITIONS}, min_count=min_count)


def _as_context_list(c) -> list[np.ndarray]:
    if isinstance(c, (list, tuple)):
        return [np.asarray(ci) for ci in c]
    return [np.asarray(c)]


def _encodings_for(params: ModelParams, contexts: Sequence[np.ndarray]) -> list[Encoding]:
    return encode_contexts(params, contexts, list(range(len(contexts))))


def exact_utility(model_with: ModelParams, x: np.ndarray, y: np.ndarray, c,
                  model_without: ModelParams | None = None) -> float:
    """Sum over target tokens of log P(y_i | ..., c) - log P(y_i | ...).

    Single-model mode compares the with-context and empty-context passes of
    model_with; passing model_without compares two separate models.
    """
    contexts = _as_context_list(c)
    baseline = model_without if model_without is not None else model_with
    lp_with = per_token_logprobs(model_with, x, y, _encodings_for(model_with, contexts))
    lp_without = per_token_logprobs(baseline, x, y, [])
    if lp_with.shape != lp_without.shape:
        raise UtilityError("target length mismatch between passes")
    return float((lp_with - lp_without).sum())


def membership_sets(x: np.ndarray, contexts) -> tuple[set[int], set[int]]:
    """Token-id sets of the non-PAD input and the union of non-PAD contexts."""
    x_set = set(content(np.asarray(x)).tolist())
    c_set: set[int] = set()
    for ctx in _as_context_list(contexts):
        c_set.update(content(ctx).tolist())
    return x_set, c_set


def estimate_table(model_with: ModelParams, model_without: ModelParams,
                   eval_triplets: Sequence[tuple], min_count: int = DEFAULT_MIN_COUNT,
                   ) -> UtilityTable:
    """Bucket per-token deltas (logP_with - logP_without) by membership condition.

    Triplets are (x, y, contexts). Means are accumulated per condition and per
    token id; an empty bucket keeps mean 0 with count 0.
    """
    if len(eval_triplets) == 0:
        raise UtilityError("need at least one triplet")
    sums = {cond: 0.0 for cond in CONDITIONS}
    counts = {cond: 0 for cond in CONDITIONS}
    tok_sums: dict[tuple[bool, bool], dict[int, list]] = {cond: {} for cond in CONDITIONS}
    for x, y, contexts in eval_triplets:
        lp_with = per_token_logprobs(model_with, x, y,
                                     _encodings_for(model_with, _as_context_list(contexts)))
        lp_without = per_token_logprobs(model_without, x, y, [])
        x_set, c_set = membership_sets(x, contexts)
        yc = content(np.asarray(y)).tolist()
        for tok, dw in zip(yc, (lp_with - lp_without).tolist()):
            cond = (tok in x_set, tok in c_set)
            sums[cond] += dw
            counts[cond] += 1
            slot = tok_sums[cond].setdefault(tok, [0.0, 0])
            slot[0] += dw
            slot[1] += 1
    cells = {}
    for cond in CONDITIONS:
        per_token = {t: (s / n, n) for t, (s, n) in tok_sums[cond].items()}
        mean = sums[cond] / counts[cond] if counts[cond] else 0.0
        cells[cond] = UtilityCell(mean=mean, count=counts[cond], per_token=per_token)
    return UtilityTable(cells=cells, min_count=min_count)


def proxy_utility(table: UtilityTable, x: np.ndarray, y: np.ndarray, c) -> float:
    """Weighted token overlap: sum of the applicable cell value over target
    tokens present in the context (set semantics; duplicates in c are moot)."""
    x_set, c_set = membership_sets(x, c)
    total = 0.0
    for tok in content(np.asarray(y)).tolist():
        if tok not in c_set:
            continue
        cell = table.cells[(tok in x_set, True)]
        total += cell.value_for(tok, table.min_count)
    return total


@dataclass
class TripletSelection:
    positive_id: int
    positive_utility: float
    hard_negative_id: int | None = None
    hard_negative_utility: float | None = None


def select_triplets(candidates: Sequence[tuple[int, float]],
                    valid: Sequence[bool],
                    hard_negative_ratio: float = HARD_NEGATIVE_RATIO,
                    ) -> TripletSelection | None:
    """Pick the retriever-training positive and hard negative.

    The positive is the valid candidate with the highest utility (ties to the
    lower id). The hard negative is the highest-utility valid candidate with
    utility strictly below hard_negative_ratio * positive utility; None when
    no candidate qualifies. Returns None when nothing is valid (the example
    is dropped, not fatal).
    """
    if len(candidates) != len(valid):
        raise UtilityError("candidates and validity flags differ in length")
    pool = [(cid, u) for (cid, u), ok in zip(candidates, valid) if ok]
    if not pool:
        return None
    pool.sort(key=lambda t: (-t[1], t[0]))
    pos_id, pos_u = pool[0]
    cutoff = hard_negative_ratio * pos_u
    for cid, u in pool[1:]:
        if u < cutoff:
            return TripletSelection(pos_id, pos_u, cid, u)
    return TripletSelection(pos_id, pos_u)


# --------------------------------------------------------------------------
# Persistence: JSON lines, one per (condition, token id or "*")
# --------------------------------------------------------------------------

def save_table(table: UtilityTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for in_x, in_c in CONDITIONS:
            cell = table.cells[(in_x, in_c)]
            f.write(json.dumps({"in_input": in_x, "in_context": in_c, "token_id": "*",
                                "mean": cell.mean, "count": cell.count},
                               sort_keys=True) + "\n")
            for tok in sorted(cell.per_token):
                mean, count = cell.per_token[tok]
                f.write(json.dumps({"in_input": in_x, "in_context": in_c, "token_id": tok,
                                    "mean": mean, "count": count}, sort_keys=True) + "\n")


def load_table(path: str | Path, min_count: int = DEFAULT_MIN_COUNT) -> UtilityTable:
    table = UtilityTable.empty(min_count=min_count)
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            cell = table.cells[(bool(rec["in_input"]), bool(rec["in_context"]))]
            if rec["token_id"] == "*":
                cell.mean = float(rec["mean"])
                cell.count = int(rec["count"])
            else:
                cell.per_token[int(rec["token_id"])] = (float(rec["mean"]), int(rec["count"]))
    return table
