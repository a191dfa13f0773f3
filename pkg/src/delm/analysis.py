"""Evaluation and diagnostics: bits-per-byte with overlap filtering, the
per-token improvement breakdown by membership condition and token class,
grounded context-transfer analysis, and the per-token delta HTML report.
"""

from __future__ import annotations

import html
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from delm.corpus import Vocabulary, content, detokenize, squad_normalize
from delm.model import ModelParams, encode_contexts, greedy_decode, per_token_logprobs
from delm.retrieval import overlap_ok
from delm.utility import membership_sets


class AnalysisError(ValueError):
    """Raised for invalid analysis inputs."""


# --------------------------------------------------------------------------
# Bits per byte
# --------------------------------------------------------------------------

@dataclass
class BpbResult:
    total_bits: float
    total_bytes: int
    bpb: float
    evaluated_chunks: int
    filtered_chunks: int

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        return (f"bits per byte      {self.bpb:12.6f}\n"
                f"total bits         {self.total_bits:12.2f}\n"
                f"total bytes        {self.total_bytes:12d}\n"
                f"evaluated chunks   {self.evaluated_chunks:12d}\n"
                f"filtered chunks    {self.filtered_chunks:12d}\n")


def eval_bpb(params: ModelParams, vocab: Vocabulary, eval_triplets: Sequence[tuple],
             overlap_threshold: float = 8, with_retrieval: bool = True) -> BpbResult:
    """Bits-per-byte over (x, y, contexts) triplets.

    Chunks whose target shares a common run longer than overlap_threshold
    tokens with any retrieved context are excluded and counted (pass inf to
    disable). Bits are natural-log NLL / ln 2; bytes are the UTF-8 length of
    the detokenized non-PAD target text.
    """
    total_bits = 0.0
    total_bytes = 0
    evaluated = 0
    filtered = 0
    for x, y, contexts in eval_triplets:
        if math.isfinite(overlap_threshold) and any(
                not overlap_ok(y, c, int(overlap_threshold)) for c in contexts):
            filtered += 1
            continue
        encs = encode_contexts(params, list(contexts)) if (with_retrieval and len(contexts)) else []
        logp = per_token_logprobs(params, x, y, encs)
        if len(logp) == 0:
            continue
        total_bits += float(-logp.sum()) / math.log(2.0)
        total_bytes += len(detokenize(vocab, content(np.asarray(y))).encode("utf-8"))
        evaluated += 1
    if total_bytes == 0:
        raise AnalysisError("no evaluable bytes after filtering")
    return BpbResult(total_bits=total_bits, total_bytes=total_bytes,
                     bpb=total_bits / total_bytes, evaluated_chunks=evaluated,
                     filtered_chunks=filtered)


# --------------------------------------------------------------------------
# Token classes
# --------------------------------------------------------------------------

CLASS_CONTENT = "CONTENT"
CLASS_FUNCTION = "FUNCTION"
CLASS_NUMBER = "NUMBER"
CLASS_OTHER = "OTHER"
TOKEN_CLASSES = (CLASS_CONTENT, CLASS_FUNCTION, CLASS_NUMBER, CLASS_OTHER)

# coarse function-word lexicon: determiners, prepositions, conjunctions,
# pronouns, auxiliaries, particles
FUNCTION_WORDS = frozenset("""
a an the of and to in is was for on with at by it that as from or be are were
this those these there their his her its they them he she we you i not no nor
but if then than so such into over under about after before between during
has have had do does did can could will would shall should may might must am
who whom whose which what when where why how all any both each few more most
other some own same up down out off once here very s t don now
""".split())

_NUMBER_RE = re.compile(r"\d+([.,]\d+)*")


def coarse_tagger(token: str) -> str:
    """Built-in tagger: function-word lexicon, numeral detection, content words."""
    if token in FUNCTION_WORDS:
        return CLASS_FUNCTION
    if _NUMBER_RE.fullmatch(token):
        return CLASS_NUMBER
    if re.fullmatch(r"\w+", token):
        return CLASS_CONTENT
    return CLASS_OTHER


def tagger_from_file(path: str | Path, fallback: Callable[[str], str] = coarse_tagger,
                     ) -> Callable[[str], str]:
    """External tag map: JSON of token -> class (or list of candidate classes,
    resolved by majority vote, first wins ties). Unknown tokens fall back."""
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)

    def tag(token: str) -> str:
        entry = raw.get(token)
        if entry is None:
            return fallback(token)
        if isinstance(entry, str):
            return entry
        best, best_count = None, -1
        for cand in entry:
            c = entry.count(cand)
            if c > best_count:
                best, best_count = cand, c
        return best

    return tag


# --------------------------------------------------------------------------
# Delta breakdown
# --------------------------------------------------------------------------

CONDITION_NAMES = {
    (False, False): "not in context, not in input",
    (False, True): "in context, not in input",
    (True, False): "not in context, in input",
    (True, True): "in context, in input",
}
# column order mirrors the four-way breakdown
CONDITION_ORDER = [(False, False), (True, False), (False, True), (True, True)]


@dataclass
class BreakdownTable:
    """Per (token class, membership condition) log-likelihood comparison.

    Cells store the raw sums so percentages stay exact; the percentage
    improvement of a cell is 100 * (mean_with - mean_without) / |mean_without|
    over that cell's tokens (documented in report headers; 0 when the cell is
    empty or the baseline mean is 0).
    """

    sums_with: dict = field(default_factory=dict)     # (class, cond) -> float
    sums_without: dict = field(default_factory=dict)  # (class, cond) -> float
    counts: dict = field(default_factory=dict)        # (class, cond) -> int

    def classes(self) -> list[str]:
        return sorted({cls for cls, _ in self.counts})

    def occurrences(self, cls: str, cond: tuple[bool, bool]) -> int:
        return self.counts.get((cls, cond), 0)

    def total_tokens(self) -> int:
        return sum(self.counts.values())

    @staticmethod
    def _pct(s_with: float, s_without: float, n: int) -> float:
        if n == 0:
            return 0.0
        mean_with, mean_without = s_with / n, s_without / n
        if mean_without == 0.0:
            return 0.0
        return 100.0 * (mean_with - mean_without) / abs(mean_without)

    def improvement(self, cls: str, cond: tuple[bool, bool]) -> float:
        key = (cls, cond)
        return self._pct(self.sums_with.get(key, 0.0), self.sums_without.get(key, 0.0),
                         self.counts.get(key, 0))

    def condition_improvement(self, cond: tuple[bool, bool]) -> float:
        """Aggregate over classes for one membership condition."""
        sw = sum(v for (c, cd), v in self.sums_with.items() if cd == cond)
        so = sum(v for (c, cd), v in self.sums_without.items() if cd == cond)
        n = sum(v for (c, cd), v in self.counts.items() if cd == cond)
        return self._pct(sw, so, n)

    def class_improvement(self, cls: str) -> float:
        """Aggregate over conditions for one token class."""
        sw = sum(v for (c, cd), v in self.sums_with.items() if c == cls)
        so = sum(v for (c, cd), v in self.sums_without.items() if c == cls)
        n = sum(v for (c, cd), v in self.counts.items() if c == cls)
        return self._pct(sw, so, n)

    def to_json(self) -> str:
        rows = {}
        for cls in self.classes():
            rows[cls] = {
                CONDITION_NAMES[cond]: {
                    "improvement_pct": self.improvement(cls, cond),
                    "occurrence": self.occurrences(cls, cond),
                } for cond in CONDITION_ORDER
            }
            rows[cls]["overall_pct"] = self.class_improvement(cls)
        data = {
            "metric": "100 * (mean_with - mean_without) / |mean_without| per cell",
            "rows": rows,
            "condition_totals": {CONDITION_NAMES[c]: self.condition_improvement(c)
                                 for c in CONDITION_ORDER},
            "total_tokens": self.total_tokens(),
        }
        return json.dumps(data, sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        head = (f"{'class':<10}" + "".join(f"{CONDITION_NAMES[c]:>28}" for c in CONDITION_ORDER)
                + f"{'occurrence':>12}")
        lines = ["percentage improvement of mean log-likelihood, "
                 "100*(mean_with-mean_without)/|mean_without|", head]
        for cls in self.classes():
            occ = sum(self.occurrences(cls, c) for c in CONDITION_ORDER)
            lines.append(f"{cls:<10}" + "".join(
                f"{self.improvement(cls, c):>28.3f}" for c in CONDITION_ORDER)
                + f"{occ:>12}")
        lines.append(f"{'(all)':<10}" + "".join(
            f"{self.condition_improvement(c):>28.3f}" for c in CONDITION_ORDER)
            + f"{self.total_tokens():>12}")
        return "\n".join(lines) + "\n"


def delta_breakdown(params_with: ModelParams, params_without: ModelParams,
                    eval_triplets: Sequence[tuple], vocab: Vocabulary,
                    tagger: Callable[[str], str] = coarse_tagger) -> BreakdownTable:
    """Bucket per-token (logP_with - logP_without) by token class and by the
    (in input?, in context?) condition; tagger failures map to OTHER."""
    table = BreakdownTable()
    for x, y, contexts in eval_triplets:
        encs = encode_contexts(params_with, list(contexts)) if len(contexts) else []
        lp_with = per_token_logprobs(params_with, x, y, encs)
        lp_without = per_token_logprobs(params_without, x, y, [])
        x_set, c_set = membership_sets(x, list(contexts))
        for tok, lw, lo in zip(content(np.asarray(y)).tolist(),
                               lp_with.tolist(), lp_without.tolist()):
            try:
                cls = tagger(vocab.token_of(tok))
                if cls not in TOKEN_CLASSES:
                    cls = CLASS_OTHER
            except Exception:
                cls = CLASS_OTHER
            key = (cls, (tok in x_set, tok in c_set))
            table.sums_with[key] = table.sums_with.get(key, 0.0) + lw
            table.sums_without[key] = table.sums_without.get(key, 0.0) + lo
            table.counts[key] = table.counts.get(key, 0) + 1
    return table


# --------------------------------------------------------------------------
# Grounded context transfer
# --------------------------------------------------------------------------

@dataclass
class GroundedItem:
    """One question: prompt tokens, ranked candidate contexts, gold answer."""

    prompt: np.ndarray
    candidates: list[np.ndarray]
    gold_answer: str


@dataclass
class GroundedReport:
    total: int = 0
    in_context: int = 0
    out_of_context: int = 0
    changed_still_in_context: int = 0
    changed_out_of_context: int = 0
    unchanged: int = 0
    excluded: int = 0
    grounded_correct: int = 0
    rest_correct: int = 0
    rest_total: int = 0

    @property
    def transfer_rate(self) -> float:
        denom = self.in_context - self.excluded
        return self.changed_still_in_context / denom if denom else 0.0

    @property
    def grounded_accuracy(self) -> float:
        n = self.changed_still_in_context
        return self.grounded_correct / n if n else 0.0

    @property
    def rest_accuracy(self) -> float:
        return self.rest_correct / self.rest_total if self.rest_total else 0.0

    def to_json(self) -> str:
        data = dict(self.__dict__)
        data.update(transfer_rate=self.transfer_rate,
                    grounded_accuracy=self.grounded_accuracy,
                    rest_accuracy=self.rest_accuracy)
        return json.dumps(data, sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        return (
            f"grounded transfer over {self.total} questions\n"
            f"  original in context     : {self.in_context}\n"
            f"  original out of context : {self.out_of_context}\n"
            f"  changed, still in ctx   : {self.changed_still_in_context}\n"
            f"  changed, out of ctx     : {self.changed_out_of_context}\n"
            f"  unchanged               : {self.unchanged}\n"
            f"  excluded (< k remain)   : {self.excluded}\n"
            f"  transfer rate           : {self.transfer_rate:.3f}\n"
            f"  accuracy grounded/rest  : {self.grounded_accuracy:.3f} / {self.rest_accuracy:.3f}\n")


def grounded_analysis(params: ModelParams, items: Sequence[GroundedItem], k: int,
                      vocab: Vocabulary, max_len: int = 16) -> GroundedReport:
    """Decode, remove every candidate containing the output, re-decode.

    The original output is matched against contexts as a normalized substring;
    an empty decode counts as out of context. Questions left with fewer than k
    candidates after removal are excluded.
    """
    report = GroundedReport()
    for item in items:
        if len(item.candidates) <= k:
            raise AnalysisError("each question needs more than k candidate contexts")
        report.total += 1
        used = item.candidates[:k]
        encs = encode_contexts(params, used)
        out = greedy_decode(params, item.prompt, encs, max_len)
        out_str = squad_normalize(detokenize(vocab, out))
        correct = out_str == squad_normalize(item.gold_answer)
        ctx_strs = [squad_normalize(detokenize(vocab, content(c))) for c in item.candidates]
        in_ctx = bool(out_str) and any(out_str in ctx_strs[i] for i in range(k))
        if not in_ctx:
            report.out_of_context += 1
            report.rest_total += 1
            report.rest_correct += int(correct)
            continue
        report.in_context += 1
        remaining = [c for c, s in zip(item.candidates, ctx_strs) if out_str not in s]
        remaining_strs = [s for s in ctx_strs if out_str not in s]
        if len(remaining) < k:
            report.excluded += 1
            continue
        encs2 = encode_contexts(params, remaining[:k])
        out2 = greedy_decode(params, item.prompt, encs2, max_len)
        out2_str = squad_normalize(detokenize(vocab, out2))
        if out2_str == out_str:
            report.unchanged += 1
            report.rest_total += 1
            report.rest_correct += int(correct)
        elif out2_str and any(out2_str in s for s in remaining_strs[:k]):
            report.changed_still_in_context += 1
            report.grounded_correct += int(correct)
        else:
            report.changed_out_of_context += 1
            report.rest_total += 1
            report.rest_correct += int(correct)
    return report


# --------------------------------------------------------------------------
# Delta HTML report
# --------------------------------------------------------------------------

@dataclass
class TokenDelta:
    token: str
    delta: float
    in_input: bool
    in_context: bool


def token_deltas(params_with: ModelParams, params_without: ModelParams,
                 triplet: tuple, vocab: Vocabulary) -> list[TokenDelta]:
    """Per-token deltas and memberships for one (x, y, contexts) triplet."""
    x, y, contexts = triplet
    encs = encode_contexts(params_with, list(contexts)) if len(contexts) else []
    lp_with = per_token_logprobs(params_with, x, y, encs)
    lp_without = per_token_logprobs(params_without, x, y, [])
    x_set, c_set = membership_sets(x, list(contexts))
    out = []
    for tok, lw, lo in zip(content(np.asarray(y)).tolist(), lp_with, lp_without):
        out.append(TokenDelta(token=vocab.token_of(tok), delta=float(lw - lo),
                              in_input=tok in x_set, in_context=tok in c_set))
    return out


_HTML_PAGE = """<!DOCTYPE html>
<html><head><meta charset="utf-8"><title>per-token delta log-likelihood</title>
<style>
body {{ font-family: monospace; margin: 2em; line-height: 2.2; }}
span.tok {{ padding: 2px 3px; margin: 1px; border-radius: 3px; }}
span.boxed {{ border: 1.5px solid #222; }}
span.struck {{ text-decoration: line-through; }}
div.example {{ margin-bottom: 1.5em; border-bottom: 1px dotted #999; padding-bottom: 1em; }}
p.legend {{ color: #444; }}
</style></head><body>
<p class="legend">green: context helped (positive delta) &middot; red: context hurt
&middot; boxed: in context only &middot; struck through: in input
&middot; hover a token for its delta</p>
{body}
</body></html>
"""


def emit_delta_html(examples: Sequence[Sequence[TokenDelta]], path: str | Path) -> None:
    """Self-contained HTML: tokens tinted by delta sign and magnitude, boxed
    when in-context-only, struck through when in-input, delta in the tooltip."""
    blocks = []
    max_mag = max((abs(t.delta) for ex in examples for t in ex), default=1.0) or 1.0
    for ex in examples:
        spans = []
        for t in ex:
            classes = ["tok"]
            if t.in_context and not t.in_input:
                classes.append("boxed")
            if t.in_input:
                classes.append("struck")
            alpha = min(1.0, abs(t.delta) / max_mag)
            if t.delta > 0:
                style = f"background: rgba(0, 150, 0, {alpha:.3f});"
            elif t.delta < 0:
                style = f"background: rgba(200, 0, 0, {alpha:.3f});"
            else:
                style = "background: none;"
            spans.append(f'<span class="{" ".join(classes)}" style="{style}" '
                         f'title="{t.delta:+.4f}">{html.escape(t.token)}</span>')
        blocks.append('<div class="example">' + "".join(spans) + "</div>")
    page = _HTML_PAGE.format(body="\n".join(blocks))
    with open(path, "w", encoding="utf-8") as f:
        f.write(page)
