"""Corpus machinery: vocabulary, tokenization, chunking, context windows,
and the synthetic fact/filler corpus with QA pairs.

Token id conventions: PAD=0 (padding only, never produced by tokenization),
BOS=1, EOS=2, UNK=3; regular tokens start at 4, assigned by descending corpus
frequency then lexicographic order.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
FIRST_REGULAR_ID = 4

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"

# a word is a \w+ run; any other non-space character is its own token
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

DEFAULT_TARGET_LEN = 64    # s
DEFAULT_INPUT_LEN = 448    # n
DEFAULT_WINDOW_LEN = 512   # w
DEFAULT_STRIDE = 64


class CorpusError(ValueError):
    """Raised for invalid corpus construction inputs."""


def split_tokens(text: str) -> list[str]:
    """Lowercase and split text into word/punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


def normalize_text(text: str) -> str:
    """The canonical text form: lowercased tokens joined by single spaces."""
    return " ".join(split_tokens(text))


_ARTICLES_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT_RE = re.compile(r"[^\w\s]")


def squad_normalize(text: str) -> str:
    """SQuAD-style answer normalization: lowercase, strip punctuation and
    articles, collapse whitespace."""
    text = _PUNCT_RE.sub(" ", text.lower())
    text = _ARTICLES_RE.sub(" ", text)
    return " ".join(text.split())


class Vocabulary:
    """Bijective token<->id map over ids >= 4, with fixed special ids."""

    def __init__(self, tokens: Sequence[str]):
        self._id_to_token = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN] + list(tokens)
        self._token_to_id = {t: i for i, t in enumerate(self._id_to_token)}
        if len(self._token_to_id) != len(self._id_to_token):
            raise CorpusError("duplicate tokens in vocabulary")

    @property
    def size(self) -> int:
        return len(self._id_to_token)

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < self.size:
            raise CorpusError(f"token id {token_id} out of range (vocab size {self.size})")
        return self._id_to_token[token_id]

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._id_to_token == other._id_to_token

    def save(self, path: str | Path) -> None:
        """One regular token per line; line number = id - 4."""
        with open(path, "w", encoding="utf-8") as f:
            for tok in self._id_to_token[FIRST_REGULAR_ID:]:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        return cls(tokens)


def build_vocab(corpus: Iterable[str]) -> Vocabulary:
    """Build a vocabulary over every token of the corpus.

    Ids are assigned in descending frequency, ties broken lexicographically,
    starting at 4. Deterministic for a given corpus.
    """
    counts: dict[str, int] = {}
    n_texts = 0
    for text in corpus:
        n_texts += 1
        for tok in split_tokens(text):
            counts[tok] = counts.get(tok, 0) + 1
    if n_texts == 0:
        raise CorpusError("empty corpus")
    if not counts:
        raise CorpusError("corpus contains no tokens")
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocabulary(ordered)


def tokenize(vocab: Vocabulary, text: str) -> np.ndarray:
    """Token ids for text; unknown tokens map to UNK. Never emits PAD."""
    return np.array([vocab.id_of(t) for t in split_tokens(text)], dtype=np.int64)


def detokenize(vocab: Vocabulary, ids: Sequence[int]) -> str:
    """Inverse of tokenize up to normalization; PAD/BOS/EOS are skipped."""
    toks = [vocab.token_of(int(i)) for i in ids if int(i) not in (PAD_ID, BOS_ID, EOS_ID)]
    return " ".join(toks)


def content(seq: np.ndarray) -> np.ndarray:
    """Non-PAD portion of a token sequence."""
    seq = np.asarray(seq)
    return seq[seq != PAD_ID]


def pad_to(seq: Sequence[int] | np.ndarray, length: int, left: bool = False) -> np.ndarray:
    """Zero-pad (or error on overflow) a sequence to an exact length."""
    seq = np.asarray(seq, dtype=np.int64)
    if len(seq) > length:
        raise CorpusError(f"sequence of length {len(seq)} exceeds {length}")
    out = np.zeros(length, dtype=np.int64)
    if left:
        if len(seq):
            out[length - len(seq):] = seq
    else:
        out[: len(seq)] = seq
    return out


@dataclass
class LMExample:
    """One LM training example: padded input block and target block."""

    input_x: np.ndarray   # length exactly n, content right-aligned (left pads)
    target_y: np.ndarray  # length exactly s, content left-aligned (right pads)
    article_id: int
    chunk_index: int


@dataclass
class ContextWindow:
    """One retrievable database entry: a fixed-width slice of an article."""

    tokens: np.ndarray  # length exactly w, zero-padded at the end
    article_id: int
    start_offset: int


@dataclass
class QAExample:
    question: str
    answer: str
    gold_fact_id: int = -1
    context_pool: list[int] = field(default_factory=list)
    heldout: bool = False


def chunk_article(tokens: np.ndarray, s: int = DEFAULT_TARGET_LEN,
                  n: int = DEFAULT_INPUT_LEN, article_id: int = 0) -> list[LMExample]:
    """Split an article into non-overlapping target blocks of at most s tokens.

    Example k targets tokens [k*s, min((k+1)*s, len)) padded to s; its input is
    the up-to-n immediately preceding tokens, left-padded to n. Target blocks
    tile the article exactly.
    """
    if s < 1:
        raise CorpusError("target block size must be >= 1")
    if n < 0:
        raise CorpusError("input window size must be >= 0")
    tokens = np.asarray(tokens, dtype=np.int64)
    out = []
    for k in range(0, (len(tokens) + s - 1) // s):
        target = tokens[k * s: min((k + 1) * s, len(tokens))]
        inp = tokens[max(0, k * s - n): k * s]
        out.append(LMExample(
            input_x=pad_to(inp, n, left=True),
            target_y=pad_to(target, s),
            article_id=article_id,
            chunk_index=k,
        ))
    return out


def build_context_windows(tokens: np.ndarray, w: int = DEFAULT_WINDOW_LEN,
                          stride: int = DEFAULT_STRIDE, article_id: int = 0) -> list[ContextWindow]:
    """Sliding windows of width w starting at every stride while start < len."""
    if stride < 1 or w < stride:
        raise CorpusError("require w >= stride >= 1")
    tokens = np.asarray(tokens, dtype=np.int64)
    out = []
    start = 0
    while start < len(tokens):
        piece = tokens[start: start + w]
        out.append(ContextWindow(tokens=pad_to(piece, w), article_id=article_id,
                                 start_offset=start))
        start += stride
    return out


# --------------------------------------------------------------------------
# Synthetic corpus
# --------------------------------------------------------------------------

@dataclass
class Article:
    id: int
    text: str
    title: str
    fact_id: int = -1        # -1 unless the article backs a QA fact
    heldout: bool = False    # held-out facts: never chunked into training targets
    kind: str = "fact"       # fact | replica | filler


_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"

# small fixed pools for filler text; function words match the analysis tagger's lexicon
_FUNCTION_WORDS = [
    "the", "a", "of", "and", "to", "in", "is", "was", "for", "on",
    "with", "at", "by", "it", "that", "as", "from", "or", "an", "be",
]
_CONTENT_WORDS = [
    "river", "garden", "market", "engine", "harbor", "meadow", "signal",
    "bridge", "castle", "forest", "librarian", "mountain", "village",
    "orchard", "lantern", "compass", "granite", "harvest", "journey",
    "monument", "painter", "quarry", "saddle", "tunnel", "willow",
]
_ATTRIBUTE_WORDS = [
    "color", "mass", "origin", "rank", "shape", "size", "age", "speed",
    "height", "texture", "genus", "charge",
]


def _syllable_word(rng: np.random.Generator, n_syllables: int) -> str:
    return "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS))
                   for _ in range(n_syllables))


def _unique_words(rng: np.random.Generator, count: int, n_syllables: int,
                  taken: set[str]) -> list[str]:
    words: list[str] = []
    while len(words) < count:
        w = _syllable_word(rng, n_syllables)
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def gen_synthetic_corpus(seed: int, n_entities: int, n_attrs: int,
                         n_filler_articles: int, heldout_fraction: float = 0.25,
                         filler_len_range: tuple[int, int] = (40, 100),
                         replica_groups: int | None = None,
                         replicas_per_group: int = 4,
                         ) -> tuple[list[Article], list[QAExample]]:
    """Deterministic entity-attribute-value corpus with QA pairs.

    Emits one fact article per (entity, attribute) pair, of the form
    "entity E attribute A value V .", plus filler articles of random common
    words. Every fact's value token is unique. The last ceil(heldout_fraction
    * n_facts) facts are flagged held out: their articles must only ever feed
    the context database, so their values never occur in a training target.

    QA pairs ask "what is A of E" -> "V"; each pair's context pool lists the
    gold fact article plus every other article sharing the attribute and a
    couple of fillers.

    Replica groups are extra fact articles that deliberately reuse one
    (entity name, attribute) key across several articles with different
    values. Their targets are unpredictable from the key alone, so a language
    model trained on them can only reduce loss by reading the retrieved
    context; they carry no QA pairs (the question string would be ambiguous)
    and never reuse a held-out entity name. replica_groups defaults to half
    the unique fact count.
    """
    if n_entities < 1 or n_attrs < 1 or n_filler_articles < 1:
        raise CorpusError("entity/attribute/filler counts must be >= 1")
    if n_attrs > len(_ATTRIBUTE_WORDS):
        raise CorpusError(f"at most {len(_ATTRIBUTE_WORDS)} attributes supported")
    rng = np.random.default_rng(seed)
    taken = set(_FUNCTION_WORDS) | set(_CONTENT_WORDS) | set(_ATTRIBUTE_WORDS)
    entities = _unique_words(rng, n_entities, 2, taken)
    attrs = _ATTRIBUTE_WORDS[:n_attrs]
    n_facts = n_entities * n_attrs
    if replica_groups is None:
        replica_groups = n_facts // 2
    n_replicas = replica_groups * replicas_per_group if replica_groups else 0

    # value alphabet: odd slots are 3-syllable coinages, even slots numerals
    values: list[str] = []
    used_numbers: set[int] = set()
    for i in range(n_facts + n_replicas):
        if i % 2 == 0:
            num = int(rng.integers(100, 100000))
            while num in used_numbers:
                num = int(rng.integers(100, 100000))
            used_numbers.add(num)
            values.append(str(num))
        else:
            values.append(_unique_words(rng, 1, 3, taken)[0])

    n_heldout = int(np.ceil(heldout_fraction * n_facts)) if heldout_fraction > 0 else 0
    articles: list[Article] = []
    qa: list[QAExample] = []
    fact_id = 0
    for ei, ent in enumerate(entities):
        for ai, attr in enumerate(attrs):
            heldout = fact_id >= n_facts - n_heldout
            text = f"entity {ent} attribute {attr} value {values[fact_id]} ."
            articles.append(Article(id=fact_id, text=text, title=ent,
                                    fact_id=fact_id, heldout=heldout))
            qa.append(QAExample(question=f"what is {attr} of {ent}",
                                answer=values[fact_id], gold_fact_id=fact_id,
                                heldout=heldout))
            fact_id += 1

    # replica groups: fresh names, repeated (name, attribute) keys
    group_names = _unique_words(rng, replica_groups, 2, taken) if replica_groups else []
    value_idx = n_facts
    for g in range(replica_groups):
        attr = attrs[int(rng.integers(0, len(attrs)))]
        for _ in range(replicas_per_group):
            text = f"entity {group_names[g]} attribute {attr} value {values[value_idx]} ."
            articles.append(Article(id=len(articles), text=text, title=group_names[g],
                                    fact_id=-1, kind="replica"))
            value_idx += 1

    lo, hi = filler_len_range
    pool = _FUNCTION_WORDS + _CONTENT_WORDS
    filler_base = len(articles)
    for j in range(n_filler_articles):
        length = int(rng.integers(lo, hi + 1))
        words = [pool[int(rng.integers(0, len(pool)))] for _ in range(length)]
        articles.append(Article(id=filler_base + j, text=" ".join(words) + " .",
                                title=f"filler {j}", kind="filler"))

    # context pools: gold fact, same-attribute facts (alternative values), two fillers
    n_articles = len(articles)
    for q in qa:
        ai = q.gold_fact_id % n_attrs
        pool_ids = [q.gold_fact_id]
        pool_ids += [f for f in range(ai, n_facts, n_attrs) if f != q.gold_fact_id]
        pool_ids += [filler_base + (q.gold_fact_id % n_filler_articles),
                     filler_base + ((q.gold_fact_id + 1) % n_filler_articles)]
        q.context_pool = [p for p in pool_ids if p < n_articles]
    return articles, qa


# --------------------------------------------------------------------------
# QA formatting
# --------------------------------------------------------------------------

QA_PROMPT_TEMPLATE = "question: {question} \n answer:"
QA_CONTEXT_TEMPLATE = "title: {title} source: {source}"
MAX_SHORT_ANSWER_TOKENS = 5
DEFAULT_QA_CONTEXT_LEN = 64


def qa_answer_is_short(answer: str, max_tokens: int = MAX_SHORT_ANSWER_TOKENS) -> bool:
    """Short-answer rule used to filter evaluation sets."""
    return 0 < len(answer.split()) <= max_tokens


def format_qa(vocab: Vocabulary, q: QAExample,
              answer_included: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Tokenized (prompt, target) pair for one QA example.

    The prompt carries no training loss; the target is the answer tokens
    followed by EOS (empty when answer_included is false).
    """
    if not q.question.strip():
        raise CorpusError("empty question")
    prompt = tokenize(vocab, QA_PROMPT_TEMPLATE.format(question=q.question))
    if not answer_included:
        return prompt, np.array([], dtype=np.int64)
    if not q.answer.strip():
        raise CorpusError("empty answer in training mode")
    target = np.concatenate([tokenize(vocab, q.answer), [EOS_ID]]).astype(np.int64)
    return prompt, target


def format_qa_context(vocab: Vocabulary, title: str, source: str,
                      length: int = DEFAULT_QA_CONTEXT_LEN) -> np.ndarray:
    """Tokenized "title: {title} source: {source}" padded or trimmed to length."""
    ids = tokenize(vocab, QA_CONTEXT_TEMPLATE.format(title=title, source=source))
    if len(ids) >= length:
        return ids[:length]
    return pad_to(ids, length)


# --------------------------------------------------------------------------
# File interfaces
# --------------------------------------------------------------------------

def save_corpus(path: str | Path, articles: list[Article]) -> None:
    """JSONL, one object per article: id, text, title (+ generator extras)."""
    with open(path, "w", encoding="utf-8") as f:
        for a in articles:
            rec = {"id": a.id, "text": a.text, "title": a.title, "kind": a.kind}
            if a.fact_id >= 0:
                rec["fact_id"] = a.fact_id
                rec["heldout"] = a.heldout
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_corpus(path: str | Path) -> list[Article]:
    articles = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            articles.append(Article(id=int(rec["id"]), text=rec["text"],
                                    title=rec.get("title", ""),
                                    fact_id=int(rec.get("fact_id", -1)),
                                    heldout=bool(rec.get("heldout", False)),
                                    kind=rec.get("kind", "fact")))
    return articles


def save_qa(path: str | Path, qa: list[QAExample]) -> None:
    """JSONL, one object per pair: question, answer, heldout (+ extras)."""
    with open(path, "w", encoding="utf-8") as f:
        for q in qa:
            f.write(json.dumps({
                "question": q.question, "answer": q.answer, "heldout": q.heldout,
                "gold_fact_id": q.gold_fact_id, "context_pool": q.context_pool,
            }, sort_keys=True) + "\n")


def load_qa(path: str | Path) -> list[QAExample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(QAExample(question=rec["question"], answer=rec["answer"],
                                 heldout=bool(rec.get("heldout", False)),
                                 gold_fact_id=int(rec.get("gold_fact_id", -1)),
                                 context_pool=list(rec.get("context_pool", []))))
    return out
