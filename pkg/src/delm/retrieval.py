"""Retrieval stack: Okapi BM25 bootstrap, token-overlap filtering, the dual
encoder, and exact inner-product top-k over a vector index.

All top-k operations break ties toward the lower id and are exactly
equivalent to brute-force enumeration (property-tested against oracles).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from delm import _kernels
from delm.binfmt import CorruptFileError, FileHeader, read_header
from delm.corpus import content

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
DEFAULT_OVERLAP_THRESHOLD = 8


class RetrievalError(ValueError):
    """Raised for invalid retrieval inputs."""


# --------------------------------------------------------------------------
# BM25
# --------------------------------------------------------------------------

@dataclass
class BM25Index:
    """Inverted index with Okapi BM25 statistics.

    postings maps term id -> (doc_ids ascending, term frequencies); idf uses
    the +1-inside-log variant; query duplicates count once.
    """

    doc_lens: np.ndarray                 # (N,) int64, PAD excluded
    avgdl: float
    postings: dict[int, tuple[np.ndarray, np.ndarray]]
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B

    @property
    def n_docs(self) -> int:
        return len(self.doc_lens)

    def idf(self, term: int) -> float:
        df = len(self.postings[term][0]) if term in self.postings else 0
        return math.log((self.n_docs - df + 0.5) / (df + 0.5) + 1.0)

    def tf(self, term: int, doc_id: int) -> int:
        if term not in self.postings:
            return 0
        docs, tfs = self.postings[term]
        pos = int(np.searchsorted(docs, doc_id))
        if pos < len(docs) and docs[pos] == doc_id:
            return int(tfs[pos])
        return 0


def bm25_build(contexts: Sequence[np.ndarray], k1: float = DEFAULT_K1,
               b: float = DEFAULT_B) -> BM25Index:
    """Build the index over token sequences; PAD is ignored everywhere."""
    if len(contexts) == 0:
        raise RetrievalError("cannot build BM25 index over an empty context list")
    doc_lens = np.zeros(len(contexts), dtype=np.int64)
    acc: dict[int, dict[int, int]] = {}
    for d, ctx in enumerate(contexts):
        toks = content(np.asarray(ctx))
        if len(toks) == 0:
            raise RetrievalError(f"document {d} has zero length after PAD removal")
        doc_lens[d] = len(toks)
        for t in toks.tolist():
            acc.setdefault(t, {})
            acc[t][d] = acc[t].get(d, 0) + 1
    postings = {}
    for t in sorted(acc):
        docs = np.array(sorted(acc[t]), dtype=np.int64)
        tfs = np.array([acc[t][int(d)] for d in docs], dtype=np.int64)
        postings[t] = (docs, tfs)
    return BM25Index(doc_lens=doc_lens, avgdl=float(doc_lens.mean()),
                     postings=postings, k1=k1, b=b)


def _query_terms(query: np.ndarray) -> list[int]:
    """Unique non-PAD query terms in ascending order (duplicates count once)."""
    return sorted(set(content(np.asarray(query)).tolist()))


def bm25_score(index: BM25Index, query: np.ndarray, doc_id: int) -> float:
    """Okapi BM25 score of one document for a query."""
    if not 0 <= doc_id < index.n_docs:
        raise RetrievalError(f"doc_id {doc_id} out of range (N={index.n_docs})")
    k1, b = index.k1, index.b
    dl = float(index.doc_lens[doc_id])
    score = 0.0
    for t in _query_terms(query):
        tf = float(index.tf(t, doc_id))
        if tf == 0.0:
            continue
        score += index.idf(t) * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * (dl / index.avgdl)))
    return score


def bm25_score_all(index: BM25Index, query: np.ndarray) -> np.ndarray:
    """Scores for every document, numerically identical to bm25_score per doc.

    Terms are accumulated in ascending term order, matching bm25_score's
    summation order exactly.
    """
    scores = np.zeros(index.n_docs, dtype=np.float64)
    k1, b = index.k1, index.b
    for t in _query_terms(query):
        if t not in index.postings:
            continue
        docs, tfs = index.postings[t]
        tf = tfs.astype(np.float64)
        dl = index.doc_lens[docs].astype(np.float64)
        contrib = index.idf(t) * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * (dl / index.avgdl)))
        scores[docs] += contrib
    return scores


def bm25_topk(index: BM25Index, query: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Top-k documents by BM25 score; ties break toward the lower doc id."""
    if k < 1:
        raise RetrievalError("k must be >= 1")
    scores = bm25_score_all(index, query)
    order = np.lexsort((np.arange(index.n_docs), -scores))
    return [(int(d), float(scores[d])) for d in order[:k]]


def bm25_save(index: BM25Index, path: str | Path) -> None:
    """Binary persistence: common header + packed statistics arrays."""
    terms = np.array(sorted(index.postings), dtype=np.int64)
    offsets = np.zeros(len(terms) + 1, dtype=np.uint64)
    doc_chunks, tf_chunks = [], []
    total = 0
    for i, t in enumerate(terms.tolist()):
        docs, tfs = index.postings[t]
        total += len(docs)
        offsets[i + 1] = total
        doc_chunks.append(docs.astype(np.uint32))
        tf_chunks.append(tfs.astype(np.uint32))
    all_docs = np.concatenate(doc_chunks) if doc_chunks else np.zeros(0, dtype=np.uint32)
    all_tfs = np.concatenate(tf_chunks) if tf_chunks else np.zeros(0, dtype=np.uint32)
    with open(path, "wb") as f:
        f.write(FileHeader(record_count=index.n_docs).pack())
        f.write(np.array([index.k1, index.b, index.avgdl], dtype="<f8").tobytes())
        f.write(np.array([len(terms), total], dtype="<u8").tobytes())
        f.write(terms.astype("<i8").tobytes())
        f.write(offsets.astype("<u8").tobytes())
        f.write(all_docs.astype("<u4").tobytes())
        f.write(all_tfs.astype("<u4").tobytes())
        f.write(index.doc_lens.astype("<i8").tobytes())


def bm25_load(path: str | Path) -> BM25Index:
    with open(path, "rb") as f:
        header = read_header(f)
        k1, b, avgdl = np.frombuffer(f.read(24), dtype="<f8")
        n_terms, total = (int(v) for v in np.frombuffer(f.read(16), dtype="<u8"))
        terms = np.frombuffer(f.read(8 * n_terms), dtype="<i8")
        offsets = np.frombuffer(f.read(8 * (n_terms + 1)), dtype="<u8")
        all_docs = np.frombuffer(f.read(4 * total), dtype="<u4")
        all_tfs = np.frombuffer(f.read(4 * total), dtype="<u4")
        doc_lens = np.frombuffer(f.read(8 * header.record_count), dtype="<i8")
        if len(doc_lens) != header.record_count:
            raise CorruptFileError("record_count: truncated document length table")
    postings = {}
    for i, t in enumerate(terms.tolist()):
        lo, hi = int(offsets[i]), int(offsets[i + 1])
        postings[t] = (all_docs[lo:hi].astype(np.int64), all_tfs[lo:hi].astype(np.int64))
    index = BM25Index(doc_lens=doc_lens.astype(np.int64), avgdl=float(avgdl),
                      postings=postings, k1=float(k1), b=float(b))
    return index


# --------------------------------------------------------------------------
# Token-overlap filter
# --------------------------------------------------------------------------

def lcs_tokens(a: np.ndarray, b: np.ndarray) -> int:
    """Longest common contiguous token run, PADs excluded."""
    return int(_kernels.lcs_run(content(np.asarray(a)), content(np.asarray(b))))


def overlap_ok(target_seq: np.ndarray, context_seq: np.ndarray,
               threshold: int = DEFAULT_OVERLAP_THRESHOLD) -> bool:
    """True iff the longest common run is no more than threshold tokens."""
    if threshold < 1:
        raise RetrievalError("overlap threshold must be >= 1")
    return lcs_tokens(target_seq, context_seq) <= threshold


# --------------------------------------------------------------------------
# Dual encoder
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EmbedderConfig:
    vocab_size: int
    d_model: int = 64
    out_dim: int = 32      # e; the paper-scale value is 128
    max_len: int = 1024
    shared_tower: bool = True

    def __post_init__(self):
        if self.vocab_size < 5 or self.d_model < 1 or self.out_dim < 1 or self.max_len < 1:
            raise RetrievalError("invalid embedder config")


class _Tower(nn.Module):
    """Token embedding, masked mean pool, two-layer projection head."""

    def __init__(self, config: EmbedderConfig):
        super().__init__()
        self.embedding = nn.Embedding(config.vocab_size, config.d_model)
        self.hidden = nn.Linear(config.d_model, config.d_model)
        self.out = nn.Linear(config.d_model, config.out_dim)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        emb = self.embedding(ids) * mask.unsqueeze(-1)
        denom = mask.sum(dim=1, keepdim=True).clamp(min=1.0)
        pooled = emb.sum(dim=1) / denom
        return self.out(torch.relu(self.hidden(pooled)))


class Embedder(nn.Module):
    """Dual encoder; one shared tower by default, or separate query/document towers."""

    ROLES = ("query", "document")

    def __init__(self, config: EmbedderConfig):
        super().__init__()
        self.config = config
        self.query_tower = _Tower(config)
        self.doc_tower = self.query_tower if config.shared_tower else _Tower(config)

    def tower(self, role: str) -> _Tower:
        if role not in self.ROLES:
            raise RetrievalError(f"unknown embedder role {role!r}")
        return self.query_tower if role == "query" else self.doc_tower

    def forward_batch(self, seqs: Sequence[np.ndarray], role: str) -> torch.Tensor:
        """(B, e) embeddings with grad; sequences are PAD-stripped and left-aligned."""
        contents = [content(np.asarray(s)) for s in seqs]
        for c in contents:
            if len(c) > self.config.max_len:
                raise RetrievalError(
                    f"sequence of length {len(c)} exceeds embedder max_len {self.config.max_len}")
        max_len = max((len(c) for c in contents), default=1) or 1
        p = next(self.parameters())
        ids = torch.zeros((len(contents), max_len), dtype=torch.long)
        mask = torch.zeros((len(contents), max_len), dtype=p.dtype)
        for i, c in enumerate(contents):
            if len(c):
                ids[i, : len(c)] = torch.from_numpy(np.ascontiguousarray(c))
                mask[i, : len(c)] = 1.0
        return self.tower(role)(ids, mask)


def init_embedder(config: EmbedderConfig, seed: int) -> Embedder:
    """Deterministic embedder initialization (scaled uniform, zero biases)."""
    emb = Embedder(config)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in sorted(emb.named_parameters()):
            if p.dim() >= 2:
                bound = 1.0 / math.sqrt(p.shape[1])
                p.uniform_(-bound, bound, generator=gen)
            else:
                p.zero_()
    return emb


def embed(embedder: Embedder, seq: np.ndarray, role: str = "query") -> np.ndarray:
    """Single-sequence embedding as float32; raw inner product is the similarity."""
    with torch.no_grad():
        vec = embedder.forward_batch([seq], role)[0]
    return vec.detach().cpu().numpy().astype(np.float32)


def embed_many(embedder: Embedder, seqs: Sequence[np.ndarray], role: str) -> np.ndarray:
    """(B, e) float32 embeddings without grad."""
    with torch.no_grad():
        out = embedder.forward_batch(seqs, role)
    return out.detach().cpu().numpy().astype(np.float32)


def save_embedder(embedder: Embedder, path: str | Path) -> None:
    """Embedder checkpoint in the common tensor-file format.

    state_dict (not named_parameters) so a shared tower round-trips under both
    of its registered names.
    """
    from dataclasses import asdict

    from delm.binfmt import save_tensor_file
    arrays = {n: t.detach().cpu().numpy() for n, t in embedder.state_dict().items()}
    save_tensor_file(path, {"embedder_config": asdict(embedder.config)}, arrays)


def load_embedder(path: str | Path) -> Embedder:
    from delm.binfmt import load_tensor_file
    meta, arrays = load_tensor_file(path)
    embedder = Embedder(EmbedderConfig(**meta["embedder_config"]))
    embedder.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return embedder


# --------------------------------------------------------------------------
# Vector index
# --------------------------------------------------------------------------

@dataclass
class VectorIndex:
    """Dense document embeddings; row i is the key of context i."""

    keys: np.ndarray  # (N, e) float32

    def __post_init__(self):
        self.keys = np.ascontiguousarray(self.keys, dtype=np.float32)
        if self.keys.ndim != 2:
            raise RetrievalError("vector index requires a 2-D key matrix")
        if not np.isfinite(self.keys).all():
            raise RetrievalError("vector index keys must be finite")

    @property
    def n_docs(self) -> int:
        return self.keys.shape[0]

    @property
    def dim(self) -> int:
        return self.keys.shape[1]


def vec_topk(index: VectorIndex, q: np.ndarray, k: int,
             exclusions: Iterable[int] = ()) -> list[tuple[int, float]]:
    """Exact inner-product top-k among non-excluded ids; ties to the lower id."""
    if k < 1:
        raise RetrievalError("k must be >= 1")
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dim:
        raise RetrievalError(f"query dim {q.shape[0]} != index dim {index.dim}")
    scores = index.keys.astype(np.float64) @ q
    excluded = np.zeros(index.n_docs, dtype=bool)
    for e in exclusions:
        if 0 <= e < index.n_docs:
            excluded[e] = True
    order = np.lexsort((np.arange(index.n_docs), -scores))
    out = []
    for d in order:
        if excluded[d]:
            continue
        out.append((int(d), float(scores[d])))
        if len(out) == k:
            break
    return out


def vector_index_save(index: VectorIndex, path: str | Path,
                      value_rows: int = 0, value_cols: int = 0) -> None:
    """Key-file format: common header + packed float32 keys."""
    with open(path, "wb") as f:
        f.write(FileHeader(record_count=index.n_docs, key_dim=index.dim,
                           value_rows=value_rows, value_cols=value_cols).pack())
        f.write(np.ascontiguousarray(index.keys, dtype="<f4").tobytes())


def vector_index_load(path: str | Path) -> VectorIndex:
    with open(path, "rb") as f:
        header = read_header(f)
        expect = header.record_count * header.key_dim * 4
        raw = f.read()
    if len(raw) != expect:
        raise CorruptFileError(
            f"record_count: key payload is {len(raw)} bytes, expected {expect}")
    keys = np.frombuffer(raw, dtype="<f4").reshape(header.record_count, header.key_dim)
    return VectorIndex(keys=keys.copy())
