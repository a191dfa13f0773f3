"""Encoder-decoder LM with decoupled context encoding.

Each retrieved context is encoded independently (attention confined to the
context, so a batched encode is block diagonal) and the decoder cross-attends
to the row-wise concatenation of the encodings. With an empty encodings list
the model reduces exactly to a decoder-only LM: the cross-attention path is
skipped and encoder parameters receive zero gradient.

Conventions:
  * Positions are content-relative sinusoids: leading PAD carries no
    position, every context restarts at 0, and the target continues from the
    input's content. Logits are therefore invariant to the amount of padding.
  * A BOS anchor is prepended internally so the first target token has a
    well-defined conditional; row t of decode_logits is the distribution over
    the token following position t (rows at PAD positions repeat the
    prediction after the content seen so far).
  * Cross-attention contributions are canonicalized by sorting encodings by
    context id, so permuting the encodings list cannot change any output.
  * The token embedding table is shared by encoder and decoder and the output
    projection is tied to it (logits = h @ E^T). The table belongs to the
    decoder parameter group: it is required at inference, while the encoder
    only borrows it during offline encoding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from delm.binfmt import load_tensor_file, save_tensor_file
from delm.corpus import BOS_ID, EOS_ID, PAD_ID, content

_MASK_FILL = -1e30  # finite: a fully-masked row softmaxes to uniform weights
                    # over zero value rows, which bias-free projections keep at
                    # an exact zero output


class ModelError(ValueError):
    """Raised for invalid model configuration or inputs."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 256
    max_ctx_len: int = 512    # w
    max_input_len: int = 448  # n
    max_target_len: int = 64  # s
    k_contexts: int = 2       # 4 is the QA default

    def __post_init__(self):
        if self.vocab_size < 5:
            raise ModelError("vocab_size must cover the special ids")
        if self.d_model % self.n_heads != 0:
            raise ModelError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("d_model", "n_heads", "n_enc_layers", "n_dec_layers", "d_ff",
                     "max_ctx_len", "max_input_len", "max_target_len", "k_contexts"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")


@dataclass
class Encoding:
    """Precomputed encoder output for one context; rows >= content_len are PAD."""

    h: np.ndarray  # (w, d_model) float32
    content_len: int
    context_id: int = -1


_PE_CACHE: dict[tuple[int, int, torch.dtype], torch.Tensor] = {}


def sinusoidal_positions(length: int, d_model: int, dtype: torch.dtype) -> torch.Tensor:
    """Standard fixed sin/cos position table of shape (length, d_model)."""
    # cache grows by doubling so nearby lengths share one table
    size = 8
    while size < length:
        size *= 2
    key = (size, d_model, dtype)
    if key not in _PE_CACHE:
        pos = torch.arange(size, dtype=torch.float64).unsqueeze(1)
        half = torch.arange(0, d_model, 2, dtype=torch.float64)
        angle = pos / torch.pow(10000.0, half / d_model)
        table = torch.zeros((size, d_model), dtype=torch.float64)
        table[:, 0::2] = torch.sin(angle)
        table[:, 1::2] = torch.cos(angle[:, : d_model // 2])
        _PE_CACHE[key] = table.to(dtype)
    return _PE_CACHE[key][:length]


def _additive_mask(valid: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    """(B, Lk) bool validity -> (B, 1, 1, Lk) additive mask (0 or _MASK_FILL).

    Rows left with no valid key must carry zero value vectors at the allowed
    position instead; the bias-free value/output projections then yield an
    exact zero, equivalent to skipping attention.
    """
    mask = torch.zeros(valid.shape, dtype=dtype)
    mask[~valid] = _MASK_FILL
    return mask.unsqueeze(1).unsqueeze(2)


_CAUSAL_CACHE: dict[tuple[int, torch.dtype], torch.Tensor] = {}


def _causal_mask(length: int, dtype: torch.dtype) -> torch.Tensor:
    """(1, 1, L, L) additive mask banning keys after the query position."""
    size = 8
    while size < length:
        size *= 2
    key = (size, dtype)
    if key not in _CAUSAL_CACHE:
        m = torch.full((size, size), _MASK_FILL, dtype=dtype).triu(1)
        _CAUSAL_CACHE[key] = m.unsqueeze(0).unsqueeze(0)
    return _CAUSAL_CACHE[key][:, :, :length, :length]


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.wq = nn.Linear(d_model, d_model, bias=False)
        self.wk = nn.Linear(d_model, d_model, bias=False)
        self.wv = nn.Linear(d_model, d_model, bias=False)
        self.wo = nn.Linear(d_model, d_model, bias=False)

    def forward(self, q_in: torch.Tensor, kv_in: torch.Tensor,
                add_mask: torch.Tensor) -> torch.Tensor:
        """add_mask broadcasts against scores (B, heads, Lq, Lk); masked
        positions hold a large negative value."""
        b, lq, d = q_in.shape
        lk = kv_in.shape[1]
        q = self.wq(q_in).view(b, lq, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.wk(kv_in).view(b, lk, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.wv(kv_in).view(b, lk, self.n_heads, self.head_dim).transpose(1, 2)
        out = torch.nn.functional.scaled_dot_product_attention(
            q, k, v, attn_mask=add_mask, scale=1.0 / math.sqrt(self.head_dim))
        return self.wo(out.transpose(1, 2).reshape(b, lq, d))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.inner = nn.Linear(d_model, d_ff)
        self.outer = nn.Linear(d_ff, d_model)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.outer(torch.relu(self.inner(h)))


class EncoderLayer(nn.Module):
    """Pre-norm residual block: self-attention then feed-forward."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.norm_ffn = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff)

    def forward(self, h: torch.Tensor, add_mask: torch.Tensor) -> torch.Tensor:
        normed = self.norm_attn(h)
        h = h + self.attn(normed, normed, add_mask)
        return h + self.ffn(self.norm_ffn(h))


class DecoderLayer(nn.Module):
    """Pre-norm: causal self-attention, cross-attention (skippable), feed-forward."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.norm_self = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.norm_cross = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.norm_ffn = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff)

    def forward(self, h: torch.Tensor, self_mask: torch.Tensor,
                mem: torch.Tensor | None, mem_mask: torch.Tensor | None) -> torch.Tensor:
        normed = self.norm_self(h)
        h = h + self.self_attn(normed, normed, self_mask)
        if mem is not None:
            h = h + self.cross_attn(self.norm_cross(h), mem, mem_mask)
        return h + self.ffn(self.norm_ffn(h))


def _stack_ragged(seqs: list[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    """Left-align int sequences into one padded (B, Lmax) long tensor."""
    max_len = max((len(s) for s in seqs), default=1) or 1
    ids = torch.zeros((len(seqs), max_len), dtype=torch.long)
    for i, s in enumerate(seqs):
        if len(s):
            ids[i, : len(s)] = torch.from_numpy(np.ascontiguousarray(s))
    return ids, torch.tensor([len(s) for s in seqs])


class EncDecLM(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.embedding = nn.Embedding(config.vocab_size, config.d_model)
        self.enc_layers = nn.ModuleList(
            EncoderLayer(config.d_model, config.n_heads, config.d_ff)
            for _ in range(config.n_enc_layers))
        self.enc_norm = nn.LayerNorm(config.d_model)
        self.dec_layers = nn.ModuleList(
            DecoderLayer(config.d_model, config.n_heads, config.d_ff)
            for _ in range(config.n_dec_layers))
        self.dec_norm = nn.LayerNorm(config.d_model)

    # -- parameter groups ---------------------------------------------------
    def encoder_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters()
                if n.startswith(("enc_layers.", "enc_norm."))]

    def decoder_parameter_names(self) -> list[str]:
        enc = set(self.encoder_parameter_names())
        return [n for n, _ in self.named_parameters() if n not in enc]

    # -- internals ------------------------------------------------------------
    def _embed_positions(self, ids: torch.Tensor) -> torch.Tensor:
        emb = self.embedding(ids) * math.sqrt(self.config.d_model)
        pe = sinusoidal_positions(ids.shape[1], self.config.d_model, emb.dtype)
        return emb + pe.unsqueeze(0)

    def encode_batch(self, ids: torch.Tensor, lens: torch.Tensor) -> torch.Tensor:
        """(B, L, d) encodings; attention stays inside each batch row."""
        h = self._embed_positions(ids)
        dtype = h.dtype
        key_valid = torch.arange(ids.shape[1]).unsqueeze(0) < lens.unsqueeze(1)
        mask = _additive_mask(key_valid, dtype)
        for layer in self.enc_layers:
            h = layer(h, mask)
        return self.enc_norm(h)

    def decode_batch(self, ids: torch.Tensor, lens: torch.Tensor,
                     mem: torch.Tensor | None,
                     mem_valid: torch.Tensor | None) -> torch.Tensor:
        """(B, L, vocab) logits; row i is the prediction after consuming ids[:, :i+1].

        mem rows beyond an example's valid region must be zero vectors (the
        bias-free projections then make masked cross-attention an exact no-op).
        """
        length = ids.shape[1]
        h = self._embed_positions(ids)
        dtype = h.dtype
        key_valid = torch.arange(length).unsqueeze(0) < lens.unsqueeze(1)
        self_mask = _additive_mask(key_valid, dtype) + _causal_mask(length, dtype)
        mem_mask = None
        if mem is not None:
            mem_mask = _additive_mask(mem_valid, dtype)
        for layer in self.dec_layers:
            h = layer(h, self_mask, mem, mem_mask)
        h = self.dec_norm(h)
        return h @ self.embedding.weight.t()


class ModelParams:
    """Owner of the model configuration and its parameter tensors."""

    def __init__(self, config: ModelConfig, module: EncDecLM):
        if (config.vocab_size, config.d_model, config.n_heads, config.n_enc_layers,
            config.n_dec_layers, config.d_ff) != (
                module.config.vocab_size, module.config.d_model, module.config.n_heads,
                module.config.n_enc_layers, module.config.n_dec_layers, module.config.d_ff):
            raise ModelError("config is structurally incompatible with the module")
        self.config = config
        self.module = module
        module.config = config  # runtime limits (k_contexts, lengths) may differ
        self._f64_twin: EncDecLM | None = None

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.detach().cpu().numpy().copy()
                for n, p in self.module.named_parameters()}

    def encoder_parameter_names(self) -> list[str]:
        return self.module.encoder_parameter_names()

    def decoder_parameter_names(self) -> list[str]:
        return self.module.decoder_parameter_names()

    def clone(self) -> "ModelParams":
        other = ModelParams(self.config, EncDecLM(self.config))
        other.module.to(next(self.module.parameters()).dtype)
        other.module.load_state_dict(self.module.state_dict())
        return other

    def double(self) -> "ModelParams":
        self.module.double()
        return self


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministic init: scaled uniform for matrices, unit gains, zero biases."""
    module = EncDecLM(config)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in sorted(module.named_parameters()):
            if p.dim() >= 2:
                bound = 1.0 / math.sqrt(p.shape[1])
                p.uniform_(-bound, bound, generator=gen)
            elif name.endswith(".weight"):  # layernorm gain
                p.fill_(1.0)
            else:
                p.zero_()
    return ModelParams(config, module)


# --------------------------------------------------------------------------
# Context encoding
# --------------------------------------------------------------------------

def _encode_f64(params: "ModelParams", ids: torch.Tensor, lens: torch.Tensor) -> torch.Tensor:
    """Run the encoder through a float64 twin of the current weights.

    The twin module is cached per ModelParams; its weights are refreshed from
    the live module on every call, so training between calls is safe.
    """
    module = params.module
    if next(module.parameters()).dtype == torch.float64:
        with torch.no_grad():
            return module.encode_batch(ids, lens)
    twin = params._f64_twin
    if twin is None:
        twin = EncDecLM(module.config).double()
        params._f64_twin = twin
    twin.load_state_dict({k: v.double() for k, v in module.state_dict().items()})
    with torch.no_grad():
        return twin.encode_batch(ids, lens)


def encode_contexts(params: ModelParams, contexts: Sequence[np.ndarray],
                    context_ids: Sequence[int] | None = None) -> list[Encoding]:
    """Encode several contexts in one batched, block-diagonal call."""
    cfg = params.config
    if context_ids is None:
        context_ids = list(range(len(contexts)))
    arrs = []
    for c in contexts:
        c = np.asarray(c)
        if len(c) != cfg.max_ctx_len:
            raise ModelError(f"context length {len(c)} != configured {cfg.max_ctx_len}")
        arrs.append(content(c))
    lens = [len(a) for a in arrs]
    out = [np.zeros((cfg.max_ctx_len, cfg.d_model), dtype=np.float32) for _ in arrs]
    live = [i for i, L in enumerate(lens) if L > 0]
    if live:
        ids, id_lens = _stack_ragged([arrs[i] for i in live])
        # encodings are produced in float64 and rounded once to float32 so
        # batched and per-context encodes agree far inside the 1e-6 contract
        h = _encode_f64(params, ids, id_lens)
        for row, i in enumerate(live):
            out[i][: lens[i]] = h[row, : lens[i]].cpu().numpy().astype(np.float32)
    return [Encoding(h=out[i], content_len=lens[i], context_id=int(context_ids[i]))
            for i in range(len(arrs))]


def encode_context(params: ModelParams, c: np.ndarray, context_id: int = -1) -> Encoding:
    """Encode one context of exactly w tokens; PAD rows come back as zeros."""
    return encode_contexts(params, [c], [context_id])[0]


# --------------------------------------------------------------------------
# Decoding
# --------------------------------------------------------------------------

def _concat_memory(encodings: Sequence[Encoding],
                   dtype: torch.dtype) -> torch.Tensor | None:
    """Row-wise concat of content rows, in ascending context-id order."""
    ordered = sorted(encodings, key=lambda e: e.context_id)
    rows = [e.h[: e.content_len] for e in ordered if e.content_len > 0]
    if not rows:
        return None
    mem = np.concatenate(rows, axis=0)
    return torch.from_numpy(np.ascontiguousarray(mem)).to(dtype).unsqueeze(0)


def _internal_rows(params: ModelParams, x: np.ndarray, y_prefix: np.ndarray,
                   encodings: Sequence[Encoding]) -> tuple[torch.Tensor, int]:
    """Run [BOS] + content(x) + content(y_prefix); return (rows, len(content(x)))."""
    cfg = params.config
    if len(encodings) > cfg.k_contexts:
        raise ModelError(f"{len(encodings)} contexts exceed k_contexts={cfg.k_contexts}")
    xc = content(np.asarray(x))
    yc = content(np.asarray(y_prefix))
    z = np.concatenate([[BOS_ID], xc, yc]).astype(np.int64)
    dtype = next(params.module.parameters()).dtype
    mem = _concat_memory(encodings, dtype)
    mem_valid = None
    if mem is not None:
        mem_valid = torch.ones((1, mem.shape[1]), dtype=torch.bool)
    ids = torch.from_numpy(z).unsqueeze(0)
    with torch.no_grad():
        logits = params.module.decode_batch(ids, torch.tensor([len(z)]), mem, mem_valid)
    return logits[0], len(xc)


def decode_logits(params: ModelParams, x: np.ndarray, y_prefix: np.ndarray,
                  encodings: Sequence[Encoding]) -> np.ndarray:
    """(|x| + |y_prefix|, vocab) logits; row t predicts the token after position t."""
    rows, _ = _internal_rows(params, x, y_prefix, encodings)
    seq = np.concatenate([np.asarray(x), np.asarray(y_prefix)]).astype(np.int64)
    consumed = np.cumsum(seq != PAD_ID)
    out = rows[torch.from_numpy(consumed)] if len(seq) else rows[:0]
    return out.cpu().numpy().astype(np.float32)


def greedy_decode(params: ModelParams, x: np.ndarray, encodings: Sequence[Encoding],
                  max_len: int) -> np.ndarray:
    """Argmax decoding (ties to the lower id), stopping at EOS or max_len.

    Re-runs the full forward pass per step; there is no incremental cache.
    """
    if max_len < 1:
        raise ModelError("max_len must be >= 1")
    out: list[int] = []
    for _ in range(max_len):
        rows, _ = _internal_rows(params, x, np.array(out, dtype=np.int64), encodings)
        nxt = int(np.argmax(rows[-1].cpu().numpy()))  # np.argmax takes the first max
        if nxt == EOS_ID:
            break
        out.append(nxt)
    return np.array(out, dtype=np.int64)


# --------------------------------------------------------------------------
# Loss and gradients
# --------------------------------------------------------------------------

BatchItem = tuple[np.ndarray, np.ndarray, Sequence[np.ndarray]]  # (x, y, contexts)


def _batch_loss_tensor(module: EncDecLM, batch: Sequence[BatchItem]) -> tuple[torch.Tensor, int]:
    """Mean NLL over all non-PAD target tokens in the batch, with live graph."""
    cfg = module.config
    if len(batch) == 0:
        raise ModelError("empty batch")
    xs, ys, ctxs = [], [], []
    for x, y, contexts in batch:
        if len(contexts) > cfg.k_contexts:
            raise ModelError(f"{len(contexts)} contexts exceed k_contexts={cfg.k_contexts}")
        xs.append(content(np.asarray(x)))
        ys.append(content(np.asarray(y)))
        ctxs.append([content(np.asarray(c)) for c in contexts])
    n_targets = sum(len(y) for y in ys)
    if n_targets == 0:
        raise ModelError("batch has zero non-PAD target tokens")

    # encode each distinct context once, in one block-diagonal pass
    uniq: dict[bytes, int] = {}
    flat: list[np.ndarray] = []
    refs: list[list[int]] = []
    for cs in ctxs:
        ref = []
        for c in cs:
            if len(c) == 0:
                continue
            key = c.tobytes()
            if key not in uniq:
                uniq[key] = len(flat)
                flat.append(c)
            ref.append(uniq[key])
        refs.append(ref)
    mem = mem_valid = None
    if flat:
        cids, clens = _stack_ragged(flat)
        enc = module.encode_batch(cids, clens)
        mem_lens = [sum(len(flat[r]) for r in ref) for ref in refs]
        mmax = max(max(mem_lens), 1)
        per_example = []
        mem_valid = torch.zeros((len(batch), mmax), dtype=torch.bool)
        for i, ref in enumerate(refs):
            rows = [enc[r, : len(flat[r])] for r in ref]
            stacked = torch.cat(rows, dim=0) if rows else enc.new_zeros((0, cfg.d_model))
            pad = enc.new_zeros((mmax - stacked.shape[0], cfg.d_model))
            per_example.append(torch.cat([stacked, pad], dim=0))
            mem_valid[i, : stacked.shape[0]] = True
        mem = torch.stack(per_example, dim=0)

    zs = [np.concatenate([[BOS_ID], x, y]).astype(np.int64) for x, y in zip(xs, ys)]
    ids, lens = _stack_ragged(zs)
    logits = module.decode_batch(ids, lens, mem, mem_valid)
    logp = torch.log_softmax(logits, dim=-1)

    total = logits.new_zeros(())
    for i, (x, y) in enumerate(zip(xs, ys)):
        if len(y) == 0:
            continue
        rows = torch.arange(len(x), len(x) + len(y))  # row before each target token
        targets = torch.from_numpy(np.ascontiguousarray(y))
        total = total - logp[i, rows, targets].sum()
    return total / n_targets, n_targets


def lm_loss(params: ModelParams, batch: Sequence[BatchItem]) -> float:
    """Mean natural-log NLL over non-PAD target tokens; inputs carry no loss."""
    with torch.no_grad():
        loss, _ = _batch_loss_tensor(params.module, batch)
    return float(loss.item())


def grad(params: ModelParams, batch: Sequence[BatchItem]) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of lm_loss for every parameter (zeros if unused)."""
    module = params.module
    module.zero_grad(set_to_none=True)
    loss, _ = _batch_loss_tensor(module, batch)
    loss.backward()
    out = {}
    for name, p in module.named_parameters():
        if p.grad is None:
            out[name] = np.zeros(p.shape, dtype=p.detach().cpu().numpy().dtype)
        else:
            out[name] = p.grad.detach().cpu().numpy().copy()
    module.zero_grad(set_to_none=True)
    return out


def per_token_logprobs(params: ModelParams, x: np.ndarray, y: np.ndarray,
                       encodings: Sequence[Encoding]) -> np.ndarray:
    """log P(y_j | y_<j, x, encodings) for each non-PAD target token."""
    yc = content(np.asarray(y))
    if len(yc) == 0:
        return np.zeros(0, dtype=np.float64)
    rows, lx = _internal_rows(params, x, yc, encodings)
    logp = torch.log_softmax(rows, dim=-1)
    idx = torch.arange(lx, lx + len(yc))
    vals = logp[idx, torch.from_numpy(np.ascontiguousarray(yc))]
    return vals.cpu().numpy().astype(np.float64)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """Common header + JSON manifest of (name, shape, offset) + float32 blob."""
    save_tensor_file(path, {"config": asdict(params.config)}, params.named_arrays())


def load_checkpoint(path: str | Path) -> ModelParams:
    meta, arrays = load_tensor_file(path)
    config = ModelConfig(**meta["config"])
    params = ModelParams(config, EncDecLM(config))
    params.module.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return params
