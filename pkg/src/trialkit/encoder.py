"""Compact trainable text encoder and attention aggregation.

The backbone is a small bidirectional transformer trained from scratch:
learned token + position embeddings, a few post-norm self-attention blocks,
and mean pooling over non-pad states. Local attribute vectors and the context
vector come from the same encoder; the trial-level vector is produced by a
multi-head cross-attention that uses the context vector as the query over the
attribute vectors.

Attention math is written out explicitly (no fused helpers) so the whole
forward pass stays inspectable and exactly differentiable for the gradient
checks in the training module.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import binio
from .corpus import Corpus, Trial, KEY_ATTRIBUTES
from .text import tokenize

PAD, UNK, MASK, CLS = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<unk>", "<mask>", "<cls>")

CHECKPOINT_MAGIC = b"TKCP"
CHECKPOINT_VERSION = 1


class EncoderError(ValueError):
    """Invalid encoder input or state."""


@dataclass
class Vocab:
    """Word-level vocabulary with reserved special ids."""

    token_to_id: dict[str, int]
    min_freq: int = 1

    def __post_init__(self) -> None:
        self._cache: dict[str, list[int]] = {}

    def __len__(self) -> int:
        return len(self.token_to_id) + len(SPECIAL_TOKENS)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def encode(self, text: str) -> list[int]:
        """Token ids for a text, without specials. Cached per distinct string."""
        ids = self._cache.get(text)
        if ids is None:
            ids = [self.id_of(t) for t in tokenize(text)]
            self._cache[text] = ids
        return ids

    def tokens(self) -> list[str]:
        """All tokens in id order, specials first."""
        ordered = sorted(self.token_to_id.items(), key=lambda kv: kv[1])
        return list(SPECIAL_TOKENS) + [t for t, _ in ordered]


def fit_vocab(corpus: Corpus, min_freq: int = 1) -> Vocab:
    """Deterministic vocabulary over the corpus's full document texts."""
    if len(corpus) == 0:
        raise EncoderError("cannot fit a vocabulary on an empty corpus")
    counts: Counter[str] = Counter()
    for trial in corpus:
        counts.update(tokenize(trial.document_text()))
    kept = sorted((t for t, c in counts.items() if c >= min_freq),
                  key=lambda t: (-counts[t], t))
    token_to_id = {t: i + len(SPECIAL_TOKENS) for i, t in enumerate(kept)}
    return Vocab(token_to_id, min_freq=min_freq)


def save_vocab(vocab: Vocab, path: str | Path) -> None:
    """Sidecar text file, one `token<TAB>id` line per token."""
    with Path(path).open("w", encoding="utf-8") as handle:
        for i, token in enumerate(vocab.tokens()):
            handle.write(f"{token}\t{i}\n")


def load_vocab(path: str | Path) -> Vocab:
    token_to_id: dict[str, int] = {}
    path = Path(path)
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                token, id_text = line.split("\t")
                token_id = int(id_text)
            except ValueError as exc:
                raise EncoderError(f"{path}:{lineno}: malformed vocab line") from exc
            if token_id < len(SPECIAL_TOKENS):
                if SPECIAL_TOKENS[token_id] != token:
                    raise EncoderError(f"{path}:{lineno}: id {token_id} must be "
                                       f"{SPECIAL_TOKENS[token_id]!r}")
                continue
            token_to_id[token] = token_id
    ids = sorted(token_to_id.values())
    if ids != list(range(len(SPECIAL_TOKENS), len(SPECIAL_TOKENS) + len(ids))):
        raise EncoderError(f"{path}: token ids are not dense from {len(SPECIAL_TOKENS)}")
    return Vocab(token_to_id)


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    dim: int = 128
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 256
    ffn_mult: int = 4
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.dim % self.n_heads != 0:
            raise EncoderError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        if self.vocab_size <= len(SPECIAL_TOKENS):
            raise EncoderError("vocab_size must exceed the number of special tokens")
        if self.dtype not in ("float32", "float64"):
            raise EncoderError(f"unsupported dtype {self.dtype!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


class SelfAttentionBlock(nn.Module):
    """Post-norm transformer block: self-attention then feed-forward."""

    def __init__(self, dim: int, n_heads: int, ffn_mult: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.w_q = nn.Linear(dim, dim)
        self.w_k = nn.Linear(dim, dim)
        self.w_v = nn.Linear(dim, dim)
        self.w_o = nn.Linear(dim, dim)
        self.norm_attn = nn.LayerNorm(dim)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn_in = nn.Linear(dim, ffn_mult * dim)
        self.ffn_out = nn.Linear(ffn_mult * dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        # x: (B, L, D); mask: (B, L) bool, True on real tokens
        b, length, dim = x.shape
        h = self.n_heads

        def split(t: torch.Tensor) -> torch.Tensor:
            return t.view(b, length, h, self.head_dim).transpose(1, 2)

        q, k, v = split(self.w_q(x)), split(self.w_k(x)), split(self.w_v(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)  # (B, H, L, L)
        neg_inf = torch.finfo(x.dtype).min
        scores = scores.masked_fill(~mask[:, None, None, :], neg_inf)
        attn = torch.softmax(scores, dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(b, length, dim)
        x = self.norm_attn(x + self.w_o(mixed))
        x = self.norm_ffn(x + self.ffn_out(torch.nn.functional.gelu(self.ffn_in(x))))
        return x


class TextEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.dim)
        self.pos_emb = nn.Embedding(config.max_len, config.dim)
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(config.dim, config.n_heads, config.ffn_mult)
            for _ in range(config.n_layers))

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Contextual token states. ids: (B, L) long; mask: (B, L) bool."""
        self._check_finite()
        if ids.shape[1] > self.config.max_len:
            raise EncoderError(f"sequence length {ids.shape[1]} exceeds "
                               f"max_len {self.config.max_len}")
        positions = torch.arange(ids.shape[1], device=ids.device)
        x = self.tok_emb(ids) + self.pos_emb(positions)[None, :, :]
        for block in self.blocks:
            x = block(x, mask)
        return x

    @staticmethod
    def pool(hidden: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Mean of non-pad token states. hidden: (B, L, D) -> (B, D)."""
        weights = mask.to(hidden.dtype)
        denom = weights.sum(dim=1, keepdim=True).clamp(min=1.0)
        return (hidden * weights[:, :, None]).sum(dim=1) / denom

    def _check_finite(self) -> None:
        for name, param in self.named_parameters():
            if not torch.isfinite(param).all():
                raise EncoderError(f"non-finite encoder parameter {name!r}")


class AttentionAggregator(nn.Module):
    """Multi-head cross-attention: context query over attribute vectors."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads != 0:
            raise EncoderError(f"dim {dim} not divisible by n_heads {n_heads}")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.w_o = nn.Linear(dim, dim, bias=False)

    def forward(self, query: torch.Tensor, locals_: torch.Tensor,
                mask: torch.Tensor | None = None) -> torch.Tensor:
        """query: (B, D); locals_: (B, L, D); mask: (B, L) bool or None."""
        if query.shape[-1] != self.dim or locals_.shape[-1] != self.dim:
            raise EncoderError(
                f"dimension mismatch: aggregator dim {self.dim}, "
                f"query {tuple(query.shape)}, locals {tuple(locals_.shape)}")
        b, length, _ = locals_.shape
        h = self.n_heads
        q = self.w_q(query).view(b, h, 1, self.head_dim)
        k = self.w_k(locals_).view(b, length, h, self.head_dim).transpose(1, 2)
        v = self.w_v(locals_).view(b, length, h, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)  # (B, H, 1, L)
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None, None, :],
                                        torch.finfo(scores.dtype).min)
        attn = torch.softmax(scores, dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(b, self.dim)
        return self.w_o(mixed)

    def attention_weights(self, query: torch.Tensor, locals_: torch.Tensor) -> torch.Tensor:
        """Per-head softmax weights, shape (B, H, L). Diagnostic only."""
        b, length, _ = locals_.shape
        q = self.w_q(query).view(b, self.n_heads, 1, self.head_dim)
        k = self.w_k(locals_).view(b, length, self.n_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        return torch.softmax(scores, dim=-1).squeeze(2)


def build_model(config: EncoderConfig, seed: int = 0) -> tuple[TextEncoder, AttentionAggregator]:
    """Construct encoder + aggregator with a deterministic seeded init."""
    encoder = TextEncoder(config)
    aggregator = AttentionAggregator(config.dim, config.n_heads)
    generator = torch.Generator().manual_seed(seed)
    for module in (encoder, aggregator):
        for name, param in module.named_parameters():
            if param.dim() >= 2:
                with torch.no_grad():
                    param.normal_(0.0, 0.02, generator=generator)
            elif "norm" in name and name.endswith("weight"):
                nn.init.ones_(param)
            else:
                nn.init.zeros_(param)
        module.to(config.torch_dtype)
    return encoder, aggregator


# ---------------------------------------------------------------------------
# Batched encoding (tensors in, tensors out; keeps autograd intact)
# ---------------------------------------------------------------------------

def texts_to_ids(texts: list[str], vocab: Vocab, max_len: int) -> list[list[int]]:
    """CLS-prefixed, truncated id sequences; empty texts give empty lists."""
    out = []
    for text in texts:
        ids = vocab.encode(text)
        out.append([CLS] + ids[: max_len - 1] if ids else [])
    return out


def encode_id_batch(encoder: TextEncoder, ids_list: list[list[int]]) -> torch.Tensor:
    """Mean-pooled vectors for a ragged batch; empty sequences map to zeros.

    Duplicate sequences are encoded once and shared: contrastive batches
    repeat most of their texts (positives and hard negatives reuse anchor
    fields), and the pooled vector is a pure function of the sequence.
    """
    dtype = encoder.tok_emb.weight.dtype
    dim = encoder.config.dim
    out = torch.zeros(len(ids_list), dim, dtype=dtype)

    unique: dict[tuple[int, ...], int] = {}
    owners: list[list[int]] = []
    for i, ids in enumerate(ids_list):
        if not ids:
            continue
        key = tuple(ids)
        row = unique.get(key)
        if row is None:
            unique[key] = len(owners)
            owners.append([i])
        else:
            owners[row].append(i)
    if not unique:
        return out

    width = max(len(seq) for seq in unique)
    ids = torch.full((len(unique), width), PAD, dtype=torch.long)
    mask = torch.zeros(len(unique), width, dtype=torch.bool)
    for row, seq in enumerate(unique):
        ids[row, :len(seq)] = torch.tensor(seq, dtype=torch.long)
        mask[row, :len(seq)] = True
    pooled = TextEncoder.pool(encoder(ids, mask), mask)

    targets = [i for owner_rows in owners for i in owner_rows]
    sources = [row for row, owner_rows in enumerate(owners) for _ in owner_rows]
    return out.index_copy(0, torch.tensor(targets, dtype=torch.long),
                          pooled[sources])


def encode_text_batch(texts: list[str], encoder: TextEncoder, vocab: Vocab) -> torch.Tensor:
    return encode_id_batch(encoder, texts_to_ids(texts, vocab, encoder.config.max_len))


def aggregate_batch(aggregator: AttentionAggregator, queries: torch.Tensor,
                    locals_list: list[torch.Tensor]) -> torch.Tensor:
    """Aggregate ragged per-document local stacks. queries: (B, D)."""
    if any(t.shape[0] == 0 for t in locals_list):
        raise EncoderError("every document needs at least one local vector")
    width = max(t.shape[0] for t in locals_list)
    b = len(locals_list)
    dtype = queries.dtype
    mask = torch.zeros(b, width, dtype=torch.bool)
    padded = []
    for i, t in enumerate(locals_list):
        mask[i, :t.shape[0]] = True
        if t.shape[0] < width:
            t = torch.cat([t, torch.zeros(width - t.shape[0], t.shape[1], dtype=dtype)])
        padded.append(t)
    return aggregator(queries, torch.stack(padded), mask)


# ---------------------------------------------------------------------------
# Single-document inference API (numpy in/out, no gradients)
#
# Inference encodes one text at a time rather than padding texts together:
# the local vector of an attribute must stay bit-identical when some other
# attribute of the same document changes, which batching cannot guarantee.
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingBundle:
    """Per-document vectors: one per key attribute, the context, the global."""

    locals: dict[str, np.ndarray]
    context: np.ndarray
    global_vec: np.ndarray = field(repr=False)
    context_empty: bool = False

    @property
    def dim(self) -> int:
        return int(self.global_vec.shape[0])


def _pooled_single(text: str, encoder: TextEncoder, vocab: Vocab) -> torch.Tensor:
    """(D,) mean-pooled vector of one text; blank text gives zeros."""
    dtype = encoder.tok_emb.weight.dtype
    ids = vocab.encode(text)
    if not ids:
        return torch.zeros(encoder.config.dim, dtype=dtype)
    seq = [CLS] + ids[: encoder.config.max_len - 1]
    ids_t = torch.tensor([seq], dtype=torch.long)
    mask = torch.ones(1, len(seq), dtype=torch.bool)
    return TextEncoder.pool(encoder(ids_t, mask), mask)[0]


def encode_text(text: str, encoder: TextEncoder, vocab: Vocab) -> np.ndarray:
    """Single-text vector; blank text yields the zero vector."""
    with torch.no_grad():
        return _pooled_single(text, encoder, vocab).numpy().copy()


def aggregate(ctx: np.ndarray, locals_: list[np.ndarray],
              aggregator: AttentionAggregator) -> np.ndarray:
    """Trial-level vector from a context query and local attribute vectors."""
    if not locals_:
        raise EncoderError("aggregate needs at least one local vector")
    dims = {v.shape[-1] for v in locals_} | {ctx.shape[-1]}
    if dims != {aggregator.dim}:
        raise EncoderError(f"dimension mismatch: got {sorted(dims)}, "
                           f"aggregator dim {aggregator.dim}")
    dtype = aggregator.w_q.weight.dtype
    with torch.no_grad():
        query = torch.as_tensor(np.asarray(ctx), dtype=dtype)[None, :]
        stack = torch.as_tensor(np.stack(locals_), dtype=dtype)[None, :, :]
        return aggregator(query, stack)[0].numpy().copy()


def _encode_partial(key_attrs: dict[str, str], context: str, encoder: TextEncoder,
                    aggregator: AttentionAggregator, vocab: Vocab,
                    ) -> tuple[dict[str, torch.Tensor], torch.Tensor, torch.Tensor, bool]:
    """Shared pipeline behind encode_trial and encode_query."""
    locals_t = {n: _pooled_single(t, encoder, vocab) for n, t in key_attrs.items()}
    ctx_vec = _pooled_single(context, encoder, vocab)
    context_empty = not vocab.encode(context)
    stack = torch.stack(list(locals_t.values()))
    query = stack.mean(dim=0) if context_empty else ctx_vec
    global_vec = aggregator(query[None, :], stack[None, :, :])[0]
    return locals_t, ctx_vec, global_vec, context_empty


def encode_trial(trial: Trial, encoder: TextEncoder,
                 aggregator: AttentionAggregator, vocab: Vocab) -> EmbeddingBundle:
    """Bundle of local, context, and attention-aggregated global vectors.

    Each non-empty key attribute is encoded independently; the context vector
    serves as the aggregation query, replaced by the mean of the locals when
    the context is empty.
    """
    attrs = trial.key_attributes()
    if not attrs:
        raise EncoderError(f"trial {trial.id!r}: no non-empty key attribute")
    with torch.no_grad():
        locals_t, ctx_vec, global_vec, context_empty = _encode_partial(
            attrs, trial.context, encoder, aggregator, vocab)
    return EmbeddingBundle(
        {n: v.numpy().copy() for n, v in locals_t.items()},
        ctx_vec.numpy().copy(), global_vec.numpy().copy(), context_empty)


def encode_query(attrs: dict[str, str], encoder: TextEncoder,
                 aggregator: AttentionAggregator, vocab: Vocab) -> np.ndarray:
    """Trial-level vector for a partial attribute map.

    `attrs` may carry any subset of the key attributes plus an optional
    "context" entry; supplying every field reproduces encode_trial's global
    vector exactly. A context-only query falls back to the raw context vector.
    """
    unknown = set(attrs) - set(KEY_ATTRIBUTES) - {"context"}
    if unknown:
        raise EncoderError(f"unknown query attributes {sorted(unknown)}")
    key_attrs = {n: attrs[n] for n in KEY_ATTRIBUTES if attrs.get(n, "").strip()}
    context = attrs.get("context", "")
    if not key_attrs and not context.strip():
        raise EncoderError("query needs at least one non-empty attribute")
    with torch.no_grad():
        if not key_attrs:
            return _pooled_single(context, encoder, vocab).numpy().copy()
        _, _, global_vec, _ = _encode_partial(
            key_attrs, context, encoder, aggregator, vocab)
        return global_vec.numpy().copy()


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity in [-1, 1]; zero vectors are rejected."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise EncoderError("cosine undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, encoder: TextEncoder,
                    aggregator: AttentionAggregator,
                    head: "nn.Module | None" = None) -> None:
    """Versioned binary: magic, config JSON, named row-major float32 tensors."""
    writer = binio.Writer()
    writer.raw(CHECKPOINT_MAGIC)
    writer.u32(CHECKPOINT_VERSION)
    config = dict(asdict(encoder.config))
    config["has_head"] = head is not None
    writer.string(json.dumps(config, sort_keys=True))

    tensors: list[tuple[str, torch.Tensor]] = []
    tensors += [(f"enc.{n}", t) for n, t in encoder.state_dict().items()]
    tensors += [(f"agg.{n}", t) for n, t in aggregator.state_dict().items()]
    if head is not None:
        tensors += [(f"head.{n}", t) for n, t in head.state_dict().items()]
    writer.u32(len(tensors))
    for name, tensor in tensors:
        writer.string(name)
        shape = list(tensor.shape)
        writer.u32(len(shape))
        for size in shape:
            writer.u32(size)
        data = tensor.detach().to(torch.float32).numpy()
        writer.raw(np.ascontiguousarray(data).tobytes())
    binio.write_file(path, writer)


def load_checkpoint(path: str | Path) -> tuple[TextEncoder, AttentionAggregator,
                                               "nn.Module | None"]:
    """Rebuild modules from a checkpoint file. Weights load as float32."""
    reader = binio.read_file(path)
    reader.expect_magic(CHECKPOINT_MAGIC)
    reader.expect_version(CHECKPOINT_VERSION)
    try:
        config_dict = json.loads(reader.string())
    except json.JSONDecodeError as exc:
        raise reader.fail(f"bad config block ({exc.msg})") from exc
    has_head = bool(config_dict.pop("has_head", False))
    config_dict["dtype"] = "float32"  # tensors are stored as float32
    config = EncoderConfig(**config_dict)

    state: dict[str, torch.Tensor] = {}
    n_tensors = reader.u32()
    for _ in range(n_tensors):
        name = reader.string()
        rank = reader.u32()
        shape = [reader.u32() for _ in range(rank)]
        count = int(np.prod(shape)) if shape else 1
        raw = reader.take(count * 4)
        array = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        state[name] = torch.from_numpy(array)
    reader.expect_end()

    encoder = TextEncoder(config)
    aggregator = AttentionAggregator(config.dim, config.n_heads)
    encoder.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("enc.")})
    aggregator.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("agg.")})
    head = None
    if has_head:
        head_state = {k[5:]: v for k, v in state.items() if k.startswith("head.")}
        head = nn.Linear(config.dim, 1)
        head.load_state_dict(head_state)
    return encoder, aggregator, head
