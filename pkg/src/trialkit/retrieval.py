"""Dense cosine index plus TF-IDF / BM25 baselines and candidate pools.

Search is an exact matrix scan: corpora at desk scale need no approximate
structure. Ties always break by ascending document id so rankings are
reproducible. The dense index file reserves a metadata slot for a future
ANN layout.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binio
from .corpus import Corpus, Trial
from .encoder import EmbeddingBundle
from .text import tokenize

INDEX_MAGIC = b"TKIX"
INDEX_VERSION = 1
SPARSE_MAGIC = b"TKSP"
SPARSE_VERSION = 1

SearchHit = tuple[str, float]


class RetrievalError(ValueError):
    """Invalid retrieval input or state."""


@dataclass
class DenseIndex:
    ids: list[str]
    vectors: np.ndarray  # (N, D) float32, unit rows
    version: int = INDEX_VERSION
    ann_meta: str = ""  # reserved for a future ANN layout

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def position(self, doc_id: str) -> int:
        if not hasattr(self, "_pos"):
            self._pos = {d: i for i, d in enumerate(self.ids)}
        try:
            return self._pos[doc_id]
        except KeyError:
            raise KeyError(f"id {doc_id!r} not in index") from None

    def row(self, doc_id: str) -> np.ndarray:
        return self.vectors[self.position(doc_id)]


def build_index(bundles: dict[str, EmbeddingBundle]) -> DenseIndex:
    """L2-normalized global vectors in ascending-id order."""
    if not bundles:
        raise RetrievalError("no embeddings to index")
    ids = sorted(bundles)
    dims = {bundles[i].dim for i in ids}
    if len(dims) != 1:
        raise RetrievalError(f"mixed embedding dimensions {sorted(dims)}")
    rows = []
    for doc_id in ids:
        vec = np.asarray(bundles[doc_id].global_vec, dtype=np.float64)
        norm = np.linalg.norm(vec)
        if norm == 0.0 or not np.isfinite(norm):
            raise RetrievalError(f"zero or non-finite global vector for id {doc_id!r}")
        rows.append(vec / norm)
    return DenseIndex(ids, np.asarray(rows, dtype=np.float32))


def _ranked(ids: list[str], scores: np.ndarray, k: int) -> list[SearchHit]:
    """Top-k by descending score, ties by ascending id."""
    order = np.lexsort((np.asarray(ids), -scores))[:k]
    return [(ids[i], float(scores[i])) for i in order]


def search(index: DenseIndex, query: np.ndarray, k: int,
           exclude: str | None = None) -> list[SearchHit]:
    """Exact top-k cosine matches for a query vector."""
    if k < 1:
        raise RetrievalError("k must be >= 1")
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if query.shape[0] != index.dim:
        raise RetrievalError(f"query dim {query.shape[0]} != index dim {index.dim}")
    norm = np.linalg.norm(query)
    if norm == 0.0:
        raise RetrievalError("query vector is zero")
    scores = index.vectors.astype(np.float64) @ (query / norm)

    ids = index.ids
    if exclude is not None:
        keep = [i for i, doc_id in enumerate(ids) if doc_id != exclude]
        ids = [ids[i] for i in keep]
        scores = scores[keep]
    if k > len(ids):
        warnings.warn(f"k={k} exceeds index size {len(ids)}; returning all",
                      stacklevel=2)
        k = len(ids)
    return _ranked(ids, scores, k)


# ---------------------------------------------------------------------------
# Sparse baselines
# ---------------------------------------------------------------------------

def _smooth_idf(n_docs: int, df: int) -> float:
    return math.log((1.0 + n_docs) / (1.0 + df)) + 1.0


def _okapi_idf(n_docs: int, df: int) -> float:
    return math.log((n_docs - df + 0.5) / (df + 0.5) + 1.0)


@dataclass
class SparseModel:
    kind: str  # "tfidf" | "bm25"
    ids: list[str]
    df: dict[str, int]
    n_docs: int
    avgdl: float
    # tfidf: L2-normalized term weights; bm25: raw term frequencies
    doc_terms: list[dict[str, float]]
    doc_lens: list[int] = field(default_factory=list)
    k1: float = 1.5
    b: float = 0.75
    version: int = SPARSE_VERSION


def fit_sparse(corpus: Corpus, kind: str) -> SparseModel:
    """Fit a sparse ranker over full document texts (attributes + context)."""
    if kind not in ("tfidf", "bm25"):
        raise RetrievalError(f"unknown sparse model kind {kind!r}")
    if len(corpus) == 0:
        raise RetrievalError("cannot fit a sparse model on an empty corpus")
    docs = [(trial.id, tokenize(trial.document_text())) for trial in corpus]
    docs.sort(key=lambda pair: pair[0])
    ids = [doc_id for doc_id, _ in docs]
    df: Counter[str] = Counter()
    for _, tokens in docs:
        df.update(set(tokens))
    n_docs = len(docs)
    doc_lens = [len(tokens) for _, tokens in docs]
    avgdl = sum(doc_lens) / n_docs if any(doc_lens) else 1.0

    doc_terms: list[dict[str, float]] = []
    for _, tokens in docs:
        tf = Counter(tokens)
        if kind == "bm25":
            doc_terms.append({t: float(c) for t, c in tf.items()})
        else:
            weights = {t: c * _smooth_idf(n_docs, df[t]) for t, c in tf.items()}
            norm = math.sqrt(sum(w * w for w in weights.values()))
            if norm > 0:
                weights = {t: w / norm for t, w in weights.items()}
            doc_terms.append(weights)
    return SparseModel(kind, ids, dict(df), n_docs, avgdl, doc_terms, doc_lens)


def sparse_scores(model: SparseModel, query_text: str) -> np.ndarray:
    """Scores for every fitted document, aligned with model.ids."""
    query_tokens = tokenize(query_text)
    if not query_tokens:
        raise RetrievalError("query has no word tokens")
    scores = np.zeros(model.n_docs)
    if model.kind == "tfidf":
        tf = Counter(query_tokens)
        weights = {t: c * _smooth_idf(model.n_docs, model.df.get(t, 0))
                   for t, c in tf.items()}
        norm = math.sqrt(sum(w * w for w in weights.values()))
        for i, doc in enumerate(model.doc_terms):
            dot = sum(w * doc.get(t, 0.0) for t, w in weights.items())
            scores[i] = dot / norm if norm > 0 else 0.0
    else:
        for i, doc in enumerate(model.doc_terms):
            dl = model.doc_lens[i]
            denom_norm = model.k1 * (1.0 - model.b + model.b * dl / model.avgdl)
            total = 0.0
            for t in set(query_tokens):
                tf_d = doc.get(t, 0.0)
                if tf_d == 0.0:
                    continue
                idf = _okapi_idf(model.n_docs, model.df[t])
                total += idf * tf_d * (model.k1 + 1.0) / (tf_d + denom_norm)
            scores[i] = total
    return scores


def sparse_search(model: SparseModel, query_text: str, k: int) -> list[SearchHit]:
    """Rank all documents against the query text; ties by ascending id."""
    if k < 1:
        raise RetrievalError("k must be >= 1")
    scores = sparse_scores(model, query_text)
    return _ranked(model.ids, scores, min(k, model.n_docs))


def candidate_pool(model: SparseModel, query: Trial, size: int = 10) -> list[str]:
    """TF-IDF top-`size` candidates for a query trial, excluding itself."""
    if model.kind != "tfidf":
        raise RetrievalError("candidate pools are built from a tfidf model")
    if query.id not in model.ids:
        raise RetrievalError(f"query trial {query.id!r} is not in the fitted corpus")
    if size < 1:
        raise RetrievalError("pool size must be >= 1")
    available = model.n_docs - 1
    if available < size:
        warnings.warn(f"corpus has only {available} other documents; "
                      f"pool truncated from {size}", stacklevel=2)
        size = available
    hits = sparse_search(model, query.document_text(), size + 1)
    return [doc_id for doc_id, _ in hits if doc_id != query.id][:size]


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_index(index: DenseIndex, path: str | Path) -> None:
    writer = binio.Writer()
    writer.raw(INDEX_MAGIC)
    writer.u32(INDEX_VERSION)
    writer.string(index.ann_meta)
    writer.u32(len(index.ids))
    writer.u32(index.dim)
    for doc_id in index.ids:
        writer.string(doc_id)
    writer.raw(np.ascontiguousarray(index.vectors, dtype="<f4").tobytes())
    binio.write_file(path, writer)


def load_index(path: str | Path) -> DenseIndex:
    reader = binio.read_file(path)
    reader.expect_magic(INDEX_MAGIC)
    reader.expect_version(INDEX_VERSION)
    ann_meta = reader.string()
    n, dim = reader.u32(), reader.u32()
    ids = [reader.string() for _ in range(n)]
    raw = reader.take(n * dim * 4)
    reader.expect_end()
    vectors = np.frombuffer(raw, dtype="<f4").reshape(n, dim).copy()
    return DenseIndex(ids, vectors, ann_meta=ann_meta)


def save_sparse(model: SparseModel, path: str | Path) -> None:
    writer = binio.Writer()
    writer.raw(SPARSE_MAGIC)
    writer.u32(SPARSE_VERSION)
    payload = {
        "kind": model.kind,
        "ids": model.ids,
        "df": model.df,
        "n_docs": model.n_docs,
        "avgdl": model.avgdl,
        "doc_terms": model.doc_terms,
        "doc_lens": model.doc_lens,
        "k1": model.k1,
        "b": model.b,
    }
    writer.string(json.dumps(payload, ensure_ascii=False, sort_keys=True))
    binio.write_file(path, writer)


def load_sparse(path: str | Path) -> SparseModel:
    reader = binio.read_file(path)
    reader.expect_magic(SPARSE_MAGIC)
    reader.expect_version(SPARSE_VERSION)
    try:
        payload = json.loads(reader.string())
    except json.JSONDecodeError as exc:
        raise reader.fail(f"bad model payload ({exc.msg})") from exc
    reader.expect_end()
    try:
        return SparseModel(
            kind=payload["kind"],
            ids=list(payload["ids"]),
            df={t: int(c) for t, c in payload["df"].items()},
            n_docs=int(payload["n_docs"]),
            avgdl=float(payload["avgdl"]),
            doc_terms=[{t: float(w) for t, w in doc.items()}
                       for doc in payload["doc_terms"]],
            doc_lens=[int(x) for x in payload["doc_lens"]],
            k1=float(payload["k1"]),
            b=float(payload["b"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise reader.fail(f"bad model payload ({exc})") from exc
