"""Shared orchestration for the CLI and the search service.

The service and the CLI `search --json` path must produce byte-identical
output, so both go through the same engine and the same JSON renderer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Corpus, parse_corpus
from .encoder import (
    AttentionAggregator,
    TextEncoder,
    Vocab,
    encode_query,
    encode_trial,
    load_checkpoint,
    load_vocab,
)
from .evaluation import Ranker
from .retrieval import (
    DenseIndex,
    SearchHit,
    build_index,
    fit_sparse,
    load_index,
    search,
    sparse_scores,
)

QUERY_FIELDS = ("title", "intervention", "disease", "outcome", "keywords", "context")


class AppError(ValueError):
    """Bad request or missing input at the application layer."""


@dataclass
class SearchEngine:
    index: DenseIndex
    encoder: TextEncoder
    aggregator: AttentionAggregator
    vocab: Vocab
    corpus: Corpus

    @classmethod
    def load(cls, index_path: str | Path, checkpoint_path: str | Path,
             vocab_path: str | Path, corpus_path: str | Path) -> "SearchEngine":
        encoder, aggregator, _ = load_checkpoint(checkpoint_path)
        return cls(
            index=load_index(index_path),
            encoder=encoder,
            aggregator=aggregator,
            vocab=load_vocab(vocab_path),
            corpus=parse_corpus(corpus_path),
        )

    def query_vector(self, trial_id: str | None,
                     attrs: dict[str, str]) -> tuple[np.ndarray, str | None]:
        """(vector, exclude-id) for either a complete or a partial query."""
        if trial_id is not None:
            if attrs:
                raise AppError("give either an id or attribute fields, not both")
            try:
                return self.index.row(trial_id), trial_id
            except KeyError as exc:
                raise AppError(str(exc)) from exc
        cleaned = {k: v for k, v in attrs.items() if v and v.strip()}
        if not cleaned:
            raise AppError("query needs an id or at least one attribute")
        return encode_query(cleaned, self.encoder, self.aggregator, self.vocab), None

    def run(self, trial_id: str | None, attrs: dict[str, str], k: int) -> list[dict]:
        vector, exclude = self.query_vector(trial_id, attrs)
        hits = search(self.index, vector, k, exclude=exclude)
        return self.describe(hits)

    def describe(self, hits: list[SearchHit]) -> list[dict]:
        rows = []
        for doc_id, score in hits:
            title = self.corpus.get(doc_id).title if doc_id in self.corpus else ""
            rows.append({"id": doc_id, "title": title, "score": score})
        return rows


def render_results_json(rows: list[dict]) -> bytes:
    """Canonical JSON bytes shared by the service and `search --json`."""
    return json.dumps({"results": rows}, ensure_ascii=False,
                      separators=(",", ":")).encode("utf-8")


def render_results_table(rows: list[dict]) -> str:
    if not rows:
        return "no results"
    width = max(len(r["id"]) for r in rows)
    lines = [f"{'id':<{width}}  {'score':>9}  title"]
    for row in rows:
        lines.append(f"{row['id']:<{width}}  {row['score']:>9.5f}  {row['title']}")
    return "\n".join(lines)


def export_embeddings(index: DenseIndex, corpus: Corpus, path: str | Path) -> None:
    """TSV export: id, disease, then the indexed vector, one row per trial.

    Floats are written with nine significant digits, enough to round-trip the
    stored 32-bit values; re-exporting an unchanged index is byte-identical.
    """
    dim = index.dim
    with Path(path).open("w", encoding="utf-8", newline="\n") as handle:
        handle.write("id\tdisease\t" + "\t".join(f"v{i}" for i in range(dim)) + "\n")
        for doc_id, vector in zip(index.ids, index.vectors):
            disease = corpus.get(doc_id).disease if doc_id in corpus else ""
            values = "\t".join("%.9g" % float(x) for x in vector)
            handle.write(f"{doc_id}\t{disease}\t{values}\n")


def index_corpus(corpus: Corpus, encoder: TextEncoder,
                 aggregator: AttentionAggregator, vocab: Vocab) -> DenseIndex:
    """Encode every trial and build the dense index."""
    bundles = {t.id: encode_trial(t, encoder, aggregator, vocab) for t in corpus}
    return build_index(bundles)


def make_ranker(name: str, corpus: Corpus, index: DenseIndex | None = None) -> Ranker:
    """Pool re-rankers for evaluation: dense cosine or a sparse baseline.

    Ranking is by descending score with ascending-id tie-breaks, matching
    the search path.
    """
    if name == "dense":
        if index is None:
            raise AppError("the dense ranker needs a built index")

        def dense_ranker(query_id: str, candidates: list[str]) -> list[str]:
            query = index.row(query_id)
            scored = [(-float(index.row(c) @ query), c) for c in candidates]
            return [c for _, c in sorted(scored)]

        return dense_ranker
    if name in ("tfidf", "bm25"):
        model = fit_sparse(corpus, name)
        positions = {doc_id: i for i, doc_id in enumerate(model.ids)}

        def sparse_ranker(query_id: str, candidates: list[str]) -> list[str]:
            scores = sparse_scores(model, corpus.get(query_id).document_text())
            scored = [(-float(scores[positions[c]]), c) for c in candidates]
            return [c for _, c in sorted(scored)]

        return sparse_ranker
    raise AppError(f"unknown ranker {name!r} (expected dense, tfidf, or bm25)")
