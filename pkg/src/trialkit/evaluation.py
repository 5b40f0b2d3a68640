"""Ranking metrics over labeled candidate pools, with bootstrap intervals.

Evaluation follows the pooled protocol: each query comes with a fixed
candidate list and binary relevance labels, and a ranker is only asked to
re-order that pool. Aggregate numbers are means over queries with percentile
bootstrap 95% confidence intervals (queries resampled with replacement).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np


class EvalError(ValueError):
    """Invalid judgments or metric input."""


# ranker(query_id, candidate_ids) -> candidate_ids re-ranked
Ranker = Callable[[str, list[str]], list[str]]


def precision_at_k(ranked_labels: list[int], k: int) -> float:
    """Relevant fraction of the top k; the denominator is always k."""
    if k < 1:
        raise EvalError("k must be >= 1")
    if not ranked_labels:
        raise EvalError("empty ranking")
    return sum(ranked_labels[:k]) / k


def recall_at_k(ranked_labels: list[int], k: int, total_relevant: int) -> float:
    """Relevant found in the top k over all relevant in the pool."""
    if k < 1:
        raise EvalError("k must be >= 1")
    if total_relevant < 1:
        raise EvalError("recall undefined without relevant candidates")
    return sum(ranked_labels[:k]) / total_relevant


def ndcg_at_k(ranked_labels: list[int], k: int) -> float:
    """Binary-gain nDCG with log2(rank+1) discount, ideal over the full pool."""
    if k < 1:
        raise EvalError("k must be >= 1")
    if sum(ranked_labels) < 1:
        raise EvalError("nDCG undefined without relevant candidates")
    dcg = sum(rel / math.log2(i + 2) for i, rel in enumerate(ranked_labels[:k]))
    ideal = sorted(ranked_labels, reverse=True)
    idcg = sum(rel / math.log2(i + 2) for i, rel in enumerate(ideal[:k]))
    return dcg / idcg


# ---------------------------------------------------------------------------
# Judgments
# ---------------------------------------------------------------------------

@dataclass
class RelevanceJudgments:
    """Per query: ordered candidate ids with binary labels."""

    pools: dict[str, list[tuple[str, int]]] = field(default_factory=dict)

    def add(self, query_id: str, candidates: list[tuple[str, int]]) -> None:
        if query_id in self.pools:
            raise EvalError(f"duplicate judgments for query {query_id!r}")
        seen = set()
        for cand_id, label in candidates:
            if label not in (0, 1):
                raise EvalError(f"query {query_id!r}: label {label!r} not in {{0,1}}")
            if cand_id in seen:
                raise EvalError(f"query {query_id!r}: duplicate candidate {cand_id!r}")
            seen.add(cand_id)
        self.pools[query_id] = list(candidates)

    def __len__(self) -> int:
        return len(self.pools)


def load_judgments(path: str | Path) -> RelevanceJudgments:
    path = Path(path)
    judgments = RelevanceJudgments()
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                candidates = [(c["id"], int(c["label"])) for c in record["candidates"]]
                judgments.add(record["query"], candidates)
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise EvalError(f"{path}:{lineno}: malformed judgments line ({exc})") from exc
    return judgments


def save_judgments(judgments: RelevanceJudgments, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for query_id, pool in judgments.pools.items():
            record = {"query": query_id,
                      "candidates": [{"id": c, "label": l} for c, l in pool]}
            handle.write(json.dumps(record, ensure_ascii=False))
            handle.write("\n")


# ---------------------------------------------------------------------------
# Runs and reports
# ---------------------------------------------------------------------------

@dataclass
class MetricSummary:
    mean: float
    ci_low: float
    ci_high: float
    n_queries: int
    per_query: dict[str, float]


@dataclass
class EvalReport:
    ranker_name: str
    ks: list[int]
    metrics: dict[str, MetricSummary]
    n_queries: int
    failed_queries: list[str]
    excluded_no_relevant: list[str]
    bootstrap_n: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "ranker": self.ranker_name,
            "ks": self.ks,
            "n_queries": self.n_queries,
            "failed_queries": self.failed_queries,
            "excluded_no_relevant": self.excluded_no_relevant,
            "bootstrap_n": self.bootstrap_n,
            "seed": self.seed,
            "metrics": {
                name: {
                    "mean": s.mean,
                    "ci95": [s.ci_low, s.ci_high],
                    "n_queries": s.n_queries,
                    "per_query": s.per_query,
                }
                for name, s in self.metrics.items()
            },
        }

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True),
                              encoding="utf-8")

    def format_table(self) -> str:
        lines = [f"ranker: {self.ranker_name}   queries: {self.n_queries} "
                 f"(failed: {len(self.failed_queries)}, "
                 f"no-relevant: {len(self.excluded_no_relevant)})"]
        lines.append(f"{'metric':<12} {'mean':>8} {'95% CI':>20} {'n':>5}")
        for name, s in self.metrics.items():
            ci = f"[{s.ci_low:.4f}, {s.ci_high:.4f}]"
            lines.append(f"{name:<12} {s.mean:>8.4f} {ci:>20} {s.n_queries:>5}")
        return "\n".join(lines)


def bootstrap_ci(values: list[float], n_resamples: int, seed: int,
                 level: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of per-query values."""
    if not values:
        raise EvalError("no values to bootstrap")
    if n_resamples < 1:
        raise EvalError("bootstrap_n must be >= 1")
    rng = np.random.default_rng(seed)
    data = np.asarray(values, dtype=np.float64)
    draws = rng.integers(0, len(data), size=(n_resamples, len(data)))
    means = data[draws].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    return (float(np.percentile(means, 100 * alpha)),
            float(np.percentile(means, 100 * (1 - alpha))))


def evaluate_run(ranker: Ranker, judgments: RelevanceJudgments,
                 ks: list[int] = (1, 2, 5), bootstrap_n: int = 1000,
                 seed: int = 0, ranker_name: str = "ranker") -> EvalReport:
    """Re-rank every judged pool and aggregate prec/rec/nDCG at each k.

    Queries whose ranker call fails (or returns something that is not a
    permutation of the pool) are recorded and excluded. Queries with no
    relevant candidate keep their precision but are excluded from recall
    and nDCG, with a warning.
    """
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise EvalError("ks must be positive")
    metric_names = ([f"prec@{k}" for k in ks] + [f"rec@{k}" for k in ks]
                    + [f"ndcg@{k}" for k in ks])
    per_query: dict[str, dict[str, float]] = {name: {} for name in metric_names}
    failed: list[str] = []
    no_relevant: list[str] = []

    for query_id, pool in judgments.pools.items():
        candidate_ids = [c for c, _ in pool]
        labels_by_id = dict(pool)
        try:
            ranked_ids = list(ranker(query_id, list(candidate_ids)))
        except Exception as exc:  # ranker failures are data, not crashes
            warnings.warn(f"ranker failed on query {query_id!r}: {exc}", stacklevel=2)
            failed.append(query_id)
            continue
        if sorted(ranked_ids) != sorted(candidate_ids):
            warnings.warn(f"ranker output for {query_id!r} is not a permutation "
                          "of the candidate pool", stacklevel=2)
            failed.append(query_id)
            continue
        ranked_labels = [labels_by_id[c] for c in ranked_ids]
        total_relevant = sum(ranked_labels)
        for k in ks:
            per_query[f"prec@{k}"][query_id] = precision_at_k(ranked_labels, k)
        if total_relevant == 0:
            warnings.warn(f"query {query_id!r} has no relevant candidate; excluded "
                          "from recall and nDCG", stacklevel=2)
            no_relevant.append(query_id)
            continue
        for k in ks:
            per_query[f"rec@{k}"][query_id] = recall_at_k(ranked_labels, k, total_relevant)
            per_query[f"ndcg@{k}"][query_id] = ndcg_at_k(ranked_labels, k)

    metrics: dict[str, MetricSummary] = {}
    for name, values_by_query in per_query.items():
        if not values_by_query:
            continue
        values = list(values_by_query.values())
        mean = float(np.mean(values))
        low, high = bootstrap_ci(values, bootstrap_n, seed)
        metrics[name] = MetricSummary(mean, low, high, len(values), dict(values_by_query))
    return EvalReport(
        ranker_name=ranker_name,
        ks=list(ks),
        metrics=metrics,
        n_queries=len(judgments),
        failed_queries=failed,
        excluded_no_relevant=no_relevant,
        bootstrap_n=bootstrap_n,
        seed=seed,
    )
