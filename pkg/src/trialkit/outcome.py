"""Binary completion/termination prediction on top of trial embeddings.

The predictor is a single fully-connected layer producing one logit. It
trains on frozen global vectors by default; an end-to-end mode that also
updates the encoder is available for fine-tuning experiments.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .corpus import Corpus, status_label
from .train import AdamW


class OutcomeError(ValueError):
    """Invalid outcome dataset or classifier input."""


@dataclass
class OutcomeExample:
    trial_id: str
    label: int  # completion=1, termination=0


@dataclass
class OutcomeDataset:
    examples: list[OutcomeExample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)

    def labels(self) -> list[int]:
        return [e.label for e in self.examples]

    def ids(self) -> list[str]:
        return [e.trial_id for e in self.examples]


def outcome_dataset(corpus: Corpus) -> OutcomeDataset:
    """Labeled examples from registry statuses; unlabeled trials are dropped."""
    examples = []
    for trial in corpus:
        bucket = status_label(trial)
        if bucket == "completion":
            examples.append(OutcomeExample(trial.id, 1))
        elif bucket == "termination":
            examples.append(OutcomeExample(trial.id, 0))
    return OutcomeDataset(examples)


@dataclass
class HeadConfig:
    learning_rate: float = 5e-2
    epochs: int = 200
    batch_size: int = 64
    weight_decay: float = 0.0
    seed: int = 0
    val_frac: float = 0.1
    patience: int = 20
    positive_weight: float | None = None  # optional imbalance reweighting


@dataclass
class ClassifierHead:
    """Single fully-connected layer: weight vector and bias producing a logit."""

    linear: nn.Linear

    @classmethod
    def create(cls, dim: int, seed: int = 0) -> "ClassifierHead":
        linear = nn.Linear(dim, 1)
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            linear.weight.normal_(0.0, 0.02, generator=generator)
            linear.bias.zero_()
        return cls(linear)

    @property
    def dim(self) -> int:
        return self.linear.in_features

    def logit(self, vector: np.ndarray) -> float:
        vec = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vec.shape[0] != self.dim:
            raise OutcomeError(f"vector dim {vec.shape[0]} != head dim {self.dim}")
        with torch.no_grad():
            x = torch.as_tensor(vec, dtype=self.linear.weight.dtype)
            return float(self.linear(x[None, :])[0, 0])


def classify(head: ClassifierHead, vector: np.ndarray,
             threshold: float = 0.5) -> tuple[float, int]:
    """(probability, label) for one embedding."""
    probability = 1.0 / (1.0 + np.exp(-head.logit(vector)))
    return float(probability), int(probability >= threshold)


@dataclass
class HeadHistory:
    epoch: int
    train_loss: float
    val_loss: float


def _bce_loss(head: ClassifierHead, x: torch.Tensor, y: torch.Tensor,
              positive_weight: float | None) -> torch.Tensor:
    logits = head.linear(x)[:, 0]
    weight = None
    if positive_weight is not None:
        weight = torch.where(y > 0.5, torch.full_like(y, positive_weight),
                             torch.ones_like(y))
    return nn.functional.binary_cross_entropy_with_logits(
        logits, y, weight=weight)


def train_head(embeddings: dict[str, np.ndarray], data: OutcomeDataset,
               cfg: HeadConfig, val_data: OutcomeDataset | None = None,
               ) -> tuple[ClassifierHead, list[HeadHistory]]:
    """Fit the head on frozen embeddings with early stopping on validation loss.

    A validation set can be supplied explicitly; otherwise cfg.val_frac of the
    data is held out deterministically.
    """
    if len(data) == 0:
        raise OutcomeError("empty outcome dataset")
    every_id = data.ids() + (val_data.ids() if val_data else [])
    missing = [i for i in every_id if i not in embeddings]
    if missing:
        raise OutcomeError(f"no embedding for ids {missing[:5]}"
                           + ("..." if len(missing) > 5 else ""))
    labels = set(data.labels())
    if labels != {0, 1}:
        raise OutcomeError(f"training set has a single class {sorted(labels)}")

    if val_data is not None:
        trn, val = list(data.examples), list(val_data.examples)
    else:
        examples = list(data.examples)
        random.Random(cfg.seed).shuffle(examples)
        n_val = max(1, int(len(examples) * cfg.val_frac)) if cfg.epochs > 0 else 0
        val, trn = examples[:n_val], examples[n_val:]
    if cfg.epochs > 0 and len({e.label for e in trn}) != 2:
        raise OutcomeError("train split has a single class; adjust val_frac or seed")
    if cfg.epochs > 0 and not val:
        raise OutcomeError("early stopping needs a non-empty validation set")

    dim = int(np.asarray(next(iter(embeddings.values()))).shape[-1])
    head = ClassifierHead.create(dim, seed=cfg.seed)

    def tensors(rows: list[OutcomeExample]) -> tuple[torch.Tensor, torch.Tensor]:
        x = np.stack([np.asarray(embeddings[e.trial_id], dtype=np.float32) for e in rows])
        y = np.asarray([e.label for e in rows], dtype=np.float32)
        return torch.from_numpy(x), torch.from_numpy(y)

    x_trn, y_trn = tensors(trn) if trn else (None, None)
    x_val, y_val = tensors(val) if val else (None, None)
    optimizer = AdamW(head.linear.named_parameters(), lr=cfg.learning_rate,
                      weight_decay=cfg.weight_decay)

    history: list[HeadHistory] = []
    best_val = float("inf")
    best_state = None
    stale = 0
    order_rng = random.Random(f"{cfg.seed}:head")
    for epoch in range(cfg.epochs):
        order = list(range(len(trn)))
        order_rng.shuffle(order)
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            loss = _bce_loss(head, x_trn[rows], y_trn[rows], cfg.positive_weight)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
        with torch.no_grad():
            val_loss = float(_bce_loss(head, x_val, y_val, cfg.positive_weight))
        history.append(HeadHistory(epoch, float(np.mean(epoch_losses)), val_loss))
        if val_loss < best_val - 1e-12:
            best_val = val_loss
            best_state = {k: v.clone() for k, v in head.linear.state_dict().items()}
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break
    if best_state is not None:
        head.linear.load_state_dict(best_state)
    return head, history


def predict(head: ClassifierHead, embeddings: dict[str, np.ndarray],
            ids: list[str], threshold: float = 0.5) -> list[tuple[str, float, int]]:
    """(id, probability, label) rows, in the given id order."""
    return [(i, *classify(head, embeddings[i], threshold)) for i in ids]


def write_predictions_csv(rows: list[tuple[str, float, int]], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        handle.write("id,probability,label\n")
        for trial_id, probability, label in rows:
            handle.write(f"{trial_id},{probability!r},{label}\n")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class OutcomeMetrics:
    acc: float
    roc_auc: float | None
    pr_auc: float | None


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks, ties sharing their average rank."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def roc_auc(scores: list[float], labels: list[int]) -> float:
    """Concordant-pair fraction via the rank statistic; ties count one half."""
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise OutcomeError("ROC-AUC needs both classes")
    ranks = _average_ranks(s)
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def average_precision(scores: list[float], labels: list[int]) -> float:
    """Mean precision at each relevant rank (uninterpolated PR-AUC).

    Ties are broken by original position, stably, so the value is
    deterministic for any input.
    """
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int((y == 1).sum())
    if n_pos == 0 or int((y == 0).sum()) == 0:
        raise OutcomeError("PR-AUC needs both classes")
    order = np.argsort(-s, kind="mergesort")
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, start=1):
        if y[idx] == 1:
            hits += 1
            total += hits / rank
    return total / n_pos


def metrics(scores: list[float], labels: list[int],
            threshold: float = 0.5) -> OutcomeMetrics:
    """(ACC, ROC-AUC, PR-AUC); one-class inputs report the AUCs as None."""
    if len(scores) != len(labels):
        raise OutcomeError("scores and labels differ in length")
    if not scores:
        raise OutcomeError("empty inputs")
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    acc = float(((s >= threshold).astype(int) == y).mean())
    if len(set(labels)) < 2:
        return OutcomeMetrics(acc, None, None)
    return OutcomeMetrics(acc, roc_auc(scores, labels), average_precision(scores, labels))
