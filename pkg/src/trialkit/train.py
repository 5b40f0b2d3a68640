"""Training: masked-token pretraining, contrastive losses, AdamW, grad checks.

The contrastive objective is a sum of a document-level loss (anchor vs
attribute-dropout positive against a structured hard negative plus in-batch
negatives) and a text-level loss (entity-rewritten positives against
entity-corrupted negatives). Both are InfoNCE over cosine similarities.

The "standard" variant keeps the positive term in the denominator, which
bounds the loss below by zero. The "paper_literal" variant drops it and can
go negative; it is kept for fidelity experiments.
"""

from __future__ import annotations

import copy
import random
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .augment import AugmentConfig, ContrastiveBatch, build_batch
from .corpus import Corpus, Trial
from .encoder import (
    CLS,
    MASK,
    PAD,
    SPECIAL_TOKENS,
    AttentionAggregator,
    TextEncoder,
    Vocab,
    aggregate_batch,
    encode_text_batch,
    save_checkpoint,
)
from .knowledge import KnowledgeMap


class TrainError(RuntimeError):
    """Training-time failure (divergence, bad inputs, non-finite values)."""


@dataclass
class TrainConfig:
    # Defaults mirror the published recipe; desk-scale runs want a larger
    # learning rate (around 1e-3) since this backbone is tiny.
    learning_rate: float = 2e-5
    batch_size: int = 50
    weight_decay: float = 1e-4
    epochs: int = 1
    seed: int = 0
    temperature: float = 1.0
    infonce_variant: str = "standard"  # or "paper_literal"
    use_attr_negatives: bool = True
    use_ctx_negatives: bool = True
    use_local_loss: bool = True
    threads: int | None = 1
    checkpoint_dir: str | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.infonce_variant not in ("standard", "paper_literal"):
            raise ValueError(f"unknown InfoNCE variant {self.infonce_variant!r}")


@dataclass
class MlmConfig:
    mask_prob: float = 0.15
    epochs: int = 5
    batch_size: int = 100
    learning_rate: float = 5e-5
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.mask_prob < 1.0:
            raise ValueError("mask_prob must be in (0, 1)")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class AdamW(torch.optim.Optimizer):
    """Adam with decoupled weight decay.

    Accepts plain tensors or (name, tensor) pairs; names make non-finite
    gradient errors actionable.
    """

    def __init__(self, params, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        params = list(params)
        self._names: dict[int, str] = {}
        tensors = []
        for item in params:
            if isinstance(item, tuple):
                name, tensor = item
                self._names[id(tensor)] = name
                tensors.append(tensor)
            else:
                tensors.append(item)
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__(tensors, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            lr = group["lr"]
            beta1, beta2 = group["betas"]
            eps = group["eps"]
            weight_decay = group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                grad = p.grad
                if not torch.isfinite(grad).all():
                    name = self._names.get(id(p), f"<tensor shape {tuple(p.shape)}>")
                    raise TrainError(f"non-finite gradient for parameter {name}")
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                exp_avg, exp_avg_sq = state["exp_avg"], state["exp_avg_sq"]

                if weight_decay != 0.0:
                    p.mul_(1.0 - lr * weight_decay)

                exp_avg.mul_(beta1).add_(grad, alpha=1.0 - beta1)
                exp_avg_sq.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
                m_hat = exp_avg / (1.0 - beta1 ** t)
                v_hat = exp_avg_sq / (1.0 - beta2 ** t)
                p.addcdiv_(m_hat, v_hat.sqrt().add_(eps), value=-lr)
        return loss


# ---------------------------------------------------------------------------
# InfoNCE losses
# ---------------------------------------------------------------------------

def _unit_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if not torch.isfinite(x).all() or (norms == 0).any():
        raise TrainError(f"{what}: zero or non-finite embedding row")
    return x / norms


def loss_global(anchors: torch.Tensor, positives: torch.Tensor,
                hard_negatives: torch.Tensor | None, tau: float = 1.0,
                variant: str = "standard") -> torch.Tensor:
    """Document-level InfoNCE summed over the batch.

    Per anchor the negative set is its hard negative (when present) plus the
    other anchors in the batch.
    """
    if variant not in ("standard", "paper_literal"):
        raise ValueError(f"unknown InfoNCE variant {variant!r}")
    b = anchors.shape[0]
    a = _unit_rows(anchors, "anchors")
    p = _unit_rows(positives, "positives")
    pos = (a * p).sum(dim=-1) / tau  # (B,)

    neg_cols = []
    if hard_negatives is not None:
        hn = _unit_rows(hard_negatives, "hard negatives")
        neg_cols.append(((a * hn).sum(dim=-1) / tau)[:, None])
    if b > 1:
        sims = (a @ a.T) / tau
        off_diag = sims.flatten()[:-1].view(b - 1, b + 1)[:, 1:].reshape(b, b - 1)
        neg_cols.append(off_diag)
    if not neg_cols:
        raise TrainError("empty negative set: need a hard negative or batch size > 1")
    negs = torch.cat(neg_cols, dim=1)  # (B, n_neg)

    if variant == "standard":
        logits = torch.cat([pos[:, None], negs], dim=1)
        per_anchor = -pos + torch.logsumexp(logits, dim=1)
    else:
        per_anchor = -pos + torch.logsumexp(negs, dim=1)
    total = per_anchor.sum()
    if not torch.isfinite(total):
        raise TrainError("non-finite similarity in document-level loss")
    return total


def loss_local(anchors: torch.Tensor, positives: torch.Tensor,
               negatives: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """Text-level InfoNCE (standard form) summed over samples.

    anchors/positives: (M, D); negatives: (M, N, D) with N >= 1.
    """
    if negatives.ndim != 3 or negatives.shape[1] < 1:
        raise TrainError("each text-level sample needs at least one negative")
    a = _unit_rows(anchors, "anchor texts")
    p = _unit_rows(positives, "positive texts")
    n = _unit_rows(negatives, "negative texts")
    pos = (a * p).sum(dim=-1) / tau  # (M,)
    negs = torch.einsum("md,mnd->mn", a, n) / tau  # (M, N)
    logits = torch.cat([pos[:, None], negs], dim=1)
    total = (-pos + torch.logsumexp(logits, dim=1)).sum()
    if not torch.isfinite(total):
        raise TrainError("non-finite similarity in text-level loss")
    return total


def loss_joint(global_loss: torch.Tensor | float,
               local_loss: torch.Tensor | float) -> torch.Tensor | float:
    """Unweighted sum of the two objectives."""
    return global_loss + local_loss


# ---------------------------------------------------------------------------
# Batch encoding under autograd
# ---------------------------------------------------------------------------

def encode_trials_training(trials: list[Trial], encoder: TextEncoder,
                           aggregator: AttentionAggregator, vocab: Vocab) -> torch.Tensor:
    """Global vectors (N, D) for a list of documents, gradients attached."""
    texts: list[str] = []
    layout: list[tuple[list[int], int]] = []  # (local row indices, ctx row index)
    for trial in trials:
        attrs = trial.key_attributes()
        if not attrs:
            raise TrainError(f"trial {trial.id!r}: no non-empty key attribute")
        rows = []
        for value in attrs.values():
            rows.append(len(texts))
            texts.append(value)
        ctx_row = len(texts)
        texts.append(trial.context)
        layout.append((rows, ctx_row))

    pooled = encode_text_batch(texts, encoder, vocab)
    queries = []
    locals_list = []
    for (rows, ctx_row), trial in zip(layout, trials):
        local_vecs = pooled[rows]
        locals_list.append(local_vecs)
        if vocab.encode(trial.context):
            queries.append(pooled[ctx_row])
        else:
            queries.append(local_vecs.mean(dim=0))
    return aggregate_batch(aggregator, torch.stack(queries), locals_list)


def batch_losses(batch: ContrastiveBatch, encoder: TextEncoder,
                 aggregator: AttentionAggregator, vocab: Vocab,
                 cfg: TrainConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """(document-level, text-level) losses for one contrastive batch."""
    samples = batch.global_samples
    with_hard = all(s.hard_negative is not None for s in samples)
    trials = [s.anchor for s in samples] + [s.positive for s in samples]
    if with_hard:
        trials += [s.hard_negative for s in samples]
    vectors = encode_trials_training(trials, encoder, aggregator, vocab)
    b = len(samples)
    anchors, positives = vectors[:b], vectors[b:2 * b]
    hard = vectors[2 * b:] if with_hard else None
    l_global = loss_global(anchors, positives, hard,
                           tau=cfg.temperature, variant=cfg.infonce_variant)

    zero = torch.zeros((), dtype=vectors.dtype)
    if not (cfg.use_local_loss and batch.local_samples):
        return l_global, zero
    locals_ = batch.local_samples
    n_neg = len(locals_[0].negative_texts)
    texts = [s.anchor_text for s in locals_] + [s.positive_text for s in locals_]
    for sample in locals_:
        if len(sample.negative_texts) != n_neg:
            raise TrainError("ragged negative counts in one batch")
        texts.extend(sample.negative_texts)
    pooled = encode_text_batch(texts, encoder, vocab)
    m = len(locals_)
    l_local = loss_local(pooled[:m], pooled[m:2 * m],
                         pooled[2 * m:].view(m, n_neg, -1), tau=cfg.temperature)
    return l_global, l_local


# ---------------------------------------------------------------------------
# Masked-token pretraining
# ---------------------------------------------------------------------------

def _mlm_batch(texts: list[str], vocab: Vocab, max_len: int,
               mask_prob: float, generator: torch.Generator,
               ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor] | None:
    """(masked ids, attention mask, target positions as original ids or -1)."""
    seqs = []
    for text in texts:
        ids = vocab.encode(text)
        if ids:
            seqs.append([CLS] + ids[: max_len - 1])
    if not seqs:
        return None
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), PAD, dtype=torch.long)
    for i, seq in enumerate(seqs):
        ids[i, :len(seq)] = torch.tensor(seq, dtype=torch.long)
    attention = ids != PAD
    maskable = ids >= len(SPECIAL_TOKENS)
    lottery = torch.rand(ids.shape, generator=generator) < mask_prob
    selected = lottery & maskable
    if not selected.any():
        return None
    masked = ids.masked_fill(selected, MASK)
    targets = ids.masked_fill(~selected, -1)
    return masked, attention, targets


def mlm_loss(texts: list[str], encoder: TextEncoder, vocab: Vocab,
             mask_prob: float, generator: torch.Generator,
             ) -> tuple[torch.Tensor, int, int] | None:
    """Mean cross-entropy over masked positions, with top-1 hit count.

    Returns None when no position was maskable. Prediction is through the
    tied token-embedding output layer.
    """
    prepared = _mlm_batch(texts, vocab, encoder.config.max_len, mask_prob, generator)
    if prepared is None:
        return None
    masked, attention, targets = prepared
    hidden = encoder(masked, attention)
    logits = hidden @ encoder.tok_emb.weight.T  # (B, L, V)
    chosen = targets >= 0
    loss = torch.nn.functional.cross_entropy(logits[chosen], targets[chosen])
    correct = int((logits[chosen].argmax(dim=-1) == targets[chosen]).sum())
    return loss, int(chosen.sum()), correct


def mlm_step(texts: list[str], encoder: TextEncoder, vocab: Vocab,
             cfg: MlmConfig, generator: torch.Generator,
             ) -> tuple[float, dict[str, torch.Tensor]] | None:
    """One gradient evaluation; returns (loss, gradients) or None if skipped."""
    result = mlm_loss(texts, encoder, vocab, cfg.mask_prob, generator)
    if result is None:
        warnings.warn("batch had no maskable tokens; skipped", stacklevel=2)
        return None
    loss, _, _ = result
    encoder.zero_grad(set_to_none=True)
    loss.backward()
    grads = {name: p.grad for name, p in encoder.named_parameters()
             if p.grad is not None}
    return float(loss.detach()), grads


def pretrain_mlm(texts: list[str], encoder: TextEncoder, vocab: Vocab,
                 cfg: MlmConfig) -> list[float]:
    """Masked-token pretraining loop; returns per-step losses."""
    if not texts:
        raise TrainError("no pretraining texts")
    optimizer = AdamW(encoder.named_parameters(), lr=cfg.learning_rate,
                      weight_decay=cfg.weight_decay)
    generator = torch.Generator().manual_seed(cfg.seed)
    history: list[float] = []
    for epoch in range(cfg.epochs):
        order = list(texts)
        random.Random(f"{cfg.seed}:mlm:{epoch}").shuffle(order)
        for start in range(0, len(order), cfg.batch_size):
            stepped = mlm_step(order[start:start + cfg.batch_size],
                               encoder, vocab, cfg, generator)
            if stepped is None:
                continue
            loss, _ = stepped
            optimizer.step()
            history.append(loss)
    return history


def mlm_eval(texts: list[str], encoder: TextEncoder, vocab: Vocab,
             mask_prob: float, seed: int = 0) -> tuple[float, float]:
    """(mean loss, masked-token top-1 accuracy) on a fixed masking draw."""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        result = mlm_loss(texts, encoder, vocab, mask_prob, generator)
    if result is None:
        raise TrainError("evaluation batch had no maskable tokens")
    loss, n_masked, n_correct = result
    return float(loss), n_correct / n_masked


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_coords: int
    tolerance: float
    worst_coord: str

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(loss_fn, named_params: list[tuple[str, torch.Tensor]],
               h: float = 1e-5, tolerance: float = 1e-4,
               coords_per_tensor: int = 4, seed: int = 0,
               scale_floor: float = 1e-5) -> GradCheckReport:
    """Compare backprop gradients against central finite differences.

    Probes a seeded random subset of coordinates per tensor. loss_fn must be
    deterministic. The relative-error denominator is floored at scale_floor:
    a central difference carries roundoff noise of roughly eps * |loss| / h
    in absolute terms, so coordinates whose true gradient sits near that
    noise cannot be compared in relative terms by any correct implementation.
    """
    for _, p in named_params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {name: (p.grad.clone() if p.grad is not None else torch.zeros_like(p))
                for name, p in named_params}

    rng = random.Random(seed)
    max_rel, n_coords, worst = 0.0, 0, "none"
    with torch.no_grad():
        for name, p in named_params:
            flat = p.view(-1)
            total = flat.numel()
            picks = rng.sample(range(total), min(coords_per_tensor, total))
            for c in picks:
                original = flat[c].item()
                flat[c] = original + h
                f_plus = float(loss_fn())
                flat[c] = original - h
                f_minus = float(loss_fn())
                flat[c] = original
                numeric = (f_plus - f_minus) / (2.0 * h)
                exact = analytic[name].view(-1)[c].item()
                scale = max(abs(exact), abs(numeric), scale_floor)
                rel = abs(exact - numeric) / scale
                n_coords += 1
                if rel > max_rel:
                    max_rel, worst = rel, f"{name}[{c}]"
    return GradCheckReport(max_rel, n_coords, tolerance, worst)


# ---------------------------------------------------------------------------
# Contrastive training loop
# ---------------------------------------------------------------------------

@dataclass
class HistoryRow:
    step: int
    loss_global: float
    loss_local: float
    loss: float


@dataclass
class TrainResult:
    history: list[HistoryRow]
    diverged: bool = False


def write_history_csv(history: list[HistoryRow], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        handle.write("step,loss_g,loss_l,loss\n")
        for row in history:
            handle.write(f"{row.step},{row.loss_global!r},{row.loss_local!r},{row.loss!r}\n")


def train(corpus: Corpus, kmap: KnowledgeMap, encoder: TextEncoder,
          aggregator: AttentionAggregator, vocab: Vocab, cfg: TrainConfig,
          rng: random.Random | None = None) -> TrainResult:
    """Contrastive training over the corpus.

    Deterministic for a fixed config seed in single-threaded mode. On a
    non-finite loss the last epoch-boundary parameter snapshot is restored
    and the run reports divergence.
    """
    if len(corpus) == 0:
        raise TrainError("training corpus is empty")
    if cfg.threads:
        torch.set_num_threads(cfg.threads)
    del rng  # reproducibility comes from cfg.seed; see derived streams below

    named = ([(f"enc.{n}", p) for n, p in encoder.named_parameters()]
             + [(f"agg.{n}", p) for n, p in aggregator.named_parameters()])
    optimizer = AdamW(named, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    def snapshot():
        return (copy.deepcopy(encoder.state_dict()),
                copy.deepcopy(aggregator.state_dict()))

    def restore(state):
        encoder.load_state_dict(state[0])
        aggregator.load_state_dict(state[1])

    last_good = snapshot()
    history: list[HistoryRow] = []
    step = 0
    trials = list(corpus)
    for epoch in range(cfg.epochs):
        order = list(trials)
        random.Random(f"{cfg.seed}:shuffle:{epoch}").shuffle(order)
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            batch_rng = random.Random(f"{cfg.seed}:batch:{step}")
            batch = build_batch(
                chunk, corpus, kmap, cfg.augment, batch_rng,
                use_attr_negatives=cfg.use_attr_negatives,
                use_ctx_negatives=cfg.use_ctx_negatives,
                include_local=cfg.use_local_loss)
            try:
                l_global, l_local = batch_losses(batch, encoder, aggregator, vocab, cfg)
                loss = loss_joint(l_global, l_local)
            except TrainError:
                restore(last_good)
                return TrainResult(history, diverged=True)
            if not torch.isfinite(loss):
                restore(last_good)
                return TrainResult(history, diverged=True)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            history.append(HistoryRow(step, float(l_global.detach()),
                                      float(l_local.detach()), float(loss.detach())))
            step += 1
        last_good = snapshot()
        if cfg.checkpoint_dir is not None:
            directory = Path(cfg.checkpoint_dir)
            directory.mkdir(parents=True, exist_ok=True)
            save_checkpoint(directory / f"epoch_{epoch:03d}.ckpt", encoder, aggregator)
    return TrainResult(history)
