"""Contrastive sample construction.

Two kinds of supervision are generated from unlabeled documents:

* document-level samples: a positive is the anchor with one key attribute
  dropped; a hard negative is the anchor with its title (attr kind) or its
  context (ctx kind) swapped in from another trial on the same disease.
* text-level samples: a positive maps one extracted entity to its canonical
  name or a same-parent sibling; negatives delete an entity or replace it
  with a different-parent concept.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .corpus import Corpus, Trial, drop_attribute, replace_attribute
from .knowledge import KnowledgeMap, extract_entities, sample_dissimilar, sample_similar


class AugmentError(ValueError):
    """A sample could not be constructed from the given inputs."""


@dataclass(frozen=True)
class GlobalSample:
    anchor: Trial
    positive: Trial
    hard_negative: Trial | None
    negative_kind: str  # "attr" | "ctx" | "none"
    fallback: bool = False  # hard negative borrowed from a random trial, not co-disease


@dataclass(frozen=True)
class LocalSample:
    anchor_text: str
    positive_text: str
    negative_texts: tuple[str, ...]


@dataclass(frozen=True)
class AugmentConfig:
    mix_ratio_ctx: float = 0.5
    n_local_negatives: int = 2
    max_entities: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.mix_ratio_ctx <= 1.0:
            raise ValueError("mix_ratio_ctx must be in [0, 1]")
        if self.n_local_negatives < 1:
            raise ValueError("n_local_negatives must be >= 1")
        if self.max_entities < 1:
            raise ValueError("max_entities must be >= 1")


@dataclass
class ContrastiveBatch:
    global_samples: list[GlobalSample] = field(default_factory=list)
    local_samples: list[LocalSample] = field(default_factory=list)
    # trial ids for which no local sample could be built
    local_skips: list[str] = field(default_factory=list)


def make_global_positive(trial: Trial, rng: random.Random) -> Trial:
    """Anchor copy with exactly one non-empty key attribute dropped."""
    present = list(trial.key_attributes())
    if len(present) < 2:
        raise AugmentError(
            f"trial {trial.id!r}: needs >= 2 non-empty key attributes for dropout")
    return drop_attribute(trial, rng.choice(present))


def make_global_negative(trial: Trial, corpus: Corpus, kind: str,
                         rng: random.Random) -> tuple[Trial, bool]:
    """Anchor copy with title (attr) or context (ctx) swapped from a co-disease trial.

    Returns (negative, fallback). When no co-disease trial exists the donor is
    a uniformly random other trial and fallback is True.
    """
    if kind not in ("attr", "ctx"):
        raise ValueError(f"unknown negative kind {kind!r}")
    if len(corpus) < 2:
        raise AugmentError("corpus must contain at least one other trial")
    donors = corpus.co_disease_ids(trial)
    fallback = not donors
    if fallback:
        donors = [i for i in corpus.ids() if i != trial.id]
    donor = corpus.get(rng.choice(donors))
    target = "title" if kind == "attr" else "context"
    return replace_attribute(trial, target, getattr(donor, target)), fallback


def _delete_span(text: str, start: int, end: int) -> str:
    return (text[:start].rstrip() + " " + text[end:].lstrip()).strip()


def make_local_sample(text: str, kmap: KnowledgeMap, n_neg: int,
                      rng: random.Random, max_entities: int = 4) -> LocalSample:
    """Entity-level positive and negatives for one text.

    The positive rewrites one uniformly chosen mention with a similar concept;
    each negative independently deletes a mention or substitutes a dissimilar
    concept, with probability 1/2 each.
    """
    if n_neg < 1:
        raise ValueError("n_neg must be >= 1")
    mentions = extract_entities(text, kmap, max_entities=max_entities)
    if not mentions:
        raise AugmentError("no entity for local pair")

    picked = rng.choice(mentions)
    replacement = sample_similar(picked.entry, kmap, rng, avoid=picked.surface)
    positive = text[:picked.span[0]] + replacement + text[picked.span[1]:]

    negatives = []
    for _ in range(n_neg):
        mention = rng.choice(mentions)
        start, end = mention.span
        deleted = _delete_span(text, start, end)
        # Deletion may not empty the text (the encoder would see nothing);
        # such draws fall back to substitution.
        if rng.random() < 0.5 and deleted:
            negatives.append(deleted)
        else:
            foreign = sample_dissimilar(mention.entry, kmap, rng)
            negatives.append(text[:start] + foreign + text[end:])
    return LocalSample(text, positive, tuple(negatives))


def _negative_kinds(n: int, mix_ratio_ctx: float) -> list[str]:
    """Interleave attr/ctx kinds so the ctx share tracks the mixing ratio."""
    kinds = []
    acc = 0.0
    for _ in range(n):
        acc += mix_ratio_ctx
        if acc >= 1.0 - 1e-12:
            kinds.append("ctx")
            acc -= 1.0
        else:
            kinds.append("attr")
    return kinds


def build_batch(trials: list[Trial], corpus: Corpus, kmap: KnowledgeMap,
                config: AugmentConfig, rng: random.Random,
                use_attr_negatives: bool = True, use_ctx_negatives: bool = True,
                include_local: bool = True) -> ContrastiveBatch:
    """One GlobalSample per trial plus up to one LocalSample per trial.

    Per-trial local failures (no extractable entity, no dissimilar concept)
    are recorded as skips, never raised. Disabling both negative kinds leaves
    hard negatives out; in-batch negatives still apply downstream.
    """
    if not trials:
        raise AugmentError("batch must contain at least one trial")
    if use_attr_negatives and use_ctx_negatives:
        kinds = _negative_kinds(len(trials), config.mix_ratio_ctx)
    elif use_ctx_negatives:
        kinds = ["ctx"] * len(trials)
    elif use_attr_negatives:
        kinds = ["attr"] * len(trials)
    else:
        kinds = ["none"] * len(trials)

    batch = ContrastiveBatch()
    for trial, kind in zip(trials, kinds):
        positive = make_global_positive(trial, rng)
        if kind == "none":
            negative, fallback = None, False
        else:
            negative, fallback = make_global_negative(trial, corpus, kind, rng)
        batch.global_samples.append(
            GlobalSample(trial, positive, negative, kind, fallback))

        if not include_local:
            continue
        attrs = trial.key_attributes()
        source = attrs[rng.choice(list(attrs))]
        try:
            batch.local_samples.append(make_local_sample(
                source, kmap, config.n_local_negatives, rng,
                max_entities=config.max_entities))
        except (AugmentError, ValueError):
            batch.local_skips.append(trial.id)
    return batch
