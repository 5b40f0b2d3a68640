"""Shared experiment harness for the synthetic end-to-end criteria.

Runs are memoized per configuration: the acceptance tests reuse the same
trained models across criteria (headline quality, ablations, dimension
sweep, outcome prediction).
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from trialkit.app import index_corpus, make_ranker
from trialkit.augment import AugmentConfig
from trialkit.encoder import EncoderConfig, build_model, fit_vocab
from trialkit.evaluation import EvalReport, evaluate_run
from trialkit.train import TrainConfig, train

from synthworld import SynthWorld, build_world

EPOCHS = 18
MIN_FREQ = 3
LEARNING_RATE = 1e-3
TEMPERATURE = 0.2
BATCH_SIZE = 50

_WORLD: SynthWorld | None = None
_VOCAB = None


def world():
    global _WORLD, _VOCAB
    if _WORLD is None:
        _WORLD = build_world(seed=0)
        _VOCAB = fit_vocab(_WORLD.corpus, min_freq=MIN_FREQ)
    return _WORLD, _VOCAB


def _dense_eval(corpus, judgments, encoder, aggregator, vocab) -> EvalReport:
    index = index_corpus(corpus, encoder, aggregator, vocab)
    ranker = make_ranker("dense", corpus, index)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return evaluate_run(ranker, judgments, ks=[1, 5], bootstrap_n=100, seed=0)


def sparse_eval(kind: str) -> EvalReport:
    w, _ = world()
    ranker = make_ranker(kind, w.corpus)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return evaluate_run(ranker, w.judgments, ks=[1, 5], bootstrap_n=100,
                            seed=0, ranker_name=kind)


@dataclass
class RunResult:
    prec1: float
    ndcg5: float
    untrained_prec1: float
    untrained_ndcg5: float
    train_seconds: float
    final_loss: float
    embeddings: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


_RUNS: dict[tuple, RunResult] = {}


def run_experiment(seed: int = 0, dim: int = 64, use_attr: bool = True,
                   use_ctx: bool = True, use_local: bool = True,
                   epochs: int = EPOCHS) -> RunResult:
    key = (seed, dim, use_attr, use_ctx, use_local, epochs)
    if key in _RUNS:
        return _RUNS[key]
    torch.set_num_threads(1)
    w, vocab = world()
    config = EncoderConfig(vocab_size=len(vocab), dim=dim, n_layers=2,
                           n_heads=4, max_len=64)
    encoder, aggregator = build_model(config, seed=seed)

    before = _dense_eval(w.corpus, w.judgments, encoder, aggregator, vocab)
    cfg = TrainConfig(
        learning_rate=LEARNING_RATE,
        batch_size=BATCH_SIZE,
        weight_decay=1e-4,
        epochs=epochs,
        seed=seed,
        temperature=TEMPERATURE,
        use_attr_negatives=use_attr,
        use_ctx_negatives=use_ctx,
        use_local_loss=use_local,
        augment=AugmentConfig(seed=seed),
    )
    started = time.time()
    outcome = train(w.corpus, w.kmap, encoder, aggregator, vocab, cfg)
    elapsed = time.time() - started
    assert not outcome.diverged, "synthetic training diverged"

    after = _dense_eval(w.corpus, w.judgments, encoder, aggregator, vocab)
    index = index_corpus(w.corpus, encoder, aggregator, vocab)
    embeddings = {doc_id: index.vectors[i].copy()
                  for i, doc_id in enumerate(index.ids)}
    result = RunResult(
        prec1=after.metrics["prec@1"].mean,
        ndcg5=after.metrics["ndcg@5"].mean,
        untrained_prec1=before.metrics["prec@1"].mean,
        untrained_ndcg5=before.metrics["ndcg@5"].mean,
        train_seconds=elapsed,
        final_loss=outcome.history[-1].loss if outcome.history else float("nan"),
        embeddings=embeddings,
    )
    _RUNS[key] = result
    return result


def mean_over_seeds(seeds, metric: str, **kwargs) -> float:
    return float(np.mean([getattr(run_experiment(seed=s, **kwargs), metric)
                          for s in seeds]))
