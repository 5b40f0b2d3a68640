"""trialkit: self-supervised embeddings and retrieval for structured trial documents."""

__version__ = "0.1.0"

from .corpus import Corpus, SplitSpec, Trial, parse_corpus, serialize_corpus, split_corpus, status_label
from .knowledge import KnowledgeMap, extract_entities, load_map
from .augment import AugmentConfig, build_batch
from .encoder import (
    EncoderConfig,
    EmbeddingBundle,
    build_model,
    cosine,
    encode_query,
    encode_text,
    encode_trial,
    fit_vocab,
    load_checkpoint,
    load_vocab,
    save_checkpoint,
    save_vocab,
)
# the train() entry point lives at trialkit.train.train; re-exporting it here
# would shadow the submodule attribute
from .train import MlmConfig, TrainConfig, grad_check, pretrain_mlm
from .retrieval import build_index, candidate_pool, fit_sparse, load_index, save_index, search, sparse_search
from .evaluation import RelevanceJudgments, evaluate_run, load_judgments, ndcg_at_k, precision_at_k, recall_at_k
from .outcome import HeadConfig, classify, metrics, outcome_dataset, train_head

__all__ = [name for name in dir() if not name.startswith("_")]
