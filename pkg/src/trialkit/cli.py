"""Command-line interface.

Commands mirror the pipeline: pretrain-mlm, train, index, search, evaluate,
predict-outcome, export-embeddings, serve. Every command accepts --config
pointing at a JSON object; precedence is flags > config file > defaults.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .app import (
    AppError,
    SearchEngine,
    export_embeddings,
    index_corpus,
    make_ranker,
    render_results_json,
    render_results_table,
)
from .augment import AugmentConfig
from .corpus import SplitSpec, parse_corpus, split_corpus
from .encoder import (
    EncoderConfig,
    build_model,
    fit_vocab,
    load_checkpoint,
    load_vocab,
    save_checkpoint,
    save_vocab,
)
from .evaluation import evaluate_run, load_judgments
from .knowledge import load_map
from .outcome import (
    HeadConfig,
    metrics,
    outcome_dataset,
    predict,
    train_head,
    write_predictions_csv,
)
from .retrieval import load_index, save_index
from .train import MlmConfig, TrainConfig, pretrain_mlm, train, write_history_csv


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dim", type=int, default=128, help="embedding dimension")
    parser.add_argument("--layers", type=int, default=2, help="encoder layers")
    parser.add_argument("--heads", type=int, default=4, help="attention heads")
    parser.add_argument("--max-len", type=int, default=256, help="max tokens per text")


def cmd_pretrain_mlm(args: argparse.Namespace) -> int:
    corpus = parse_corpus(args.corpus)
    vocab = fit_vocab(corpus, min_freq=args.min_freq)
    config = EncoderConfig(vocab_size=len(vocab), dim=args.dim, n_layers=args.layers,
                           n_heads=args.heads, max_len=args.max_len)
    encoder, aggregator = build_model(config, seed=args.seed)
    cfg = MlmConfig(mask_prob=args.mask_prob, epochs=args.epochs,
                    batch_size=args.batch_size, learning_rate=args.learning_rate,
                    seed=args.seed)
    texts = [t.document_text() for t in corpus]
    history = pretrain_mlm(texts, encoder, vocab, cfg)
    save_checkpoint(args.out_checkpoint, encoder, aggregator)
    save_vocab(vocab, args.out_vocab)
    if args.history_csv:
        with Path(args.history_csv).open("w", encoding="utf-8") as handle:
            handle.write("step,loss\n")
            for step, loss in enumerate(history):
                handle.write(f"{step},{loss!r}\n")
    last = history[-1] if history else float("nan")
    print(f"pretrained on {len(texts)} documents; {len(history)} steps; "
          f"final loss {last:.4f}")
    print(f"checkpoint: {args.out_checkpoint}  vocab: {args.out_vocab}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    corpus = parse_corpus(args.corpus)
    kmap = load_map(args.knowledge)
    vocab = load_vocab(args.vocab)
    if args.init_checkpoint:
        encoder, aggregator, _ = load_checkpoint(args.init_checkpoint)
    else:
        config = EncoderConfig(vocab_size=len(vocab), dim=args.dim,
                               n_layers=args.layers, n_heads=args.heads,
                               max_len=args.max_len)
        encoder, aggregator = build_model(config, seed=args.seed)
    cfg = TrainConfig(
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        seed=args.seed,
        temperature=args.temperature,
        infonce_variant=args.variant,
        use_attr_negatives=not args.no_attr_negatives,
        use_ctx_negatives=not args.no_ctx_negatives,
        use_local_loss=not args.no_local_loss,
        checkpoint_dir=args.checkpoint_dir,
        augment=AugmentConfig(mix_ratio_ctx=args.mix_ratio_ctx,
                              n_local_negatives=args.n_local_negatives,
                              max_entities=args.max_entities,
                              seed=args.seed),
    )
    result = train(corpus, kmap, encoder, aggregator, vocab, cfg)
    save_checkpoint(args.out_checkpoint, encoder, aggregator)
    if args.history_csv:
        write_history_csv(result.history, args.history_csv)
    if result.diverged:
        print("warning: training diverged; checkpoint holds the last good state",
              file=sys.stderr)
    last = result.history[-1].loss if result.history else float("nan")
    print(f"trained {cfg.epochs} epochs, {len(result.history)} steps; "
          f"final loss {last:.4f}")
    print(f"checkpoint: {args.out_checkpoint}")
    return 0


def cmd_index(args: argparse.Namespace) -> int:
    corpus = parse_corpus(args.corpus)
    encoder, aggregator, _ = load_checkpoint(args.checkpoint)
    vocab = load_vocab(args.vocab)
    index = index_corpus(corpus, encoder, aggregator, vocab)
    save_index(index, args.out_index)
    print(f"indexed {len(index)} documents at dim {index.dim}: {args.out_index}")
    return 0


def cmd_search(args: argparse.Namespace) -> int:
    engine = SearchEngine.load(args.index, args.checkpoint, args.vocab, args.corpus)
    attrs = {name: getattr(args, name) for name in
             ("title", "intervention", "disease", "outcome", "keywords", "context")
             if getattr(args, name)}
    rows = engine.run(args.id, attrs, args.k)
    if args.json:
        sys.stdout.buffer.write(render_results_json(rows))
        sys.stdout.buffer.write(b"\n")
    else:
        print(render_results_table(rows))
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    corpus = parse_corpus(args.corpus)
    judgments = load_judgments(args.judgments)
    index = load_index(args.index) if args.index else None
    ranker = make_ranker(args.ranker, corpus, index)
    ks = [int(k) for k in args.ks.split(",")]
    report = evaluate_run(ranker, judgments, ks=ks, bootstrap_n=args.bootstrap_n,
                          seed=args.seed, ranker_name=args.ranker)
    print(report.format_table())
    if args.out_json:
        report.save_json(args.out_json)
        print(f"report: {args.out_json}")
    return 0


def cmd_predict_outcome(args: argparse.Namespace) -> int:
    corpus = parse_corpus(args.corpus)
    index = load_index(args.index)
    embeddings = {doc_id: index.vectors[i] for i, doc_id in enumerate(index.ids)}
    spec = SplitSpec(args.train_frac, args.valid_frac, args.test_frac, seed=args.seed)
    train_split, valid_split, test_split = split_corpus(corpus, spec)
    train_ds = outcome_dataset(train_split)
    valid_ds = outcome_dataset(valid_split)
    test_ds = outcome_dataset(test_split)
    cfg = HeadConfig(learning_rate=args.learning_rate, epochs=args.epochs,
                     batch_size=args.batch_size, seed=args.seed,
                     patience=args.patience)
    head, history = train_head(embeddings, train_ds, cfg,
                               val_data=valid_ds if len(valid_ds) else None)
    rows = predict(head, embeddings, test_ds.ids())
    scores = [p for _, p, _ in rows]
    result = metrics(scores, test_ds.labels())
    roc = "undefined" if result.roc_auc is None else f"{result.roc_auc:.4f}"
    pr = "undefined" if result.pr_auc is None else f"{result.pr_auc:.4f}"
    print(f"test n={len(test_ds)}  ACC {result.acc:.4f}  ROC-AUC {roc}  PR-AUC {pr}")
    if args.out_csv:
        write_predictions_csv(rows, args.out_csv)
        print(f"predictions: {args.out_csv}")
    if args.out_checkpoint:
        encoder, aggregator, _ = load_checkpoint(args.checkpoint)
        save_checkpoint(args.out_checkpoint, encoder, aggregator, head=head.linear)
        print(f"checkpoint with head: {args.out_checkpoint}")
    return 0


def cmd_export_embeddings(args: argparse.Namespace) -> int:
    corpus = parse_corpus(args.corpus)
    index = load_index(args.index)
    export_embeddings(index, corpus, args.out_tsv)
    print(f"exported {len(index)} rows: {args.out_tsv}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    from .service import serve

    engine = SearchEngine.load(args.index, args.checkpoint, args.vocab, args.corpus)
    print(f"serving {len(engine.index)} documents on {args.host}:{args.port}")
    serve(engine, host=args.host, port=args.port)
    return 0


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="trialkit")
    subparsers = parser.add_subparsers(dest="command", required=True)
    sub_map: dict[str, argparse.ArgumentParser] = {}

    def sub(name: str, handler, **kwargs) -> argparse.ArgumentParser:
        p = subparsers.add_parser(name, **kwargs)
        p.add_argument("--config", help="JSON config file; flags override it")
        p.set_defaults(func=handler)
        sub_map[name] = p
        return p

    p = sub("pretrain-mlm", cmd_pretrain_mlm, help="masked-token pretraining")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--out-vocab", required=True)
    p.add_argument("--min-freq", type=int, default=1)
    _add_model_flags(p)
    p.add_argument("--mask-prob", type=float, default=0.15)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--learning-rate", type=float, default=5e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--history-csv")

    p = sub("train", cmd_train, help="contrastive training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--knowledge", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--init-checkpoint", help="start from a pretrained checkpoint")
    _add_model_flags(p)
    p.add_argument("--learning-rate", type=float, default=2e-5)
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--variant", choices=("standard", "paper_literal"),
                   default="standard")
    p.add_argument("--mix-ratio-ctx", type=float, default=0.5)
    p.add_argument("--n-local-negatives", type=int, default=2)
    p.add_argument("--max-entities", type=int, default=4)
    p.add_argument("--no-attr-negatives", action="store_true")
    p.add_argument("--no-ctx-negatives", action="store_true")
    p.add_argument("--no-local-loss", action="store_true")
    p.add_argument("--checkpoint-dir", help="per-epoch checkpoints")
    p.add_argument("--history-csv")

    p = sub("index", cmd_index, help="encode a corpus into a dense index")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out-index", required=True)

    p = sub("search", cmd_search, help="complete or partial similarity search")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--id", help="complete retrieval by indexed trial id")
    for name in ("title", "intervention", "disease", "outcome", "keywords", "context"):
        p.add_argument(f"--{name}")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--json", action="store_true",
                   help="emit the service wire format")

    p = sub("evaluate", cmd_evaluate, help="score a ranker over judged pools")
    p.add_argument("--judgments", required=True)
    p.add_argument("--ranker", choices=("dense", "tfidf", "bm25"), required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--index", help="required for the dense ranker")
    p.add_argument("--ks", default="1,2,5")
    p.add_argument("--bootstrap-n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-json")

    p = sub("predict-outcome", cmd_predict_outcome,
            help="train and evaluate the completion/termination head")
    p.add_argument("--corpus", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--train-frac", type=float, default=0.7)
    p.add_argument("--valid-frac", type=float, default=0.1)
    p.add_argument("--test-frac", type=float, default=0.2)
    p.add_argument("--learning-rate", type=float, default=5e-2)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-csv")
    p.add_argument("--checkpoint", help="encoder checkpoint to append the head to")
    p.add_argument("--out-checkpoint", help="write checkpoint including the head")

    p = sub("export-embeddings", cmd_export_embeddings,
            help="dump indexed vectors as TSV")
    p.add_argument("--index", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-tsv", required=True)

    p = sub("serve", cmd_serve, help="run the read-only search service")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser, sub_map


def _apply_config(argv: list[str], sub_map: dict[str, argparse.ArgumentParser]) -> None:
    if "--config" not in argv:
        return
    path = argv[argv.index("--config") + 1]
    config = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(config, dict):
        raise AppError(f"{path}: config must be a JSON object")
    command = next((a for a in argv if not a.startswith("-")), None)
    if command not in sub_map:
        return
    sub = sub_map[command]
    valid = {action.dest for action in sub._actions}
    unknown = set(config) - valid
    if unknown:
        raise AppError(f"{path}: unknown config keys {sorted(unknown)}")
    sub.set_defaults(**config)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, sub_map = build_parser()
    try:
        _apply_config(argv, sub_map)
        args = parser.parse_args(argv)
        return args.func(args)
    except (AppError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
