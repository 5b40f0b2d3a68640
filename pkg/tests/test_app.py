import io
import json
import sys

import numpy as np
import pytest
from fastapi.testclient import TestClient

from trialkit.app import (
    AppError,
    SearchEngine,
    export_embeddings,
    index_corpus,
    make_ranker,
    render_results_json,
    render_results_table,
)
from trialkit.cli import main as cli_main
from trialkit.corpus import parse_corpus, serialize_corpus
from trialkit.encoder import EncoderConfig, build_model, fit_vocab, save_checkpoint, save_vocab
from trialkit.evaluation import RelevanceJudgments, save_judgments
from trialkit.knowledge import save_map
from trialkit.retrieval import load_index, save_index
from trialkit.service import create_app

sys.path.insert(0, str(__import__("pathlib").Path(__file__).parent))
from synthworld import build_world, family_of  # noqa: E402


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Small trained-free workspace: corpus, knowledge map, checkpoint, index."""
    root = tmp_path_factory.mktemp("ws")
    world = build_world(seed=3, n_queries=6)
    corpus_path = root / "corpus.jsonl"
    serialize_corpus(world.corpus, corpus_path)
    kmap_path = root / "knowledge.jsonl"
    save_map(world.kmap, kmap_path)

    vocab = fit_vocab(world.corpus, min_freq=2)
    config = EncoderConfig(vocab_size=len(vocab), dim=32, n_layers=1,
                           n_heads=2, max_len=48)
    encoder, aggregator = build_model(config, seed=1)
    ckpt_path = root / "model.ckpt"
    vocab_path = root / "model.vocab"
    save_checkpoint(ckpt_path, encoder, aggregator)
    save_vocab(vocab, vocab_path)

    index = index_corpus(world.corpus, encoder, aggregator, vocab)
    index_path = root / "dense.idx"
    save_index(index, index_path)

    judgments_path = root / "judgments.jsonl"
    save_judgments(world.judgments, judgments_path)
    return {
        "root": root,
        "world": world,
        "corpus": corpus_path,
        "knowledge": kmap_path,
        "checkpoint": ckpt_path,
        "vocab": vocab_path,
        "index": index_path,
        "judgments": judgments_path,
    }


@pytest.fixture(scope="module")
def engine(workspace) -> SearchEngine:
    return SearchEngine.load(workspace["index"], workspace["checkpoint"],
                             workspace["vocab"], workspace["corpus"])


def run_cli(args: list[str]) -> tuple[int, str]:
    """Run the CLI in-process, capturing text and binary stdout together."""
    raw = io.BytesIO()
    wrapper = io.TextIOWrapper(raw, encoding="utf-8")
    real_stdout = sys.stdout
    sys.stdout = wrapper
    try:
        code = cli_main(args)
        wrapper.flush()
    finally:
        sys.stdout = real_stdout
    return code, raw.getvalue().decode("utf-8")


class TestEngine:
    def test_search_by_id_excludes_self(self, engine):
        some_id = engine.index.ids[0]
        rows = engine.run(some_id, {}, k=5)
        assert len(rows) == 5
        assert all(r["id"] != some_id for r in rows)
        scores = [r["score"] for r in rows]
        assert scores == sorted(scores, reverse=True)

    def test_search_by_attrs(self, engine):
        rows = engine.run(None, {"title": "cardexumab for cardexosis",
                                 "disease": "cardexosis"}, k=3)
        assert len(rows) == 3
        assert all(set(r) == {"id", "title", "score"} for r in rows)

    def test_id_and_attrs_rejected(self, engine):
        with pytest.raises(AppError):
            engine.run(engine.index.ids[0], {"title": "x"}, k=3)

    def test_unknown_id_rejected(self, engine):
        with pytest.raises(AppError, match="not in index"):
            engine.run("NOPE", {}, k=3)

    def test_empty_query_rejected(self, engine):
        with pytest.raises(AppError):
            engine.run(None, {}, k=3)

    def test_render_table(self, engine):
        rows = engine.run(None, {"title": "study"}, k=2)
        table = render_results_table(rows)
        assert rows[0]["id"] in table


class TestExport:
    def test_export_shape_and_reexport_bytes(self, workspace, engine, tmp_path):
        out_a = tmp_path / "a.tsv"
        out_b = tmp_path / "b.tsv"
        export_embeddings(engine.index, engine.corpus, out_a)
        export_embeddings(engine.index, engine.corpus, out_b)
        assert out_a.read_bytes() == out_b.read_bytes()
        lines = out_a.read_text(encoding="utf-8").splitlines()
        assert len(lines) == len(engine.index) + 1
        header = lines[0].split("\t")
        assert header[:2] == ["id", "disease"]
        assert len(header) == 2 + engine.index.dim

    def test_export_parse_back(self, engine, tmp_path):
        out = tmp_path / "emb.tsv"
        export_embeddings(engine.index, engine.corpus, out)
        lines = out.read_text(encoding="utf-8").splitlines()[1:]
        for line, doc_id, vector in zip(lines, engine.index.ids,
                                        engine.index.vectors):
            parts = line.split("\t")
            assert parts[0] == doc_id
            parsed = np.array([float(x) for x in parts[2:]], dtype=np.float32)
            np.testing.assert_allclose(parsed, vector, atol=1e-6)


class TestService:
    def test_health(self, engine):
        client = TestClient(create_app(engine))
        body = client.get("/health").json()
        assert body["status"] == "ok"
        assert body["n_docs"] == len(engine.index)
        assert body["dim"] == engine.index.dim

    def test_search_contract(self, engine):
        client = TestClient(create_app(engine))
        response = client.get("/search", params={"title": "cardexumab", "k": 5})
        assert response.status_code == 200
        results = response.json()["results"]
        assert len(results) == 5
        scores = [r["score"] for r in results]
        assert scores == sorted(scores, reverse=True)

    def test_identical_requests_identical_bytes(self, engine):
        client = TestClient(create_app(engine))
        a = client.get("/search", params={"disease": "cardexosis", "k": 3})
        b = client.get("/search", params={"disease": "cardexosis", "k": 3})
        assert a.content == b.content

    def test_bad_request_400(self, engine):
        client = TestClient(create_app(engine))
        assert client.get("/search").status_code == 400
        assert client.get("/search", params={"id": "NOPE"}).status_code == 400
        assert client.get("/search", params={"title": "x", "k": 0}).status_code == 400

    def test_service_matches_library_renderer(self, engine):
        client = TestClient(create_app(engine))
        response = client.get("/search", params={"title": "open label study", "k": 4})
        rows = engine.run(None, {"title": "open label study"}, 4)
        assert response.content == render_results_json(rows)


class TestCli:
    def test_index_command(self, workspace, tmp_path):
        out_index = tmp_path / "cli.idx"
        code, out = run_cli([
            "index", "--corpus", str(workspace["corpus"]),
            "--checkpoint", str(workspace["checkpoint"]),
            "--vocab", str(workspace["vocab"]),
            "--out-index", str(out_index)])
        assert code == 0
        rebuilt = load_index(out_index)
        original = load_index(workspace["index"])
        assert rebuilt.ids == original.ids
        np.testing.assert_array_equal(rebuilt.vectors, original.vectors)

    def test_search_table_and_json(self, workspace, engine):
        base = ["search", "--index", str(workspace["index"]),
                "--checkpoint", str(workspace["checkpoint"]),
                "--vocab", str(workspace["vocab"]),
                "--corpus", str(workspace["corpus"])]
        code, out = run_cli(base + ["--title", "cardexumab", "--k", "3"])
        assert code == 0 and "score" in out
        code, out = run_cli(base + ["--title", "cardexumab", "--k", "3", "--json"])
        assert code == 0
        payload = json.loads(out)
        assert len(payload["results"]) == 3

    def test_search_json_matches_service_bytes(self, workspace, engine):
        client = TestClient(create_app(engine))
        queries = [
            {"title": "cardexumab study"},
            {"disease": "NRLS"},
            {"id": engine.index.ids[5]},
            {"title": "open label", "disease": "dermatosis", "k": "7"},
        ]
        for params in queries:
            args = ["search", "--index", str(workspace["index"]),
                    "--checkpoint", str(workspace["checkpoint"]),
                    "--vocab", str(workspace["vocab"]),
                    "--corpus", str(workspace["corpus"]), "--json"]
            for key, value in params.items():
                args += [f"--{key}", value]
            code, out = run_cli(args)
            assert code == 0
            response = client.get("/search", params=params)
            assert out.strip().encode("utf-8") == response.content

    def test_evaluate_tfidf(self, workspace, tmp_path):
        report_path = tmp_path / "report.json"
        code, out = run_cli([
            "evaluate", "--judgments", str(workspace["judgments"]),
            "--ranker", "tfidf", "--corpus", str(workspace["corpus"]),
            "--bootstrap-n", "20", "--out-json", str(report_path)])
        assert code == 0
        assert "prec@1" in out
        data = json.loads(report_path.read_text())
        assert data["ranker"] == "tfidf"

    def test_evaluate_dense_needs_index(self, workspace):
        code, _ = run_cli([
            "evaluate", "--judgments", str(workspace["judgments"]),
            "--ranker", "dense", "--corpus", str(workspace["corpus"])])
        assert code == 1

    def test_missing_input_nonzero_exit(self, workspace):
        code, _ = run_cli([
            "index", "--corpus", "/does/not/exist.jsonl",
            "--checkpoint", str(workspace["checkpoint"]),
            "--vocab", str(workspace["vocab"]),
            "--out-index", "/tmp/x.idx"])
        assert code == 1

    def test_config_file_defaults_and_flag_precedence(self, workspace, tmp_path):
        config = {"corpus": str(workspace["corpus"]),
                  "checkpoint": str(workspace["checkpoint"]),
                  "vocab": str(workspace["vocab"]),
                  "index": str(workspace["index"]),
                  "k": 2, "title": "cardexumab"}
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(config), encoding="utf-8")
        code, out = run_cli(["search", "--config", str(config_path), "--json"])
        assert code == 0
        assert len(json.loads(out)["results"]) == 2
        # explicit flag beats the config value
        code, out = run_cli(["search", "--config", str(config_path),
                             "--json", "--k", "4"])
        assert code == 0
        assert len(json.loads(out)["results"]) == 4

    def test_config_unknown_key_rejected(self, workspace, tmp_path):
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps({"nonsense": 1}), encoding="utf-8")
        code, _ = run_cli(["search", "--config", str(config_path)])
        assert code == 1

    def test_export_command(self, workspace, tmp_path):
        out_tsv = tmp_path / "emb.tsv"
        code, _ = run_cli([
            "export-embeddings", "--index", str(workspace["index"]),
            "--corpus", str(workspace["corpus"]), "--out-tsv", str(out_tsv)])
        assert code == 0
        assert out_tsv.exists()

    def test_predict_outcome_command(self, workspace, tmp_path):
        out_csv = tmp_path / "preds.csv"
        code, out = run_cli([
            "predict-outcome", "--corpus", str(workspace["corpus"]),
            "--index", str(workspace["index"]),
            "--epochs", "30", "--out-csv", str(out_csv)])
        assert code == 0
        assert "ROC-AUC" in out
        lines = out_csv.read_text().splitlines()
        assert lines[0] == "id,probability,label"
        assert len(lines) > 1


class TestPipeline:
    def test_pretrain_train_index_search(self, workspace, tmp_path):
        ckpt = tmp_path / "mlm.ckpt"
        vocab_path = tmp_path / "mlm.vocab"
        code, out = run_cli([
            "pretrain-mlm", "--corpus", str(workspace["corpus"]),
            "--out-checkpoint", str(ckpt), "--out-vocab", str(vocab_path),
            "--dim", "16", "--layers", "1", "--heads", "2", "--max-len", "32",
            "--epochs", "1", "--batch-size", "100", "--min-freq", "5"])
        assert code == 0 and ckpt.exists() and vocab_path.exists()

        trained = tmp_path / "trained.ckpt"
        history = tmp_path / "history.csv"
        code, out = run_cli([
            "train", "--corpus", str(workspace["corpus"]),
            "--knowledge", str(workspace["knowledge"]),
            "--vocab", str(vocab_path), "--init-checkpoint", str(ckpt),
            "--out-checkpoint", str(trained), "--epochs", "1",
            "--batch-size", "100", "--learning-rate", "1e-3",
            "--history-csv", str(history)])
        assert code == 0 and trained.exists()
        assert history.read_text().startswith("step,loss_g,loss_l,loss")

        index_path = tmp_path / "trained.idx"
        code, _ = run_cli([
            "index", "--corpus", str(workspace["corpus"]),
            "--checkpoint", str(trained), "--vocab", str(vocab_path),
            "--out-index", str(index_path)])
        assert code == 0

        code, out = run_cli([
            "search", "--index", str(index_path), "--checkpoint", str(trained),
            "--vocab", str(vocab_path), "--corpus", str(workspace["corpus"]),
            "--id", "SYN0000", "--k", "1", "--json"])
        assert code == 0
        top = json.loads(out)["results"][0]
        assert top["id"] != "SYN0000"
