"""Read-only HTTP search endpoint over a built index.

Two routes: GET /health (version and index size) and GET /search (query
parameters mirroring the CLI search flags). Responses are byte-identical to
the CLI's --json output for the same query.
"""

from __future__ import annotations

from fastapi import FastAPI, Response
from fastapi.responses import JSONResponse

from . import __version__
from .app import QUERY_FIELDS, AppError, SearchEngine, render_results_json


def create_app(engine: SearchEngine) -> FastAPI:
    app = FastAPI(title="trialkit search", version=__version__)

    @app.get("/health")
    def health() -> JSONResponse:
        return JSONResponse({
            "status": "ok",
            "version": __version__,
            "n_docs": len(engine.index),
            "dim": engine.index.dim,
        })

    @app.get("/search")
    def search_route(
        id: str | None = None,
        title: str | None = None,
        intervention: str | None = None,
        disease: str | None = None,
        outcome: str | None = None,
        keywords: str | None = None,
        context: str | None = None,
        k: int = 10,
    ) -> Response:
        attrs = {name: value for name, value in (
            ("title", title), ("intervention", intervention), ("disease", disease),
            ("outcome", outcome), ("keywords", keywords), ("context", context),
        ) if value}
        if k < 1:
            return JSONResponse({"error": "k must be >= 1"}, status_code=400)
        try:
            rows = engine.run(id, attrs, k)
        except AppError as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        except Exception as exc:  # encode/search failure on a valid request
            return JSONResponse({"error": f"internal: {exc}"}, status_code=500)
        return Response(content=render_results_json(rows),
                        media_type="application/json")

    return app


def serve(engine: SearchEngine, host: str = "127.0.0.1", port: int = 8000) -> None:
    import uvicorn

    uvicorn.run(create_app(engine), host=host, port=port)
