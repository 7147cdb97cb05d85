"""HTTP surface: thin JSON routes over :class:`ModelRunner`.

Error vocabulary is deliberately small: 400 for requests the caller must
fix (including body-shape problems that would otherwise surface as 422),
401 when bearer auth is on and the token is wrong, 413 for inputs that
do not fit the model's context window, 503 when every admission slot is
taken. Clients treat 5xx as retryable and 4xx as final.
"""

from __future__ import annotations

from fastapi import Depends, FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .config import ServerConfig
from .model import BadRequest, Busy, ModelRunner, OverLength


class ScoreIn(BaseModel):
    prompt: str = ""
    continuation: str


class ScoreBatchIn(BaseModel):
    items: list[ScoreIn]


class GenerateIn(BaseModel):
    prompt: str = ""
    beam_size: int = 5
    length_penalty: float = 1.0
    stop_chars: list[str] = Field(default_factory=lambda: [",", "."])
    max_tokens: int = 24


class EmbedIn(BaseModel):
    texts: list[str]
    markers: list[str] | None = None


def create_app(config: ServerConfig) -> FastAPI:
    """Load the model once and wire the routes around it."""
    runner = ModelRunner(config)
    app = FastAPI(title="logprob-server")
    app.state.runner = runner
    app.state.config = config

    def require_auth(request: Request) -> None:
        if config.auth_token is None:
            return
        if request.headers.get("authorization") != f"Bearer {config.auth_token}":
            raise HTTPException(status_code=401, detail="missing or invalid bearer token")

    guarded = [Depends(require_auth)]

    @app.exception_handler(BadRequest)
    async def _bad_request(_: Request, exc: BadRequest) -> JSONResponse:
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(OverLength)
    async def _over_length(_: Request, exc: OverLength) -> JSONResponse:
        return JSONResponse(status_code=413, content={"detail": str(exc)})

    @app.exception_handler(Busy)
    async def _busy(_: Request, exc: Busy) -> JSONResponse:
        return JSONResponse(status_code=503, content={"detail": str(exc)})

    @app.exception_handler(RequestValidationError)
    async def _invalid(_: Request, exc: RequestValidationError) -> JSONResponse:
        # Malformed bodies are caller errors like any other: 400, not 422.
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/v1/capabilities", dependencies=guarded)
    def capabilities() -> dict:
        return {
            "score": True,
            "generate": True,
            "embed": True,
            "model": config.model,
            "dim": runner.hidden_size,
        }

    @app.post("/v1/cond_logprob", dependencies=guarded)
    def cond_logprob(body: ScoreIn) -> dict:
        with runner.admit():
            return {"logprob": runner.score(body.prompt, body.continuation)}

    @app.post("/v1/cond_logprob_batch", dependencies=guarded)
    def cond_logprob_batch(body: ScoreBatchIn) -> dict:
        with runner.admit():
            pairs = [(item.prompt, item.continuation) for item in body.items]
            return {"logprobs": runner.score_many(pairs)}

    @app.post("/v1/generate", dependencies=guarded)
    def generate(body: GenerateIn) -> dict:
        with runner.admit():
            text, score = runner.generate(
                body.prompt,
                beam_size=body.beam_size,
                length_penalty=body.length_penalty,
                stop_chars=body.stop_chars,
                max_tokens=body.max_tokens,
            )
        return {"text": text, "score": score}

    @app.post("/v1/embed", dependencies=guarded)
    def embed(body: EmbedIn) -> dict:
        with runner.admit():
            vectors = runner.embed(body.texts, body.markers)
        return {"vectors": vectors, "dim": runner.hidden_size}

    return app
