"""HTTP surface over sessions: SSE token streams, mid-stream future swaps,
transcripts, and realization scoring.

Error responses use one closed vocabulary, {"error": {"code", "message"}}:
INVALID_REQUEST and EMPTY_FUTURE and CONTEXT_TOO_LONG map to 400,
UNKNOWN_SESSION to 404, SESSION_BUSY to 409, MODEL_NOT_LOADED to 503.
Each session serializes behind its own lock; a second caller gets 409
instead of a queue, because a swap landing mid-stream would otherwise
interleave with the very tokens it was meant to steer.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, StreamingResponse
from pydantic import BaseModel, ConfigDict, Field

from .evaluation import realization_score
from .generation import (
    CONTEXT_TOO_LONG,
    EMPTY_FUTURE,
    INVALID_REQUEST,
    GenerationError,
    SamplingParams,
    Session,
    complete_sentences,
)
from .idf import IdfTable
from .model import InferenceModel, ModelError

UNKNOWN_SESSION = "UNKNOWN_SESSION"
SESSION_BUSY = "SESSION_BUSY"
MODEL_NOT_LOADED = "MODEL_NOT_LOADED"

_STATUS = {
    INVALID_REQUEST: 400,
    EMPTY_FUTURE: 400,
    CONTEXT_TOO_LONG: 400,
    UNKNOWN_SESSION: 404,
    SESSION_BUSY: 409,
    MODEL_NOT_LOADED: 503,
}


class ApiError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.status = _STATUS[code]


def _error_response(code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=_STATUS[code],
                        content={"error": {"code": code, "message": message}})


class ParamsBody(BaseModel):
    model_config = ConfigDict(extra="forbid")
    temperature: float = 0.9
    top_k: int = 40
    top_p: float = 0.95
    max_new_tokens: int = 64
    seed: int = 0
    greedy: bool = False


class CreateSessionBody(BaseModel):
    model_config = ConfigDict(extra="forbid")
    context: str
    future: str | None = None
    distance: int = 1
    params: ParamsBody = Field(default_factory=ParamsBody)


class GenerateBody(BaseModel):
    model_config = ConfigDict(extra="forbid")
    max_new_tokens: int | None = None
    stop_after_sentences: int | None = None


class FutureBody(BaseModel):
    model_config = ConfigDict(extra="forbid")
    future: str
    distance: int = 1


class ScoreBody(BaseModel):
    model_config = ConfigDict(extra="forbid")
    text: str
    future: str


@dataclass
class _Entry:
    session: Session
    lock: threading.Lock = field(default_factory=threading.Lock)
    last_access: float = field(default_factory=time.monotonic)


class SessionStore:
    """In-memory sessions with lazy idle expiry; swept on every access."""

    def __init__(self, ttl: float):
        self.ttl = ttl
        self._entries: dict[str, _Entry] = {}
        self._guard = threading.Lock()

    def sweep(self) -> None:
        now = time.monotonic()
        with self._guard:
            dead = [sid for sid, e in self._entries.items()
                    if now - e.last_access > self.ttl and not e.lock.locked()]
            for sid in dead:
                del self._entries[sid]

    def add(self, session: Session) -> str:
        self.sweep()
        sid = uuid.uuid4().hex[:16]
        with self._guard:
            self._entries[sid] = _Entry(session=session)
        return sid

    def get(self, sid: str) -> _Entry:
        self.sweep()
        with self._guard:
            entry = self._entries.get(sid)
        if entry is None:
            raise ApiError(UNKNOWN_SESSION, f"no session {sid}")
        entry.last_access = time.monotonic()
        return entry


def _transcript(sid: str, session: Session) -> dict:
    return {
        "id": sid,
        "context": session.context_text,
        "generated": session.generated_text,
        "n_tokens": len(session.generated_ids),
        "done": session.eos_reached,
        "futures": [
            {"text": f.text, "distance": f.distance,
             "token_offset": f.token_offset, "char_offset": f.char_offset}
            for f in session.futures
        ],
    }


def _sse(event: str, payload: dict) -> str:
    return f"event: {event}\ndata: {json.dumps(payload)}\n\n"


def create_app(model: InferenceModel | None, idf_table: IdfTable | None = None,
               session_ttl: float = 1800.0, ui_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="futuresight", docs_url=None, redoc_url=None)
    store = SessionStore(ttl=session_ttl)
    app.state.sessions = store

    @app.exception_handler(ApiError)
    async def _api_error(_req: Request, exc: ApiError):
        return _error_response(exc.code, str(exc))

    @app.exception_handler(GenerationError)
    async def _gen_error(_req: Request, exc: GenerationError):
        return _error_response(exc.code, str(exc))

    @app.exception_handler(ModelError)
    async def _model_error(_req: Request, exc: ModelError):
        return _error_response(INVALID_REQUEST, str(exc))

    @app.exception_handler(RequestValidationError)
    async def _validation(_req: Request, exc: RequestValidationError):
        return _error_response(INVALID_REQUEST, str(exc.errors()[:1]))

    def need_model() -> InferenceModel:
        if model is None:
            raise ApiError(MODEL_NOT_LOADED, "no checkpoint is loaded")
        return model

    @app.post("/v1/sessions", status_code=201)
    def create_session(body: CreateSessionBody):
        m = need_model()
        params = SamplingParams(**body.params.model_dump())
        session = Session(m, body.context, body.future, body.distance, params)
        sid = store.add(session)
        return {"id": sid}

    @app.get("/v1/sessions/{sid}")
    def get_session(sid: str):
        entry = store.get(sid)
        return _transcript(sid, entry.session)

    @app.post("/v1/sessions/{sid}/generate")
    def generate_stream(sid: str, body: GenerateBody):
        entry = store.get(sid)
        session = entry.session
        budget = (session.params.max_new_tokens
                  if body.max_new_tokens is None else body.max_new_tokens)
        if budget < 0 or (body.stop_after_sentences is not None
                          and body.stop_after_sentences < 1):
            raise ApiError(INVALID_REQUEST, "budget fields must be non-negative")
        if not entry.lock.acquire(blocking=False):
            raise ApiError(SESSION_BUSY, "another request holds this session")

        def events():
            try:
                base = len(session.generated_ids)
                base_sentences = complete_sentences(session.generated_text)
                emitted = 0
                reason = "budget"
                while emitted < budget:
                    res = session.step()
                    if res is None:
                        reason = "eos" if session.eos_reached else "length"
                        break
                    emitted += 1
                    yield _sse("token", {
                        "index": base + emitted - 1,
                        "token_id": res.token_id,
                        "piece": res.piece,
                    })
                    if body.stop_after_sentences is not None:
                        done = (complete_sentences(session.generated_text)
                                - base_sentences)
                        if done >= body.stop_after_sentences:
                            reason = "sentences"
                            break
                yield _sse("end", {"reason": reason, "n_tokens": emitted,
                                   "total_tokens": len(session.generated_ids)})
            finally:
                entry.last_access = time.monotonic()
                entry.lock.release()

        return StreamingResponse(events(), media_type="text/event-stream",
                                 headers={"cache-control": "no-cache"})

    @app.put("/v1/sessions/{sid}/future")
    def swap_future(sid: str, body: FutureBody):
        entry = store.get(sid)
        if not entry.lock.acquire(blocking=False):
            raise ApiError(SESSION_BUSY, "another request holds this session")
        try:
            ms = entry.session.set_future(body.future, body.distance)
        finally:
            entry.last_access = time.monotonic()
            entry.lock.release()
        return {"ok": True, "recompute_ms": ms}

    @app.post("/v1/score/realization")
    def score_realization(body: ScoreBody):
        if idf_table is None:
            raise ApiError(MODEL_NOT_LOADED, "no idf table is loaded")
        return {"score": realization_score(body.text, body.future, idf_table)}

    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
