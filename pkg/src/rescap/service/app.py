"""FastAPI app: annotation task queue over a run directory plus core ops.

The task queue hands each pending pair to at most one annotator at a time
via in-memory leases with a TTL; submissions flow through the pipeline's
atomic annotation ingest, so the queue survives restarts (leases do not,
which only means a task may be re-issued).
"""

from __future__ import annotations

import hashlib
import threading
import time
from pathlib import Path
from typing import Callable

from fastapi import FastAPI, Query, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from ..cot_captioner import (
    CoTCaption,
    LengthAnnotation,
    emit_cot,
    mean_offset,
    parse_cot,
)
from ..errors import (
    AnnotationConflictError,
    CoTParseError,
    InvalidInputError,
    MismatchError,
    NotFoundError,
    StaleLeaseError,
    ToolkitError,
)
from ..imaging import thumbnail_png
from ..pipeline import DataPipeline, PairRecord
from ..text_conditioning import (
    CaptionRecord,
    default_harmful_lexicon,
    filter_harmful,
    perturb_relevance,
)
from ..util import atomic_write_bytes
from . import schemas

THUMBNAIL_LONG_EDGE = 512


class LeaseManager:
    """pair_id -> (annotator, expiry); acquisition refreshes the TTL."""

    def __init__(self, ttl_seconds: float, now: Callable[[], float] = time.time) -> None:
        self.ttl_seconds = ttl_seconds
        self._now = now
        self._leases: dict[str, tuple[str, float]] = {}
        self._lock = threading.Lock()

    def holder(self, pair_id: str) -> str | None:
        with self._lock:
            lease = self._leases.get(pair_id)
            if lease is None or lease[1] <= self._now():
                return None
            return lease[0]

    def try_acquire(self, pair_id: str, annotator: str) -> bool:
        with self._lock:
            lease = self._leases.get(pair_id)
            if lease is not None and lease[1] > self._now() and lease[0] != annotator:
                return False
            self._leases[pair_id] = (annotator, self._now() + self.ttl_seconds)
            return True

    def validate(self, pair_id: str, annotator: str) -> bool:
        return self.holder(pair_id) == annotator

    def release(self, pair_id: str) -> None:
        with self._lock:
            self._leases.pop(pair_id, None)


def _error_response(status: int, exc: Exception) -> JSONResponse:
    body = schemas.ErrorBody(error=str(exc), kind=type(exc).__name__)
    return JSONResponse(status_code=status, content=body.model_dump())


def _restorable(pair: PairRecord) -> list:
    return [c for c in pair.candidates if c.restoration is not None]


def create_app(
    run_dir: str | Path,
    lease_ttl: float = 600.0,
    ui_origin: str = "*",
    now: Callable[[], float] = time.time,
    pipeline: DataPipeline | None = None,
    ui_dir: str | Path | None = None,
    api_base: str = "",
) -> FastAPI:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise NotFoundError(f"run directory missing: {run_dir}")
    if ui_dir is not None and not Path(ui_dir).is_dir():
        raise NotFoundError(f"UI bundle directory missing: {ui_dir}")
    pipeline = pipeline or DataPipeline(run_dir, seed=0)
    leases = LeaseManager(lease_ttl, now=now)
    images_dir = pipeline.store.images_dir

    app = FastAPI(title="caption-conditioning annotation service")
    app.state.pipeline = pipeline
    app.state.leases = leases
    app.add_middleware(
        CORSMiddleware,
        allow_origins=[ui_origin] if ui_origin != "*" else ["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.exception_handler(NotFoundError)
    async def _not_found(request: Request, exc: NotFoundError):
        return _error_response(404, exc)

    @app.exception_handler(AnnotationConflictError)
    async def _conflict(request: Request, exc: AnnotationConflictError):
        return _error_response(409, exc)

    @app.exception_handler(StaleLeaseError)
    async def _stale(request: Request, exc: StaleLeaseError):
        return _error_response(409, exc)

    @app.exception_handler(CoTParseError)
    async def _parse_error(request: Request, exc: CoTParseError):
        return _error_response(422, exc)

    @app.exception_handler(InvalidInputError)
    async def _invalid(request: Request, exc: InvalidInputError):
        return _error_response(422, exc)

    @app.exception_handler(MismatchError)
    async def _mismatch(request: Request, exc: MismatchError):
        return _error_response(422, exc)

    @app.exception_handler(ToolkitError)
    async def _other(request: Request, exc: ToolkitError):
        return _error_response(500, exc)

    # -- annotation queue ---------------------------------------------------

    def _pending_pairs() -> list[PairRecord]:
        return [p for p in pipeline.store.load_pairs() if not p.annotated]

    def _ensure_thumbnail(pair: PairRecord) -> str:
        thumb_name = f"thumb-{pair.meta.image_id}.png"
        thumb_path = images_dir / thumb_name
        if not thumb_path.is_file():
            lq_png = (pipeline.store.run_dir / pair.lq_ref).read_bytes()
            atomic_write_bytes(thumb_path, thumbnail_png(lq_png, THUMBNAIL_LONG_EDGE))
        return f"/images/{thumb_name}"

    def _task_for(pair: PairRecord) -> schemas.AnnotationTask:
        tiles = sorted(
            (
                schemas.CandidateTile(
                    candidate_id=c.restoration.candidate_id,
                    restored_image_ref="/" + c.restoration.restored_image_ref,
                    caption_preview=c.caption.text[: schemas.CAPTION_PREVIEW_LIMIT],
                    effective_token_length=c.restoration.effective_token_length,
                )
                for c in _restorable(pair)
            ),
            key=lambda t: t.effective_token_length,
        )
        return schemas.AnnotationTask(
            pair_id=pair.pair_id,
            lq_thumbnail_ref=_ensure_thumbnail(pair),
            candidates=tiles,
            status="pending",
        )

    @app.get("/api/tasks/next")
    def next_task(annotator: str = Query(min_length=1)):
        # Oldest pending pair not leased to someone else; re-serving the
        # caller's own live lease keeps retries harmless.
        for pair in _pending_pairs():
            if not _restorable(pair):
                continue
            if leases.try_acquire(pair.pair_id, annotator):
                return _task_for(pair)
        return Response(status_code=204)

    @app.post("/api/annotations", response_model=schemas.AnnotationAck)
    def submit_annotation(body: schemas.AnnotationSubmit):
        pairs = pipeline.store.load_pairs()
        pair = next((p for p in pairs if p.pair_id == body.pair_id), None)
        if pair is None:
            raise NotFoundError(f"unknown pair {body.pair_id!r}")
        already_same = (
            pair.annotated
            and pair.chosen_candidate_id == body.candidate_id
            and pair.annotator == body.annotator
        )
        if not already_same and not body.force:
            if not leases.validate(body.pair_id, body.annotator):
                raise StaleLeaseError(
                    f"annotator {body.annotator!r} holds no live lease on {body.pair_id!r}"
                )
        pipeline.ingest_annotation(body.pair_id, body.candidate_id, body.annotator)
        leases.release(body.pair_id)
        return schemas.AnnotationAck(
            status="done",
            pair_id=body.pair_id,
            candidate_id=body.candidate_id,
            queue_depth=len(_pending_pairs()),
        )

    @app.get("/api/progress", response_model=schemas.Progress)
    def progress():
        pairs = pipeline.store.load_pairs()
        per_level: dict[str, schemas.LevelProgress] = {}
        pending = done = 0
        for pair in pairs:
            level = pair.meta.degradation_level
            bucket = per_level.setdefault(level, schemas.LevelProgress(pending=0, done=0))
            if pair.annotated:
                done += 1
                bucket.done += 1
            else:
                pending += 1
                bucket.pending += 1
        return schemas.Progress(pending=pending, done=done, per_level=per_level)

    # -- images ----------------------------------------------------------------

    @app.get("/images/{name:path}")
    def get_image(name: str, request: Request):
        path = (images_dir / name).resolve()
        if images_dir.resolve() not in path.parents or not path.is_file():
            raise NotFoundError(f"no such image {name!r}")
        data = path.read_bytes()
        etag = '"' + hashlib.blake2b(data, digest_size=8).hexdigest() + '"'
        if request.headers.get("if-none-match") == etag:
            return Response(status_code=304)
        return Response(
            content=data,
            media_type="image/png",
            headers={"ETag": etag, "Cache-Control": "max-age=31536000, immutable"},
        )

    # -- core ops over the wire ---------------------------------------------

    @app.post("/api/cot/parse", response_model=schemas.ParseCotResponse)
    def parse_cot_endpoint(body: schemas.ParseCotRequest):
        caption = parse_cot(body.cot)
        return schemas.ParseCotResponse(
            predicted_length=caption.predicted_length, description=caption.description
        )

    @app.post("/api/cot/emit", response_model=schemas.EmitCotResponse)
    def emit_cot_endpoint(body: schemas.EmitCotRequest):
        return schemas.EmitCotResponse(
            cot=emit_cot(
                CoTCaption(
                    predicted_length=body.predicted_length, description=body.description
                )
            )
        )

    @app.post("/api/text/filter-harmful", response_model=schemas.FilterHarmfulResponse)
    def filter_harmful_endpoint(body: schemas.FilterHarmfulRequest):
        record = filter_harmful(
            CaptionRecord.from_text(body.text), default_harmful_lexicon(body.scope)
        )
        return schemas.FilterHarmfulResponse(
            content_part=record.content_part,
            degradation_part=list(record.degradation_part),
            matched=bool(record.degradation_part),
        )

    @app.post("/api/text/perturb", response_model=schemas.PerturbResponse)
    def perturb_endpoint(body: schemas.PerturbRequest):
        record = perturb_relevance(CaptionRecord.from_text(body.text), body.ratio, body.seed)
        replaced = int(body.ratio * record.word_count)
        return schemas.PerturbResponse(
            text=record.text, replaced=replaced, word_count=record.word_count
        )

    @app.post("/api/metrics/offset", response_model=schemas.OffsetResponse)
    def offset_endpoint(body: schemas.OffsetRequest):
        annotations = [
            LengthAnnotation(
                image_id=a.image_id,
                optimal_length=a.optimal_length,
                acceptable_lengths=tuple(a.acceptable_lengths),
            )
            for a in body.annotations
        ]
        predictions = {
            p.image_id: CoTCaption(predicted_length=p.predicted_length, description="-")
            for p in body.predictions
        }
        value = mean_offset(annotations, predictions)
        return schemas.OffsetResponse(mean_offset=value, count=len(annotations))

    @app.get("/api/health")
    def health():
        return {"status": "ok", "run_dir": str(run_dir)}

    @app.get("/api/config", response_model=schemas.UiConfig)
    def ui_config():
        return schemas.UiConfig(api_base=api_base)

    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles

        # mounted last so every /api and /images route wins over the bundle
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
