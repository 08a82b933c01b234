"""Request/response bodies for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field

CAPTION_PREVIEW_LIMIT = 240


class CandidateTile(BaseModel):
    candidate_id: str
    restored_image_ref: str
    caption_preview: str = Field(max_length=CAPTION_PREVIEW_LIMIT)
    effective_token_length: int


class AnnotationTask(BaseModel):
    pair_id: str
    lq_thumbnail_ref: str
    candidates: list[CandidateTile]
    status: str


class AnnotationSubmit(BaseModel):
    pair_id: str
    candidate_id: str
    annotator: str
    force: bool = False


class AnnotationAck(BaseModel):
    status: str
    pair_id: str
    candidate_id: str
    queue_depth: int


class LevelProgress(BaseModel):
    pending: int
    done: int


class Progress(BaseModel):
    pending: int
    done: int
    per_level: dict[str, LevelProgress]


class ParseCotRequest(BaseModel):
    cot: str


class ParseCotResponse(BaseModel):
    predicted_length: int
    description: str


class EmitCotRequest(BaseModel):
    predicted_length: int
    description: str


class EmitCotResponse(BaseModel):
    cot: str


class FilterHarmfulRequest(BaseModel):
    text: str
    scope: str = "sentence"


class FilterHarmfulResponse(BaseModel):
    content_part: str
    degradation_part: list[str]
    matched: bool


class PerturbRequest(BaseModel):
    text: str
    ratio: float
    seed: int


class PerturbResponse(BaseModel):
    text: str
    replaced: int
    word_count: int


class OffsetAnnotation(BaseModel):
    image_id: str
    optimal_length: int
    acceptable_lengths: list[int] = Field(default_factory=list)


class OffsetPrediction(BaseModel):
    image_id: str
    predicted_length: int


class OffsetRequest(BaseModel):
    annotations: list[OffsetAnnotation]
    predictions: list[OffsetPrediction]


class OffsetResponse(BaseModel):
    mean_offset: float
    count: int


class UiConfig(BaseModel):
    api_base: str


class ErrorBody(BaseModel):
    error: str
    kind: str
