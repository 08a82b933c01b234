"""Length-first captioning: emit/parse the caption wire format and score it.

A length-first caption is serialized as ``<L, description>`` where L is the
predicted token count. The grammar is exact and round-trippable: the closing
``>`` is the final character and any ``>`` inside the description is escaped
as ``\\>``.

The offset level penalizes the gap between an annotated optimal length and a
predicted one, with a 15-token dead zone: E = max(|L_o - L| - 15, 0) / 30.

Captioner clients produce these captions for an image + prompt template. Two
ship here: a deterministic stub keyed off each image's degradation-level
metadata (heavier degradation maps to longer captions), and an HTTP client
speaking a minimal JSON contract so a real multimodal model can sit behind
one seam. Clients either return a parseable caption or raise a typed
transport / parse / not-found error, never a silent empty string.
"""

from __future__ import annotations

import base64
import importlib.resources
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import httpx
import numpy as np

from ._http import post_with_retries
from .errors import (
    BackendError,
    CoTParseError,
    InvalidInputError,
    MismatchError,
    NotFoundError,
)
from .util import stable_seed

OFFSET_DEAD_ZONE = 15
OFFSET_SCALE = 30

LENGTH_PROMPT_NAME = "caption_length_prompt.txt"
COT_PROMPT_NAME = "caption_cot_prompt.txt"


@dataclass(frozen=True)
class CoTCaption:
    """A predicted token length paired with the caption text."""

    predicted_length: int
    description: str

    def __post_init__(self) -> None:
        if self.predicted_length <= 0:
            raise InvalidInputError(
                f"predicted_length must be positive, got {self.predicted_length}"
            )
        if not self.description:
            raise InvalidInputError("description must be non-empty")


@dataclass(frozen=True)
class LengthAnnotation:
    """A human-annotated optimal token length for one image.

    ``acceptable_lengths`` may list extra lengths judged equally good; scoring
    uses whichever annotated length is nearest the prediction.
    """

    image_id: str
    optimal_length: int
    acceptable_lengths: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.optimal_length <= 0:
            raise InvalidInputError(f"optimal_length must be positive, got {self.optimal_length}")
        if any(l <= 0 for l in self.acceptable_lengths):
            raise InvalidInputError("acceptable_lengths must all be positive")


def emit_cot(caption: CoTCaption) -> str:
    """Serialize as '<' INT ', ' TEXT '>', escaping '>' in TEXT as '\\>'."""
    escaped = caption.description.replace(">", "\\>")
    return f"<{caption.predicted_length}, {escaped}>"


def _unescape_description(text: str) -> str:
    out: list[str] = []
    i = 0
    while i < len(text):
        if text[i] == "\\" and i + 1 < len(text) and text[i + 1] == ">":
            out.append(">")
            i += 2
        elif text[i] == ">":
            raise CoTParseError("description", "unescaped '>' inside description")
        else:
            out.append(text[i])
            i += 1
    return "".join(out)


def parse_cot(s: str) -> CoTCaption:
    """Inverse of :func:`emit_cot` on its image; typed errors elsewhere."""
    if not s.startswith("<"):
        raise CoTParseError("bracket", "missing opening '<'")
    if not s.endswith(">") or len(s) < 2:
        raise CoTParseError("bracket", "missing closing '>'")
    body = s[1:-1]
    sep = body.find(", ")
    if sep < 0:
        raise CoTParseError("separator", "missing ', ' between length and description")
    length_text = body[:sep]
    if not length_text.isdigit():
        raise CoTParseError("length", f"not a decimal integer: {length_text!r}")
    length = int(length_text)
    if length <= 0:
        raise CoTParseError("length", f"must be positive: {length}")
    description = _unescape_description(body[sep + 2 :])
    if not description:
        raise CoTParseError("description", "empty description")
    return CoTCaption(predicted_length=length, description=description)


def offset_level(annotated_length: int, predicted_length: int) -> float:
    """max(|L_o - L| - 15, 0) / 30: zero inside the dead zone, linear beyond."""
    if annotated_length <= 0 or predicted_length <= 0:
        raise InvalidInputError(
            f"lengths must be positive, got ({annotated_length}, {predicted_length})"
        )
    return max(abs(annotated_length - predicted_length) - OFFSET_DEAD_ZONE, 0) / OFFSET_SCALE


def mean_offset(
    annotations: list[LengthAnnotation],
    predictions: dict[str, CoTCaption],
) -> float:
    """Mean offset level over annotated images; every annotation needs a prediction."""
    if not annotations:
        raise InvalidInputError("annotation set is empty")
    missing = [a.image_id for a in annotations if a.image_id not in predictions]
    if missing:
        raise MismatchError("annotations without predictions", missing)
    total = 0.0
    for ann in annotations:
        predicted = predictions[ann.image_id].predicted_length
        candidates = (ann.optimal_length,) + ann.acceptable_lengths
        total += min(offset_level(l, predicted) for l in candidates)
    return total / len(annotations)


def load_prompt_template(name: str) -> str:
    """Read a packaged prompt template verbatim (trailing newline stripped)."""
    source = importlib.resources.files("rescap.templates") / name
    return source.read_text(encoding="utf-8").rstrip("\n")


def render_length_prompt(target_words: int) -> str:
    """The varying-length caption prompt with its word budget filled in."""
    return load_prompt_template(LENGTH_PROMPT_NAME).replace("XXX", str(target_words))


def cot_prompt() -> str:
    """The prompt used when the captioner chooses the length itself."""
    return load_prompt_template(COT_PROMPT_NAME)


def stub_token_length(text: str) -> int:
    """Token count of the stub tokenizer: one per word plus start/end markers."""
    return len(text.split()) + 2


class CaptionerClient(ABC):
    """Produces a length-first caption for an image id and prompt.

    ``image_png`` carries the image bytes for clients that need pixels (the
    HTTP client forwards them base64-encoded); offline clients may ignore it.
    """

    @abstractmethod
    def caption(
        self, image_id: str, prompt: str, image_png: bytes | None = None
    ) -> CoTCaption:
        ...


# Clean filler vocabulary for generated descriptions; none of these words
# appear in the default harmful lexicon.
_STUB_VOCAB = (
    "stone", "bridge", "river", "meadow", "willow", "lantern", "harbor",
    "rooftop", "garden", "sparrow", "hillside", "market", "canal", "facade",
    "archway", "orchard", "pebble", "shoreline", "terrace", "mosaic",
    "painted", "woven", "carved", "weathered", "sunlit", "narrow", "quiet",
    "open", "tall", "round", "wooden", "copper", "green", "amber", "pale",
)

_STUB_OPENERS = ("image", "shows", "a", "scene", "with")

# Word-count ranges per degradation level; heavier degradation draws longer
# captions, mirroring how useful image information shrinks with severity.
DEFAULT_STUB_LENGTH_TABLE: dict[str, tuple[int, int]] = {
    "light": (90, 130),
    "moderate": (180, 240),
    "heavy": (320, 400),
}


def _parse_word_target(prompt: str) -> int | None:
    marker = "about "
    idx = prompt.find(marker)
    if idx < 0:
        return None
    rest = prompt[idx + len(marker) :]
    digits = ""
    for ch in rest:
        if ch.isdigit():
            digits += ch
        else:
            break
    return int(digits) if digits else None


@dataclass
class StubCaptioner(CaptionerClient):
    """Offline deterministic captioner for pipeline and UI tests.

    ``manifest`` maps image ids to their degradation level. When the prompt
    asks for "about NNN words" the description has exactly NNN words;
    otherwise the word count is drawn (seeded, per image) from
    ``length_table`` for the image's level, so heavier degradation yields
    longer captions. The predicted length is the stub tokenizer's count of the
    emitted description.
    """

    manifest: dict[str, str]
    seed: int = 0
    length_table: dict[str, tuple[int, int]] = field(
        default_factory=lambda: dict(DEFAULT_STUB_LENGTH_TABLE)
    )

    def caption(
        self, image_id: str, prompt: str, image_png: bytes | None = None
    ) -> CoTCaption:
        level = self.manifest.get(image_id)
        if level is None:
            raise NotFoundError(f"image {image_id!r} not in captioner manifest")
        target_words = _parse_word_target(prompt)
        rng = np.random.default_rng(stable_seed(self.seed, image_id, target_words))
        if target_words is None:
            lo, hi = self.length_table[level]
            target_words = int(rng.integers(lo, hi + 1))
        description = self._describe(image_id, target_words, rng)
        return CoTCaption(
            predicted_length=stub_token_length(description),
            description=description,
        )

    def _describe(self, image_id: str, target_words: int, rng: np.random.Generator) -> str:
        words = [*_STUB_OPENERS, image_id]
        while len(words) < target_words:
            words.append(_STUB_VOCAB[int(rng.integers(0, len(_STUB_VOCAB)))])
        return " ".join(words[:target_words])


class HttpCaptionerClient(CaptionerClient):
    """Client for an external captioning service.

    Wire contract: POST {endpoint}/caption with
    ``{"image_id": str, "image_b64": str, "prompt": str}`` returning
    ``200 {"cot": "<L, description>"}`` or an error status with
    ``{"error": str}``. Shareable across workers (httpx clients are
    thread-safe).
    """

    def __init__(
        self,
        endpoint: str,
        client: httpx.Client | None = None,
        timeout: float = 30.0,
        max_attempts: int = 3,
        backoff_base: float = 0.1,
    ) -> None:
        self.endpoint = endpoint.rstrip("/")
        self._client = client or httpx.Client(timeout=timeout)
        self._max_attempts = max_attempts
        self._backoff_base = backoff_base

    def caption(
        self, image_id: str, prompt: str, image_png: bytes | None = None
    ) -> CoTCaption:
        payload = {
            "image_id": image_id,
            "image_b64": base64.b64encode(image_png or b"").decode("ascii"),
            "prompt": prompt,
        }
        response = post_with_retries(
            self._client,
            f"{self.endpoint}/caption",
            payload,
            max_attempts=self._max_attempts,
            backoff_base=self._backoff_base,
        )
        if response.status_code == 404:
            raise NotFoundError(f"captioner does not know image {image_id!r}")
        if response.status_code >= 400:
            raise BackendError(response.status_code, _error_text(response))
        try:
            cot = response.json()["cot"]
        except (KeyError, ValueError) as exc:
            raise CoTParseError("description", f"malformed response body: {exc}") from exc
        return parse_cot(cot)


def _error_text(response: httpx.Response) -> str:
    try:
        return str(response.json().get("error", response.text[:200]))
    except ValueError:
        return response.text[:200]
