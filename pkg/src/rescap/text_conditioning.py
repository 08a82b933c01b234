"""Caption-side conditioning levers for text-to-image restoration pipelines.

Three manipulations live here, all pure functions over immutable values:

- token richness: repeat the 20 tokens before EOS to lengthen an encoded
  sequence beyond the 77-token base window, which drives texture richness in
  the restored output;
- text relevance: replace a seeded fraction of caption words with
  non-meaningful fillers ("the"/"for"), degrading relevance at fixed length;
- harmful descriptions: detect and strip degradation/photography phrasing
  (bokeh, blur, noise, ...) that induces blur in restored images, splitting a
  caption into a content part and the removed degradation spans.

A deterministic hash-based encoder stub stands in for a real CLIP-style text
encoder so everything is testable without model weights.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidInputError, SequenceTooShortError

BASE_WINDOW = 77
RICHNESS_BLOCK = 20
MAX_SCHEDULE_ERROR = 10
DEFAULT_FILLERS = ("the", "for")

_BOS_MARKER = "<|start|>"
_EOS_MARKER = "<|end|>"

_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")
_CLAUSE_SPLIT = re.compile(r"(?<=[,;:])\s+")
# prefix punctuation / alphanumeric core / suffix punctuation of one token
_TOKEN_PARTS = re.compile(r"^([^A-Za-z0-9]*)([A-Za-z0-9](?:.*[A-Za-z0-9])?)([^A-Za-z0-9]*)$")


@dataclass(eq=False)
class TokenSequence:
    """An encoded text: a (T, d) embedding matrix plus the EOS position.

    A freshly encoded sequence always has T == 77 (the base encoder window);
    richness extension produces longer sequences. Embeddings after
    ``eos_index`` are padding.
    """

    embeddings: np.ndarray
    eos_index: int
    source_text: str | None = None

    def __post_init__(self) -> None:
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[1] < 1:
            raise InvalidInputError(f"embeddings must be (T, d) with d > 0, got {emb.shape}")
        if not 0 <= self.eos_index < emb.shape[0]:
            raise InvalidInputError(
                f"eos_index {self.eos_index} out of range for length {emb.shape[0]}"
            )
        self.embeddings = emb

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass(frozen=True)
class CaptionRecord:
    """A caption split into its content part and removed degradation spans.

    ``content_part`` always equals ``text`` with exactly the
    ``degradation_part`` spans removed, up to whitespace normalization;
    ``word_count`` counts whitespace-delimited words of ``text``.
    """

    text: str
    content_part: str
    degradation_part: tuple[str, ...]
    word_count: int
    declared_token_length: int | None = None

    @classmethod
    def from_text(cls, text: str, declared_token_length: int | None = None) -> "CaptionRecord":
        """Wrap raw caption text as an unpartitioned record."""
        return cls(
            text=text,
            content_part=text,
            degradation_part=(),
            word_count=len(text.split()),
            declared_token_length=declared_token_length,
        )

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "content_part": self.content_part,
            "degradation_part": list(self.degradation_part),
            "word_count": self.word_count,
            "declared_token_length": self.declared_token_length,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CaptionRecord":
        return cls(
            text=d["text"],
            content_part=d["content_part"],
            degradation_part=tuple(d.get("degradation_part", ())),
            word_count=int(d["word_count"]),
            declared_token_length=d.get("declared_token_length"),
        )


@dataclass(frozen=True)
class HarmfulLexicon:
    """Lowercase phrase patterns plus the granularity at which matches are cut.

    ``scope`` is one of "phrase" (remove the matched phrase only), "clause"
    (remove the containing comma/semicolon clause), or "sentence" (remove the
    containing sentence).
    """

    phrases: tuple[str, ...]
    scope: str = "sentence"

    def __post_init__(self) -> None:
        if not self.phrases:
            raise InvalidInputError("lexicon must contain at least one phrase")
        if any(not p for p in self.phrases):
            raise InvalidInputError("lexicon phrases must be non-empty")
        if self.scope not in ("phrase", "clause", "sentence"):
            raise InvalidInputError(f"unknown scope {self.scope!r}")


_DEFAULT_HARMFUL_PHRASES = (
    "blurred",
    "blurry",
    "out of focus",
    "soft focus",
    "bokeh",
    "bokeh effect",
    "shallow depth of field",
    "low resolution",
    "noisy",
    "grainy",
    "compression artifacts",
    "pixelated",
    "overexposed",
    "underexposed",
)


def default_harmful_lexicon(scope: str = "sentence") -> HarmfulLexicon:
    """The built-in degradation/photography lexicon, sentence scope by default."""
    return HarmfulLexicon(phrases=_DEFAULT_HARMFUL_PHRASES, scope=scope)


def _token_rng(word: str) -> np.random.Generator:
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def _token_vector(word: str, d: int) -> np.ndarray:
    return _token_rng(word).standard_normal(d)


def encode_stub(text: str, d: int) -> TokenSequence:
    """Deterministic stand-in for a CLIP-style text encoder.

    Produces a 77-token sequence: a start vector, one hashed vector per word
    (capped at 75 words), an end vector at ``eos_index = min(words, 75) + 1``,
    and zero padding after it. Equal inputs always yield bit-identical output.
    """
    if not text:
        raise InvalidInputError("text must be non-empty")
    if d < 1:
        raise InvalidInputError(f"embedding dimension must be positive, got {d}")
    words = text.split()[:BASE_WINDOW - 2]
    eos_index = len(words) + 1
    emb = np.zeros((BASE_WINDOW, d), dtype=np.float64)
    emb[0] = _token_vector(_BOS_MARKER, d)
    for i, word in enumerate(words, start=1):
        emb[i] = _token_vector(word, d)
    emb[eos_index] = _token_vector(_EOS_MARKER, d)
    return TokenSequence(embeddings=emb, eos_index=eos_index, source_text=text)


def extend_richness(seq: TokenSequence, k: int) -> TokenSequence:
    """Lengthen a 77-token sequence by tiling the 20 tokens before EOS k times.

    The repeated block excludes the EOS token; EOS is re-appended after the
    last repetition and the original padding follows it, so the result is a
    well-formed window of length 77 + 20*k with eos_index shifted by 20*k.
    ``k == 0`` returns an equal copy.
    """
    if k < 0:
        raise InvalidInputError(f"repeat count must be non-negative, got {k}")
    if seq.length != BASE_WINDOW:
        raise InvalidInputError(
            f"only base {BASE_WINDOW}-token sequences can be extended, got length {seq.length}"
        )
    if seq.eos_index < RICHNESS_BLOCK + 1:
        raise SequenceTooShortError(
            f"need at least {RICHNESS_BLOCK} non-EOS tokens before EOS, "
            f"got eos_index {seq.eos_index}"
        )
    eos = seq.eos_index
    block = seq.embeddings[eos - RICHNESS_BLOCK : eos]
    parts = [seq.embeddings[:eos]]
    parts.extend([block] * k)
    parts.append(seq.embeddings[eos:])  # EOS + original padding
    return TokenSequence(
        embeddings=np.concatenate(parts, axis=0),
        eos_index=eos + RICHNESS_BLOCK * k,
        source_text=seq.source_text,
    )


def richness_schedule(target_token_length: int) -> int:
    """Repeat count whose extended length 77 + 20k is nearest the target.

    Ties between the lengths above and below round down. The achieved length
    is always within 10 tokens of the target.
    """
    if target_token_length < BASE_WINDOW:
        raise InvalidInputError(
            f"target must be at least {BASE_WINDOW} tokens, got {target_token_length}"
        )
    steps = (target_token_length - BASE_WINDOW) / RICHNESS_BLOCK
    k = max(0, int(np.ceil(steps - 0.5)))  # round half down
    return k


def _split_core(token: str) -> tuple[str, str, str]:
    """Split a whitespace token into (prefix, alphanumeric core, suffix)."""
    m = _TOKEN_PARTS.match(token)
    if m is None:
        return "", token, ""
    return m.group(1), m.group(2), m.group(3)


def perturb_relevance(
    caption: CaptionRecord,
    ratio: float,
    seed: int,
    fillers: tuple[str, ...] = DEFAULT_FILLERS,
) -> CaptionRecord:
    """Replace floor(ratio * word_count) seeded word positions with fillers.

    Positions are drawn uniformly without replacement; each replacement swaps
    the alphanumeric core of the token only, keeping attached punctuation, so
    word count is preserved exactly. ``ratio == 0`` returns the caption
    unchanged and the same (caption, ratio, seed) is always reproducible.
    """
    if not 0.0 <= ratio <= 1.0:
        raise InvalidInputError(f"ratio must be in [0, 1], got {ratio}")
    if caption.word_count <= 0:
        raise InvalidInputError("caption must contain at least one word")
    tokens = caption.text.split()
    n_replace = int(ratio * len(tokens))
    if n_replace == 0:
        return caption
    rng = np.random.default_rng(seed)
    positions = rng.choice(len(tokens), size=n_replace, replace=False)
    choices = rng.integers(0, len(fillers), size=n_replace)
    for pos, pick in zip(positions, choices):
        prefix, core, suffix = _split_core(tokens[pos])
        filler = fillers[pick]
        if filler.lower() == core.lower():
            # the word was already this filler; swap to a different one so
            # exactly floor(ratio * n) words visibly change
            for step in range(1, len(fillers)):
                alt = fillers[(pick + step) % len(fillers)]
                if alt.lower() != core.lower():
                    filler = alt
                    break
        tokens[pos] = f"{prefix}{filler}{suffix}"
    new_text = " ".join(tokens)
    surviving = tuple(s for s in caption.degradation_part if s in new_text)
    return CaptionRecord(
        text=new_text,
        content_part=_remove_spans(new_text, surviving),
        degradation_part=surviving,
        word_count=len(tokens),
        declared_token_length=caption.declared_token_length,
    )


def _phrase_pattern(phrase: str) -> re.Pattern:
    escaped = re.escape(phrase).replace(r"\ ", r"\s+")
    return re.compile(rf"\b{escaped}\b", re.IGNORECASE)


def _normalize_ws(text: str) -> str:
    return " ".join(text.split())


def _remove_spans(text: str, spans: tuple[str, ...]) -> str:
    remaining = text
    for span in spans:
        remaining = remaining.replace(span, " ", 1)
    return _normalize_ws(remaining)


def _match_spans(text: str, lexicon: HarmfulLexicon) -> tuple[str, ...]:
    # Longest phrases first so "bokeh effect" wins over "bokeh" at phrase scope.
    patterns = [_phrase_pattern(p) for p in sorted(lexicon.phrases, key=len, reverse=True)]
    if lexicon.scope == "phrase":
        taken: list[tuple[int, int]] = []
        spans: list[tuple[int, str]] = []
        for pat in patterns:
            for m in pat.finditer(text):
                if any(m.start() < e and m.end() > s for s, e in taken):
                    continue
                taken.append((m.start(), m.end()))
                spans.append((m.start(), m.group(0)))
        return tuple(s for _, s in sorted(spans))

    units = _SENTENCE_SPLIT.split(text)
    if lexicon.scope == "clause":
        units = [c for u in units for c in _CLAUSE_SPLIT.split(u)]
    return tuple(u for u in units if u and any(p.search(u) for p in patterns))


def filter_harmful(caption: CaptionRecord, lexicon: HarmfulLexicon | None = None) -> CaptionRecord:
    """Partition a caption into content and degradation/photography spans.

    Every span (at the lexicon's scope granularity) that matches a lexicon
    phrase case-insensitively lands in ``degradation_part``; ``content_part``
    is the text with those spans removed. A caption with no matches comes back
    with ``content_part == text`` and no spans. Filtering the content part
    again never finds anything new.
    """
    lexicon = lexicon or default_harmful_lexicon()
    spans = _match_spans(caption.text, lexicon)
    if not spans:
        return replace(caption, content_part=caption.text, degradation_part=())
    return CaptionRecord(
        text=caption.text,
        content_part=_remove_spans(caption.text, spans),
        degradation_part=spans,
        word_count=caption.word_count,
        declared_token_length=caption.declared_token_length,
    )
