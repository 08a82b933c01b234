"""Training-data pipeline: HQ -> LQ pairs -> captions -> candidates -> export.

The flow mirrors the human-in-the-loop curation loop: degrade each HQ image
at several zoom ratios, caption the LQ at a ladder of word budgets, restore
once per caption, let an annotator pick the best candidate, and export the
chosen captions in the length-first ``<L, description>`` wire format.

Everything is keyed for reruns: ids are UUIDv4 strings derived from the run
seed and the generating coordinates, image references are run-dir-relative,
and all JSONL writes go through write-temp-then-rename. Rerunning with the
same seed reproduces every byte except timestamps.
"""

from __future__ import annotations

import io
import json
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .cot_captioner import (
    CaptionerClient,
    CoTCaption,
    emit_cot,
    render_length_prompt,
    stub_token_length,
)
from .errors import (
    AnnotationConflictError,
    DuplicateRegistrationError,
    InvalidInputError,
    NotFoundError,
)
from .imaging import array_to_png, png_to_array
from .restoration import RestorationClient, RestorationRequest, RestorationResult
from .text_conditioning import (
    CaptionRecord,
    HarmfulLexicon,
    default_harmful_lexicon,
    filter_harmful,
    richness_schedule,
)
from .util import atomic_write_bytes, atomic_write_text, deterministic_uuid, stable_seed

DEFAULT_WORD_TARGETS = (80, 110, 140, 200, 260, 350, 440)
DEFAULT_EXPORT_TARGET = 5500
FINETUNE_EXPORT_LIMIT = 200

SOURCES = ("unsplash", "imagenet", "sam", "other")
DEGRADATION_LEVELS = ("light", "moderate", "heavy")

# Inclusive zoom-ratio ranges per severity bucket.
ZOOM_BUCKETS = {
    "light": (3.0, 7.0),
    "moderate": (8.0, 10.0),
    "heavy": (15.0, 20.0),
}


def classify_degradation(zoom_ratio: float) -> tuple[str, bool]:
    """Bucket a zoom ratio; returns (level, out_of_paper_range).

    Ratios inside [3,7], [8,10], [15,20] map directly. Anything in the gaps
    maps to the nearest bucket by boundary distance (ties go to the heavier
    bucket) and is flagged.
    """
    if zoom_ratio <= 0:
        raise InvalidInputError(f"zoom_ratio must be positive, got {zoom_ratio}")
    z = float(zoom_ratio)
    for level in DEGRADATION_LEVELS:
        lo, hi = ZOOM_BUCKETS[level]
        if lo <= z <= hi:
            return level, False
    best_level = None
    best_dist = None
    # Iterate lightest-to-heaviest; '<=' lets a later (heavier) tie win.
    for level in DEGRADATION_LEVELS:
        lo, hi = ZOOM_BUCKETS[level]
        dist = max(lo - z, z - hi)
        if best_dist is None or dist <= best_dist:
            best_level, best_dist = level, dist
    return best_level, True


@dataclass(frozen=True)
class LengthSchedule:
    """Word budgets for the caption ladder; gaps widen as captions grow."""

    word_targets: tuple[int, ...] = DEFAULT_WORD_TARGETS

    def __post_init__(self) -> None:
        targets = self.word_targets
        if not targets:
            raise InvalidInputError("schedule must contain at least one word target")
        if any(b <= a for a, b in zip(targets, targets[1:])):
            raise InvalidInputError(f"word targets must be strictly increasing: {targets}")
        gaps = [b - a for a, b in zip(targets, targets[1:])]
        if any(g2 < g1 for g1, g2 in zip(gaps, gaps[1:])):
            raise InvalidInputError(f"gaps between word targets must be non-decreasing: {gaps}")


@dataclass(frozen=True)
class ImageMeta:
    image_id: str
    source: str
    zoom_ratio: float
    degradation_level: str
    degrader_id: str
    device: str | None = None
    out_of_paper_range: bool = False

    def __post_init__(self) -> None:
        if self.source not in SOURCES:
            raise InvalidInputError(f"source must be one of {SOURCES}, got {self.source!r}")
        level, flagged = classify_degradation(self.zoom_ratio)
        if level != self.degradation_level or flagged != self.out_of_paper_range:
            raise InvalidInputError(
                f"degradation_level {self.degradation_level!r} (flagged="
                f"{self.out_of_paper_range}) inconsistent with zoom {self.zoom_ratio}"
            )

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "source": self.source,
            "device": self.device,
            "zoom_ratio": self.zoom_ratio,
            "degradation_level": self.degradation_level,
            "degrader_id": self.degrader_id,
            "out_of_paper_range": self.out_of_paper_range,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImageMeta":
        return cls(
            image_id=d["image_id"],
            source=d["source"],
            device=d.get("device"),
            zoom_ratio=float(d["zoom_ratio"]),
            degradation_level=d["degradation_level"],
            degrader_id=d["degrader_id"],
            out_of_paper_range=bool(d.get("out_of_paper_range", False)),
        )


@dataclass(frozen=True)
class Candidate:
    """One caption at one word budget, plus its restoration when fanned out."""

    caption: CaptionRecord
    target_words: int
    restoration: RestorationResult | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "caption": self.caption.to_dict(),
            "target_words": self.target_words,
            "restoration": self.restoration.to_dict() if self.restoration else None,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Candidate":
        restoration = d.get("restoration")
        return cls(
            caption=CaptionRecord.from_dict(d["caption"]),
            target_words=int(d["target_words"]),
            restoration=RestorationResult.from_dict(restoration) if restoration else None,
            error=d.get("error"),
        )


@dataclass(frozen=True)
class PairRecord:
    pair_id: str
    hq_ref: str
    lq_ref: str
    meta: ImageMeta
    candidates: tuple[Candidate, ...] = ()
    warnings: tuple[str, ...] = ()
    chosen_candidate_id: str | None = None
    annotator: str | None = None
    annotated_at: str | None = None

    def __post_init__(self) -> None:
        if self.chosen_candidate_id is not None:
            known = {
                c.restoration.candidate_id
                for c in self.candidates
                if c.restoration is not None
            }
            if self.chosen_candidate_id not in known:
                raise InvalidInputError(
                    f"chosen_candidate_id {self.chosen_candidate_id!r} "
                    "names no restored candidate"
                )

    @property
    def annotated(self) -> bool:
        return self.chosen_candidate_id is not None

    def chosen_candidate(self) -> Candidate:
        for c in self.candidates:
            if c.restoration and c.restoration.candidate_id == self.chosen_candidate_id:
                return c
        raise NotFoundError(f"pair {self.pair_id} has no chosen candidate")

    def to_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "hq_ref": self.hq_ref,
            "lq_ref": self.lq_ref,
            "meta": self.meta.to_dict(),
            "candidates": [c.to_dict() for c in self.candidates],
            "warnings": list(self.warnings),
            "chosen_candidate_id": self.chosen_candidate_id,
            "annotator": self.annotator,
            "annotated_at": self.annotated_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PairRecord":
        return cls(
            pair_id=d["pair_id"],
            hq_ref=d["hq_ref"],
            lq_ref=d["lq_ref"],
            meta=ImageMeta.from_dict(d["meta"]),
            candidates=tuple(Candidate.from_dict(c) for c in d.get("candidates", ())),
            warnings=tuple(d.get("warnings", ())),
            chosen_candidate_id=d.get("chosen_candidate_id"),
            annotator=d.get("annotator"),
            annotated_at=d.get("annotated_at"),
        )


@dataclass(frozen=True)
class HqImage:
    """One manifest entry: a readable image path plus capture origin."""

    path: str
    source: str = "other"
    device: str | None = None


class Degrader(ABC):
    """HQ PNG + zoom ratio -> LQ PNG; deterministic per seed."""

    @abstractmethod
    def degrade(self, hq_png: bytes, zoom_ratio: float, seed: int) -> bytes:
        ...


@dataclass(frozen=True)
class ClassicalDegrader(Degrader):
    """Blur, downsample by the zoom ratio, add noise, JPEG re-encode.

    A desk-scale stand-in for trained degradation generators. Output
    resolution is the input divided by the zoom ratio, rounded.
    """

    blur_sigma: float = 1.2
    noise_std: float = 0.02
    jpeg_quality: int = 75

    def degrade(self, hq_png: bytes, zoom_ratio: float, seed: int) -> bytes:
        if zoom_ratio <= 0:
            raise InvalidInputError(f"zoom_ratio must be positive, got {zoom_ratio}")
        img = png_to_array(hq_png)
        img = ndimage.gaussian_filter(img, sigma=(self.blur_sigma, self.blur_sigma, 0.0))
        h, w = img.shape[:2]
        out_w = max(1, round(w / zoom_ratio))
        out_h = max(1, round(h / zoom_ratio))
        small = np.asarray(
            Image.fromarray((np.clip(img, 0, 1) * 255).astype(np.uint8)).resize(
                (out_w, out_h), Image.BICUBIC
            ),
            dtype=np.float64,
        ) / 255.0
        rng = np.random.default_rng(seed)
        noisy = np.clip(small + rng.normal(0.0, self.noise_std, small.shape), 0.0, 1.0)
        buf = io.BytesIO()
        Image.fromarray((noisy * 255).astype(np.uint8)).save(
            buf, format="JPEG", quality=self.jpeg_quality
        )
        with Image.open(buf) as decoded:
            return array_to_png(np.asarray(decoded.convert("RGB"), dtype=np.float64) / 255.0)


@dataclass(frozen=True)
class ExportSummary:
    exported: int
    per_level: dict[str, int]
    skipped_unannotated: int
    held_out: int
    target: int
    target_met: bool
    out_path: str

    def to_dict(self) -> dict:
        return {
            "exported": self.exported,
            "per_level": dict(self.per_level),
            "skipped_unannotated": self.skipped_unannotated,
            "held_out": self.held_out,
            "target": self.target,
            "target_met": self.target_met,
            "out_path": self.out_path,
        }


class RunStore:
    """JSONL persistence under one run directory, all writes atomic."""

    def __init__(self, run_dir: str | Path) -> None:
        self.run_dir = Path(run_dir)
        self.images_dir = self.run_dir / "images"
        self.images_dir.mkdir(parents=True, exist_ok=True)
        self.pairs_path = self.run_dir / "pairs.jsonl"
        self.annotations_path = self.run_dir / "annotations.jsonl"
        self.export_path = self.run_dir / "export.jsonl"

    def save_pairs(self, pairs: list[PairRecord]) -> None:
        lines = "".join(json.dumps(p.to_dict(), sort_keys=True) + "\n" for p in pairs)
        atomic_write_text(self.pairs_path, lines)

    def load_pairs(self) -> list[PairRecord]:
        if not self.pairs_path.is_file():
            return []
        pairs = []
        with self.pairs_path.open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    pairs.append(PairRecord.from_dict(json.loads(line)))
        return pairs

    def save_annotations(self, pairs: list[PairRecord]) -> None:
        rows = [
            {
                "pair_id": p.pair_id,
                "candidate_id": p.chosen_candidate_id,
                "annotator": p.annotator,
                "annotated_at": p.annotated_at,
            }
            for p in pairs
            if p.annotated
        ]
        lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
        atomic_write_text(self.annotations_path, lines)


class DataPipeline:
    """Stateful orchestrator bound to one run directory and one seed."""

    def __init__(
        self,
        run_dir: str | Path,
        seed: int,
        schedule: LengthSchedule | None = None,
        lexicon: HarmfulLexicon | None = None,
        export_target: int = DEFAULT_EXPORT_TARGET,
    ) -> None:
        self.store = RunStore(run_dir)
        self.seed = seed
        self.schedule = schedule or LengthSchedule()
        self.lexicon = lexicon or default_harmful_lexicon()
        self.export_target = export_target
        self._degraders: dict[str, Degrader] = {"stub": ClassicalDegrader()}
        self._ingest_lock = threading.Lock()

    # -- degrader registry -------------------------------------------------

    def register_degrader(self, degrader_id: str, degrader: Degrader) -> None:
        if degrader_id in self._degraders:
            raise DuplicateRegistrationError(f"degrader {degrader_id!r} already registered")
        self._degraders[degrader_id] = degrader

    def degrader(self, degrader_id: str) -> Degrader:
        try:
            return self._degraders[degrader_id]
        except KeyError:
            raise NotFoundError(f"degrader {degrader_id!r} not registered") from None

    # -- stage 1: pair generation -------------------------------------------

    def generate_pairs(
        self,
        hq_manifest: list[HqImage],
        degrader_ids: list[str],
        zoom_ratios: list[float],
    ) -> list[PairRecord]:
        """One captionless pair per (hq, degrader, zoom); LQ files written."""
        if not hq_manifest:
            raise InvalidInputError("HQ manifest is empty")
        if not degrader_ids or not zoom_ratios:
            raise InvalidInputError("need at least one degrader id and one zoom ratio")
        degraders = {d: self.degrader(d) for d in degrader_ids}
        pairs = []
        for hq in hq_manifest:
            hq_path = Path(hq.path)
            if not hq_path.is_file():
                raise NotFoundError(f"HQ image not readable: {hq.path}")
            hq_png = hq_path.read_bytes()
            for degrader_id in degrader_ids:
                for zoom in zoom_ratios:
                    key = (hq_path.name, degrader_id, zoom)
                    pair_id = deterministic_uuid("pair", self.seed, *key)
                    image_id = deterministic_uuid("lq", self.seed, *key)
                    lq_png = degraders[degrader_id].degrade(
                        hq_png, zoom, stable_seed(self.seed, *key)
                    )
                    lq_ref = f"images/{image_id}.png"
                    atomic_write_bytes(self.store.run_dir / lq_ref, lq_png)
                    level, flagged = classify_degradation(zoom)
                    pairs.append(
                        PairRecord(
                            pair_id=pair_id,
                            hq_ref=str(hq_path),
                            lq_ref=lq_ref,
                            meta=ImageMeta(
                                image_id=image_id,
                                source=hq.source,
                                device=hq.device,
                                zoom_ratio=zoom,
                                degradation_level=level,
                                degrader_id=degrader_id,
                                out_of_paper_range=flagged,
                            ),
                        )
                    )
        existing = {p.pair_id: p for p in self.store.load_pairs()}
        for p in pairs:
            existing[p.pair_id] = p
        self.store.save_pairs(list(existing.values()))
        return pairs

    # -- stage 2: caption candidates ----------------------------------------

    def generate_caption_candidates(
        self,
        pair: PairRecord,
        captioner: CaptionerClient,
        schedule: LengthSchedule | None = None,
    ) -> PairRecord:
        """One candidate per word budget; captions cleaned before storage.

        Captioner failures are recorded as warnings; the pair keeps whatever
        candidates succeeded.
        """
        if pair.candidates:
            raise InvalidInputError(f"pair {pair.pair_id} already has candidates")
        schedule = schedule or self.schedule
        lq_png = (self.store.run_dir / pair.lq_ref).read_bytes()
        candidates = []
        warnings = list(pair.warnings)
        for target in schedule.word_targets:
            prompt = render_length_prompt(target)
            try:
                cot = captioner.caption(pair.meta.image_id, prompt, lq_png)
            except Exception as exc:
                warnings.append(f"caption@{target}w failed: {type(exc).__name__}: {exc}")
                continue
            candidates.append(
                Candidate(caption=self._clean_caption(cot.description, cot.predicted_length),
                          target_words=target)
            )
        updated = replace(pair, candidates=tuple(candidates), warnings=tuple(warnings))
        self._persist(updated)
        return updated

    def _clean_caption(self, description: str, declared_length: int) -> CaptionRecord:
        """Partition out harmful spans and keep only the content as the caption."""
        filtered = filter_harmful(CaptionRecord.from_text(description), self.lexicon)
        if not filtered.degradation_part:
            return replace(filtered, declared_token_length=declared_length)
        content = filtered.content_part
        if not content:
            # Entirely harmful text; keep a minimal neutral caption.
            content = "image"
        return CaptionRecord.from_text(
            content, declared_token_length=stub_token_length(content)
        )

    # -- stage 3: restoration fan-out ----------------------------------------

    def fanout_restorations(
        self,
        pair: PairRecord,
        client: RestorationClient,
        backend_id: str,
    ) -> PairRecord:
        """Restore once per candidate with k matched to the caption's length."""
        if not pair.candidates:
            raise InvalidInputError(f"pair {pair.pair_id} has no candidates to restore")
        updated_candidates = []
        for cand in pair.candidates:
            if cand.restoration is not None:
                updated_candidates.append(cand)
                continue
            declared = cand.caption.declared_token_length or stub_token_length(
                cand.caption.text
            )
            req = RestorationRequest(
                image_id=pair.meta.image_id,
                lq_image_ref=pair.lq_ref,
                caption=cand.caption,
                token_repeat_k=richness_schedule(max(declared, 77)),
                backend=backend_id,
                seed=stable_seed(self.seed, pair.pair_id, cand.target_words),
            )
            try:
                result = client.restore(req)
            except Exception as exc:
                updated_candidates.append(
                    replace(cand, error=f"{type(exc).__name__}: {exc}")
                )
                continue
            updated_candidates.append(replace(cand, restoration=result, error=None))
        updated = replace(pair, candidates=tuple(updated_candidates))
        self._persist(updated)
        return updated

    # -- stage 4: annotation -------------------------------------------------

    def ingest_annotation(
        self,
        pair_id: str,
        candidate_id: str,
        annotator: str,
        overwrite: bool = False,
    ) -> PairRecord:
        """Record the chosen candidate; idempotent for an identical re-submit."""
        with self._ingest_lock:
            pairs = self.store.load_pairs()
            by_id = {p.pair_id: p for p in pairs}
            pair = by_id.get(pair_id)
            if pair is None:
                raise NotFoundError(f"unknown pair {pair_id!r}")
            known = {
                c.restoration.candidate_id
                for c in pair.candidates
                if c.restoration is not None
            }
            if candidate_id not in known:
                raise NotFoundError(f"pair {pair_id} has no candidate {candidate_id!r}")
            if pair.annotated:
                if pair.chosen_candidate_id == candidate_id and pair.annotator == annotator:
                    return pair
                if not overwrite:
                    raise AnnotationConflictError(
                        f"pair {pair_id} already annotated with "
                        f"{pair.chosen_candidate_id!r} by {pair.annotator!r}"
                    )
            updated = replace(
                pair,
                chosen_candidate_id=candidate_id,
                annotator=annotator,
                annotated_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
            )
            by_id[pair_id] = updated
            ordered = [by_id[p.pair_id] for p in pairs]
            self.store.save_pairs(ordered)
            self.store.save_annotations(ordered)
            return updated

    # -- stage 5: export -----------------------------------------------------

    def export_training_set(
        self,
        out_path: str | Path | None = None,
        target: int | None = None,
        limit: int | None = None,
        holdout_zooms: dict[str, float] | None = None,
    ) -> ExportSummary:
        """Write chosen captions as JSONL {"lq_ref", "cot"} lines.

        Unannotated pairs are skipped and counted; pairs whose (degrader,
        zoom) matches ``holdout_zooms`` are held out of training. ``limit``
        caps the export with deterministic sampling stratified across
        degradation levels.
        """
        pairs = self.store.load_pairs()
        out = Path(out_path) if out_path else self.store.export_path
        target = target if target is not None else self.export_target
        holdout_zooms = holdout_zooms or {}

        held_out = 0
        eligible = []
        skipped = 0
        for pair in pairs:
            holdout = holdout_zooms.get(pair.meta.degrader_id)
            if holdout is not None and float(holdout) == float(pair.meta.zoom_ratio):
                held_out += 1
                continue
            if not pair.annotated:
                skipped += 1
                continue
            eligible.append(pair)

        if limit is not None and len(eligible) > limit:
            eligible = _stratified_sample(eligible, limit)

        lines = []
        per_level: dict[str, int] = {level: 0 for level in DEGRADATION_LEVELS}
        for pair in eligible:
            content = pair.chosen_candidate().caption.content_part
            cot = emit_cot_line(content)
            lines.append(json.dumps({"lq_ref": pair.lq_ref, "cot": cot}, sort_keys=True))
            per_level[pair.meta.degradation_level] += 1
        atomic_write_text(out, "".join(line + "\n" for line in lines))
        return ExportSummary(
            exported=len(lines),
            per_level=per_level,
            skipped_unannotated=skipped,
            held_out=held_out,
            target=target,
            target_met=len(lines) >= target,
            out_path=str(out),
        )

    # -- shared --------------------------------------------------------------

    def _persist(self, pair: PairRecord) -> None:
        pairs = self.store.load_pairs()
        by_id = {p.pair_id: p for p in pairs}
        if pair.pair_id in by_id:
            by_id[pair.pair_id] = pair
            self.store.save_pairs([by_id[p.pair_id] for p in pairs])
        else:
            self.store.save_pairs(pairs + [pair])


def emit_cot_line(content: str) -> str:
    """Length-first line for one exported caption: <tokens, content>."""
    return emit_cot(
        CoTCaption(predicted_length=stub_token_length(content), description=content)
    )


def _stratified_sample(pairs: list[PairRecord], limit: int) -> list[PairRecord]:
    """Deterministic round-robin draw across degradation levels."""
    by_level: dict[str, list[PairRecord]] = {level: [] for level in DEGRADATION_LEVELS}
    for pair in sorted(pairs, key=lambda p: p.pair_id):
        by_level[pair.meta.degradation_level].append(pair)
    picked: list[PairRecord] = []
    queues = [q for q in by_level.values() if q]
    i = 0
    while len(picked) < limit and queues:
        queue = queues[i % len(queues)]
        picked.append(queue.pop(0))
        if not queue:
            queues.remove(queue)
        else:
            i += 1
    order = {p.pair_id: n for n, p in enumerate(pairs)}
    picked.sort(key=lambda p: order[p.pair_id])
    return picked


def assign_degraders(
    hq_manifest: list[HqImage],
    primary_ids: list[str],
    mix_id: str | None = None,
    mix_fraction: float = 0.2,
    seed: int = 0,
) -> dict[str, list[str]]:
    """Per-image degrader assignment with an optional mixed-in degrader.

    A seeded ``mix_fraction`` share of images swap their degrader set for
    ``mix_id`` alone, matching the curation recipe of blending a slice of
    classically degraded data into the generated pool.
    """
    if mix_id is None:
        return {hq.path: list(primary_ids) for hq in hq_manifest}
    if not 0.0 <= mix_fraction <= 1.0:
        raise InvalidInputError(f"mix_fraction must be in [0, 1], got {mix_fraction}")
    rng = np.random.default_rng(stable_seed("mix", seed))
    n_mixed = int(round(mix_fraction * len(hq_manifest)))
    mixed = set(rng.choice(len(hq_manifest), size=n_mixed, replace=False).tolist())
    return {
        hq.path: ([mix_id] if i in mixed else list(primary_ids))
        for i, hq in enumerate(hq_manifest)
    }
