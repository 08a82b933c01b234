"""Uniform client for restoration backends, real or stubbed.

A backend takes a low-quality PNG plus a caption and a token-repeat count
and returns a restored PNG. Real diffusion restorers live behind an HTTP
seam (they are multi-gigabyte model stacks); the built-in stub is a
deterministic unsharp mask plus seeded texture noise whose strength scales
with the effective token length, so richness-ordering tests have a real
signal to measure.

Every request is gated: a caption that still carries degradation phrasing
(non-empty degradation_part) is rejected before any backend sees it.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

import httpx
import numpy as np
from scipy import ndimage

from ._http import post_with_retries
from .errors import (
    BackendError,
    DuplicateRegistrationError,
    HarmfulCaptionError,
    InvalidInputError,
    NotFoundError,
)
from .imaging import array_to_png, png_to_array
from .text_conditioning import BASE_WINDOW, RICHNESS_BLOCK, CaptionRecord
from .util import atomic_write_bytes, deterministic_uuid, stable_seed

STUB_BACKEND_ID = "stub"

# Stub processing strengths per unit of effective token length.
_UNSHARP_GAIN = 0.003
_NOISE_GAIN = 0.0001


def effective_token_length(token_repeat_k: int) -> int:
    """77 + 20k: the conditioning window after k richness repeats."""
    if token_repeat_k < 0:
        raise InvalidInputError(f"token_repeat_k must be >= 0, got {token_repeat_k}")
    return BASE_WINDOW + RICHNESS_BLOCK * token_repeat_k


@dataclass(frozen=True)
class RestorationRequest:
    image_id: str
    lq_image_ref: str
    caption: CaptionRecord
    token_repeat_k: int
    backend: str
    seed: int

    def __post_init__(self) -> None:
        if self.token_repeat_k < 0:
            raise InvalidInputError(
                f"token_repeat_k must be >= 0, got {self.token_repeat_k}"
            )


@dataclass(frozen=True)
class RestorationResult:
    image_id: str
    candidate_id: str
    restored_image_ref: str
    backend: str
    effective_token_length: int
    latency_ms: int

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "candidate_id": self.candidate_id,
            "restored_image_ref": self.restored_image_ref,
            "backend": self.backend,
            "effective_token_length": self.effective_token_length,
            "latency_ms": self.latency_ms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RestorationResult":
        return cls(
            image_id=d["image_id"],
            candidate_id=d["candidate_id"],
            restored_image_ref=d["restored_image_ref"],
            backend=d["backend"],
            effective_token_length=int(d["effective_token_length"]),
            latency_ms=int(d["latency_ms"]),
        )


@dataclass(frozen=True)
class BatchItem:
    """One slot of a batch outcome: exactly one of result/error is set."""

    index: int
    result: RestorationResult | None = None
    error: str | None = None


@dataclass(frozen=True)
class BatchOutcome:
    items: tuple[BatchItem, ...]
    ok: int
    err: int

    @property
    def results(self) -> list[RestorationResult]:
        return [item.result for item in self.items if item.result is not None]


class RestorationBackend(ABC):
    """Restores one PNG; implementations must be deterministic per (input, seed)."""

    @abstractmethod
    def restore_bytes(
        self, png: bytes, caption: str, token_repeat_k: int, seed: int
    ) -> bytes:
        ...


class StubRestorationBackend(RestorationBackend):
    """Deterministic offline 'restorer'.

    Applies unsharp masking and adds a fixed seeded noise field; both are
    scaled by the effective token length, so the output's high-frequency
    energy (e.g. Laplacian variance) grows with the repeat count k. The
    noise realization depends on (seed, caption, image) but not on k, which
    keeps the growth strictly monotone instead of merely monotone in
    expectation.
    """

    def restore_bytes(
        self, png: bytes, caption: str, token_repeat_k: int, seed: int
    ) -> bytes:
        img = png_to_array(png)
        eff = effective_token_length(token_repeat_k)
        blurred = ndimage.gaussian_filter(img, sigma=(1.0, 1.0, 0.0))
        png_digest = hashlib.blake2b(png, digest_size=8).hexdigest()
        rng = np.random.default_rng(stable_seed("stub-noise", seed, caption, png_digest))
        noise = rng.standard_normal(img.shape)
        out = img + (_UNSHARP_GAIN * eff) * (img - blurred) + (_NOISE_GAIN * eff) * noise
        return array_to_png(np.clip(out, 0.0, 1.0))


class HttpRestorationBackend(RestorationBackend):
    """POST {endpoint}/restore {"image_b64", "caption", "token_repeat_k", "seed"}."""

    def __init__(
        self,
        endpoint: str,
        client: httpx.Client | None = None,
        timeout: float = 120.0,
        max_attempts: int = 3,
        backoff_base: float = 0.1,
    ) -> None:
        self.endpoint = endpoint.rstrip("/")
        self._client = client or httpx.Client(timeout=timeout)
        self._max_attempts = max_attempts
        self._backoff_base = backoff_base

    def restore_bytes(
        self, png: bytes, caption: str, token_repeat_k: int, seed: int
    ) -> bytes:
        import base64

        payload = {
            "image_b64": base64.b64encode(png).decode("ascii"),
            "caption": caption,
            "token_repeat_k": token_repeat_k,
            "seed": seed,
        }
        response = post_with_retries(
            self._client,
            f"{self.endpoint}/restore",
            payload,
            max_attempts=self._max_attempts,
            backoff_base=self._backoff_base,
        )
        if response.status_code >= 400:
            raise BackendError(response.status_code, response.text[:200])
        try:
            return base64.b64decode(response.json()["image_b64"])
        except (KeyError, ValueError) as exc:
            raise BackendError(response.status_code, f"malformed body: {exc}") from exc


class RestorationClient:
    """Registry of named backends plus the restore/restore_batch entry points.

    Restored PNGs are written under ``run_dir/images`` and referenced
    relative to ``run_dir`` so a rerun in a fresh directory produces
    byte-identical records.
    """

    def __init__(self, run_dir: str | Path, max_workers: int = 4) -> None:
        self.run_dir = Path(run_dir)
        self.images_dir = self.run_dir / "images"
        self.images_dir.mkdir(parents=True, exist_ok=True)
        self.max_workers = max(1, max_workers)
        self._backends: dict[str, RestorationBackend] = {}

    def register_backend(self, backend_id: str, endpoint: str | RestorationBackend) -> None:
        if backend_id in self._backends:
            raise DuplicateRegistrationError(f"backend {backend_id!r} already registered")
        if isinstance(endpoint, RestorationBackend):
            backend = endpoint
        elif endpoint == STUB_BACKEND_ID:
            backend = StubRestorationBackend()
        elif endpoint.startswith("http://") or endpoint.startswith("https://"):
            backend = HttpRestorationBackend(endpoint)
        else:
            raise InvalidInputError(
                f"endpoint must be 'stub', an http(s) URI, or a backend instance: {endpoint!r}"
            )
        self._backends[backend_id] = backend

    def backend(self, backend_id: str) -> RestorationBackend:
        try:
            return self._backends[backend_id]
        except KeyError:
            raise NotFoundError(f"backend {backend_id!r} not registered") from None

    def _resolve_lq(self, ref: str) -> Path:
        path = Path(ref)
        if not path.is_absolute():
            path = self.run_dir / path
        if not path.is_file():
            raise NotFoundError(f"LQ image not readable: {ref}")
        return path

    def restore(self, req: RestorationRequest) -> RestorationResult:
        backend = self.backend(req.backend)
        if req.caption.degradation_part:
            raise HarmfulCaptionError(
                "caption still carries degradation phrasing: "
                + "; ".join(req.caption.degradation_part)
            )
        png = self._resolve_lq(req.lq_image_ref).read_bytes()
        started = time.monotonic()
        out = backend.restore_bytes(png, req.caption.text, req.token_repeat_k, req.seed)
        latency_ms = int((time.monotonic() - started) * 1000)
        candidate_id = deterministic_uuid(
            "candidate",
            req.image_id,
            req.lq_image_ref,
            req.backend,
            req.token_repeat_k,
            req.seed,
            req.caption.text,
        )
        ref = f"images/{candidate_id}.png"
        atomic_write_bytes(self.run_dir / ref, out)
        return RestorationResult(
            image_id=req.image_id,
            candidate_id=candidate_id,
            restored_image_ref=ref,
            backend=req.backend,
            effective_token_length=effective_token_length(req.token_repeat_k),
            latency_ms=latency_ms,
        )

    def restore_batch(self, reqs: list[RestorationRequest]) -> BatchOutcome:
        """All requests, results in input order, per-item failures inline."""
        if not reqs:
            return BatchOutcome(items=(), ok=0, err=0)
        slots: list[BatchItem | None] = [None] * len(reqs)
        with concurrent.futures.ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            futures = {pool.submit(self.restore, req): i for i, req in enumerate(reqs)}
            for future in concurrent.futures.as_completed(futures):
                i = futures[future]
                try:
                    slots[i] = BatchItem(index=i, result=future.result())
                except Exception as exc:
                    slots[i] = BatchItem(index=i, error=f"{type(exc).__name__}: {exc}")
        items = tuple(slot for slot in slots if slot is not None)
        ok = sum(1 for item in items if item.result is not None)
        return BatchOutcome(items=items, ok=ok, err=len(items) - ok)
