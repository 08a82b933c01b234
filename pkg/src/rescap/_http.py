"""POST with bounded retries, shared by the captioner and restoration clients."""

from __future__ import annotations

import time

import httpx

from .errors import BackendError, TransportError

DEFAULT_MAX_ATTEMPTS = 3
DEFAULT_BACKOFF_BASE = 0.1


def post_with_retries(
    client: httpx.Client,
    url: str,
    payload: dict,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
    backoff_base: float = DEFAULT_BACKOFF_BASE,
) -> httpx.Response:
    """Retry transport failures and 5xx with exponential backoff; 4xx never retries."""
    last_error: Exception | None = None
    for attempt in range(max_attempts):
        if attempt:
            time.sleep(backoff_base * (2 ** (attempt - 1)))
        try:
            response = client.post(url, json=payload)
        except httpx.HTTPError as exc:
            last_error = exc
            continue
        if response.status_code >= 500:
            last_error = BackendError(response.status_code, response.text[:200])
            continue
        return response
    raise TransportError(str(last_error), attempts=max_attempts)
