"""Small shared plumbing: stable hashing, deterministic ids, atomic writes."""

from __future__ import annotations

import hashlib
import os
import tempfile
import uuid
from pathlib import Path


def stable_digest(*parts: object, size: int = 16) -> bytes:
    """Keyless blake2b over the '|'-joined string forms of ``parts``."""
    joined = "|".join(str(p) for p in parts)
    return hashlib.blake2b(joined.encode("utf-8"), digest_size=size).digest()


def stable_seed(*parts: object) -> int:
    """64-bit integer seed derived from ``parts``; stable across runs."""
    return int.from_bytes(stable_digest(*parts, size=8), "little")


def deterministic_uuid(*parts: object) -> str:
    """UUIDv4-formatted id derived from ``parts``; same inputs, same id."""
    return str(uuid.UUID(bytes=stable_digest(*parts, size=16), version=4))


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write-temp-then-rename so readers never observe a partial file.

    The staging name is unique per writer; concurrent writes of the same
    target cannot steal each other's temp file, the last rename wins.
    """
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
