"""Degradation-token adapter: compress M feature tokens to 1, expand to N.

The adapter is a small MLP. Incoming degradation features (one row per
token) are mean-pooled over the token axis, pushed through one rectified
hidden layer, and the output vector is reshaped into N tokens of the same
feature width. Mean pooling makes the whole map exactly invariant to row
permutations of the input, which is the property the degradation stream
needs: severity matters, spatial layout does not.

Forward and backward are both written out analytically so the module is
trainable and checkable against finite differences.
"""

from __future__ import annotations

import json
import math
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, InvalidInputError

DEFAULT_OUTPUT_TOKENS = 36

# Output token counts swept in the supplementary study.
SWEEP_TOKEN_COUNTS = (4, 9, 16, 25, 36)


@dataclass(frozen=True)
class AdapterConfig:
    """Shape of the adapter: M input tokens of width d -> N output tokens."""

    input_tokens: int
    feature_dim: int
    output_tokens: int = DEFAULT_OUTPUT_TOKENS
    hidden_dim: int = 64

    def __post_init__(self) -> None:
        for name in ("input_tokens", "feature_dim", "output_tokens", "hidden_dim"):
            value = getattr(self, name)
            if value < 1:
                raise InvalidInputError(f"{name} must be >= 1, got {value}")


@dataclass(frozen=True)
class AdapterState:
    """Immutable parameter set; training steps build a new state."""

    config: AdapterConfig
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self) -> None:
        c = self.config
        expected = {
            "W1": (c.feature_dim, c.hidden_dim),
            "b1": (c.hidden_dim,),
            "W2": (c.hidden_dim, c.output_tokens * c.feature_dim),
            "b2": (c.output_tokens * c.feature_dim,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise DimensionError(shape, arr.shape, f"adapter parameter {name}")
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"adapter parameter {name} contains non-finite entries")


@dataclass(frozen=True)
class AdapterGrads:
    """Parameter gradients, shaped exactly like the corresponding state arrays."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray


def init_adapter(config: AdapterConfig, seed: int) -> AdapterState:
    """Seeded uniform init in [-s, s] with s = sqrt(6/(fan_in+fan_out)); zero biases."""
    rng = np.random.default_rng(seed)
    c = config
    s1 = np.sqrt(6.0 / (c.feature_dim + c.hidden_dim))
    s2 = np.sqrt(6.0 / (c.hidden_dim + c.output_tokens * c.feature_dim))
    return AdapterState(
        config=config,
        W1=rng.uniform(-s1, s1, size=(c.feature_dim, c.hidden_dim)),
        b1=np.zeros(c.hidden_dim),
        W2=rng.uniform(-s2, s2, size=(c.hidden_dim, c.output_tokens * c.feature_dim)),
        b2=np.zeros(c.output_tokens * c.feature_dim),
    )


def _check_features(state: AdapterState, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=float)
    c = state.config
    if features.shape != (c.input_tokens, c.feature_dim):
        raise DimensionError(
            (c.input_tokens, c.feature_dim), features.shape, "adapter input features"
        )
    return features


def _exact_column_mean(features: np.ndarray) -> np.ndarray:
    # fsum rounds the true sum once, so row order cannot perturb the result
    # and permutation invariance holds bit for bit, not just approximately.
    rows = features.shape[0]
    return np.array([math.fsum(col) for col in features.T]) / rows


def adapter_forward(state: AdapterState, features: np.ndarray) -> np.ndarray:
    """Mean-pool M x d -> 1 x d, one rectified hidden layer, reshape to N x d."""
    features = _check_features(state, features)
    c = state.config
    g = _exact_column_mean(features)
    z = np.maximum(g @ state.W1 + state.b1, 0.0)
    return (z @ state.W2 + state.b2).reshape(c.output_tokens, c.feature_dim)


def adapter_backward(
    state: AdapterState,
    features: np.ndarray,
    upstream_grad: np.ndarray,
) -> tuple[AdapterGrads, np.ndarray]:
    """Exact gradients of the forward map.

    Returns parameter gradients and the gradient w.r.t. the input features.
    ``upstream_grad`` is dLoss/dOutput with the output's N x d shape.
    """
    features = _check_features(state, features)
    c = state.config
    upstream_grad = np.asarray(upstream_grad, dtype=float)
    if upstream_grad.shape != (c.output_tokens, c.feature_dim):
        raise DimensionError(
            (c.output_tokens, c.feature_dim), upstream_grad.shape, "upstream gradient"
        )
    if not np.all(np.isfinite(upstream_grad)):
        raise InvalidInputError("upstream gradient contains non-finite entries")

    g = _exact_column_mean(features)
    pre = g @ state.W1 + state.b1
    z = np.maximum(pre, 0.0)

    u = upstream_grad.reshape(-1)
    db2 = u.copy()
    dW2 = np.outer(z, u)
    dz = state.W2 @ u
    dpre = dz * (pre > 0.0)
    db1 = dpre
    dW1 = np.outer(g, dpre)
    dg = state.W1 @ dpre
    # Every input row contributes 1/M of the pooled vector.
    dfeatures = np.tile(dg / c.input_tokens, (c.input_tokens, 1))
    return AdapterGrads(W1=dW1, b1=db1, W2=dW2, b2=db2), dfeatures


def concat_visual_tokens(base_tokens: np.ndarray, deg_tokens: np.ndarray) -> np.ndarray:
    """Append degradation tokens after the base visual tokens; order stable."""
    base_tokens = np.asarray(base_tokens, dtype=float)
    deg_tokens = np.asarray(deg_tokens, dtype=float)
    if base_tokens.ndim != 2 or deg_tokens.ndim != 2:
        raise DimensionError("2-d token matrices", (base_tokens.ndim, deg_tokens.ndim), "token rank")
    if base_tokens.shape[1] != deg_tokens.shape[1] and base_tokens.shape[0] != 0:
        raise DimensionError(
            deg_tokens.shape[1], base_tokens.shape[1], "token feature width"
        )
    if base_tokens.shape[0] == 0:
        return deg_tokens.copy()
    return np.concatenate([base_tokens, deg_tokens], axis=0)


def rescale_spectral_norm(state: AdapterState, bound: float = 1.0) -> AdapterState:
    """Scale each weight matrix so its largest singular value is <= bound.

    With both weight matrices bounded by 1 and the rectifier being
    1-Lipschitz, the map from the pooled vector to the flattened output is
    1-Lipschitz. Biases do not affect the constant and are untouched.
    """
    if bound <= 0:
        raise InvalidInputError(f"bound must be positive, got {bound}")

    def scaled(w: np.ndarray) -> np.ndarray:
        top = np.linalg.svd(w, compute_uv=False)[0]
        # tolerance keeps the projection idempotent: a rescaled matrix whose
        # top singular value rounds to an ulp above the bound is left alone
        if top <= bound * (1.0 + 1e-12) or top == 0.0:
            return w.copy()
        return w * (bound / top)

    return AdapterState(
        config=state.config,
        W1=scaled(state.W1),
        b1=state.b1.copy(),
        W2=scaled(state.W2),
        b2=state.b2.copy(),
    )


_HEADER_KEYS = ("M", "d", "N", "h")
_FORMAT_VERSION = 1


def save_adapter(state: AdapterState, path: str | Path) -> None:
    """JSON header line + little-endian float64 payload (W1, b1, W2, b2)."""
    c = state.config
    header = {
        "M": c.input_tokens,
        "d": c.feature_dim,
        "N": c.output_tokens,
        "h": c.hidden_dim,
        "version": _FORMAT_VERSION,
    }
    payload = b"".join(
        np.ascontiguousarray(arr, dtype="<f8").tobytes()
        for arr in (state.W1, state.b1, state.W2, state.b2)
    )
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(json.dumps(header, separators=(",", ":")).encode("ascii") + b"\n" + payload)
    os.replace(tmp, path)


def load_adapter(path: str | Path) -> AdapterState:
    """Inverse of :func:`save_adapter`; rejects mismatched headers."""
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise InvalidInputError("adapter file has no header line")
    try:
        header = json.loads(raw[:newline])
    except ValueError as exc:
        raise InvalidInputError(f"adapter header is not valid JSON: {exc}") from exc
    if header.get("version") != _FORMAT_VERSION:
        raise InvalidInputError(
            f"unsupported adapter format version {header.get('version')!r}"
        )
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise InvalidInputError(f"adapter header missing keys: {missing}")
    config = AdapterConfig(
        input_tokens=int(header["M"]),
        feature_dim=int(header["d"]),
        output_tokens=int(header["N"]),
        hidden_dim=int(header["h"]),
    )
    d, h, n = config.feature_dim, config.hidden_dim, config.output_tokens
    counts = (d * h, h, h * n * d, n * d)
    payload = raw[newline + 1 :]
    if len(payload) != 8 * sum(counts):
        raise InvalidInputError(
            f"adapter payload holds {len(payload)} bytes, header implies {8 * sum(counts)}"
        )
    flat = np.frombuffer(payload, dtype="<f8")
    offsets = np.cumsum((0,) + counts)
    W1, b1, W2, b2 = (
        flat[offsets[i] : offsets[i + 1]].copy() for i in range(4)
    )
    return AdapterState(
        config=config,
        W1=W1.reshape(d, h),
        b1=b1,
        W2=W2.reshape(h, n * d),
        b2=b2,
    )


class FeatureProvider(ABC):
    """Maps an image to an M x d degradation-feature matrix."""

    @property
    @abstractmethod
    def input_tokens(self) -> int:
        ...

    @property
    @abstractmethod
    def feature_dim(self) -> int:
        ...

    @abstractmethod
    def features(self, image: np.ndarray) -> np.ndarray:
        ...


@dataclass(frozen=True)
class PatchStatsProvider(FeatureProvider):
    """Deterministic stand-in for a learned degradation extractor.

    The image is cut into a grid x grid tiling; each patch contributes its
    mean intensity, variance, and mean squared finite-difference energy.
    Not degradation-aware in any learned sense, but stable per image, which
    is all the desk-scale pipeline needs.
    """

    grid: int = 4

    def __post_init__(self) -> None:
        if self.grid < 1:
            raise InvalidInputError(f"grid must be >= 1, got {self.grid}")

    @property
    def input_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def feature_dim(self) -> int:
        return 3

    def features(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=float)
        if image.ndim == 3:
            image = image.mean(axis=2)
        if image.ndim != 2:
            raise DimensionError("2-d or 3-d image array", image.ndim, "image rank")
        if min(image.shape) < self.grid:
            raise InvalidInputError(
                f"image {image.shape} too small for a {self.grid}x{self.grid} patch grid"
            )
        rows = np.array_split(image, self.grid, axis=0)
        out = np.empty((self.grid * self.grid, 3))
        i = 0
        for band in rows:
            for patch in np.array_split(band, self.grid, axis=1):
                dy = np.diff(patch, axis=0)
                dx = np.diff(patch, axis=1)
                energy = 0.0
                if dy.size or dx.size:
                    energy = (np.sum(dy * dy) + np.sum(dx * dx)) / (dy.size + dx.size)
                out[i] = (patch.mean(), patch.var(), energy)
                i += 1
        return out
