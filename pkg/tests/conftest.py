import numpy as np
import pytest

from rescap.imaging import array_to_png


def textured_rgb(seed: int, size: int = 96) -> np.ndarray:
    """RGB float array with enough high-frequency content to sharpen."""
    rng = np.random.default_rng(seed)
    x = np.linspace(0.0, 6.0 * np.pi, size)
    xx, yy = np.meshgrid(x, x)
    base = 0.5 + 0.25 * np.sin(xx) * np.cos(yy) + 0.2 * rng.random((size, size))
    return np.stack([base, base * 0.9, base * 0.8], axis=-1)


def textured_png(seed: int, size: int = 96) -> bytes:
    return array_to_png(textured_rgb(seed, size))


@pytest.fixture
def hq_dir(tmp_path):
    """Directory with two deterministic HQ images."""
    d = tmp_path / "hq"
    d.mkdir()
    (d / "a.png").write_bytes(textured_png(1))
    (d / "b.png").write_bytes(textured_png(2))
    return d


@pytest.fixture
def long_caption() -> str:
    return (
        "a quick brown fox jumps over the lazy dog near the river bank while "
        "golden light falls through tall pine trees onto mossy stones"
    )
