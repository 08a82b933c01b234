import numpy as np
import pytest

from rescap.degradation_adapter import (
    SWEEP_TOKEN_COUNTS,
    AdapterConfig,
    AdapterState,
    PatchStatsProvider,
    adapter_backward,
    adapter_forward,
    concat_visual_tokens,
    init_adapter,
    load_adapter,
    rescale_spectral_norm,
    save_adapter,
)
from rescap.errors import DimensionError, InvalidInputError


def _small_state(seed=0, M=3, d=2, N=2, h=4):
    return init_adapter(AdapterConfig(M, d, output_tokens=N, hidden_dim=h), seed)


def _scalar_forward(state, features):
    """Element-by-element reference: explicit loops, no matrix ops."""
    c = state.config
    g = [
        sum(features[i][j] for i in range(c.input_tokens)) / c.input_tokens
        for j in range(c.feature_dim)
    ]
    z = []
    for a in range(c.hidden_dim):
        pre = state.b1[a]
        for j in range(c.feature_dim):
            pre += g[j] * state.W1[j][a]
        z.append(max(pre, 0.0))
    flat = []
    for b in range(c.output_tokens * c.feature_dim):
        val = state.b2[b]
        for a in range(c.hidden_dim):
            val += z[a] * state.W2[a][b]
        flat.append(val)
    return np.array(flat).reshape(c.output_tokens, c.feature_dim)


# -- forward ------------------------------------------------------------------


def test_forward_matches_scalar_oracle():
    rng = np.random.default_rng(7)
    for seed in range(10):
        state = _small_state(seed=seed, M=4, d=3, N=2, h=5)
        features = rng.standard_normal((4, 3))
        got = adapter_forward(state, features)
        want = _scalar_forward(state, features)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


def test_forward_output_shape():
    state = init_adapter(AdapterConfig(16, 8), seed=1)
    out = adapter_forward(state, np.zeros((16, 8)))
    assert out.shape == (36, 8)  # default output token count


def test_forward_is_permutation_invariant():
    rng = np.random.default_rng(3)
    state = _small_state(seed=2, M=6, d=4, N=3, h=8)
    features = rng.standard_normal((6, 4))
    base = adapter_forward(state, features)
    for _ in range(20):
        perm = rng.permutation(6)
        np.testing.assert_array_equal(adapter_forward(state, features[perm]), base)


def test_forward_rejects_wrong_shape():
    state = _small_state()
    with pytest.raises(DimensionError):
        adapter_forward(state, np.zeros((4, 2)))
    with pytest.raises(DimensionError):
        adapter_forward(state, np.zeros((3, 3)))


# -- backward -----------------------------------------------------------------


def _fd_param_grad(state, features, upstream, name, idx, step=1e-5):
    def loss_with(value):
        arrays = {k: getattr(state, k).copy() for k in ("W1", "b1", "W2", "b2")}
        arrays[name][idx] = value
        shifted = AdapterState(config=state.config, **arrays)
        return float(np.sum(adapter_forward(shifted, features) * upstream))

    x = getattr(state, name)[idx]
    return (loss_with(x + step) - loss_with(x - step)) / (2 * step)


def _fresh_case(seed):
    """A config + inputs whose hidden pre-activations stay away from the kink."""
    rng = np.random.default_rng(seed)
    for attempt in range(200):
        M = int(rng.integers(1, 6))
        d = int(rng.integers(1, 5))
        N = int(rng.integers(1, 4))
        h = int(rng.integers(1, 7))
        state = init_adapter(AdapterConfig(M, d, N, h), int(rng.integers(0, 10_000)))
        features = rng.standard_normal((M, d))
        g = features.mean(axis=0)
        pre = g @ state.W1 + state.b1
        if np.all(np.abs(pre) > 1e-3):
            upstream = rng.standard_normal((N, d))
            return state, features, upstream
    raise AssertionError("could not sample a case away from the rectifier kink")


@pytest.mark.parametrize("seed", range(20))
def test_backward_matches_finite_differences(seed):
    state, features, upstream = _fresh_case(seed)
    grads, dfeatures = adapter_backward(state, features, upstream)
    rng = np.random.default_rng(seed + 500)

    for name in ("W1", "b1", "W2", "b2"):
        analytic = getattr(grads, name)
        flat_count = analytic.size
        picks = rng.choice(flat_count, size=min(6, flat_count), replace=False)
        for flat in picks:
            idx = np.unravel_index(flat, analytic.shape)
            fd = _fd_param_grad(state, features, upstream, name, idx)
            np.testing.assert_allclose(analytic[idx], fd, rtol=1e-4, atol=1e-6)

    step = 1e-5
    for flat in rng.choice(features.size, size=min(6, features.size), replace=False):
        idx = np.unravel_index(flat, features.shape)
        bumped = features.copy()
        bumped[idx] += step
        up = float(np.sum(adapter_forward(state, bumped) * upstream))
        bumped[idx] -= 2 * step
        down = float(np.sum(adapter_forward(state, bumped) * upstream))
        np.testing.assert_allclose(
            dfeatures[idx], (up - down) / (2 * step), rtol=1e-4, atol=1e-6
        )


def test_backward_input_grad_is_uniform_over_rows():
    state, features, upstream = _fresh_case(42)
    _, dfeatures = adapter_backward(state, features, upstream)
    for row in dfeatures:
        np.testing.assert_array_equal(row, dfeatures[0])


def test_backward_rejects_wrong_upstream_shape():
    state = _small_state()
    with pytest.raises(DimensionError):
        adapter_backward(state, np.zeros((3, 2)), np.zeros((2, 3)))


def test_backward_rejects_non_finite_upstream():
    state = _small_state()
    upstream = np.full((2, 2), np.nan)
    with pytest.raises(InvalidInputError):
        adapter_backward(state, np.zeros((3, 2)), upstream)


# -- init ---------------------------------------------------------------------


def test_init_is_seeded_and_bounded():
    config = AdapterConfig(4, 8, output_tokens=5, hidden_dim=16)
    a = init_adapter(config, 123)
    b = init_adapter(config, 123)
    np.testing.assert_array_equal(a.W1, b.W1)
    np.testing.assert_array_equal(a.W2, b.W2)
    assert np.all(a.b1 == 0.0) and np.all(a.b2 == 0.0)
    s1 = np.sqrt(6.0 / (8 + 16))
    s2 = np.sqrt(6.0 / (16 + 5 * 8))
    assert np.all(np.abs(a.W1) <= s1)
    assert np.all(np.abs(a.W2) <= s2)
    assert not np.array_equal(a.W1, init_adapter(config, 124).W1)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        AdapterConfig(0, 4)
    with pytest.raises(InvalidInputError):
        AdapterConfig(4, 4, hidden_dim=0)


# -- spectral rescale ------------------------------------------------------------


def test_rescale_bounds_singular_values():
    rng = np.random.default_rng(9)
    state = _small_state(seed=5, M=4, d=6, N=3, h=8)
    big = AdapterState(
        config=state.config,
        W1=state.W1 * 40.0,
        b1=state.b1,
        W2=state.W2 * 25.0,
        b2=state.b2,
    )
    scaled = rescale_spectral_norm(big)
    assert np.linalg.svd(scaled.W1, compute_uv=False)[0] <= 1.0 + 1e-12
    assert np.linalg.svd(scaled.W2, compute_uv=False)[0] <= 1.0 + 1e-12

    # with unit-bounded weights the pooled-vector map is 1-Lipschitz
    for _ in range(50):
        u = rng.standard_normal((4, 6))
        v = rng.standard_normal((4, 6))
        fu = adapter_forward(scaled, u).reshape(-1)
        fv = adapter_forward(scaled, v).reshape(-1)
        gap = np.linalg.norm(u.mean(axis=0) - v.mean(axis=0))
        assert np.linalg.norm(fu - fv) <= gap + 1e-9


def test_rescale_leaves_small_weights_alone():
    state = rescale_spectral_norm(_small_state(seed=1))
    again = rescale_spectral_norm(state)
    np.testing.assert_array_equal(state.W1, again.W1)
    np.testing.assert_array_equal(state.W2, again.W2)


def test_rescale_rejects_bad_bound():
    with pytest.raises(InvalidInputError):
        rescale_spectral_norm(_small_state(), bound=0.0)


# -- token concatenation ----------------------------------------------------------


def test_concat_appends_in_order():
    base = np.arange(8.0).reshape(4, 2)
    deg = np.arange(100.0, 106.0).reshape(3, 2)
    out = concat_visual_tokens(base, deg)
    np.testing.assert_array_equal(out[:4], base)
    np.testing.assert_array_equal(out[4:], deg)


def test_concat_empty_base_passes_through():
    deg = np.ones((2, 5))
    out = concat_visual_tokens(np.zeros((0, 5)), deg)
    np.testing.assert_array_equal(out, deg)


def test_concat_rejects_width_mismatch():
    with pytest.raises(DimensionError):
        concat_visual_tokens(np.zeros((2, 3)), np.zeros((2, 4)))


# -- serialization -----------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    state = init_adapter(AdapterConfig(9, 5, output_tokens=7, hidden_dim=11), 77)
    path = tmp_path / "adapter.bin"
    save_adapter(state, path)
    loaded = load_adapter(path)
    assert loaded.config == state.config
    for name in ("W1", "b1", "W2", "b2"):
        np.testing.assert_array_equal(getattr(loaded, name), getattr(state, name))


def test_header_is_json_first_line(tmp_path):
    import json

    state = _small_state(M=3, d=2, N=2, h=4)
    path = tmp_path / "adapter.bin"
    save_adapter(state, path)
    header = json.loads(path.read_bytes().split(b"\n", 1)[0])
    assert header == {"M": 3, "d": 2, "N": 2, "h": 4, "version": 1}


def test_load_rejects_truncated_payload(tmp_path):
    state = _small_state()
    path = tmp_path / "adapter.bin"
    save_adapter(state, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(InvalidInputError):
        load_adapter(path)


def test_load_rejects_bad_version_and_missing_keys(tmp_path):
    path = tmp_path / "adapter.bin"
    path.write_bytes(b'{"M": 3, "d": 2, "N": 2, "h": 4, "version": 2}\n')
    with pytest.raises(InvalidInputError):
        load_adapter(path)
    path.write_bytes(b'{"M": 3, "version": 1}\n')
    with pytest.raises(InvalidInputError):
        load_adapter(path)
    path.write_bytes(b"no header at all")
    with pytest.raises(InvalidInputError):
        load_adapter(path)


# -- feature provider ----------------------------------------------------------------


def test_patch_stats_shapes_and_determinism():
    provider = PatchStatsProvider(grid=4)
    assert provider.input_tokens == 16
    assert provider.feature_dim == 3
    rng = np.random.default_rng(0)
    image = rng.random((32, 40, 3))
    a = provider.features(image)
    b = provider.features(image)
    assert a.shape == (16, 3)
    np.testing.assert_array_equal(a, b)


def test_patch_stats_feeds_the_adapter():
    provider = PatchStatsProvider(grid=2)
    state = init_adapter(
        AdapterConfig(provider.input_tokens, provider.feature_dim), seed=0
    )
    image = np.random.default_rng(1).random((16, 16))
    out = adapter_forward(state, provider.features(image))
    assert out.shape == (36, 3)


def test_sweep_token_counts_are_square_grids():
    assert SWEEP_TOKEN_COUNTS == (4, 9, 16, 25, 36)
    for n in SWEEP_TOKEN_COUNTS:
        root = int(round(n ** 0.5))
        assert root * root == n
