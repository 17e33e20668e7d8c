import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alds.decompose import decompose_layer, max_rank, reconstruct_folded
from alds.error_model import (
    build_spectrum_cache,
    error_bound,
    layer_spectrum,
    relative_error_exact,
    sumsq_bound,
)
from alds.model import NetworkModel
from alds.tensor import fold
from conftest import grouped_low_rank, random_model
from oracles import jacobi_singular_values


def test_relative_error_identity_and_zero(rng):
    w = rng.standard_normal((5, 7))
    assert relative_error_exact(w, w) == 0.0
    assert relative_error_exact(w, np.zeros_like(w)) == pytest.approx(1.0, abs=1e-15)


def test_relative_error_eckart_young(rng):
    w = rng.standard_normal((10, 12))
    u, s, vt = np.linalg.svd(w)
    w3 = (u[:, :3] * s[:3]) @ vt[:3]
    sigma = jacobi_singular_values(w)
    assert abs(relative_error_exact(w, w3) - sigma[3] / sigma[0]) <= 1e-10


def test_relative_error_rejects_zero():
    with pytest.raises(ValueError):
        relative_error_exact(np.zeros((2, 2)), np.ones((2, 2)))


def test_bound_tight_at_k1(rng):
    w = rng.standard_normal((6, 4, 2, 2))
    spec = layer_spectrum(w, 1, 0)
    sigma = jacobi_singular_values(fold(w, 0).data)
    for j in range(1, 6):
        d = decompose_layer(w, 1, j)
        exact = relative_error_exact(fold(w, 0), reconstruct_folded(d))
        assert abs(error_bound(spec, 1, j) - sigma[j] / sigma[0]) <= 1e-10
        assert abs(exact - error_bound(spec, 1, j)) <= 1e-10


def test_bound_zero_when_lossless(rng):
    w = rng.standard_normal((3, 4, 1, 1))
    spec = layer_spectrum(w, 2, 0)
    assert error_bound(spec, 2, max_rank(w.shape, 2, 0)) == 0.0


def test_bound_requires_matching_k(rng):
    spec = layer_spectrum(rng.standard_normal((3, 4, 1, 1)), 2, 0)
    with pytest.raises(KeyError):
        error_bound(spec, 3, 1)


def test_soundness_500_random_matrices():
    rng = np.random.default_rng(5)
    checked = 0
    for i in range(500):
        f = int(rng.integers(2, 10))
        c = int(rng.integers(4, 9))
        d_per = int(rng.integers(1, 4))
        w = rng.standard_normal((f, c, d_per, 1))
        if i % 3 == 0:
            w = grouped_low_rank(rng, f, c, d_per, 1, groups=2, rank=1, noise=0.05)
        for k in (2, 3, 4):
            if k > c:
                continue
            spec = layer_spectrum(w, k, 0)
            for j in range(1, max_rank(w.shape, k, 0) + 1):
                exact = relative_error_exact(fold(w, 0), reconstruct_folded(decompose_layer(w, k, j)))
                assert exact <= error_bound(spec, k, j) + 1e-9
                assert exact <= sumsq_bound(spec, j) + 1e-9
                checked += 1
    assert checked > 1500


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 4), scheme=st.sampled_from([0, 1, 2, 3]))
def test_bound_monotone_and_scale_invariant(seed, k, scheme):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((4, 5, 2, 3))
    spec = layer_spectrum(w, k, scheme)
    scaled = layer_spectrum(w * 37.5, k, scheme)
    bounds = [error_bound(spec, k, j) for j in range(1, spec.jmax + 1)]
    assert all(b <= a for a, b in zip(bounds, bounds[1:]))
    for j, b in enumerate(bounds, start=1):
        assert error_bound(scaled, k, j) == pytest.approx(b, rel=1e-12, abs=1e-15)


def test_cache_svd_call_count(rng):
    model = random_model(rng, [(4, 3, 2, 2), (5, 4, 1, 1)])
    cache = build_spectrum_cache(model, k_grid={1, 2}, schemes={0})
    assert cache.svd_calls == 2 * (1 + 2)


def test_cache_single_channel_layer(rng):
    model = random_model(rng, [(4, 1, 3, 3)])
    cache = build_spectrum_cache(model, k_grid=(1, 2, 3))
    assert cache.options("layer0") == [(1, 0)]


def test_cache_bound_matches_fresh_computation(rng):
    model = random_model(rng, [(6, 4, 2, 2), (8, 6, 1, 1)])
    cache = build_spectrum_cache(model, (1, 2, 3), (0, 1))
    w = model.layer("layer0").weights
    fresh = error_bound(layer_spectrum(w, 2, 0), 2, 3)
    assert cache.bound("layer0", 2, 3, 0) == fresh
    np.testing.assert_array_equal(
        cache.bound_table("layer1", 3, 1),
        [error_bound(layer_spectrum(model.layer("layer1").weights, 3, 1), 3, j)
         for j in range(1, 3)],
    )


def test_cache_without_k1_computes_alpha1_once_per_scheme(rng):
    model = random_model(rng, [(4, 4, 1, 1)])
    cache = build_spectrum_cache(model, k_grid=(2, 4))
    assert cache.svd_calls == 1 + 2 + 4
    assert cache.spectrum("layer0", 2).alpha1 == pytest.approx(
        np.linalg.norm(model.layer("layer0").weights[:, :, 0, 0], 2))


def test_cache_no_svd_on_queries(rng):
    model = random_model(rng, [(4, 4, 2, 2)])
    cache = build_spectrum_cache(model, (1, 2))
    calls = cache.svd_calls
    for k in (1, 2):
        cache.bound_table("layer0", k)
    assert cache.svd_calls == calls


def test_cache_zero_layer_marked(rng):
    model = NetworkModel.from_weights([np.zeros((3, 3, 1, 1)), rng.standard_normal((3, 3, 1, 1))])
    cache = build_spectrum_cache(model, (1,))
    assert cache.zero_layers == {"layer0"}
    assert cache.options("layer0") == []


def test_cache_parallel_build_matches_serial(rng):
    model = random_model(rng, [(6, 4, 2, 2), (8, 6, 1, 1), (5, 5, 3, 3)])
    a = build_spectrum_cache(model, (1, 2, 3), (0, 1, 2, 3))
    b = build_spectrum_cache(model, (1, 2, 3), (0, 1, 2, 3), max_workers=4)
    assert a.svd_calls == b.svd_calls
    for key, spec in a.entries.items():
        for x, y in zip(spec.values, b.entries[key].values):
            np.testing.assert_array_equal(x, y)
