import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alds.decompose import (
    count_flops,
    count_params,
    decompose_layer,
    decomposed_forward,
    decomposed_size,
    max_rank,
    partition_channels,
    reconstruct,
    reconstruct_folded,
    truncated_svd,
)
from alds.tensor import conv2d_reference, fold
from oracles import dense_spectral_norm, jacobi_singular_values


def test_partition_even_split():
    assert partition_channels(6, 3).ranges == ((0, 2), (2, 4), (4, 6))


def test_partition_identity():
    assert partition_channels(6, 1).ranges == ((0, 6),)


def test_partition_remainder_goes_to_front_groups():
    part = partition_channels(7, 3)
    assert part.sizes == [3, 2, 2]
    assert sum(part.sizes) == 7 and max(part.sizes) == 3


@pytest.mark.parametrize("c,k", [(6, 7), (3, 0)])
def test_partition_rejects_infeasible(c, k):
    with pytest.raises(ValueError):
        partition_channels(c, k)


def test_partition_exhaustive_invariants():
    for c in range(1, 40):
        for k in range(1, c + 1):
            part = partition_channels(c, k)
            assert part.ranges[0][0] == 0 and part.ranges[-1][1] == c
            for (_, b), (a, _) in zip(part.ranges, part.ranges[1:]):
                assert a == b
            assert min(part.sizes) >= 1
            assert max(part.sizes) <= -(-c // k)


def test_truncated_svd_factor_shapes(rng):
    pair = truncated_svd(rng.standard_normal((20, 24)), 7)
    assert pair.U.shape == (20, 7) and pair.V.shape == (7, 24)
    np.testing.assert_allclose(pair.U.T @ pair.U, np.eye(7), atol=1e-12)


def test_truncated_svd_full_rank_exact(rng):
    m = rng.standard_normal((9, 5))
    pair = truncated_svd(m, 5)
    assert np.linalg.norm(m - pair.U @ pair.V) <= 1e-10 * np.linalg.norm(m)


def test_truncated_svd_eckart_young_against_jacobi(rng):
    m = rng.standard_normal((8, 10))
    pair = truncated_svd(m, 3)
    sigma = jacobi_singular_values(m)
    assert abs(dense_spectral_norm(m - pair.U @ pair.V) - sigma[3]) <= 1e-10


def test_truncated_svd_rejects_bad_rank(rng):
    with pytest.raises(ValueError):
        truncated_svd(rng.standard_normal((3, 4)), 4)


def test_worked_layer_parameter_count(rng):
    w = rng.standard_normal((20, 6, 2, 2))
    d = decompose_layer(w, 1, 7, 0)
    assert count_params(w) == 480
    assert count_params(d) == 308 == 7 * (20 + 24)


def test_two_group_fc_parameter_count(rng):
    d = decompose_layer(rng.standard_normal((4, 4, 1, 1)), 2, 1, 0)
    assert count_params(d) == 12


def test_full_rank_reconstruction(rng):
    w = rng.standard_normal((5, 3, 2, 2))
    d = decompose_layer(w, 1, 5, 0)
    assert np.linalg.norm(reconstruct(d) - w) <= 1e-9 * np.linalg.norm(w)


def test_rank_one_tensor_reconstructed_exactly(rng):
    w = np.einsum("a,b,c,d->abcd", *(rng.standard_normal(n) for n in (6, 4, 3, 3)))
    d = decompose_layer(w, 1, 1, 0)
    np.testing.assert_allclose(reconstruct(d), w, atol=1e-12)


def test_reconstruction_error_matches_dense_oracle(rng):
    w = rng.standard_normal((8, 6, 2, 2))
    d = decompose_layer(w, 3, 2, 0)
    diff = fold(w, 0).data - reconstruct_folded(d).data
    err = np.linalg.norm(diff, 2)
    assert abs(err - dense_spectral_norm(diff)) <= 1e-10
    per_block = [jacobi_singular_values(fold(w, 0).data[:, a * 4:b * 4])[2]
                 for a, b in d.partition.ranges]
    assert max(per_block) - 1e-10 <= err <= np.sqrt(3) * max(per_block) + 1e-10


def test_decompose_rejects_infeasible(rng):
    w = rng.standard_normal((4, 3, 1, 1))
    with pytest.raises(ValueError):
        decompose_layer(w, 4, 1)
    with pytest.raises(ValueError):
        decompose_layer(w, 3, 2)


@settings(max_examples=60, deadline=None)
@given(
    f=st.integers(1, 6), c=st.integers(1, 6), k1=st.integers(1, 3), k2=st.integers(1, 3),
    scheme=st.sampled_from([0, 1, 2, 3]), data=st.data(),
)
def test_param_count_closed_form(f, c, k1, k2, scheme, data):
    w = np.random.default_rng(f * 1000 + c * 100 + k1 * 10 + k2).standard_normal((f, c, k1, k2))
    k = data.draw(st.integers(1, c))
    j = data.draw(st.integers(1, max_rank(w.shape, k, scheme)))
    d = decompose_layer(w, k, j, scheme)
    assert count_params(d) == decomposed_size(w.shape, k, j, scheme)
    assert reconstruct(d).shape == w.shape
    if scheme == 0:
        assert count_params(d) == j * (k * f + c * k1 * k2)


def test_eckart_young_per_subspace(rng):
    w = rng.standard_normal((6, 5, 3, 2))
    for scheme in range(4):
        m = fold(w, scheme).data
        for k in (1, 2, 3):
            jmax = max_rank(w.shape, k, scheme)
            for j in range(1, jmax):
                d = decompose_layer(w, k, j, scheme)
                per = m.shape[1] // 5
                for (a, b), pair in zip(d.partition.ranges, d.factors):
                    block = m[:, a * per:b * per]
                    sigma = np.linalg.svd(block, compute_uv=False)
                    err = np.linalg.norm(block - pair.U @ pair.V, 2)
                    assert abs(err - sigma[j]) <= 1e-10


def test_error_non_increasing_in_rank(rng):
    w = rng.standard_normal((7, 6, 2, 2))
    for k in (1, 2, 3):
        errs = [np.linalg.norm(fold(w, 0).data - reconstruct_folded(decompose_layer(w, k, j)).data, 2)
                for j in range(1, max_rank(w.shape, k, 0) + 1)]
        assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


def test_forward_full_rank_k1_equals_original(rng):
    w = rng.standard_normal((4, 3, 3, 3))
    x = rng.standard_normal((3, 6, 6))
    d = decompose_layer(w, 1, 4, 0)
    y, ref = decomposed_forward(d, x), conv2d_reference(w, x)
    assert np.linalg.norm(y - ref) <= 1e-8 * np.linalg.norm(ref)


def test_forward_hand_computed():
    w = np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None, None]
    d = decompose_layer(w, 2, 1, 0)
    y = decomposed_forward(d, np.array([5.0, 6.0])[:, None, None])
    np.testing.assert_allclose(y[:, 0, 0], [17.0, 39.0], rtol=1e-12)


def test_forward_matches_reconstruction(rng):
    w = rng.standard_normal((8, 6, 3, 3))
    x = rng.standard_normal((6, 8, 8))
    d = decompose_layer(w, 3, 4, 0)
    y = decomposed_forward(d, x)
    ref = conv2d_reference(reconstruct(d), x)
    assert np.linalg.norm(y - ref) <= 1e-8 * np.linalg.norm(ref)


@pytest.mark.parametrize("k", [1, 2, 3, 6])
@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1)])
def test_forward_grid(rng, k, stride, padding):
    w = rng.standard_normal((5, 6, 3, 2))
    x = rng.standard_normal((6, 7, 9))
    for j in range(1, max_rank(w.shape, k, 0) + 1):
        d = decompose_layer(w, k, j, 0)
        y = decomposed_forward(d, x, stride, padding)
        ref = conv2d_reference(reconstruct(d), x, stride, padding)
        assert np.linalg.norm(y - ref) <= 1e-8 * np.linalg.norm(ref)


def test_forward_rejects_other_schemes(rng):
    d = decompose_layer(rng.standard_normal((3, 2, 2, 2)), 1, 1, 1)
    with pytest.raises(ValueError):
        decomposed_forward(d, np.zeros((2, 4, 4)))


def test_flop_counts(rng):
    w = rng.standard_normal((20, 6, 2, 2))
    d = decompose_layer(w, 1, 7, 0)
    assert count_flops(w, 4) == 1920
    assert count_flops(d, 4) == (7 * 24 + 20 * 7) * 4 == 1232
    with pytest.raises(ValueError):
        count_flops(w, None)


def test_flops_match_executed_macs(rng):
    # count multiply-adds of the two-stage forward directly
    w = rng.standard_normal((5, 6, 3, 3))
    d = decompose_layer(w, 2, 2, 0)
    p = 4 * 4
    stage1 = sum(d.rank * (b - a) * 9 * p for a, b in d.partition.ranges)
    stage2 = 5 * d.k * d.rank * p
    assert count_flops(d, p) == stage1 + stage2
