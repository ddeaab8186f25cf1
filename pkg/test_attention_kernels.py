#!/usr/bin/env python3
"""
Tests for sdpa, area attention, the tiled kernel and the cost accountant.
"""

import numpy as np
import pytest

from attention_kernels import (
    AttentionConfig,
    area_attention,
    attention_cost,
    sdpa,
    tiled_attention,
    tiled_scratch_bound,
)
from errors import ConfigurationError, DimensionError
from tensor_core import OpCounter, Tensor, matmul, precision, softmax


def random_qkv(rng, n, d, lead=()):
    return [Tensor(rng.normal(size=lead + (n, d)).astype(np.float32)) for _ in range(3)]


# ---------------------------------------------------------------- sdpa
def test_sdpa_single_token_returns_value():
    rng = np.random.default_rng(0)
    q, k, v = random_qkv(rng, 1, 4)
    np.testing.assert_array_equal(sdpa(q, k, v).data, v.data)


def test_sdpa_zero_queries_average_values():
    rng = np.random.default_rng(1)
    _, k, v = random_qkv(rng, 6, 3)
    q = Tensor(np.zeros((6, 3)))
    out = sdpa(q, k, v).data
    np.testing.assert_allclose(out, np.broadcast_to(v.data.mean(axis=0), (6, 3)), atol=1e-6)


def test_sdpa_matches_three_step_composition():
    rng = np.random.default_rng(2)
    q, k, v = random_qkv(rng, 16, 8)
    scores = matmul(q, Tensor(k.data.T.copy())) * (1.0 / np.sqrt(8))
    expected = matmul(softmax(scores, axis=-1), v).data
    np.testing.assert_allclose(sdpa(q, k, v).data, expected, atol=1e-6)


def test_sdpa_shape_mismatch():
    with pytest.raises(DimensionError):
        sdpa(Tensor(np.zeros((4, 2))), Tensor(np.zeros((4, 3))), Tensor(np.zeros((4, 3))))
    with pytest.raises(DimensionError, match="head dimension"):
        sdpa(*[Tensor(np.zeros((4, 2)))] * 3, cfg=AttentionConfig(head_dim=3))


# ---------------------------------------------------------------- area attention
def test_area_single_area_is_full_attention():
    rng = np.random.default_rng(3)
    x = random_qkv(rng, 12, 4)[0]
    cfg = AttentionConfig(head_dim=4, num_areas=1)
    np.testing.assert_allclose(area_attention(x, cfg).data, sdpa(x, x, x).data, atol=1e-6)


def test_area_one_token_per_area_returns_tokens():
    rng = np.random.default_rng(4)
    x = random_qkv(rng, 8, 4)[0]
    cfg = AttentionConfig(head_dim=4, num_areas=8)
    np.testing.assert_allclose(area_attention(x, cfg).data, x.data, atol=1e-7)


def test_area_matches_slice_and_run():
    rng = np.random.default_rng(5)
    x = random_qkv(rng, 8, 3)[0]
    cfg = AttentionConfig(head_dim=3, num_areas=4)
    out = area_attention(x, cfg).data
    for j in range(4):
        chunk = Tensor(x.data[2 * j:2 * j + 2])
        np.testing.assert_allclose(out[2 * j:2 * j + 2], sdpa(chunk, chunk, chunk).data, atol=1e-6)


def test_area_requires_divisibility():
    x = Tensor(np.zeros((10, 2)))
    with pytest.raises(ConfigurationError):
        area_attention(x, AttentionConfig(head_dim=2, num_areas=4))


def test_area_locality_is_exact():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(16, 4)).astype(np.float32)
    cfg = AttentionConfig(head_dim=4, num_areas=4)
    base = area_attention(Tensor(x), cfg).data
    bumped = x.copy()
    bumped[5] += 3.0
    moved = area_attention(Tensor(bumped), cfg).data
    untouched = np.r_[0:4, 8:16]
    np.testing.assert_array_equal(moved[untouched], base[untouched])
    assert not np.array_equal(moved[4:8], base[4:8])


def test_area_permutation_equivariance():
    rng = np.random.default_rng(7)
    q, k, v = (rng.normal(size=(8, 4)) for _ in range(3))
    cfg = AttentionConfig(head_dim=4, num_areas=2)
    with precision(np.float64):
        base = area_attention(Tensor(q), cfg, Tensor(k), Tensor(v)).data
        perm = np.r_[[2, 0, 3, 1], 4:8]
        kv_perm = area_attention(Tensor(q), cfg, Tensor(k[perm]), Tensor(v[perm])).data
        q_perm = area_attention(Tensor(q[perm]), cfg, Tensor(k), Tensor(v)).data
    np.testing.assert_allclose(kv_perm, base, atol=1e-12)
    np.testing.assert_allclose(q_perm, base[perm], atol=1e-12)


def test_area_tiled_kernel_matches_naive():
    rng = np.random.default_rng(8)
    x = random_qkv(rng, 64, 8, lead=(2, 3))[0]
    cfg = AttentionConfig(num_heads=3, head_dim=8, num_areas=4, tile_rows=5, tile_cols=7)
    naive = area_attention(x, cfg).data
    tiled = area_attention(x, cfg, kernel="tiled").data
    assert np.abs(naive - tiled).max() <= 1e-5


# ---------------------------------------------------------------- tiled kernel
def test_tiled_single_tile_matches_sdpa():
    rng = np.random.default_rng(9)
    q, k, v = random_qkv(rng, 24, 8)
    cfg = AttentionConfig(head_dim=8, tile_rows=24, tile_cols=24)
    np.testing.assert_allclose(tiled_attention(q, k, v, cfg).data, sdpa(q, k, v).data, atol=1e-6)


def test_tiled_oversized_tiles_are_clamped():
    rng = np.random.default_rng(10)
    q, k, v = random_qkv(rng, 10, 4)
    cfg = AttentionConfig(head_dim=4, tile_rows=64, tile_cols=512)
    np.testing.assert_allclose(tiled_attention(q, k, v, cfg).data, sdpa(q, k, v).data, atol=1e-6)


def test_tiled_equivalence_sweep():
    rng = np.random.default_rng(11)
    for _ in range(100):
        n = int(rng.integers(1, 513))
        d = int(rng.integers(1, 33))
        cfg = AttentionConfig(head_dim=d, tile_rows=int(rng.integers(8, 97)), tile_cols=int(rng.integers(8, 97)))
        q, k, v = random_qkv(rng, n, d)
        deviation = np.abs(tiled_attention(q, k, v, cfg).data - sdpa(q, k, v).data).max()
        assert deviation <= 1e-5, (n, d, cfg.tile_rows, cfg.tile_cols)


def test_tiled_peak_scratch_for_reference_case():
    rng = np.random.default_rng(12)
    q, k, v = random_qkv(rng, 128, 16)
    cfg = AttentionConfig(head_dim=16, tile_rows=32, tile_cols=32)
    with OpCounter() as counter:
        out = tiled_attention(q, k, v, cfg)
    assert counter.peak_scratch <= 32 * 32 + 3 * 32 + 32 * 16
    assert counter.flops == 4 * 128 * 128 * 16
    assert np.abs(out.data - sdpa(q, k, v).data).max() <= 1e-5
    with OpCounter() as naive:
        sdpa(q, k, v)
    assert naive.peak_scratch == 128 * 128


def test_tiled_scratch_constant_in_n():
    rng = np.random.default_rng(13)
    cfg = AttentionConfig(head_dim=8, tile_rows=16, tile_cols=16)
    peaks = []
    for n in (128, 256, 512):
        q, k, v = random_qkv(rng, n, 8)
        with OpCounter() as counter:
            tiled_attention(q, k, v, cfg)
        peaks.append(counter.peak_scratch)
    assert peaks[0] == peaks[1] == peaks[2] == tiled_scratch_bound(512, 8, cfg)


def test_tiled_scratch_counts_one_tile_set_per_worker():
    rng = np.random.default_rng(15)
    q, k, v = random_qkv(rng, 32, 4, lead=(6,))
    for threads, workers in ((1, 1), (4, 4), (8, 6)):
        cfg = AttentionConfig(head_dim=4, tile_rows=8, tile_cols=8, threads=threads)
        with OpCounter() as counter:
            tiled_attention(q, k, v, cfg)
        assert counter.peak_scratch == tiled_scratch_bound(32, 4, cfg, work_items=6)
        assert counter.peak_scratch == workers * (8 * 8 + 3 * 8 + 8 * 4)


def test_tiled_thread_count_does_not_change_output():
    rng = np.random.default_rng(14)
    q, k, v = random_qkv(rng, 32, 4, lead=(6,))
    one = tiled_attention(q, k, v, AttentionConfig(head_dim=4, tile_rows=8, tile_cols=8, threads=1)).data
    four = tiled_attention(q, k, v, AttentionConfig(head_dim=4, tile_rows=8, tile_cols=8, threads=4)).data
    np.testing.assert_array_equal(one, four)


# ---------------------------------------------------------------- cost
def test_attention_cost_examples():
    assert attention_cost(4, 2, 1).flops == 128
    assert attention_cost(4, 2, 4).flops == 32
    assert attention_cost(16, 4, 4).peak_scratch_elements == 64
    assert attention_cost(16, 4, 1).peak_scratch_elements == 256


@pytest.mark.parametrize("n,d,num_areas", [(16, 4, 1), (16, 4, 4), (64, 8, 2), (48, 3, 6)])
def test_attention_cost_matches_instrumented_run(n, d, num_areas):
    x = Tensor(np.random.default_rng(n).normal(size=(n, d)))
    with OpCounter() as counter:
        area_attention(x, AttentionConfig(head_dim=d, num_areas=num_areas))
    assert counter.flops == attention_cost(n, d, num_areas).flops
    assert counter.peak_scratch == attention_cost(n, d, num_areas).peak_scratch_elements


def test_attention_cost_decreases_with_areas():
    flops = [attention_cost(64, 8, num_areas).flops for num_areas in (1, 2, 4, 8, 16)]
    assert all(a > b for a, b in zip(flops, flops[1:]))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        AttentionConfig(head_dim=0)
    with pytest.raises(ConfigurationError):
        AttentionConfig(head_dim=4, tile_rows=-1)
