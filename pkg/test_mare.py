#!/usr/bin/env python3
"""Tests for restoration from merged sequences"""

import numpy as np
import pytest

from errors import StateError
from mame import FusionState, MergedSequence, SimilarityConfig, mame
from mare import mare, pinv_reference, reconstruct_dst, reconstruct_src, split_merged
from partition import make_plan
from tokenio import (
    Pattern,
    TokenMatrix,
    gen_synthetic,
    read_fusion_state,
    read_tokens,
    write_fusion_state,
    write_tokens,
)


def test_worked_case_restores_exactly(three_token_case):
    t, plan = three_token_case
    merged = mame(t, plan, SimilarityConfig.for_dtype("f64", tau=0.0))

    x_spec, y_dst, x_pres = split_merged(merged)
    assert x_spec.shape[1] == 0
    assert y_dst.shape[1] == 2
    assert x_pres.shape[1] == 0

    restored = mare(merged)
    assert restored.equals(t)


def test_identity_when_nothing_merges(fuzz_stream):
    for _ in range(100):
        B = 1 + fuzz_stream.next_uint() % 3
        L = 2 + fuzz_stream.next_uint() % 255
        d = 1 + fuzz_stream.next_uint() % 64
        l_spec = fuzz_stream.next_uint() % min(3, L - 1)
        t = gen_synthetic(B, L, d, l_spec, fuzz_stream.next_uint(), "gaussian", "f64")
        style = ("alternating", "sequential", "random", "causal")[fuzz_stream.next_uint() % 4]
        plan = make_plan(L, l_spec, style, 0.5, fuzz_stream.next_uint())

        merged = mame(t, plan, SimilarityConfig.for_dtype("f64", tau=1.0))
        assert merged.length == L
        restored = mare(merged)
        assert np.abs(restored.data - t.data).max() == 0.0
        assert restored.l_spec == l_spec


def test_shape_restored_over_fuzz(fuzz_stream):
    for _ in range(500):
        B = 1 + fuzz_stream.next_uint() % 3
        L = 2 + fuzz_stream.next_uint() % 255
        d = 1 + fuzz_stream.next_uint() % 64
        l_spec = fuzz_stream.next_uint() % min(3, L - 1)
        pattern = Pattern("clustered", 1 + fuzz_stream.next_uint() % min(6, L - l_spec), 0.2)
        if fuzz_stream.next_uint() % 2:
            pattern = Pattern("gaussian")
        t = gen_synthetic(B, L, d, l_spec, fuzz_stream.next_uint(), pattern, "f64")
        style = ("alternating", "sequential", "random", "causal")[fuzz_stream.next_uint() % 4]
        plan = make_plan(L, l_spec, style, 0.5, fuzz_stream.next_uint())
        tau = -0.2 + 1.3 * float(fuzz_stream.uniform(1)[0])

        restored = mare(mame(t, plan, SimilarityConfig.for_dtype("f64", tau=tau)))
        assert restored.data.shape == t.data.shape
        assert restored.l_spec == l_spec
        assert np.isfinite(restored.data).all()


def test_sources_stay_inside_their_destinations(fuzz_stream):
    """A merged source comes back inside the box spanned by the outputs it was fused into"""
    for _ in range(200):
        L = 4 + fuzz_stream.next_uint() % 120
        d = 2 + fuzz_stream.next_uint() % 32
        t = gen_synthetic(2, L, d, 1, fuzz_stream.next_uint(), Pattern("clustered", 3, 0.3), "f64")
        plan = make_plan(L, 1, "random", 0.5, fuzz_stream.next_uint())
        merged = mame(t, plan, SimilarityConfig.for_dtype("f64", tau=0.2))
        restored = mare(merged)

        _, y_dst, _ = split_merged(merged)
        W = merged.state.W_fused
        for b in range(t.batch):
            for j in np.flatnonzero(~merged.state.mask_final):
                y = y_dst[b, W[b, :, j] > 0]
                if y.shape[0] == 0:
                    continue
                rec = restored.data[b, plan.src_index[j]]
                assert (rec >= y.min(axis=0) - 1e-9).all()
                assert (rec <= y.max(axis=0) + 1e-9).all()


def test_noiseless_clusters_restore_exactly(fuzz_stream):
    for _ in range(50):
        k = (1, 3, 4, 5)[fuzz_stream.next_uint() % 4]
        L = 2 * k + 2 + fuzz_stream.next_uint() % 60
        t = gen_synthetic(1, L, 64, 0, fuzz_stream.next_uint(), Pattern("clustered", k, 0.0), "f64")
        merged = mame(t, make_plan(L, 0, "alternating"), SimilarityConfig.for_dtype("f64", tau=0.5))
        restored = mare(merged)
        assert np.abs(restored.data - t.data).max() <= 1e-12


@pytest.mark.parametrize("style", ["alternating", "random"])
def test_even_cluster_count_restores_when_centers_are_apart(style):
    # exactness needs every pair of distinct centers below tau
    checked = 0
    for seed in range(20):
        t = gen_synthetic(1, 40, 64, 0, seed, Pattern("clustered", 4, 0.0), "f64")
        centers = t.data[0, :4]
        cos = centers @ centers.T / np.outer(np.linalg.norm(centers, axis=1), np.linalg.norm(centers, axis=1))
        if np.abs(cos - np.eye(4)).max() >= 0.5:
            continue
        checked += 1

        merged = mame(t, make_plan(40, 0, style, 0.5, seed), SimilarityConfig.for_dtype("f64", tau=0.5))
        if style == "alternating":
            # sources sit on odd ordinals and never share a center with a destination
            assert merged.length == 40
        assert np.abs(mare(merged).data - t.data).max() <= 1e-12
    assert checked >= 15


def test_duplicate_group_restores_within_tolerance():
    """A source merged into two equal destinations comes back unchanged"""
    v = np.array([0.6, -0.8, 0.0])
    w = np.array([0.0, 0.6, 0.8])
    u = np.array([0.58, -0.79, 0.1])
    data = np.stack([v, v, u, w, v])[None]
    plan = make_plan(5, 0, "alternating")
    merged = mame(TokenMatrix(data), plan, SimilarityConfig.for_dtype("f64", tau=0.5))
    assert merged.r < plan.N

    restored = mare(merged)
    np.testing.assert_allclose(restored.data[0, [0, 1, 4]], np.stack([v, v, v]), atol=1e-12)


def test_reconstruct_dst_is_identity():
    y = np.arange(6, dtype=np.float64).reshape(1, 2, 3)
    assert reconstruct_dst(y, np.ones((1, 2))) is y
    with pytest.raises(StateError):
        reconstruct_dst(y, np.ones((1, 3)))


def test_reconstruct_src_split_source():
    W = np.array([[[0.5, 0.0], [0.5, 0.0]]])
    x_dst = np.array([[[2.0, 0.0], [0.0, 4.0]]])
    x_pres = np.array([[[7.0, 7.0]]])
    rec = reconstruct_src(W, x_dst, np.array([False, True]), x_pres)
    np.testing.assert_array_equal(rec[0, 0], [1.0, 2.0])
    np.testing.assert_array_equal(rec[0, 1], [7.0, 7.0])


def test_reconstruct_src_preserved_count_mismatch():
    with pytest.raises(StateError):
        reconstruct_src(np.zeros((1, 2, 2)), np.zeros((1, 2, 1)), np.array([True, True]), np.zeros((1, 1, 1)))


def test_merged_length_mismatch():
    t = gen_synthetic(1, 9, 3, 1, seed=2, pattern="clustered:2:0.2", dtype="f64")
    merged = mame(t, make_plan(9, 1), SimilarityConfig.for_dtype("f64", tau=0.3))
    broken = MergedSequence(merged.tokens[:, :-1], merged.l_spec, merged.M, merged.preserved_src, merged.state)
    with pytest.raises(StateError) as exc:
        mare(broken)
    assert exc.value.rule == "merged_length"


def test_restore_from_files(tmp_path):
    t = gen_synthetic(2, 30, 5, 1, seed=6, pattern="clustered:3:0.1", dtype="f64")
    plan = make_plan(30, 1, "random", 0.5, seed=1)
    merged = mame(t, plan, SimilarityConfig.for_dtype("f64", tau=0.4))
    write_tokens(merged.to_token_matrix(), str(tmp_path / "m.mamt"))
    write_fusion_state(merged.state.to_state_file(), str(tmp_path / "s.json"))

    loaded = MergedSequence.from_parts(read_tokens(str(tmp_path / "m.mamt")),
                                       read_fusion_state(str(tmp_path / "s.json")))
    assert loaded.preserved_src == merged.preserved_src
    assert mare(loaded).equals(mare(merged))


def test_from_parts_rejects_wrong_batch():
    t = gen_synthetic(2, 10, 3, 0, seed=3, dtype="f64")
    merged = mame(t, make_plan(10, 0), SimilarityConfig.for_dtype("f64", tau=0.2))
    one = TokenMatrix(merged.tokens[:1], 0)
    with pytest.raises(StateError) as exc:
        MergedSequence.from_parts(one, merged.state)
    assert exc.value.rule == "batch"


def test_state_file_rebuilds_fusion_state():
    t = gen_synthetic(1, 16, 4, 0, seed=12, pattern="clustered:2:0.2", dtype="f64")
    merged = mame(t, make_plan(16, 0), SimilarityConfig.for_dtype("f64", tau=0.5))
    rebuilt = FusionState.from_state_file(merged.state.to_state_file())
    np.testing.assert_array_equal(rebuilt.W_fused, merged.state.W_fused)
    np.testing.assert_array_equal(rebuilt.layout_order, merged.state.layout_order)


def test_pinv_reference_on_small_instances():
    for seed in range(5):
        t = gen_synthetic(1, 12, 3, 1, seed, "clustered:2:0.05", "f64")
        merged = mame(t, make_plan(12, 1), SimilarityConfig.for_dtype("f64", tau=0.5))
        plan = merged.state.plan
        ref = pinv_reference(merged)
        assert ref.data.shape == t.data.shape
        np.testing.assert_array_equal(ref.data[:, :1], t.data[:, :1])

        # the least-squares solution re-merges to the stored rows
        W = merged.state.W_fused[0]
        R = 1.0 + W.sum(axis=1)
        remerged = (ref.data[0, list(plan.dst_index)] + W @ ref.data[0, list(plan.src_index)]) / R[:, None]
        np.testing.assert_allclose(remerged, merged.tokens[0, 1:1 + plan.M], atol=1e-10)
        kept = list(merged.preserved_src)
        np.testing.assert_allclose(ref.data[0, kept], t.data[0, kept], atol=1e-10)
