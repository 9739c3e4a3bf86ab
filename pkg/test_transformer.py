#!/usr/bin/env python3
"""Tests for the toy transformer blocks and stacks"""

from dataclasses import replace

import numpy as np
import pytest

from errors import ContractError, ParameterError
from mame import SimilarityConfig, mame
from partition import make_plan
from rng import derive_seed
from tokenio import TokenMatrix, gen_synthetic
from transformer import (
    BlockConfig,
    BlockWeights,
    attention_probs,
    gelu,
    layer_norm,
    mlp,
    msa,
    parse_layers,
    perception_block,
    run_stack,
    synthesis_block,
    vanilla_block,
)


def _config(tau=0.5, **kwargs):
    merge_cfg = SimilarityConfig.for_dtype("f64", tau=tau, metric_source=kwargs.pop("metric_source", "hidden"))
    return BlockConfig(d_model=16, heads=4, mlp_ratio=2, seed=3, merge_cfg=merge_cfg, **kwargs)


@pytest.fixture
def tokens():
    return gen_synthetic(2, 21, 16, 1, seed=9, pattern="clustered:4:0.3", dtype="f64")


def test_layer_norm_statistics():
    x = gen_synthetic(1, 5, 32, 0, seed=1, dtype="f64").data * 3.0 + 2.0
    y = layer_norm(x)
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)


def test_attention_rows_are_distributions():
    x = gen_synthetic(1, 7, 8, 0, seed=2, dtype="f64").data
    A = attention_probs(x, x)
    assert A.shape == (1, 7, 7)
    np.testing.assert_allclose(A.sum(axis=-1), 1.0)


def test_gelu_reference_points():
    assert gelu(np.array(0.0)) == 0.0
    assert gelu(np.array(10.0)) == pytest.approx(10.0)
    assert gelu(np.array(1.0)) == pytest.approx(0.8412, abs=1e-4)


def test_msa_and_mlp_shapes():
    cfg = _config()
    w = BlockWeights.init(cfg, 2)
    x = gen_synthetic(2, 11, 16, 0, seed=3, dtype="f64").data
    out, keys = msa(x, w, cfg.heads)
    assert out.shape == (2, 11, 16)
    assert keys.shape == (2, 4, 11, 4)
    np.testing.assert_allclose(keys[:, 1], (x @ w.Wk)[..., 4:8])
    assert mlp(x, w).shape == (2, 11, 16)


def test_single_token_attention_is_value_projection():
    cfg = _config()
    w = BlockWeights.init(cfg, 7)
    x = gen_synthetic(2, 1, 16, 0, seed=5, dtype="f64").data
    h = layer_norm(x, w.ln1_gain, w.ln1_bias)
    out, _ = msa(h, w, cfg.heads)
    np.testing.assert_allclose(out, h @ w.Wv @ w.Wo, atol=1e-12)


def test_weights_are_seeded():
    cfg = _config()
    a, b = BlockWeights.init(cfg, 5), BlockWeights.init(cfg, 5)
    c = BlockWeights.init(cfg, 6)
    assert np.array_equal(a.Wq, b.Wq) and np.array_equal(a.W2, b.W2)
    assert not np.array_equal(a.Wq, c.Wq)
    assert a.W1.shape == (16, 32) and a.b1.shape == (32,)


@pytest.mark.parametrize("tau", [0.0, 0.5, 0.8, 1.0])
def test_synthesis_keeps_shape(tokens, tau):
    cfg = _config(tau, mode="synthesis")
    out = synthesis_block(tokens, BlockWeights.init(cfg, 1), cfg)
    assert out.data.shape == tokens.data.shape
    assert out.l_spec == tokens.l_spec
    assert np.isfinite(out.data).all()


def test_synthesis_without_merging_matches_vanilla(tokens):
    cfg = _config(1.0, mode="synthesis")
    w = BlockWeights.init(cfg, 4)
    out = synthesis_block(tokens, w, cfg)
    np.testing.assert_allclose(out.data, vanilla_block(tokens.data, w, cfg), atol=1e-6)


@pytest.mark.parametrize("refine", [True, False])
def test_synthesis_on_constant_tokens_matches_vanilla(refine):
    v = gen_synthetic(1, 1, 16, 0, seed=11, dtype="f64").data
    x = TokenMatrix(np.repeat(v, 13, axis=1), l_spec=1)
    merge_cfg = SimilarityConfig.for_dtype("f64", tau=0.5, refine=refine)
    cfg = BlockConfig(d_model=16, heads=4, mlp_ratio=2, seed=3, mode="synthesis", merge_cfg=merge_cfg)
    w = BlockWeights.init(cfg, 8)
    out = synthesis_block(x, w, cfg)
    np.testing.assert_allclose(out.data, vanilla_block(x.data, w, cfg), atol=1e-5)

    if not refine:
        # attention really ran on the shortened sequence
        merged = mame(x, make_plan(x.length, x.l_spec), merge_cfg)
        assert merged.length < x.length


def test_perception_without_merging_matches_vanilla(tokens):
    cfg = _config(1.0)
    w = BlockWeights.init(cfg, 4)
    out, merged = perception_block(tokens, w, cfg)
    assert out.length == tokens.length
    reference = vanilla_block(tokens.data, w, cfg)[:, merged.state.layout_order]
    np.testing.assert_allclose(out.data, reference, atol=1e-6)


def test_perception_shortens(tokens):
    cfg = _config(0.0)
    out, merged = perception_block(tokens, BlockWeights.init(cfg, 4), cfg)
    assert out.length == merged.length < tokens.length
    np.testing.assert_array_equal(out.data.shape, (2, merged.length, 16))


def test_perception_shortens_clustered_input_at_half_threshold():
    x = gen_synthetic(2, 31, 16, 1, seed=6, pattern="clustered:3:0.05", dtype="f64")
    cfg = _config(0.5)
    out, merged = perception_block(x, BlockWeights.init(cfg, 4), cfg)
    assert out.length == merged.length < x.length
    assert np.isfinite(out.data).all()


def test_single_head_key_sources_agree(tokens):
    cfg = replace(_config(0.3, metric_source="keys"), heads=1)
    mean_cfg = replace(cfg, merge_cfg=replace(cfg.merge_cfg, metric_source="keys_head_mean"))
    w = BlockWeights.init(cfg, 4)
    out_keys, merged_keys = perception_block(tokens, w, cfg)
    out_mean, merged_mean = perception_block(tokens, w, mean_cfg)
    np.testing.assert_array_equal(merged_keys.state.W_fused, merged_mean.state.W_fused)
    np.testing.assert_array_equal(merged_keys.state.mask_final, merged_mean.state.mask_final)
    assert out_keys.equals(out_mean)


@pytest.mark.parametrize("metric_source", ["keys", "keys_head_mean"])
def test_key_metrics(tokens, metric_source):
    for mode in ("perception", "synthesis"):
        cfg = _config(0.3, mode=mode, metric_source=metric_source)
        out, lengths = run_stack(tokens, cfg, depth=2, merge_layers=[1])
        assert lengths[-1] <= tokens.length
        assert np.isfinite(out.data).all()


def test_perception_stack_lengths_never_grow():
    x = gen_synthetic(1, 65, 16, 1, seed=4, pattern="clustered:6:0.2", dtype="f64")
    out, lengths = run_stack(x, _config(0.5), depth=12, merge_layers=[3, 6, 9])
    assert len(lengths) == 12
    assert all(b <= a for a, b in zip([x.length] + lengths, lengths))
    assert lengths[1] == x.length
    assert out.length == lengths[-1]


def test_synthesis_stack_keeps_length(tokens):
    out, lengths = run_stack(tokens, _config(0.5, mode="synthesis"), depth=4, merge_layers=[1, 3])
    assert lengths == [tokens.length] * 4
    assert out.data.shape == tokens.data.shape


def test_stack_is_deterministic(tokens):
    cfg = _config(0.5)
    a, _ = run_stack(tokens, cfg, depth=3, merge_layers=[2])
    b, _ = run_stack(tokens, cfg, depth=3, merge_layers=[2])
    assert a.equals(b)
    c, _ = run_stack(tokens, replace(cfg, seed=4), depth=3, merge_layers=[2])
    assert not a.equals(c)


def test_stack_falls_back_when_too_short():
    x = gen_synthetic(1, 2, 16, 1, seed=1, dtype="f64")
    cfg = _config(-1.0)
    out, lengths = run_stack(x, cfg, depth=3, merge_layers=[1, 2, 3])
    assert lengths == [2, 2, 2]

    plain = x.data
    for layer in (1, 2, 3):
        plain = vanilla_block(plain, BlockWeights.init(cfg, derive_seed(cfg.seed, layer)), cfg)
    np.testing.assert_array_equal(out.data, plain)


def test_causal_stack():
    x = gen_synthetic(1, 20, 16, 0, seed=2, pattern="clustered:3:0.3", dtype="f64")
    merge_cfg = SimilarityConfig.for_dtype("f64", tau=0.3, causal=True)
    cfg = BlockConfig(d_model=16, heads=2, merge_cfg=merge_cfg, plan_style="causal")
    _, lengths = run_stack(x, cfg, depth=2, merge_layers=[1])
    assert lengths[0] <= 20


def test_parse_layers():
    assert parse_layers("3,6,9") == [3, 6, 9]
    assert parse_layers("9, 3,3") == [3, 9]
    assert parse_layers("") == []
    with pytest.raises(ParameterError):
        parse_layers("0,2")
    with pytest.raises(ParameterError):
        parse_layers("a")


@pytest.mark.parametrize("kwargs", [
    {"d_model": 10, "heads": 4},
    {"mlp_ratio": 0},
    {"mode": "decoder"},
    {"plan_style": "spiral"},
    {"merge_cfg": SimilarityConfig(causal=True)},
])
def test_block_config_validation(kwargs):
    with pytest.raises(ParameterError):
        BlockConfig(**kwargs)


def test_stack_checks_dimensions(tokens):
    with pytest.raises(ContractError):
        run_stack(tokens, BlockConfig(d_model=8, heads=2), depth=1)
    with pytest.raises(ParameterError):
        run_stack(tokens, _config(), depth=2, merge_layers=[3])


def test_f32_tokens_stay_f32():
    x = gen_synthetic(1, 9, 16, 0, seed=1, dtype="f32")
    cfg = replace(_config(0.5), merge_cfg=SimilarityConfig.for_dtype("f32", tau=0.5))
    out, _ = run_stack(x, cfg, depth=2, merge_layers=[1])
    assert out.dtype == "f32"
    assert isinstance(out, TokenMatrix)
