"""Deterministic toy transformer blocks hosting mame/mare

perception: x' = MSA(LN(x)) + x; x'' = MaMe(x'); out = MLP(LN(x'')) + x''
synthesis:  x' = MaRe(MSA(MaMe(LN(x)))) + x; out = MLP(LN(x')) + x'
"""

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Tuple
import math

import numpy as np
from scipy.special import softmax

from errors import ContractError, ParameterError
from mame import MergedSequence, SimilarityConfig, mame
from mare import mare
from partition import STYLES, make_plan
from rng import SplitMix64, derive_seed
from tokenio import TokenMatrix


MODES = ("perception", "synthesis")
LN_EPS = 1e-5


@dataclass(frozen=True)
class BlockConfig:
    """Shape, seed and merge settings of a block (or a stack of blocks)"""

    d_model: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    seed: int = 0
    mode: str = "perception"
    merge_cfg: SimilarityConfig = field(default_factory=SimilarityConfig)
    plan_style: str = "alternating"
    ratio_src: float = 0.5

    def __post_init__(self):
        if self.d_model < 1 or self.heads < 1 or self.d_model % self.heads != 0:
            raise ParameterError(f"d_model={self.d_model} must be a positive multiple of heads={self.heads}")
        if self.mlp_ratio < 1:
            raise ParameterError(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        if self.mode not in MODES:
            raise ParameterError(f"Unknown mode: {self.mode}. Use one of {MODES}")
        if self.plan_style not in STYLES:
            raise ParameterError(f"Unknown partition style: {self.plan_style}. Use one of {STYLES}")
        if self.merge_cfg.causal and self.plan_style != "causal":
            raise ParameterError("causal merging needs plan_style='causal'")

    @property
    def mlp_hidden(self) -> int:
        return self.mlp_ratio * self.d_model


@dataclass
class BlockWeights:
    """LayerNorm, attention and MLP parameters of one block"""

    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, cfg: BlockConfig, seed: Optional[int] = None, dtype=np.float64) -> "BlockWeights":
        """
        Draw weights from the splitmix64 stream

        Projections and MLP parameters are standard normals scaled by
        1/sqrt(d_model), drawn in the order Wq, Wk, Wv, Wo, W1, b1, W2, b2.
        LayerNorm gains start at 1 and biases at 0.
        """
        d, hidden = cfg.d_model, cfg.mlp_hidden
        stream = SplitMix64(cfg.seed if seed is None else seed)
        scale = 1.0 / math.sqrt(d)

        def draw(*shape):
            return (stream.normal(int(np.prod(shape))).reshape(shape) * scale).astype(dtype)

        Wq, Wk, Wv, Wo = draw(d, d), draw(d, d), draw(d, d), draw(d, d)
        W1, b1, W2, b2 = draw(d, hidden), draw(hidden), draw(hidden, d), draw(d)
        ones, zeros = np.ones(d, dtype=dtype), np.zeros(d, dtype=dtype)
        return cls(ones, zeros, ones.copy(), zeros.copy(), Wq, Wk, Wv, Wo, W1, b1, W2, b2)


def layer_norm(x: np.ndarray, gain: Optional[np.ndarray] = None, bias: Optional[np.ndarray] = None,
               eps: float = LN_EPS) -> np.ndarray:
    """LayerNorm over the feature axis (biased variance)"""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    y = (x - mean) / np.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def _heads(x: np.ndarray, heads: int) -> np.ndarray:
    B, L, d = x.shape
    return x.reshape(B, L, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    B, h, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, h * dh)


def attention_probs(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """softmax(q k^T / sqrt(d_head)) over the key axis"""
    return softmax(q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1]), axis=-1)


def msa(x: np.ndarray, w: BlockWeights, heads: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Multi-head self-attention

    Returns:
        (output B x L x d, keys B x heads x L x d_head)
    """
    q = _heads(x @ w.Wq, heads)
    k = _heads(x @ w.Wk, heads)
    v = _heads(x @ w.Wv, heads)
    ctx = attention_probs(q, k) @ v
    return _merge_heads(ctx) @ w.Wo, k


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation"""
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def mlp(x: np.ndarray, w: BlockWeights) -> np.ndarray:
    return gelu(x @ w.W1 + w.b1) @ w.W2 + w.b2


def key_metric(keys: np.ndarray, source: str) -> Optional[np.ndarray]:
    """Similarity features for a metric source; None means the hidden states"""
    if source == "hidden":
        return None
    if source == "keys":
        return _merge_heads(keys)
    if source == "keys_head_mean":
        return keys.mean(axis=1)
    raise ParameterError(f"Unknown metric source: {source}")


def vanilla_block(x: np.ndarray, w: BlockWeights, cfg: BlockConfig) -> np.ndarray:
    """Plain pre-norm block without merging"""
    attn, _ = msa(layer_norm(x, w.ln1_gain, w.ln1_bias), w, cfg.heads)
    x1 = attn + x
    return mlp(layer_norm(x1, w.ln2_gain, w.ln2_bias), w) + x1


def _plan_for(t: TokenMatrix, cfg: BlockConfig, layer: int):
    return make_plan(t.length, t.l_spec, cfg.plan_style, cfg.ratio_src, derive_seed(cfg.seed, 1000 + layer))


def perception_block(x: TokenMatrix, w: BlockWeights, cfg: BlockConfig, layer: int = 0) -> Tuple[TokenMatrix, MergedSequence]:
    """
    Block with merging between attention and MLP

    Returns:
        (shorter output, the MergedSequence produced mid-block)
    """
    attn, keys = msa(layer_norm(x.data, w.ln1_gain, w.ln1_bias), w, cfg.heads)
    x1 = TokenMatrix(attn + x.data, x.l_spec)
    metric = key_metric(keys, cfg.merge_cfg.metric_source)
    merged = mame(x1, _plan_for(x1, cfg, layer), cfg.merge_cfg, metric=metric)
    x2 = merged.tokens
    out = mlp(layer_norm(x2, w.ln2_gain, w.ln2_bias), w) + x2
    return TokenMatrix(out, x.l_spec), merged


def synthesis_block(x: TokenMatrix, w: BlockWeights, cfg: BlockConfig, layer: int = 0) -> TokenMatrix:
    """Block whose attention runs at the merged length; output keeps the input length"""
    h = layer_norm(x.data, w.ln1_gain, w.ln1_bias)
    ln_x = TokenMatrix(h, x.l_spec)
    metric = None
    if cfg.merge_cfg.metric_source != "hidden":
        metric = key_metric(_heads(h @ w.Wk, cfg.heads), cfg.merge_cfg.metric_source)
    merged = mame(ln_x, _plan_for(ln_x, cfg, layer), cfg.merge_cfg, metric=metric)
    attn, _ = msa(merged.tokens, w, cfg.heads)
    restored = mare(merged.with_tokens(attn))
    x1 = restored.data + x.data
    out = mlp(layer_norm(x1, w.ln2_gain, w.ln2_bias), w) + x1
    return TokenMatrix(out, x.l_spec)


def parse_layers(text: str) -> List[int]:
    """'3,6,9' -> [3, 6, 9]; empty string -> []"""
    text = text.strip()
    if not text:
        return []
    try:
        layers = sorted({int(part) for part in text.split(",")})
    except ValueError as e:
        raise ParameterError(f"bad layer list {text!r}: {e}") from e
    if layers and layers[0] < 1:
        raise ParameterError(f"layers are 1-based, got {layers[0]}")
    return layers


def run_stack(
    x: TokenMatrix,
    cfg: BlockConfig,
    depth: int,
    merge_layers: Iterable[int] = (),
) -> Tuple[TokenMatrix, List[int]]:
    """
    Run depth blocks, merging at the given 1-based layers

    Block l uses weights seeded by derive_seed(cfg.seed, l). In perception
    mode the reduced length carries into later blocks; a merge layer whose
    input has fewer than two mergeable tokens runs as a plain block.

    Returns:
        (output tokens, sequence length after every block)
    """
    if x.dim != cfg.d_model:
        raise ContractError(f"tokens have d={x.dim}, config expects d_model={cfg.d_model}")
    merge_layers = set(merge_layers)
    if any(layer < 1 or layer > depth for layer in merge_layers):
        raise ParameterError(f"merge layers {sorted(merge_layers)} outside 1..{depth}")

    lengths = []
    for layer in range(1, depth + 1):
        w = BlockWeights.init(cfg, derive_seed(cfg.seed, layer), dtype=x.data.dtype)
        can_merge = layer in merge_layers and x.length - x.l_spec >= 2
        if can_merge and cfg.mode == "perception":
            x, _ = perception_block(x, w, cfg, layer)
        elif can_merge:
            x = synthesis_block(x, w, cfg, layer)
        else:
            x = TokenMatrix(vanilla_block(x.data, w, cfg), x.l_spec)
        lengths.append(x.length)
    return x, lengths
