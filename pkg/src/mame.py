"""Matrix-based token merging

Pipeline: split -> similarity -> sparsify -> column normalize -> refine ->
per-sample preservation masks -> batch OR-mask -> column correction ->
(optional causal mask) -> aggregate -> assemble
[specials, fused destinations, preserved sources].
"""

from dataclasses import dataclass
from typing import Optional, Tuple, Union
import time

import numpy as np

from counters import CounterRegistry
from errors import ContractError, ParameterError, StateError
from partition import PartitionPlan, split
from settings import default_epsilon
from similarity import SIMILARITIES, create_similarity
from tokenio import FusionStateFile, NUMPY_DTYPES, TokenMatrix, dtype_name


METRIC_SOURCES = ("hidden", "keys", "keys_head_mean")
COUNT_MODES = ("indicator", "soft")
FUSION_FORMULAS = ("renormalized", "listing")


@dataclass(frozen=True)
class SimilarityConfig:
    """
    Merge configuration

    fusion_formula="listing" divides the unpruned W by the pruned column sum
    (the published pseudo-code line); it is kept for study only.
    tie_atol is the absolute similarity gap above the column mean that still
    counts as a tie; None means 4 * epsilon.
    """

    function: str = "cosine"
    tau: float = 0.8
    epsilon: float = 1e-6
    refine: bool = True
    causal: bool = False
    metric_source: str = "hidden"
    count_mode: str = "indicator"
    fusion_formula: str = "renormalized"
    tie_atol: Optional[float] = None

    def __post_init__(self):
        if self.function not in SIMILARITIES:
            raise ParameterError(f"Unknown similarity: {self.function}. Use one of {SIMILARITIES}")
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be > 0, got {self.epsilon}")
        if self.metric_source not in METRIC_SOURCES:
            raise ParameterError(f"Unknown metric source: {self.metric_source}. Use one of {METRIC_SOURCES}")
        if self.count_mode not in COUNT_MODES:
            raise ParameterError(f"Unknown count mode: {self.count_mode}. Use one of {COUNT_MODES}")
        if self.fusion_formula not in FUSION_FORMULAS:
            raise ParameterError(f"Unknown fusion formula: {self.fusion_formula}. Use one of {FUSION_FORMULAS}")
        if self.tie_atol is not None and self.tie_atol < 0:
            raise ParameterError(f"tie_atol must be >= 0, got {self.tie_atol}")
        if np.isnan(self.tau):
            raise ParameterError("tau must not be NaN")

    @property
    def tie_band(self) -> float:
        return 4.0 * self.epsilon if self.tie_atol is None else self.tie_atol

    @classmethod
    def for_dtype(cls, dtype: str, **kwargs) -> "SimilarityConfig":
        """Config whose epsilon matches the storage precision unless given"""
        kwargs.setdefault("epsilon", default_epsilon(dtype))
        return cls(**kwargs)


@dataclass
class FusionComputation:
    """Every intermediate of one fusion run (batched: leading axis is B)"""

    S: np.ndarray
    S_sparse: np.ndarray
    W: np.ndarray
    C: Optional[np.ndarray]
    zeta: Optional[np.ndarray]
    W_pruned: np.ndarray
    W_fused_sample: np.ndarray
    W_fused: np.ndarray
    mask_per_sample: np.ndarray
    mask_final: np.ndarray
    R: np.ndarray


@dataclass
class FusionState:
    """What restoration needs: the plan, corrected W^F and the final mask"""

    plan: PartitionPlan
    W_fused: np.ndarray
    mask_final: np.ndarray

    @property
    def batch(self) -> int:
        return self.W_fused.shape[0]

    @property
    def R(self) -> np.ndarray:
        """Row scale factors R_i = 1 + sum_j W^F_ij, shape B x M"""
        return 1.0 + self.W_fused.sum(axis=-1)

    @property
    def preserved_cols(self) -> np.ndarray:
        return np.flatnonzero(self.mask_final)

    @property
    def merged_cols(self) -> np.ndarray:
        return np.flatnonzero(~self.mask_final)

    @property
    def layout_order(self) -> np.ndarray:
        """Original positions of [specials, dst, preserved src, merged src]"""
        src = np.array(self.plan.src_index, dtype=np.int64)
        return np.concatenate([
            np.arange(self.plan.l_spec, dtype=np.int64),
            np.array(self.plan.dst_index, dtype=np.int64),
            src[self.preserved_cols],
            src[self.merged_cols],
        ])

    def to_state_file(self) -> FusionStateFile:
        b, i, j = np.nonzero(self.W_fused)
        weights = [
            (int(bb), int(ii), int(jj), float(self.W_fused[bb, ii, jj]))
            for bb, ii, jj in zip(b, i, j)
        ]
        return FusionStateFile(
            M=self.plan.M,
            N=self.plan.N,
            l_spec=self.plan.l_spec,
            dst_index=list(self.plan.dst_index),
            src_index=list(self.plan.src_index),
            preserved_mask=[int(m) for m in self.mask_final],
            weights=sorted(weights),
            layout_order=[int(p) for p in self.layout_order],
            batch=self.batch,
            dtype=dtype_name(self.W_fused),
            style=self.plan.style,
        )

    @classmethod
    def from_state_file(cls, s: FusionStateFile) -> "FusionState":
        s.validate()
        plan = PartitionPlan(s.style, tuple(s.dst_index), tuple(s.src_index), s.l_spec, s.length)
        W = np.zeros((s.batch, s.M, s.N), dtype=NUMPY_DTYPES[s.dtype].newbyteorder("="))
        for b, i, j, value in s.weights:
            W[b, i, j] = value
        return cls(plan, W, np.array(s.preserved_mask, dtype=bool))


@dataclass
class MergedSequence:
    """Reduced tokens [specials, fused dst, preserved src] plus their fusion state"""

    tokens: np.ndarray
    l_spec: int
    M: int
    preserved_src: Tuple[int, ...]
    state: FusionState

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    @property
    def r(self) -> int:
        return len(self.preserved_src)

    def to_token_matrix(self) -> TokenMatrix:
        return TokenMatrix(self.tokens, self.l_spec)

    def with_tokens(self, tokens: np.ndarray) -> "MergedSequence":
        """Same layout, new token values (e.g. after attention at reduced length)"""
        if tokens.shape[:2] != self.tokens.shape[:2]:
            raise ContractError(f"replacement tokens {tokens.shape} do not fit layout {self.tokens.shape}")
        return MergedSequence(tokens, self.l_spec, self.M, self.preserved_src, self.state)

    @classmethod
    def from_parts(cls, tokens: TokenMatrix, state: Union[FusionState, FusionStateFile]) -> "MergedSequence":
        """Rebuild from a merged .mamt tensor and its fusion state"""
        if isinstance(state, FusionStateFile):
            state = FusionState.from_state_file(state)
        plan = state.plan
        r = int(state.mask_final.sum())
        expected = plan.l_spec + plan.M + r
        if tokens.length != expected:
            raise StateError("merged_length", f"tokens have L'={tokens.length}, state expects {expected}")
        if tokens.l_spec != plan.l_spec:
            raise StateError("merged_length", f"tokens have l_spec={tokens.l_spec}, state has {plan.l_spec}")
        if tokens.batch != state.batch:
            raise StateError("batch", f"tokens have B={tokens.batch}, state has {state.batch}")
        src = np.array(plan.src_index, dtype=np.int64)
        preserved = tuple(int(p) for p in src[state.preserved_cols])
        return cls(tokens.data, plan.l_spec, plan.M, preserved, state)


def similarity_matrix(x_dst: np.ndarray, x_src: np.ndarray, cfg: SimilarityConfig) -> np.ndarray:
    """S (..., M, N) under cfg.function"""
    if x_dst.shape[-1] < 1 or x_dst.shape[-1] != x_src.shape[-1]:
        raise ContractError(f"feature dims differ: {x_dst.shape} vs {x_src.shape}")
    return create_similarity(cfg.function, cfg.epsilon).compute(x_dst, x_src)


def sparsify(S: np.ndarray, tau: float) -> np.ndarray:
    """ReLU(S - tau); produces exact zeros"""
    return np.maximum(S - tau, 0.0)


def column_normalize(S_sparse: np.ndarray, eps: float) -> np.ndarray:
    """W_ij = S~_ij / (sum_i S~_ij + eps); all-zero columns stay zero"""
    return S_sparse / (S_sparse.sum(axis=-2, keepdims=True) + eps)


def refine_weights(
    W: np.ndarray,
    eps: float,
    count_mode: str = "indicator",
    tie_atol: Union[float, np.ndarray, None] = None,
    scale: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Adaptive weight refining

    An entry survives when W_ij > zeta_j and it also stands above the plain
    mean of the column's positive entries by more than tie_atol. That margin
    is measured in similarity units (W times scale), where it equals
    S_ij - mean(S over the positive set) and does not move with tau.

    Args:
        W: column-normalized weights (..., M, N)
        eps: stabilizer
        count_mode: "indicator" counts W_ij > 0 exactly, "soft" uses
            sum_i W_ij / (W_ij + eps)
        tie_atol: tie tolerance, scalar or per column (..., N); default
            4 * eps + M * machine epsilon
        scale: per-column factor from W back to similarity units (the
            normalizer sum_i S~_ij + eps); None compares in W units

    Returns:
        (C, zeta, W_pruned, W_fused), C and zeta of shape (..., N)
    """
    if count_mode == "indicator":
        C = (W > 0).sum(axis=-2).astype(W.dtype)
    elif count_mode == "soft":
        C = (W / (W + eps)).sum(axis=-2)
    else:
        raise ParameterError(f"Unknown count mode: {count_mode}. Use one of {COUNT_MODES}")

    zeta = W.sum(axis=-2) / (C + eps)
    if tie_atol is None:
        tie_atol = 4.0 * eps + W.shape[-2] * np.finfo(W.dtype).eps
    positives = np.maximum((W > 0).sum(axis=-2), 1)
    margin = W - (W.sum(axis=-2) / positives)[..., None, :]
    if scale is not None:
        margin = margin * scale[..., None, :]
    tol = np.asarray(tie_atol)
    if tol.ndim:
        tol = tol[..., None, :]
    diff = W - zeta[..., None, :]
    W_pruned = np.where((diff > 0) & (margin > tol), diff, 0.0).astype(W.dtype)
    W_fused = W_pruned / (W_pruned.sum(axis=-2, keepdims=True) + eps)
    return C, zeta, W_pruned, W_fused


def preservation_mask(W_fused: np.ndarray) -> np.ndarray:
    """m_j = 1 exactly when column j sums to zero; shape (..., N)"""
    return W_fused.sum(axis=-2) == 0


def batch_consistent_mask(mask_per_sample: np.ndarray) -> np.ndarray:
    """A source is preserved batch-wide if any sample preserves it"""
    return np.any(np.atleast_2d(mask_per_sample), axis=0)


def correct_fusion(W_fused: np.ndarray, mask_final: np.ndarray) -> np.ndarray:
    """Zero the columns of preserved sources in every sample"""
    return np.where(mask_final[..., None, :], np.zeros((), dtype=W_fused.dtype), W_fused)


def causal_mask(W_fused: np.ndarray, plan: PartitionPlan, eps: float = 1e-6) -> np.ndarray:
    """
    Forbid merging a source into an earlier destination

    Entries with position(src j) > position(dst i) become zero. A column
    that lost weight but kept a positive entry is re-normalized; untouched
    columns are returned unchanged.
    """
    if plan.style != "causal":
        raise ContractError(f"causal masking needs a causal partition, got {plan.style!r}")
    dst = np.array(plan.dst_index)
    src = np.array(plan.src_index)
    forbidden = src[None, :] > dst[:, None]
    masked = np.where(forbidden, np.zeros((), dtype=W_fused.dtype), W_fused)
    touched = (W_fused * forbidden).sum(axis=-2) > 0
    renormalized = masked / (masked.sum(axis=-2, keepdims=True) + eps)
    return np.where(touched[..., None, :], renormalized, masked)


def aggregate(x_dst: np.ndarray, x_src: np.ndarray, W_fused: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Fuse sources into destinations

    Returns:
        (y, R): y_i = (x_dst,i + sum_j W^F_ij x_src,j) / R_i with
        R_i = 1 + sum_j W^F_ij
    """
    R = 1.0 + W_fused.sum(axis=-1)
    x_prime = x_dst + W_fused @ x_src
    return x_prime / R[..., None], R


def _as_batch(x: np.ndarray) -> np.ndarray:
    return x[None] if x.ndim == 2 else x


def compute_fusion(
    m_dst: np.ndarray,
    m_src: np.ndarray,
    cfg: SimilarityConfig,
    plan: Optional[PartitionPlan] = None,
    counters: Optional[CounterRegistry] = None,
) -> FusionComputation:
    """
    Fusion weights from metric features

    Args:
        m_dst: destination features, B x M x k (or M x k)
        m_src: source features, B x N x k (or N x k)
        cfg: merge configuration
        plan: needed when cfg.causal is set
        counters: optional registry receiving per-stage FLOPs

    Returns:
        FusionComputation with batch-corrected W^F
    """
    m_dst, m_src = _as_batch(m_dst), _as_batch(m_src)
    B, M, k = m_dst.shape
    N = m_src.shape[1]

    start = time.perf_counter()
    S = similarity_matrix(m_dst, m_src, cfg)
    if counters is not None:
        counters.add("similarity", 2 * M * N * k * B, start)

    start = time.perf_counter()
    S_sparse = sparsify(S, cfg.tau)
    W = column_normalize(S_sparse, cfg.epsilon)
    if cfg.refine:
        # tolerance and scale come from S and S~ column totals, never from tau alone
        magnitude = np.maximum(np.abs(S).max(axis=-2), 1.0)
        tie_atol = cfg.tie_band + M * np.finfo(W.dtype).eps * magnitude
        scale = S_sparse.sum(axis=-2) + cfg.epsilon
        C, zeta, W_pruned, W_fused = refine_weights(W, cfg.epsilon, cfg.count_mode, tie_atol, scale)
        if cfg.fusion_formula == "listing":
            W_fused = W / (W_pruned.sum(axis=-2, keepdims=True) + cfg.epsilon)
        refine_flops = 8 * M * N * B
    else:
        C, zeta, W_pruned, W_fused = None, None, W, W
        refine_flops = 2 * M * N * B
    if counters is not None:
        counters.add("refine", refine_flops, start)

    start = time.perf_counter()
    # the listing formula decides preservation on the pruned column sums
    mask_source = W_pruned if cfg.fusion_formula == "listing" else W_fused
    mask_per_sample = preservation_mask(mask_source)
    mask_final = batch_consistent_mask(mask_per_sample)
    W_corrected = correct_fusion(W_fused, mask_final)
    if counters is not None:
        counters.add("preserve", M * N * B, start)

    if cfg.causal:
        if plan is None:
            raise ContractError("causal merging needs the partition plan")
        W_corrected = causal_mask(W_corrected, plan, cfg.epsilon)
        causal_per_sample = preservation_mask(W_corrected)
        mask_per_sample = mask_per_sample | causal_per_sample
        mask_final = mask_final | batch_consistent_mask(causal_per_sample)
        W_corrected = correct_fusion(W_corrected, mask_final)

    return FusionComputation(
        S=S,
        S_sparse=S_sparse,
        W=W,
        C=C,
        zeta=zeta,
        W_pruned=W_pruned,
        W_fused_sample=W_fused,
        W_fused=W_corrected,
        mask_per_sample=mask_per_sample,
        mask_final=mask_final,
        R=1.0 + W_corrected.sum(axis=-1),
    )


def mame(
    t: TokenMatrix,
    plan: PartitionPlan,
    cfg: SimilarityConfig,
    metric: Optional[np.ndarray] = None,
    counters: Optional[CounterRegistry] = None,
    return_trace: bool = False,
) -> Union[MergedSequence, Tuple[MergedSequence, FusionComputation]]:
    """
    Merge a token sequence

    Args:
        t: input tokens
        plan: partition built for t's L and l_spec
        cfg: merge configuration
        metric: optional B x L x k features used for similarity instead of
            the hidden states (e.g. attention keys)
        counters: optional FLOP/timing registry
        return_trace: also return the FusionComputation

    Returns:
        MergedSequence (and the trace if requested)
    """
    x_spec, x_dst, x_src = split(t, plan)
    if metric is None:
        m_dst, m_src = x_dst, x_src
    else:
        if metric.shape[:2] != t.data.shape[:2]:
            raise ContractError(f"metric {metric.shape} does not match tokens {t.data.shape}")
        metric_t = TokenMatrix(metric, t.l_spec)
        _, m_dst, m_src = split(metric_t, plan)

    trace = compute_fusion(m_dst, m_src, cfg, plan, counters)
    W_fused = trace.W_fused.astype(t.data.dtype, copy=False)

    start = time.perf_counter()
    if np.any(W_fused):
        y, _ = aggregate(x_dst, x_src, W_fused)
        if counters is not None:
            B, M, N = W_fused.shape
            counters.add("aggregate", 2 * M * N * t.dim * B, start)
    else:
        y = x_dst.copy()

    preserved_cols = np.flatnonzero(trace.mask_final)
    tokens = np.concatenate([x_spec, y, x_src[:, preserved_cols, :]], axis=1)
    src = np.array(plan.src_index, dtype=np.int64)
    merged = MergedSequence(
        tokens=tokens,
        l_spec=plan.l_spec,
        M=plan.M,
        preserved_src=tuple(int(p) for p in src[preserved_cols]),
        state=FusionState(plan, W_fused, trace.mask_final),
    )
    if return_trace:
        return merged, trace
    return merged
