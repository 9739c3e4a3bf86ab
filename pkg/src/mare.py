"""Matrix-based token restoration (inverse of mame)

The merged sequence stores normalized destinations y_i = x'_i / R_i, so
destination reconstruction is the identity and each merged source is read
back as sum_i W^F_ij y_i. Every token is then scattered to its original
position through the fusion state's layout order.
"""

from typing import Tuple

import numpy as np

from errors import StateError
from mame import MergedSequence
from tokenio import TokenMatrix


RestoredSequence = TokenMatrix


def split_merged(m: MergedSequence) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(X_spec, Y_dst, X_pres) sliced by the recorded layout"""
    r = int(m.state.mask_final.sum())
    expected = m.l_spec + m.M + r
    if m.length != expected:
        raise StateError("merged_length", f"sequence has L'={m.length}, layout needs l_spec + M + r = {expected}")
    if r != m.r:
        raise StateError("preserved_count", f"state preserves {r} sources, sequence lists {m.r}")
    tokens = m.tokens
    return (
        tokens[:, :m.l_spec, :],
        tokens[:, m.l_spec:m.l_spec + m.M, :],
        tokens[:, m.l_spec + m.M:, :],
    )


def reconstruct_dst(y_dst: np.ndarray, R: np.ndarray) -> np.ndarray:
    """
    Destination reconstruction

    The sequence already holds y_i = x'_i / R_i, so de-scaling by R_i has
    been applied once at merge time; the rows are returned unchanged.
    """
    if R.shape != y_dst.shape[:-1]:
        raise StateError("scale_shape", f"R has shape {R.shape}, destinations {y_dst.shape[:-1]}")
    return y_dst


def reconstruct_src(
    W_fused: np.ndarray,
    x_dst_rec: np.ndarray,
    mask_final: np.ndarray,
    x_pres: np.ndarray,
) -> np.ndarray:
    """
    Source reconstruction

    Preserved sources are copied from X_pres in source order; merged ones
    are x_src,j = sum_i W^F_ij x_dst_rec,i. Columns of W^F sum to 1 only up
    to epsilon, so the sum is divided by the realized column total to keep
    the result an exact convex combination.
    """
    preserved = np.flatnonzero(mask_final)
    if x_pres.shape[-2] != preserved.size:
        raise StateError("preserved_count", f"{x_pres.shape[-2]} preserved tokens for {preserved.size} preserved sources")
    Wt = np.swapaxes(W_fused, -1, -2)
    totals = Wt.sum(axis=-1, keepdims=True)
    rec = (Wt @ x_dst_rec) / np.where(totals > 0, totals, 1.0)
    rec[..., preserved, :] = x_pres
    return rec


def mare(m: MergedSequence) -> RestoredSequence:
    """
    Restore the full-length sequence

    Args:
        m: merged sequence with its fusion state

    Returns:
        TokenMatrix with the pre-merge length, every position written once
    """
    state = m.state
    x_spec, y_dst, x_pres = split_merged(m)
    W = state.W_fused.astype(m.tokens.dtype, copy=False)

    x_dst_rec = reconstruct_dst(y_dst, 1.0 + W.sum(axis=-1))
    x_src_rec = reconstruct_src(W, x_dst_rec, state.mask_final, x_pres)

    ordered = np.concatenate([
        x_spec,
        x_dst_rec,
        x_src_rec[:, state.preserved_cols, :],
        x_src_rec[:, state.merged_cols, :],
    ], axis=1)

    B, _, d = m.tokens.shape
    out = np.full((B, state.plan.length, d), np.nan, dtype=m.tokens.dtype)
    out[:, state.layout_order, :] = ordered
    if np.isnan(out).any():
        raise StateError("scatter", "some original positions were never written")
    return TokenMatrix(out, m.l_spec)


def pinv_reference(m: MergedSequence) -> RestoredSequence:
    """
    Minimum-norm least-squares restoration via the Moore-Penrose inverse

    Builds, per sample, the linear map from [x_dst; x_src] to the merged
    rows and applies its pseudo-inverse. Cubic in L, meant for small
    instances as an error reference.
    """
    state = m.state
    plan = state.plan
    M, N = plan.M, plan.N
    x_spec, merged_dst, x_pres = split_merged(m)
    preserved = state.preserved_cols

    out = np.empty((m.tokens.shape[0], plan.length, m.tokens.shape[2]), dtype=np.float64)
    for b in range(m.tokens.shape[0]):
        W = state.W_fused[b].astype(np.float64)
        R = 1.0 + W.sum(axis=1)
        A = np.zeros((M + preserved.size, M + N))
        A[:M, :M] = np.diag(1.0 / R)
        A[:M, M:] = W / R[:, None]
        A[M + np.arange(preserved.size), M + preserved] = 1.0
        rhs = np.concatenate([merged_dst[b], x_pres[b]], axis=0).astype(np.float64)
        x = np.linalg.pinv(A) @ rhs
        out[b, :plan.l_spec] = x_spec[b]
        out[b, list(plan.dst_index)] = x[:M]
        out[b, list(plan.src_index)] = x[M:]
    return TokenMatrix(out.astype(m.tokens.dtype), plan.l_spec)
