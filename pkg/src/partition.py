"""Destination/source partition of the non-special positions"""

from dataclasses import dataclass
from typing import Tuple
import math

import numpy as np

from errors import ContractError, ParameterError, PartitionError
from rng import SplitMix64
from tokenio import TokenMatrix


STYLES = ("alternating", "sequential", "random", "causal")


@dataclass(frozen=True)
class PartitionPlan:
    """Batch-global split of positions l_spec..L-1 into destinations and sources"""

    style: str
    dst_index: Tuple[int, ...]
    src_index: Tuple[int, ...]
    l_spec: int
    length: int
    seed: int = 0

    @property
    def M(self) -> int:
        return len(self.dst_index)

    @property
    def N(self) -> int:
        return len(self.src_index)

    @property
    def layout_order(self) -> np.ndarray:
        """Original positions of concat(X_spec, X_dst, X_src) rows"""
        return np.array(list(range(self.l_spec)) + list(self.dst_index) + list(self.src_index), dtype=np.int64)


def _dst_count(count: int, ratio_src: float) -> int:
    # tolerance keeps exact products such as 0.7 * 10 from rounding up
    n_dst = math.ceil((1.0 - ratio_src) * count - 1e-9)
    return min(max(n_dst, 1), count - 1)


def make_plan(L: int, l_spec: int = 0, style: str = "alternating", ratio_src: float = 0.5, seed: int = 0) -> PartitionPlan:
    """
    Build a partition plan

    Args:
        L: sequence length
        l_spec: leading special tokens, never partitioned
        style: "alternating" (even ordinal -> dst), "sequential", "random"
            or "causal" (odd ordinal -> dst)
        ratio_src: source fraction, used by sequential and random only
        seed: splitmix64 seed for the random style

    Returns:
        PartitionPlan with ascending index sets
    """
    if style not in STYLES:
        raise ParameterError(f"Unknown partition style: {style}. Use one of {STYLES}")
    if l_spec < 0 or L - l_spec < 2:
        raise PartitionError(f"nothing to partition: L={L}, l_spec={l_spec} leaves fewer than 2 positions")

    positions = list(range(l_spec, L))
    count = len(positions)

    if style == "alternating":
        dst = positions[0::2]
        src = positions[1::2]
    elif style == "causal":
        dst = positions[1::2]
        src = positions[0::2]
    else:
        if not 0.0 < ratio_src < 1.0:
            raise ParameterError(f"ratio_src must lie in (0, 1), got {ratio_src}")
        n_dst = _dst_count(count, ratio_src)
        if style == "random":
            positions = SplitMix64(seed).shuffle(positions)
        dst = sorted(positions[:n_dst])
        src = sorted(positions[n_dst:])

    return PartitionPlan(style, tuple(dst), tuple(src), l_spec, L, seed)


def split(t: TokenMatrix, p: PartitionPlan) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gather (X_spec, X_dst, X_src), each B x rows x d, rows in ascending position order"""
    if p.length != t.length or p.l_spec != t.l_spec:
        raise ContractError(
            f"plan built for L={p.length}, l_spec={p.l_spec} but tokens have L={t.length}, l_spec={t.l_spec}"
        )
    data = t.data
    return (
        data[:, :p.l_spec, :],
        data[:, list(p.dst_index), :],
        data[:, list(p.src_index), :],
    )
