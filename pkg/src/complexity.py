"""FLOP model of merge overhead against attention savings

Conventions: a multiply-add counts 2 FLOPs; attention counts only the two
quadratic products (Q K^T and A V, 4 L^2 d together); refining costs a
fixed 8 elementwise operations per similarity entry.
"""

from dataclasses import asdict, dataclass
from typing import Dict, List
import math

import numpy as np
from scipy.integrate import simpson

from counters import CounterRegistry
from errors import ParameterError
from rng import SplitMix64


REFINE_OPS_PER_ENTRY = 8
CSV_COLUMNS = ["alpha", "beta", "bound", "efficient", "overhead_flops", "attention_saved"]


@dataclass(frozen=True)
class FlopReport:
    L: int
    d: int
    alpha: float
    beta: float
    sim_flops: int
    refine_flops: int
    aggregate_flops: int
    preserve_flops: int
    attention_flops_baseline: int
    attention_flops_merged: int
    efficient: bool

    @property
    def overhead_flops(self) -> int:
        return self.sim_flops + self.refine_flops + self.aggregate_flops + self.preserve_flops

    @property
    def attention_saved(self) -> int:
        return self.attention_flops_baseline - self.attention_flops_merged

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["overhead_flops"] = self.overhead_flops
        data["attention_saved"] = self.attention_saved
        return data


def efficiency_bound(alpha: float) -> float:
    """sqrt(alpha^2 - alpha + 1), the largest beta that still pays off"""
    return math.sqrt(alpha * alpha - alpha + 1.0)


def efficiency_condition(alpha: float, beta: float) -> bool:
    """True when merging plus reduced attention beats full attention"""
    return beta < efficiency_bound(alpha)


def flop_report(L: int, d: int, M: int, N: int, L_prime: int) -> FlopReport:
    """
    Exact cost terms for one sequence

    Args:
        L: length before merging (specials included)
        d: feature dimension
        M, N: destination and source counts
        L_prime: length after merging (specials included)
    """
    if L < 1 or d < 1 or M < 0 or N < 0 or M + N > L:
        raise ParameterError(f"inconsistent sizes L={L}, d={d}, M={M}, N={N}")
    if not M <= L_prime <= L:
        raise ParameterError(f"L'={L_prime} must lie in [M={M}, L={L}]")
    alpha = M / L
    beta = L_prime / L
    return FlopReport(
        L=L,
        d=d,
        alpha=alpha,
        beta=beta,
        sim_flops=2 * M * N * d,
        refine_flops=REFINE_OPS_PER_ENTRY * M * N,
        aggregate_flops=2 * M * N * d,
        preserve_flops=M * N,
        attention_flops_baseline=4 * L * L * d,
        attention_flops_merged=4 * L_prime * L_prime * d,
        efficient=efficiency_condition(alpha, beta),
    )


def condition_integral(grid: int = 10_000) -> float:
    """
    Area of {alpha <= beta < bound(alpha)} by Simpson's rule

    The closed form is (3/8) ln 3.
    """
    if grid < 2:
        raise ParameterError(f"grid must be >= 2, got {grid}")
    alpha = np.linspace(0.0, 1.0, grid + 1)
    return float(simpson(np.sqrt(alpha * alpha - alpha + 1.0) - alpha, x=alpha))


def condition_probability_exact(grid: int = 10_000) -> float:
    """Probability that the condition holds, as area B over triangle area 1/2"""
    return condition_integral(grid) / 0.5


def condition_probability(samples: int = 1_000_000, seed: int = 0) -> float:
    """
    Monte Carlo estimate for (alpha, beta) uniform on 0 < alpha <= beta <= 1

    Sorting each uniform pair samples the triangle directly.
    """
    if samples < 1:
        raise ParameterError(f"samples must be >= 1, got {samples}")
    u = SplitMix64(seed).uniform(2 * samples).reshape(samples, 2)
    alpha = u.min(axis=1)
    beta = u.max(axis=1)
    return float(np.mean(beta < np.sqrt(alpha * alpha - alpha + 1.0)))


def measure_counts(counters: CounterRegistry) -> Dict[str, int]:
    """FLOPs observed by an instrumented merge run"""
    return {
        "sim_flops": counters.flops("similarity"),
        "refine_flops": counters.flops("refine"),
        "aggregate_flops": counters.flops("aggregate"),
        "preserve_flops": counters.flops("preserve"),
    }


def sweep(grid: int = 10, L: int = 197, d: int = 768) -> List[Dict]:
    """
    Rows of the analyze CSV over an alpha/beta grid with alpha <= beta

    alpha and beta take the values k/grid, k = 1..grid; M = round(alpha L),
    N = L - M, L' = round(beta L).
    """
    if grid < 1:
        raise ParameterError(f"grid must be >= 1, got {grid}")
    rows = []
    for a in range(1, grid + 1):
        for b in range(a, grid + 1):
            alpha, beta = a / grid, b / grid
            M = max(0, min(L, round(alpha * L)))
            L_prime = max(M, min(L, round(beta * L)))
            report = flop_report(L, d, M, L - M, L_prime)
            rows.append({
                "alpha": alpha,
                "beta": beta,
                "bound": efficiency_bound(alpha),
                "efficient": int(efficiency_condition(alpha, beta)),
                "overhead_flops": report.overhead_flops,
                "attention_saved": report.attention_saved,
            })
    return rows
