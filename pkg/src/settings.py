"""Environment-driven defaults (loaded from .env by main.py)"""

import os
from dataclasses import dataclass
from typing import Optional

from errors import ParameterError


DTYPES = ("f32", "f64")

# Default stabilizer per storage precision
DEFAULT_EPSILON = {"f32": 1e-6, "f64": 1e-12}


def default_epsilon(dtype: str) -> float:
    """ε matching a storage precision"""
    if dtype not in DEFAULT_EPSILON:
        raise ParameterError(f"Unknown dtype: {dtype}. Use 'f32' or 'f64'")
    return DEFAULT_EPSILON[dtype]


@dataclass(frozen=True)
class Settings:
    """Process-wide defaults; CLI flags override them"""

    seed: int = 0
    dtype: str = "f32"
    epsilon: Optional[float] = None
    tau: float = 0.8
    verbose: bool = True

    @property
    def resolved_epsilon(self) -> float:
        return self.epsilon if self.epsilon is not None else default_epsilon(self.dtype)

    @classmethod
    def from_env(cls) -> "Settings":
        """
        Read MAME_* variables from the environment

        Returns:
            Settings with every unset variable at its default
        """
        try:
            seed = int(os.getenv("MAME_SEED", "0"))
            tau = float(os.getenv("MAME_TAU", "0.8"))
            raw_eps = os.getenv("MAME_EPSILON")
            epsilon = float(raw_eps) if raw_eps else None
        except ValueError as e:
            raise ParameterError(f"Invalid MAME_* environment value: {e}") from e

        dtype = os.getenv("MAME_DTYPE", "f32")
        if dtype not in DTYPES:
            raise ParameterError(f"MAME_DTYPE must be one of {DTYPES}, got {dtype!r}")
        if seed < 0:
            raise ParameterError(f"MAME_SEED must be non-negative, got {seed}")
        if epsilon is not None and epsilon <= 0:
            raise ParameterError(f"MAME_EPSILON must be positive, got {epsilon}")

        verbose = os.getenv("MAME_VERBOSE", "1").lower() not in ("0", "false", "no", "off")
        return cls(seed=seed, dtype=dtype, epsilon=epsilon, tau=tau, verbose=verbose)
