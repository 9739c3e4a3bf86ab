"""Shared pytest fixtures; puts src/ on the import path like main.py does"""

import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from partition import make_plan  # noqa: E402
from rng import SplitMix64  # noqa: E402
from tokenio import TokenMatrix, gen_synthetic  # noqa: E402

# reference material, not part of the suite
collect_ignore_glob = ["examples/*"]


@pytest.fixture
def three_token_case():
    """
    dst1 = [1, 0], src = [1, 0], dst2 = [1/sqrt2, 1/sqrt2] at positions 0, 1, 2

    The alternating plan sends positions 0 and 2 to destinations, 1 to sources.
    """
    h = 1.0 / math.sqrt(2.0)
    data = np.array([[[1.0, 0.0], [1.0, 0.0], [h, h]]])
    t = TokenMatrix(data)
    return t, make_plan(3, 0, "alternating")


@pytest.fixture
def gaussian_tokens():
    return gen_synthetic(2, 33, 8, 1, seed=7, pattern="gaussian", dtype="f64")


@pytest.fixture
def fuzz_stream():
    """Seeded stream for fixed-count fuzz loops"""
    return SplitMix64(20240601)
