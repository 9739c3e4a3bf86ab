"""Similarity functions between destination and source tokens"""

from abc import ABC, abstractmethod

import numpy as np
from scipy.special import softmax

from errors import ParameterError


SIMILARITIES = ("cosine", "euclidean", "dot", "softmax")


class SimilarityFunction(ABC):
    """Abstract base class for similarity functions"""

    name = "abstract"

    def __init__(self, epsilon: float = 1e-6):
        self.epsilon = epsilon

    @abstractmethod
    def compute(self, x_dst: np.ndarray, x_src: np.ndarray) -> np.ndarray:
        """(..., M, d) x (..., N, d) -> (..., M, N)"""
        pass


class CosineSimilarity(SimilarityFunction):
    """x_i . x_j / (|x_i| |x_j| + eps), clipped to [-1, 1]"""

    name = "cosine"

    def compute(self, x_dst: np.ndarray, x_src: np.ndarray) -> np.ndarray:
        dots = x_dst @ np.swapaxes(x_src, -1, -2)
        norm_dst = np.linalg.norm(x_dst, axis=-1)
        norm_src = np.linalg.norm(x_src, axis=-1)
        denom = norm_dst[..., :, None] * norm_src[..., None, :] + self.epsilon
        return np.clip(dots / denom, -1.0, 1.0)


class EuclideanSimilarity(SimilarityFunction):
    """Negative L2 distance, from |a|^2 + |b|^2 - 2 a.b (no M x N x d temporary)"""

    name = "euclidean"

    def compute(self, x_dst: np.ndarray, x_src: np.ndarray) -> np.ndarray:
        sq_dst = np.einsum("...md,...md->...m", x_dst, x_dst)
        sq_src = np.einsum("...nd,...nd->...n", x_src, x_src)
        d2 = sq_dst[..., :, None] + sq_src[..., None, :] - 2.0 * (x_dst @ np.swapaxes(x_src, -1, -2))
        return -np.sqrt(np.maximum(d2, 0.0))


class DotSimilarity(SimilarityFunction):
    """Raw inner product"""

    name = "dot"

    def compute(self, x_dst: np.ndarray, x_src: np.ndarray) -> np.ndarray:
        return x_dst @ np.swapaxes(x_src, -1, -2)


class SoftmaxSimilarity(SimilarityFunction):
    """Row-wise softmax of the dot matrix (each destination's distribution over sources)"""

    name = "softmax"

    def compute(self, x_dst: np.ndarray, x_src: np.ndarray) -> np.ndarray:
        return softmax(x_dst @ np.swapaxes(x_src, -1, -2), axis=-1)


def create_similarity(name: str = "cosine", epsilon: float = 1e-6) -> SimilarityFunction:
    """Factory function to create a similarity function

    Args:
        name: "cosine", "euclidean", "dot" or "softmax"
        epsilon: stabilizer, used by cosine for zero-norm tokens
    """
    if name == "cosine":
        return CosineSimilarity(epsilon)
    elif name == "euclidean":
        return EuclideanSimilarity(epsilon)
    elif name == "dot":
        return DotSimilarity(epsilon)
    elif name == "softmax":
        return SoftmaxSimilarity(epsilon)
    else:
        raise ParameterError(f"Unknown similarity: {name}. Use one of {SIMILARITIES}")
