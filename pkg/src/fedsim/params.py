"""Flat parameter-vector geometry.

Model parameters, gradients and momenta all travel through the system
as 1-D float64 numpy arrays; the aggregators and attacks reduce to the
operations below. Everything here is a pure function of its inputs.
"""

import numpy as np


class ZeroVectorError(ValueError):
    """Cosine distance is undefined for a zero-norm vector."""


def as_param_vector(values) -> np.ndarray:
    """Coerce to a 1-D float64 array, rejecting NaN/Inf entries."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if not np.all(np.isfinite(v)):
        raise ValueError("parameter vector contains non-finite entries")
    return v


def l2_norm(v: np.ndarray) -> float:
    return float(np.linalg.norm(v))


def dot(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b))


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a - b


def scale(v: np.ndarray, c: float) -> np.ndarray:
    return c * v


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - <a,b>/(|a||b|), in [0, 2]. Raises ZeroVectorError on zero norms."""
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine distance undefined for zero vector")
    cos = np.dot(a, b) / (na * nb)
    # rounding can push |cos| infinitesimally past 1
    return float(1.0 - np.clip(cos, -1.0, 1.0))


def clip_by_norm(v: np.ndarray, tau: float) -> np.ndarray:
    """Rescale v to norm at most tau, preserving direction."""
    if tau <= 0:
        raise ValueError(f"clip threshold must be positive, got {tau}")
    n = np.linalg.norm(v)
    if n <= tau:
        return v.copy()
    return v * (tau / n)


def sign(v: np.ndarray) -> np.ndarray:
    """Entrywise sign with entries in {-1, 0, +1}."""
    return np.sign(v)


def median_of_norms(vectors) -> float:
    """Scalar median of the L2 norms of a set of vectors.

    An even-length set yields the mean of the two middle norms.
    """
    norms = [np.linalg.norm(v) for v in vectors]
    if not norms:
        raise ValueError("median of empty set")
    return float(np.median(norms))


def pairwise_distance_matrix(vectors) -> np.ndarray:
    """Symmetric matrix of Euclidean distances, zero diagonal."""
    x = np.asarray(vectors, dtype=np.float64)
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(np.maximum(d2, 0.0))


def pairwise_cosine_distance_matrix(vectors) -> np.ndarray:
    """Symmetric matrix of cosine distances, zero diagonal."""
    x = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise ZeroVectorError("cosine distance undefined for zero vector")
    unit = x / norms[:, None]
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    d = 1.0 - cos
    np.fill_diagonal(d, 0.0)
    return d


def max_pairwise_distance(vectors) -> float:
    """Largest Euclidean distance between any two vectors in the set.

    Zero for an empty set or singleton.
    """
    vectors = list(vectors)
    if len(vectors) < 2:
        return 0.0
    return float(pairwise_distance_matrix(vectors).max())


def max_pairwise_cosine_distance(vectors) -> float:
    """Largest cosine distance between any two vectors in the set."""
    vectors = list(vectors)
    if len(vectors) < 2:
        return 0.0
    return float(pairwise_cosine_distance_matrix(vectors).max())
