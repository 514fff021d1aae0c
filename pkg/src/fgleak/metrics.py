"""Distribution-comparison metrics and embedding-variance reporting."""

from __future__ import annotations

import numpy as np

from .errors import MetricError

SIMPLEX_TOL = 1e-9


def cosine_similarity(d: np.ndarray, d_star: np.ndarray) -> float:
    """dot(d, d*) / (||d|| * ||d*||); undefined for a zero vector."""
    d = np.asarray(d, dtype=np.float64)
    d_star = np.asarray(d_star, dtype=np.float64)
    if d.shape != d_star.shape:
        raise MetricError("vectors must have equal length")
    na, nb = np.linalg.norm(d), np.linalg.norm(d_star)
    if na == 0.0 or nb == 0.0:
        raise MetricError("cosine similarity undefined for a zero vector")
    return float(d @ d_star / (na * nb))


def js_divergence(d: np.ndarray, d_star: np.ndarray) -> float:
    """Jensen-Shannon divergence with base-2 logarithm; range [0, 1].

    Inputs must be probability vectors (nonnegative, summing to 1 within
    1e-9). Zero entries contribute nothing (0 * log(0/x) == 0).
    """
    d = np.asarray(d, dtype=np.float64)
    d_star = np.asarray(d_star, dtype=np.float64)
    if d.shape != d_star.shape:
        raise MetricError("vectors must have equal length")
    for name, v in (("first", d), ("second", d_star)):
        if (v < 0).any():
            raise MetricError(f"{name} argument has negative entries")
        if abs(v.sum() - 1.0) > SIMPLEX_TOL:
            raise MetricError(f"{name} argument does not sum to 1")
    mid = 0.5 * (d + d_star)

    def half_kl(p: np.ndarray) -> float:
        nz = p > 0
        return float(np.sum(p[nz] * np.log2(p[nz] / mid[nz])))

    return 0.5 * half_kl(d) + 0.5 * half_kl(d_star)


def variance_report(samples: list[tuple[int, np.ndarray]]) -> list[tuple[int, float, float]]:
    """Population variance of per-sample sums per depth, min-max normalized.

    Returns (depth, variance, normalized) tuples; if all variances are equal
    the normalized values are defined as 0.
    """
    if len(samples) < 2:
        raise MetricError("need at least two depths to normalize across")
    variances = [(int(depth), float(np.var(np.asarray(v, dtype=np.float64))))
                 for depth, v in samples]
    values = np.array([v for _, v in variances])
    spread = values.max() - values.min()
    if spread == 0.0:
        normalized = np.zeros_like(values)
    else:
        normalized = (values - values.min()) / spread
    return [(d, v, float(nv)) for (d, v), nv in zip(variances, normalized)]
