"""Accuracy and silhouette score."""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

from .numerics import DegenerateInputError


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DegenerateInputError("accuracy of an empty set is undefined")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def silhouette(features: np.ndarray, cluster_ids: np.ndarray) -> float:
    """Mean silhouette coefficient with Euclidean distance.

    Points in singleton clusters score 0, as do points with a = b = 0.
    Raises DegenerateInputError with fewer than two non-empty clusters or
    fewer than three points.
    """
    x = np.asarray(features, dtype=np.float64)
    ids = np.asarray(cluster_ids)
    n = len(ids)
    labels, inv, counts = np.unique(ids, return_inverse=True, return_counts=True)
    if len(labels) < 2 or n < 3:
        raise DegenerateInputError("silhouette needs at least two clusters and three points")
    dist = cdist(x, x)
    onehot = np.zeros((n, len(labels)))
    onehot[np.arange(n), inv] = 1.0
    sums = dist @ onehot  # distance from each point to every cluster, summed
    own = counts[inv]
    a = sums[np.arange(n), inv] / np.maximum(own - 1, 1)
    mean_to = sums / counts[None, :]
    mean_to[np.arange(n), inv] = np.inf
    b = mean_to.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[own == 1] = 0.0
    return float(np.clip(s.mean(), -1.0, 1.0))


def silhouette_or_nan(features: np.ndarray, cluster_ids: np.ndarray) -> float:
    """Silhouette, or NaN as the sentinel for a degenerate clustering."""
    try:
        return silhouette(features, cluster_ids)
    except DegenerateInputError:
        return float("nan")
