"""Dense numeric helpers shared by every other module.

Arrays are plain float64 numpy arrays. Randomness always flows through an
explicit ``numpy.random.Generator`` so that a seed fully determines a run.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

NORM_EPS = 1e-12


class DimensionError(ValueError):
    """Shapes do not line up."""


class DegenerateInputError(ValueError):
    """Input is valid in type but mathematically degenerate (zero norm, empty set...)."""


class ConfigError(ValueError):
    """Invalid configuration value."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf escaped a computation."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the same seed replays the same stream."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def spawn_rng(seed: int, *stream: int) -> np.random.Generator:
    # independent named substreams, e.g. spawn_rng(seed, 1) for evaluation
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(stream))
    return np.random.Generator(np.random.PCG64(ss))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax along ``axis``."""
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax of an empty vector")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0 or x.shape[axis] == 0:
        raise DimensionError("log_softmax of an empty vector")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def l2_normalize(v: np.ndarray, axis: int = -1, eps: float = NORM_EPS) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm along ``axis``.

    Raises DegenerateInputError when any norm is at or below ``eps``; the
    model's projection head uses :func:`l2_normalize_clamped` instead.
    """
    x = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(norm <= eps):
        raise DegenerateInputError("cannot normalize a vector with near-zero norm")
    return x / norm


def l2_normalize_clamped(v: np.ndarray, eps: float = NORM_EPS):
    """Row-wise normalization with the norm clamped from below at ``eps``.

    Returns ``(z, norms, n_clamped)`` where ``norms`` are the clamped norms.
    """
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    clamped = norms < eps
    norms = np.where(clamped, eps, norms)
    return v / norms, norms, int(np.count_nonzero(clamped))


def finite_diff_grad(
    f: Callable[[np.ndarray], float], at: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one entry at a time."""
    x = np.array(at, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"function returned a non-finite value near entry {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest ``|a - n| / |a|`` over entries with ``|a| > floor``.

    Entries at or below the floor must still agree in absolute terms to
    within ``floor``; otherwise they count as a relative error of 1.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.shape != n.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {n.shape}")
    big = np.abs(a) > floor
    worst = 0.0
    if np.any(big):
        worst = float(np.max(np.abs(a[big] - n[big]) / np.abs(a[big])))
    small = ~big
    if np.any(small) and np.max(np.abs(n[small])) > 10 * floor:
        worst = max(worst, 1.0)
    return worst


def check_finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite values in {name}")
