"""Numeric kernels: cosine distances, entropy, power weighting and weighted draws."""

from __future__ import annotations

import numpy as np

from replaysel.errors import (
    InsufficientSupportError,
    ProbabilityOverflowError,
    ZeroNormError,
)

PROB_ATOL = 1e-9
DISTANCE_FLOOR = 1e-12


def _as_vector(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(-1)


def cosine_distance(a, b) -> float:
    """Return ``1 - cos(a, b)``, a value in ``[0, 2]``."""
    a = _as_vector(a)
    b = _as_vector(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine distance undefined for a zero vector")
    d = 1.0 - float(np.dot(a, b)) / (na * nb)
    return min(max(d, 0.0), 2.0)


def unit_rows(x: np.ndarray) -> np.ndarray:
    """Normalize each row of a 2-D array to unit length."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ZeroNormError("cosine distance undefined for a zero vector")
    return x / norms


def cosine_similarity_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities between the rows of ``a`` and ``b``."""
    sim = unit_rows(a) @ unit_rows(b).T
    return np.clip(sim, -1.0, 1.0)


def cosine_distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine distances between the rows of ``a`` and ``b``."""
    return 1.0 - cosine_similarity_matrix(a, b)


def check_prob_vec(p) -> np.ndarray:
    p = _as_vector(p)
    if p.size == 0:
        raise ValueError("probability vector must be nonempty")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("probabilities must be finite and non-negative")
    if abs(p.sum() - 1.0) > PROB_ATOL:
        raise ValueError(f"probabilities sum to {p.sum()!r}, expected 1")
    return p


def normalized_entropy(p) -> float:
    """Shannon entropy of ``p`` divided by ``log(len(p))``.

    Zero entries contribute nothing (``0 * log 0 = 0``).
    """
    p = check_prob_vec(p)
    if p.size < 2:
        raise ValueError("normalized entropy needs at least two outcomes")
    nz = p[p > 0]
    h = -float(np.sum(nz * np.log(nz)))
    return min(max(h / np.log(p.size), 0.0), 1.0)


def power_weight_normalize(scores, w: float) -> np.ndarray:
    """Map positive scores to probabilities proportional to ``scores ** w``.

    Works in log space so large exponents do not overflow before
    normalization.
    """
    s = _as_vector(scores)
    if s.size == 0:
        raise ValueError("scores must be nonempty")
    if np.any(s <= 0) or not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite and strictly positive")
    if not np.isfinite(w):
        raise ValueError("exponent must be finite")
    with np.errstate(over="ignore"):
        logw = w * np.log(s)
    if not np.all(np.isfinite(logw)):
        raise ProbabilityOverflowError("power weights are not finite in log space")
    logw -= logw.max()
    p = np.exp(logw)
    total = p.sum()
    if not np.isfinite(total) or total <= 0:
        raise ProbabilityOverflowError("power weights could not be normalized")
    return p / total


def draw_index(weights: np.ndarray, rng: np.random.Generator) -> int:
    """One index drawn proportionally to non-negative ``weights``.

    A single positive weight is returned without consuming randomness.
    Callers guarantee at least one positive weight.
    """
    cum = np.cumsum(weights)
    total = cum[-1]
    first = int(np.searchsorted(cum, 0.0, side="right"))
    if cum[first] == total:
        return first
    idx = int(np.searchsorted(cum, rng.random() * total, side="right"))
    if idx >= weights.size or weights[idx] == 0:
        idx = int(np.flatnonzero(weights > 0)[-1])
    return idx


def weighted_sample_without_replacement(
    p,
    n: int,
    rng: np.random.Generator,
    mask=None,
) -> list[int]:
    """Draw ``n`` distinct indices by sequential draw-and-renormalize.

    ``mask`` marks eligible indices. When exactly one index with positive
    mass remains it is taken without consuming randomness, so point masses
    are deterministic and leave the generator untouched.
    """
    weights = _as_vector(p).copy()
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite and non-negative")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != weights.shape:
            raise ValueError("mask length must match probability length")
        weights[~mask] = 0.0
    support = int(np.count_nonzero(weights > 0))
    if n > support:
        raise InsufficientSupportError(
            f"requested {n} draws but only {support} indices carry mass"
        )
    chosen: list[int] = []
    for _ in range(n):
        idx = draw_index(weights, rng)
        chosen.append(idx)
        weights[idx] = 0.0
    return chosen


def top_k_indices(values, k: int) -> list[int]:
    """Indices of the ``k`` largest values, ties resolved by lower index."""
    v = _as_vector(values)
    if k > v.size:
        raise ValueError(f"k={k} exceeds length {v.size}")
    if k < 0:
        raise ValueError("k must be non-negative")
    order = np.argsort(-v, kind="stable")
    return [int(i) for i in order[:k]]
