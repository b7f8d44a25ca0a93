"""Sample-selection primitives: uniform, prototype-weighted (GRASP) and ASV.

The ASV path is built on the recursive K-nearest-neighbour Shapley value
with real-valued label agreement: the indicator "labels match" is replaced
by the cosine similarity of label embeddings.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from replaysel.buffer import BufferSample, ReplayBuffer
from replaysel.class_selection import BatchContext
from replaysel.errors import (
    ConfigError,
    DataFormatError,
    ExhaustedClassError,
    ExhaustionError,
)
from replaysel.geometry import (
    DISTANCE_FLOOR,
    cosine_distance_matrix,
    cosine_similarity_matrix,
    power_weight_normalize,
    weighted_sample_without_replacement,
)


@dataclass(frozen=True)
class GraspConfig:
    w: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.w) or self.w <= 0:
            raise ConfigError("GRASP exponent must be finite and > 0")


@dataclass(frozen=True)
class AsvConfig:
    c: float = 0.15
    K: int = 20
    candidate_count: int = 168

    def __post_init__(self):
        if not np.isfinite(self.c) or self.c < 0:
            raise ConfigError("ASV coefficient must be finite and >= 0")
        if int(self.K) != self.K or self.K < 1:
            raise ConfigError("K must be an integer >= 1")
        if int(self.candidate_count) != self.candidate_count or self.candidate_count < 1:
            raise ConfigError("candidate_count must be an integer >= 1")


# -- uniform -------------------------------------------------------------


def _pick_uniform(n_eligible: int, rng: np.random.Generator) -> int:
    # a single eligible choice leaves the generator untouched
    if n_eligible == 1:
        return 0
    return int(rng.integers(n_eligible))


def uniform_sample(class_members: Sequence[int], mask, rng: np.random.Generator) -> int:
    """Uniformly random eligible member id."""
    members = np.asarray(class_members)
    eligible = members if mask is None else members[np.asarray(mask, dtype=bool)]
    if eligible.size == 0:
        raise ExhaustedClassError("no eligible member left in the class")
    return int(eligible[_pick_uniform(eligible.size, rng)])


# -- prototype-weighted ----------------------------------------------------


def grasp_distances(class_members: Sequence[BufferSample], c: int, prototype) -> np.ndarray:
    proto = np.atleast_2d(np.asarray(prototype, dtype=np.float64))
    out = np.empty(len(class_members))
    for i, s in enumerate(class_members):
        try:
            emb = s.class_embeddings[c]
        except KeyError:
            raise DataFormatError(f"sample {s.id} has no embeddings for class {c}") from None
        out[i] = cosine_distance_matrix(emb, proto).min()
    return np.maximum(out, DISTANCE_FLOOR)


def grasp_scores(
    class_members: Sequence[BufferSample],
    c: int,
    prototype,
    cfg: GraspConfig = GraspConfig(),
) -> np.ndarray:
    """Per-member score: closest prototype distance raised to ``-w``."""
    return grasp_distances(class_members, c, prototype) ** (-cfg.w)


def grasp_probabilities(distances, w: float, mask=None) -> np.ndarray:
    """Selection probabilities over members; masked members get zero."""
    d = np.asarray(distances, dtype=np.float64)
    p = np.zeros_like(d)
    keep = np.ones(d.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not keep.any():
        raise ExhaustedClassError("no eligible member left in the class")
    p[keep] = power_weight_normalize(d[keep], -w)
    return p


def grasp_pick(distances, w: float, mask, rng: np.random.Generator) -> int:
    """Index into ``distances`` drawn with prototype-weighted probabilities."""
    p = grasp_probabilities(distances, w, mask)
    (idx,) = weighted_sample_without_replacement(p, 1, rng)
    return idx


def grasp_sample(
    class_members: Sequence[BufferSample],
    c: int,
    prototype,
    cfg: GraspConfig,
    mask,
    rng: np.random.Generator,
) -> int:
    """Draw one eligible member id, weighted inversely to prototype distance."""
    d = grasp_distances(class_members, c, prototype)
    idx = grasp_pick(d, cfg.w, mask, rng)
    return class_members[idx].id


# -- KNN Shapley -----------------------------------------------------------


def knn_sv_sorted(similarities, K: int) -> np.ndarray:
    """KNN-SV of candidates already sorted nearest-first.

    ``similarities`` holds the label agreement of each candidate with the
    evaluation point, shape ``(N,)`` or ``(Q, N)`` for ``Q`` evaluation
    points. Runs the recursion from the farthest candidate inward.
    """
    s = np.asarray(similarities, dtype=np.float64)
    squeeze = s.ndim == 1
    s = np.atleast_2d(s)
    n = s.shape[1]
    if n == 0:
        raise ValueError("need at least one candidate")
    if K < 1:
        raise ValueError("K must be >= 1")
    # a K-NN model cannot use more neighbours than there are candidates
    K = min(K, n)
    sv = np.empty_like(s)
    sv[:, -1] = s[:, -1] / n
    if n > 1:
        m = np.arange(1, n)
        coef = np.minimum(K, m) / (K * m)
        step = (s[:, :-1] - s[:, 1:]) * coef
        # sv[m] = sv[N] + sum_{i >= m} step[i]
        sv[:, :-1] = sv[:, -1:] + np.cumsum(step[:, ::-1], axis=1)[:, ::-1]
    return sv[0] if squeeze else sv


def knn_sv_matrix(cand_features, cand_labels, eval_features, eval_labels, K: int) -> np.ndarray:
    """KNN-SVs of every candidate for every evaluation point, shape ``(N, Q)``.

    Candidates are ordered by cosine distance to each evaluation point,
    ties broken by candidate index.
    """
    dist = cosine_distance_matrix(eval_features, cand_features)
    sim = cosine_similarity_matrix(eval_labels, cand_labels)
    order = np.argsort(dist, axis=1, kind="stable")
    sorted_sim = np.take_along_axis(sim, order, axis=1)
    sv_sorted = knn_sv_sorted(sorted_sim, K)
    out = np.empty_like(sv_sorted)
    np.put_along_axis(out, order, sv_sorted, axis=1)
    return out.T


def knn_sv(candidates, eval_point, K: int) -> np.ndarray:
    """KNN-SV of each ``(feature, label)`` candidate for one evaluation point."""
    if len(candidates) == 0:
        raise ValueError("need at least one candidate")
    feats = np.stack([np.asarray(f, dtype=np.float64) for f, _ in candidates])
    labs = np.stack([np.asarray(y, dtype=np.float64) for _, y in candidates])
    ef, el = eval_point
    return knn_sv_matrix(feats, labs, np.atleast_2d(ef), np.atleast_2d(el), K)[:, 0]


@dataclass(frozen=True)
class KnnSvTable:
    """Image-level KNN-SVs: rows are candidates, columns evaluation items."""

    scores: np.ndarray
    reduction: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape


def sample_instances(samples: Sequence[BufferSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flatten samples into instance features, labels and group starts.

    A stored class embedding serves as its own label embedding.
    """
    feats, starts = [], []
    count = 0
    for s in samples:
        starts.append(count)
        for arr in s.class_embeddings.values():
            feats.append(arr)
            count += arr.shape[0]
    f = np.concatenate(feats)
    return f, f, np.array(starts, dtype=np.int64)


def batch_instances(batch: BatchContext) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    feats = [im.top_k_embeddings for im in batch.images]
    labs = [im.labels for im in batch.images]
    starts = np.cumsum([0] + [f.shape[0] for f in feats[:-1]]).astype(np.int64)
    return np.concatenate(feats), np.concatenate(labs), starts


def _reduce_groups(x: np.ndarray, row_starts, col_starts, how: str) -> np.ndarray:
    ufunc = {"max": np.maximum, "min": np.minimum}[how]
    return ufunc.reduceat(ufunc.reduceat(x, row_starts, axis=0), col_starts, axis=1)


def knn_sv_table(candidate_set, eval_set, K: int, reduction: str) -> KnnSvTable:
    """Instance-level KNN-SVs all-to-all, reduced to an image-level table.

    Every stored instance of every candidate forms the neighbour pool for
    each evaluation instance; both instance axes are then reduced by
    ``reduction`` (``"max"`` or ``"min"``) within each image.
    ``eval_set`` is a :class:`BatchContext` or a list of buffer samples.
    """
    if reduction not in ("max", "min"):
        raise ValueError("reduction must be 'max' or 'min'")
    if len(candidate_set) == 0 or len(eval_set) == 0:
        raise ValueError("candidate and evaluation sets must be nonempty")
    cf, cl, cs = sample_instances(candidate_set)
    if isinstance(eval_set, BatchContext):
        ef, el, es = batch_instances(eval_set)
    else:
        ef, el, es = sample_instances(eval_set)
    inst = knn_sv_matrix(cf, cl, ef, el, K)
    return KnnSvTable(_reduce_groups(inst, cs, es, reduction), reduction)


# -- ASV -----------------------------------------------------------------


def _scores(t) -> np.ndarray:
    return t.scores if isinstance(t, KnnSvTable) else np.asarray(t, dtype=np.float64)


def dynamic_weight(c: float, right_min: float, left_min: float) -> float:
    """``c * |min right| / |min left|``; falls back to ``c`` when the left minimum is 0."""
    if left_min == 0.0:
        return c
    return c * abs(right_min) / abs(left_min)


def asv_from_terms(left_means, left_min: float, right_table, c: float) -> np.ndarray:
    right = _scores(right_table)
    w = dynamic_weight(c, float(right.min()), left_min)
    return w * np.asarray(left_means, dtype=np.float64) - right.min(axis=1)


def asv_scores(left_table, right_table, cfg: AsvConfig) -> np.ndarray:
    """Representativeness (row mean of the left table, weighted) minus
    adversarialness (row minimum of the right table)."""
    left = _scores(left_table)
    right = _scores(right_table)
    if left.shape[0] != right.shape[0]:
        raise ValueError("tables must share the candidate axis")
    return asv_from_terms(left.mean(axis=1), float(left.min()), right, cfg.c)


def top_n_by_score(scores, ids, n: int) -> list[int]:
    """The ``n`` ids with the highest scores, ties broken by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.asarray(ids)
    order = np.lexsort((ids, -scores))
    return [int(i) for i in ids[order[:n]]]


@dataclass(frozen=True)
class LeftTerm:
    """Pre-computed representativeness: per-sample row means over the whole
    buffer plus the minimum of the underlying table."""

    values: np.ndarray
    table_min: float

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", self.values.size))
            fh.write(np.asarray(self.values, dtype="<f8").tobytes())
            fh.write(struct.pack("<d", self.table_min))

    @classmethod
    def load(cls, path) -> "LeftTerm":
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) < 16:
            raise DataFormatError("truncated left-term file")
        (n,) = struct.unpack_from("<Q", raw, 0)
        if len(raw) != 8 + 8 * n + 8:
            raise DataFormatError(f"left-term file size does not match count {n}")
        values = np.frombuffer(raw, dtype="<f8", count=n, offset=8).astype(np.float64)
        (table_min,) = struct.unpack_from("<d", raw, 8 + 8 * n)
        return cls(values, table_min)


def precompute_left_term(buffer: ReplayBuffer, K: int, chunk: int = 256) -> LeftTerm:
    """Row means of the max-reduced buffer-vs-buffer KNN-SV table.

    Evaluated in chunks of evaluation samples so memory stays
    ``O(instances * chunk)``.
    """
    samples = buffer.samples
    cf, cl, cs = sample_instances(samples)
    n = len(samples)
    sums = np.zeros(n)
    table_min = np.inf
    for lo in range(0, n, chunk):
        ef, el, es = sample_instances(samples[lo:lo + chunk])
        inst = knn_sv_matrix(cf, cl, ef, el, K)
        block = _reduce_groups(inst, cs, es, "max")
        sums += block.sum(axis=1)
        table_min = min(table_min, float(block.min()))
    return LeftTerm(sums / n, table_min)


@dataclass(frozen=True)
class AsvResult:
    """Outcome of one ASV ranking, kept for tracing."""

    selected: list[int]
    candidate_ids: np.ndarray
    scores: np.ndarray
    right_table: KnnSvTable


def draw_candidates(buffer: ReplayBuffer, mask, count: int, rng: np.random.Generator) -> np.ndarray:
    """Up to ``count`` eligible positions drawn uniformly, returned ascending."""
    eligible = np.flatnonzero(np.asarray(mask, dtype=bool))
    if eligible.size <= count:
        return eligible
    return np.sort(rng.choice(eligible, size=count, replace=False))


def asv_rank(
    buffer: ReplayBuffer,
    batch: BatchContext,
    cfg: AsvConfig,
    n: int,
    mask,
    rng: np.random.Generator,
    precomputed_left: LeftTerm | None = None,
) -> AsvResult:
    if mask is None:
        mask = np.ones(len(buffer), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if int(mask.sum()) < n:
        raise ExhaustionError(f"only {int(mask.sum())} eligible samples for {n} replays")
    positions = draw_candidates(buffer, mask, cfg.candidate_count, rng)
    cands = [buffer.samples[p] for p in positions]
    ids = buffer.ids[positions]
    right = knn_sv_table(cands, batch, cfg.K, "min")
    if precomputed_left is None:
        left = knn_sv_table(cands, cands, cfg.K, "max")
        scores = asv_scores(left, right, cfg)
    else:
        scores = asv_from_terms(
            precomputed_left.values[positions], precomputed_left.table_min, right, cfg.c
        )
    return AsvResult(top_n_by_score(scores, ids, n), ids, scores, right)


def asv_select(
    buffer: ReplayBuffer,
    batch: BatchContext,
    cfg: AsvConfig,
    n: int,
    mask=None,
    rng: np.random.Generator | None = None,
    precomputed_left: LeftTerm | None = None,
) -> list[int]:
    """Ids of the ``n`` highest-ASV samples from a random eligible candidate set."""
    rng = np.random.default_rng() if rng is None else rng
    return asv_rank(buffer, batch, cfg, n, mask, rng, precomputed_left).selected
