"""Distribution and ranking analyses over run traces."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from replaysel.errors import DegenerateVarianceError
from replaysel.geometry import check_prob_vec, normalized_entropy


@dataclass(frozen=True)
class DistributionRecord:
    """A traced probability vector and where it came from."""

    source: str
    dataset_index: int
    epoch_index: int
    batch_index: int
    image_index: int
    probs: tuple[float, ...]
    normalized_entropy: float

    @classmethod
    def create(cls, source, dataset_index, epoch_index, batch_index, image_index, probs):
        p = check_prob_vec(probs)
        return cls(source, dataset_index, epoch_index, batch_index, image_index,
                   tuple(float(x) for x in p), normalized_entropy(p))

    def to_dict(self) -> dict:
        return {
            "type": "distribution",
            "source": self.source,
            "dataset_index": self.dataset_index,
            "epoch_index": self.epoch_index,
            "batch_index": self.batch_index,
            "image_index": self.image_index,
            "probs": list(self.probs),
            "normalized_entropy": self.normalized_entropy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DistributionRecord":
        return cls(d["source"], int(d["dataset_index"]), int(d["epoch_index"]),
                   int(d["batch_index"]), int(d["image_index"]),
                   tuple(float(x) for x in d["probs"]), float(d["normalized_entropy"]))


@dataclass(frozen=True)
class EntropyHistogram:
    edges: np.ndarray
    counts: np.ndarray
    minimum: DistributionRecord
    median: DistributionRecord
    maximum: DistributionRecord


def entropy_histogram(records: Sequence[DistributionRecord], bins: int = 20) -> EntropyHistogram:
    """Bin normalized entropies over ``[0, 1]`` and pick the extreme records.

    The median record is the lower median of the entropy-sorted records
    (ties by input order).
    """
    if not records:
        raise ValueError("no records to histogram")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    h = np.array([r.normalized_entropy for r in records])
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.minimum((h * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    order = np.argsort(h, kind="stable")
    return EntropyHistogram(
        edges,
        counts,
        records[int(order[0])],
        records[int(order[(len(order) - 1) // 2])],
        records[int(order[-1])],
    )


def distance_rank(distances, lowest_index: int) -> int:
    """1-based position of ``lowest_index`` when candidates are sorted by
    ascending distance (stable, so ties keep candidate order)."""
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise ValueError("need at least one candidate")
    order = np.argsort(d, kind="stable")
    return int(np.flatnonzero(order == lowest_index)[0]) + 1


def distance_rank_histogram(trace: Iterable[tuple[Sequence[float], int]], size: int | None = None) -> np.ndarray:
    """Counts of distance ranks; ``counts[r - 1]`` is the number of rank-``r`` events."""
    ranks = [distance_rank(d, i) for d, i in trace]
    return rank_counts(ranks, size)


def rank_counts(ranks: Sequence[int], size: int | None = None) -> np.ndarray:
    ranks = np.asarray(ranks, dtype=np.int64)
    n = int(ranks.max()) if ranks.size else 0
    size = max(n, size or 0)
    if ranks.size == 0:
        return np.zeros(size, dtype=np.int64)
    return np.bincount(ranks - 1, minlength=size)


def fraction_within(counts, top: int) -> float:
    counts = np.asarray(counts)
    total = counts.sum()
    return float(counts[:top].sum() / total) if total else 0.0


def size_forgetting_correlation(per_dataset: Sequence[tuple[float, float]]) -> float:
    """Pearson correlation between dataset size and a forgetting metric."""
    if len(per_dataset) < 3:
        raise ValueError("need at least three datasets")
    x = np.array([p[0] for p in per_dataset], dtype=np.float64)
    y = np.array([p[1] for p in per_dataset], dtype=np.float64)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateVarianceError("correlation undefined for a constant axis")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def to_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(x) if isinstance(x, float) else x for x in row])
    return buf.getvalue()


def entropy_histogram_csv(hist: EntropyHistogram) -> str:
    rows = [(float(lo), float(hi), int(c)) for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], hist.counts)]
    return to_csv(["bin_lower_normalized_entropy_unitless", "bin_upper_normalized_entropy_unitless", "count_records"], rows)


def rank_histogram_csv(counts) -> str:
    return to_csv(["distance_rank_1_is_nearest", "count_events"],
                  ((r + 1, int(c)) for r, c in enumerate(counts)))
