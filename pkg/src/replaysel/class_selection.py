"""Class-selection primitives: balanced cycling and similarity-weighted (SWIL)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from replaysel.buffer import ReplayBuffer
from replaysel.errors import ConfigError, DataFormatError
from replaysel.geometry import (
    DISTANCE_FLOOR,
    cosine_distance_matrix,
    power_weight_normalize,
    weighted_sample_without_replacement,
)

DEFAULT_TOP_K = 8


@dataclass(frozen=True)
class BatchImage:
    """A new-task image: its top-k class embeddings and its current loss.

    ``label_embeddings`` optionally carries one label (text-query) embedding
    per class embedding; KNN-SV label similarity uses the class embeddings
    themselves when it is absent.
    """

    top_k_embeddings: np.ndarray
    loss: float
    label_embeddings: np.ndarray | None = None

    def __post_init__(self):
        emb = np.array(self.top_k_embeddings, dtype=np.float64, ndmin=2)
        if emb.shape[0] == 0 or not np.all(np.isfinite(emb)):
            raise DataFormatError("batch image needs finite, nonempty embeddings")
        if not np.isfinite(self.loss) or self.loss < 0:
            raise DataFormatError("batch image loss must be finite and >= 0")
        emb.setflags(write=False)
        object.__setattr__(self, "top_k_embeddings", emb)
        object.__setattr__(self, "loss", float(self.loss))
        if self.label_embeddings is not None:
            lab = np.array(self.label_embeddings, dtype=np.float64, ndmin=2)
            if lab.shape != emb.shape:
                raise DataFormatError("label embeddings must match class embeddings in shape")
            lab.setflags(write=False)
            object.__setattr__(self, "label_embeddings", lab)

    @property
    def labels(self) -> np.ndarray:
        return self.top_k_embeddings if self.label_embeddings is None else self.label_embeddings


@dataclass(frozen=True)
class BatchContext:
    images: tuple[BatchImage, ...]

    def __post_init__(self):
        images = tuple(self.images)
        if images:
            dims = {im.top_k_embeddings.shape[1] for im in images}
            if len(dims) != 1:
                raise DataFormatError("batch images disagree on embedding dimension")
        object.__setattr__(self, "images", images)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def losses(self) -> np.ndarray:
        return np.array([im.loss for im in self.images])

    def subset(self, indices: Sequence[int]) -> "BatchContext":
        return BatchContext(tuple(self.images[i] for i in indices))


@dataclass(frozen=True)
class SwilConfig:
    w: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.w):
            raise ConfigError("SWIL exponent must be finite")


@dataclass
class BalancedCursor:
    """Position of the next class in the ascending-id cyclic order."""

    next_class: int = 0


def balanced_next(cursor: BalancedCursor, n: int, num_classes: int) -> tuple[list[int], BalancedCursor]:
    """Next ``n`` class positions in cyclic order, plus the advanced cursor."""
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    start = cursor.next_class % num_classes
    out = [(start + i) % num_classes for i in range(n)]
    return out, BalancedCursor((start + n) % num_classes)


def _prototype_matrix(prototypes) -> np.ndarray:
    if isinstance(prototypes, Mapping):
        return np.stack([np.asarray(prototypes[c], dtype=np.float64) for c in sorted(prototypes)])
    return np.atleast_2d(np.asarray(prototypes, dtype=np.float64))


def image_prototype_distances(image_embeddings, prototypes) -> np.ndarray:
    """Minimum cosine distance from any of the image's embeddings to each prototype."""
    emb = np.atleast_2d(np.asarray(image_embeddings, dtype=np.float64))
    if emb.shape[0] == 0:
        raise ValueError("need at least one image embedding")
    protos = _prototype_matrix(prototypes)
    d = cosine_distance_matrix(emb, protos).min(axis=0)
    return np.maximum(d, DISTANCE_FLOOR)


def swil_distribution(image_embeddings, prototypes, cfg: SwilConfig = SwilConfig()) -> np.ndarray:
    """Class distribution for one image, proportional to ``distance ** -w``.

    ``prototypes`` is either a mapping (ordered by ascending class id) or a
    ``(C, E)`` matrix. Distances are clamped at 1e-12.
    """
    d = image_prototype_distances(image_embeddings, prototypes)
    return power_weight_normalize(d, -cfg.w)


def batch_swil_distributions(batch: BatchContext, unit_prototypes: np.ndarray, cfg: SwilConfig) -> np.ndarray:
    """Row ``i`` is the SWIL distribution of image ``i``; prototypes must be unit rows."""
    emb = [im.top_k_embeddings for im in batch.images]
    starts = np.cumsum([0] + [e.shape[0] for e in emb[:-1]])
    x = np.concatenate(emb)
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    dist = 1.0 - np.clip(x @ unit_prototypes.T, -1.0, 1.0)
    d = np.maximum(np.minimum.reduceat(dist, starts, axis=0), DISTANCE_FLOOR)
    logw = -cfg.w * np.log(d)
    logw -= logw.max(axis=1, keepdims=True)
    p = np.exp(logw)
    return p / p.sum(axis=1, keepdims=True)


def swil_select(
    batch: BatchContext,
    buffer: ReplayBuffer,
    cfg: SwilConfig,
    rng: np.random.Generator,
) -> list[int]:
    """Sample one buffer class per batch image from its SWIL distribution."""
    if len(batch) == 0:
        raise ValueError("batch is empty")
    protos = buffer.prototype_matrix
    out = []
    for im in batch.images:
        p = swil_distribution(im.top_k_embeddings, protos, cfg)
        (idx,) = weighted_sample_without_replacement(p, 1, rng)
        out.append(buffer.classes[idx])
    return out
