"""Synthetic continual-learning stream.

The candidate pool stands in for pre-training data: per-class Gaussian
clusters on the unit sphere with long-tailed per-sample losses. Each
downstream dataset introduces new classes whose cluster centres are pulled
toward randomly chosen pool prototypes by ``task_overlap``; their label
embeddings are fresh random directions.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from replaysel.buffer import BufferSample, ReplayBuffer
from replaysel.class_selection import DEFAULT_TOP_K, BatchContext, BatchImage
from replaysel.errors import ConfigError
from replaysel.geometry import unit_rows


@dataclass(frozen=True)
class StreamConfig:
    num_buffer_classes: int = 20
    samples_per_class: int = 60
    embedding_dim: int = 32
    num_datasets: int = 3
    batches_per_epoch: int = 10
    epochs_per_dataset: int = 2
    batch_size: int = 8
    cluster_spread: float = 0.6
    task_overlap: float = 0.5
    seed: int = 0
    classes_per_dataset: int = 4
    top_k: int = DEFAULT_TOP_K
    max_instances: int = 3
    multi_class_prob: float = 0.3
    pool_loss_median: float = 0.15
    batch_loss_median: float = 1.0
    loss_decay: float = 0.7

    def __post_init__(self):
        counts = ("num_buffer_classes", "samples_per_class", "embedding_dim", "num_datasets",
                  "batches_per_epoch", "epochs_per_dataset", "batch_size",
                  "classes_per_dataset", "top_k", "max_instances")
        for name in counts:
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {v!r}")
        if self.embedding_dim < 2:
            raise ConfigError("embedding_dim must be >= 2")
        if not self.cluster_spread > 0:
            raise ConfigError("cluster_spread must be > 0")
        for name in ("task_overlap", "multi_class_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not 0.0 < self.loss_decay <= 1.0:
            raise ConfigError("loss_decay must lie in (0, 1]")
        if not (self.pool_loss_median > 0 and self.batch_loss_median > 0):
            raise ConfigError("loss medians must be > 0")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class Stream:
    """Candidate pool plus ``datasets[d][epoch][batch]`` of batch contexts."""

    config: StreamConfig
    pool: tuple[BufferSample, ...]
    datasets: tuple[tuple[tuple[BatchContext, ...], ...], ...]
    task_centers: tuple[np.ndarray, ...]
    task_anchor_classes: tuple[tuple[int, ...], ...]

    def dataset_sizes(self) -> list[int]:
        return [sum(len(b) for b in d[0]) for d in self.datasets]

    def batch_losses(self) -> np.ndarray:
        """Every new-image loss the run will see, in stream order."""
        return np.concatenate([b.losses for d in self.datasets for e in d for b in e])


def _cluster(rng, center, n, spread, dim):
    return unit_rows(center + spread * rng.normal(size=(n, dim)) / np.sqrt(dim))


def generate_stream(cfg: StreamConfig) -> Stream:
    rng = np.random.default_rng(cfg.seed)
    dim = cfg.embedding_dim
    C = cfg.num_buffer_classes
    centers = unit_rows(rng.normal(size=(C, dim)))

    pool = []
    sid = 0
    for c in range(C):
        for _ in range(cfg.samples_per_class):
            classes = [c]
            if C > 1 and rng.random() < cfg.multi_class_prob:
                other = int(rng.integers(C - 1))
                classes.append(other + (other >= c))
            emb = {}
            for cc in sorted(classes):
                k = int(rng.integers(1, cfg.max_instances + 1))
                emb[cc] = _cluster(rng, centers[cc], k, cfg.cluster_spread, dim)
            loss = float(rng.lognormal(np.log(cfg.pool_loss_median), 1.0))
            pool.append(BufferSample(sid, loss, emb))
            sid += 1

    # prototypes of the whole pool, the anchors new tasks drift toward
    protos = unit_rows(ReplayBuffer(pool).prototype_matrix)

    datasets, task_centers, anchors = [], [], []
    for _ in range(cfg.num_datasets):
        anchor = rng.integers(C, size=cfg.classes_per_dataset)
        fresh = unit_rows(rng.normal(size=(cfg.classes_per_dataset, dim)))
        tc = unit_rows(cfg.task_overlap * protos[anchor] + (1.0 - cfg.task_overlap) * fresh)
        labels = unit_rows(rng.normal(size=(cfg.classes_per_dataset, dim)))
        images = []
        for _ in range(cfg.batches_per_epoch * cfg.batch_size):
            j = int(rng.integers(cfg.classes_per_dataset))
            emb = _cluster(rng, tc[j], cfg.top_k, cfg.cluster_spread, dim)
            lab = np.repeat(labels[j][None, :], cfg.top_k, axis=0)
            loss = float(rng.lognormal(np.log(cfg.batch_loss_median), 0.75))
            images.append((emb, lab, loss))
        epochs = []
        for e in range(cfg.epochs_per_dataset):
            scale = cfg.loss_decay ** e
            batches = []
            for b in range(cfg.batches_per_epoch):
                chunk = images[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                batches.append(BatchContext(tuple(
                    BatchImage(emb, loss * scale, lab) for emb, lab, loss in chunk)))
            epochs.append(tuple(batches))
        datasets.append(tuple(epochs))
        task_centers.append(tc)
        anchors.append(tuple(int(a) for a in anchor))
    return Stream(cfg, tuple(pool), tuple(datasets), tuple(task_centers), tuple(anchors))
