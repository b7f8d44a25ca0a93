"""Replay-buffer data model, loss-thresholded construction and class prototypes."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from replaysel.errors import (
    ConfigError,
    DataFormatError,
    DegeneratePrototypeError,
    EmptyBufferError,
    UnknownClassError,
)
from replaysel.geometry import DISTANCE_FLOOR, cosine_distance_matrix


def _frozen_array(x, ndim: int) -> np.ndarray:
    arr = np.array(x, dtype=np.float64, ndmin=ndim)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class BufferSample:
    """One stored image: id, model loss and its top-k embeddings per class.

    ``class_embeddings`` maps a class id to a ``(k, E)`` array; ``k`` may
    differ between classes and samples.
    """

    id: int
    loss: float
    class_embeddings: Mapping[int, np.ndarray]

    def __post_init__(self):
        if int(self.id) != self.id or self.id < 0:
            raise DataFormatError(f"sample id must be a non-negative integer, got {self.id!r}")
        if not np.isfinite(self.loss) or self.loss < 0:
            raise DataFormatError(f"sample {self.id}: loss must be finite and >= 0")
        if not self.class_embeddings:
            raise DataFormatError(f"sample {self.id}: no class entries")
        frozen = {}
        dim = None
        for c, emb in sorted(self.class_embeddings.items()):
            arr = _frozen_array(emb, 2)
            if arr.ndim != 2 or arr.shape[0] == 0:
                raise DataFormatError(f"sample {self.id}: class {c} has no embeddings")
            if dim is None:
                dim = arr.shape[1]
            elif arr.shape[1] != dim:
                raise DataFormatError(f"sample {self.id}: mixed embedding dimensions")
            if not np.all(np.isfinite(arr)):
                raise DataFormatError(f"sample {self.id}: non-finite embedding")
            if np.any(np.linalg.norm(arr, axis=1) == 0):
                raise DataFormatError(f"sample {self.id}: zero embedding")
            frozen[int(c)] = arr
        object.__setattr__(self, "id", int(self.id))
        object.__setattr__(self, "loss", float(self.loss))
        object.__setattr__(self, "class_embeddings", frozen)

    @property
    def classes(self) -> list[int]:
        return list(self.class_embeddings)

    @property
    def embedding_dim(self) -> int:
        return next(iter(self.class_embeddings.values())).shape[1]


@dataclass(frozen=True)
class BufferSelectionConfig:
    loss_threshold: float = 0.15
    class_floor: int = 50

    def __post_init__(self):
        if not np.isfinite(self.loss_threshold) or self.loss_threshold < 0:
            raise ConfigError("loss_threshold must be finite and >= 0")
        if int(self.class_floor) != self.class_floor or self.class_floor < 1:
            raise ConfigError("class_floor must be an integer >= 1")


class ReplayBuffer:
    """Immutable collection of buffer samples with class index and prototypes.

    Samples are stored in ascending id order; positions into that order are
    used by the engine for masks.
    """

    def __init__(self, samples: Iterable[BufferSample]):
        samples = sorted(samples, key=lambda s: s.id)
        if not samples:
            raise EmptyBufferError("a replay buffer needs at least one sample")
        ids = [s.id for s in samples]
        if len(set(ids)) != len(ids):
            raise DataFormatError("duplicate sample ids")
        dims = {s.embedding_dim for s in samples}
        if len(dims) != 1:
            raise DataFormatError(f"inconsistent embedding dimensions: {sorted(dims)}")
        self._samples = tuple(samples)
        self._ids = np.array(ids, dtype=np.int64)
        self._ids.setflags(write=False)
        self._pos = {sid: i for i, sid in enumerate(ids)}
        self.embedding_dim = dims.pop()

        index: dict[int, list[int]] = {}
        for s in samples:
            for c in s.class_embeddings:
                index.setdefault(c, []).append(s.id)
        self._class_index = {c: tuple(index[c]) for c in sorted(index)}
        self._classes = tuple(self._class_index)
        self._members = {}
        for c, members in self._class_index.items():
            arr = np.array([self._pos[m] for m in members], dtype=np.int64)
            arr.setflags(write=False)
            self._members[c] = arr
        self._prototypes = compute_prototypes(self)
        self._proto_matrix = np.stack([self._prototypes[c] for c in self._classes])
        self._proto_matrix.setflags(write=False)
        self._unit_protos = self._proto_matrix / np.linalg.norm(self._proto_matrix, axis=1, keepdims=True)
        self._unit_protos.setflags(write=False)
        class_pos = {c: i for i, c in enumerate(self._classes)}
        self._sample_classes = tuple(
            np.array([class_pos[c] for c in s.class_embeddings], dtype=np.int64) for s in samples
        )
        self._pair_class = np.concatenate(self._sample_classes)
        self._pair_pos = np.repeat(np.arange(len(samples)), [a.size for a in self._sample_classes])
        self._proto_dist = self._member_prototype_distances()
        self._log_proto_dist = {c: np.log(d) for c, d in self._proto_dist.items()}
        self._instances = None
        self._hash = None

    # -- read-only views -------------------------------------------------

    @property
    def samples(self) -> tuple[BufferSample, ...]:
        return self._samples

    @property
    def ids(self) -> np.ndarray:
        return self._ids

    @property
    def classes(self) -> tuple[int, ...]:
        """Indexed classes in ascending order."""
        return self._classes

    @property
    def class_index(self) -> Mapping[int, tuple[int, ...]]:
        return dict(self._class_index)

    @property
    def prototypes(self) -> Mapping[int, np.ndarray]:
        return dict(self._prototypes)

    @property
    def prototype_matrix(self) -> np.ndarray:
        """Prototypes stacked in ``classes`` order, shape ``(C, E)``."""
        return self._proto_matrix

    @property
    def unit_prototype_matrix(self) -> np.ndarray:
        return self._unit_protos

    def __len__(self) -> int:
        return len(self._samples)

    def sample_class_positions(self, pos: int) -> np.ndarray:
        """Indices into ``classes`` of the classes present in the sample at ``pos``."""
        return self._sample_classes[pos]

    def class_counts(self, mask) -> np.ndarray:
        """Number of masked-in samples per class, in ``classes`` order."""
        w = np.asarray(mask, dtype=np.float64)[self._pair_pos]
        return np.bincount(self._pair_class, weights=w, minlength=len(self._classes)).astype(np.int64)

    def __contains__(self, sample_id) -> bool:
        return sample_id in self._pos

    def sample(self, sample_id: int) -> BufferSample:
        return self._samples[self._pos[sample_id]]

    def position(self, sample_id: int) -> int:
        return self._pos[sample_id]

    def member_positions(self, c: int) -> np.ndarray:
        """Buffer positions of samples containing class ``c`` (ascending id)."""
        try:
            return self._members[c]
        except KeyError:
            raise UnknownClassError(f"class {c} is not in the buffer") from None

    def prototype_distances(self, c: int) -> np.ndarray:
        """Per-member minimum cosine distance to the prototype of ``c``, clamped."""
        try:
            return self._proto_dist[c]
        except KeyError:
            raise UnknownClassError(f"class {c} is not in the buffer") from None

    def log_prototype_distances(self, c: int) -> np.ndarray:
        """Natural log of :meth:`prototype_distances`, cached."""
        try:
            return self._log_proto_dist[c]
        except KeyError:
            raise UnknownClassError(f"class {c} is not in the buffer") from None

    def instances(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened instance embeddings ``(M, E)`` and their owning positions ``(M,)``.

        Instances are ordered by sample position, then class id, then rank
        within the stored top-k list.
        """
        if self._instances is None:
            emb, owner = [], []
            for pos, s in enumerate(self._samples):
                for arr in s.class_embeddings.values():
                    emb.append(arr)
                    owner.extend([pos] * arr.shape[0])
            e = np.concatenate(emb, axis=0)
            o = np.array(owner, dtype=np.int64)
            e.setflags(write=False)
            o.setflags(write=False)
            self._instances = (e, o)
        return self._instances

    def content_hash(self) -> str:
        if self._hash is None:
            self._hash = hashlib.sha256(dumps_jsonl(self._samples).encode()).hexdigest()
        return self._hash

    def _member_prototype_distances(self) -> dict[int, np.ndarray]:
        out = {}
        for c, members in self._class_index.items():
            proto = self._prototypes[c][None, :]
            d = np.array(
                [cosine_distance_matrix(self.sample(m).class_embeddings[c], proto).min()
                 for m in members]
            )
            d = np.maximum(d, DISTANCE_FLOOR)
            d.setflags(write=False)
            out[c] = d
        return out


def compute_prototypes(buffer: ReplayBuffer) -> dict[int, np.ndarray]:
    """Mean of every stored embedding of each class across the buffer."""
    protos = {}
    for c, members in buffer.class_index.items():
        stacked = np.concatenate([buffer.sample(m).class_embeddings[c] for m in members])
        mean = stacked.mean(axis=0)
        if not np.all(np.isfinite(mean)) or np.linalg.norm(mean) == 0.0:
            raise DegeneratePrototypeError(f"prototype of class {c} is degenerate")
        mean.setflags(write=False)
        protos[c] = mean
    return protos


def class_membership(buffer: ReplayBuffer, c: int) -> list[int]:
    """Sorted ids of the samples that contain class ``c``."""
    try:
        return list(buffer.class_index[c])
    except KeyError:
        raise UnknownClassError(f"class {c} is not in the buffer") from None


def select_buffer(candidates: Sequence[BufferSample], cfg: BufferSelectionConfig) -> ReplayBuffer:
    """Build a replay buffer from candidates by loss threshold and class floor.

    Only samples with ``loss < cfg.loss_threshold`` are eligible. Classes are
    visited in ascending id order; each is topped up to
    ``min(class_floor, eligible)`` samples, taking the lowest-loss eligible
    samples first (ties by id). A sample is always kept with all of its
    classes, so with multi-class samples a class may end up above the floor.
    """
    return select_buffer_from_sources([(candidates, cfg.loss_threshold)], cfg.class_floor)


def select_buffer_from_sources(
    sources: Sequence[tuple[Sequence[BufferSample], float]],
    class_floor: int,
) -> ReplayBuffer:
    """Like :func:`select_buffer`, with one loss threshold per candidate source.

    A source with threshold 0 contributes nothing since losses are
    non-negative.
    """
    if not sources or all(len(c) == 0 for c, _ in sources):
        raise EmptyBufferError("no candidates supplied")
    BufferSelectionConfig(1.0, class_floor)
    eligible: list[BufferSample] = []
    for candidates, t in sources:
        if not np.isfinite(t) or t < 0:
            raise ConfigError(f"loss threshold must be finite and >= 0, got {t!r}")
        eligible.extend(s for s in candidates if s.loss < t)
    if not eligible:
        raise EmptyBufferError("no candidate passes the loss threshold")

    by_class: dict[int, list[BufferSample]] = {}
    for s in eligible:
        for c in s.class_embeddings:
            by_class.setdefault(c, []).append(s)

    kept: dict[int, BufferSample] = {}
    counts: dict[int, int] = {}
    for c in sorted(by_class):
        pool = sorted(by_class[c], key=lambda s: (s.loss, s.id))
        target = min(class_floor, len(pool))
        for s in pool:
            if counts.get(c, 0) >= target:
                break
            if s.id in kept:
                continue
            kept[s.id] = s
            for sc in s.class_embeddings:
                counts[sc] = counts.get(sc, 0) + 1
    return ReplayBuffer(kept.values())


# -- JSON Lines interchange -------------------------------------------------


def _sample_record(s: BufferSample) -> dict:
    return {
        "id": s.id,
        "loss": s.loss,
        "classes": {str(c): arr.tolist() for c, arr in s.class_embeddings.items()},
    }


def dumps_jsonl(samples: Sequence[BufferSample]) -> str:
    """Serialize samples with an ``{"embedding_dim": E}`` header line.

    Python's float repr is the shortest round-tripping form, so reading the
    text back yields bit-identical arrays.
    """
    samples = list(samples)
    dim = samples[0].embedding_dim if samples else 0
    lines = [json.dumps({"embedding_dim": dim})]
    lines.extend(json.dumps(_sample_record(s)) for s in samples)
    return "\n".join(lines) + "\n"


def loads_jsonl(text: str) -> list[BufferSample]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataFormatError("empty buffer file")
    try:
        header = json.loads(lines[0])
        dim = int(header["embedding_dim"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"bad header line: {exc}") from exc
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            classes = {int(c): np.array(v, dtype=np.float64, ndmin=2) for c, v in rec["classes"].items()}
            s = BufferSample(id=rec["id"], loss=rec["loss"], class_embeddings=classes)
        except DataFormatError as exc:
            raise DataFormatError(f"line {lineno}: {exc}") from exc
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            raise DataFormatError(f"line {lineno}: {exc}") from exc
        if s.embedding_dim != dim:
            raise DataFormatError(f"line {lineno}: embedding dim {s.embedding_dim} != header {dim}")
        samples.append(s)
    return samples


def write_jsonl(path, samples: Sequence[BufferSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_jsonl(samples))


def read_jsonl(path) -> list[BufferSample]:
    with open(path, encoding="utf-8") as fh:
        return loads_jsonl(fh.read())
