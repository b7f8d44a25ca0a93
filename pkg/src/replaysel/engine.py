"""Composes class and sample primitives into named retrieval algorithms,
enforces deduplication windows and emits retrieval plans."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from replaysel.buffer import ReplayBuffer
from replaysel.class_selection import (
    BalancedCursor,
    BatchContext,
    SwilConfig,
    batch_swil_distributions,
    swil_distribution,
)
from replaysel.errors import ConfigError, ExhaustionError
from replaysel.geometry import draw_index, normalized_entropy
from replaysel.loss_adapt import LossAdaptConfig, replay_budget
from replaysel.sample_selection import (
    AsvConfig,
    AsvResult,
    GraspConfig,
    LeftTerm,
    _pick_uniform,
    asv_rank,
    grasp_probabilities,
    precompute_left_term,
)

BALANCED, SIMILARITY = "balanced", "similarity"
UNIFORM, PROTOTYPE, ASV, ASV_PC = "uniform", "prototype", "asv", "asv-pc"


@dataclass(frozen=True)
class Composition:
    class_selection: str | None
    sample_selection: str
    adaptive: bool = False


ALGORITHMS: dict[str, Composition] = {
    "Uniform": Composition(None, UNIFORM),
    "UniformBalanced": Composition(BALANCED, UNIFORM),
    "GRASP": Composition(BALANCED, PROTOTYPE),
    "SWIL": Composition(SIMILARITY, UNIFORM),
    "SW-GRASP": Composition(SIMILARITY, PROTOTYPE),
    "A-SW-GRASP": Composition(SIMILARITY, PROTOTYPE, adaptive=True),
    "ASER": Composition(BALANCED, ASV),
    "ASER-PC": Composition(BALANCED, ASV_PC),
    "SW-ASER-PC": Composition(SIMILARITY, ASV_PC),
}

_ALIASES = {name.lower().replace("-", "").replace("_", ""): name for name in ALGORITHMS}
_ALIASES["uniformbalanced"] = "UniformBalanced"

DEFAULT_CANDIDATES = {ASV: 168, ASV_PC: 352}
DEFAULT_ADAPTIVE_THRESHOLD = 0.95


def canonical_name(name: str) -> str:
    key = name.lower().replace("-", "").replace("_", "").replace(" ", "")
    try:
        return _ALIASES[key]
    except KeyError:
        raise ConfigError(f"unknown algorithm {name!r}; expected one of {sorted(ALGORITHMS)}") from None


@dataclass(frozen=True)
class AlgorithmSpec:
    """A named algorithm with exactly the configs its primitives need.

    Build with :meth:`create`, which fills defaults for the required configs.
    """

    name: str
    swil: SwilConfig | None = None
    grasp: GraspConfig | None = None
    asv: AsvConfig | None = None
    adaptive_entropy_threshold: float | None = None

    def __post_init__(self):
        name = canonical_name(self.name)
        object.__setattr__(self, "name", name)
        comp = ALGORITHMS[name]
        need = {
            "swil": comp.class_selection == SIMILARITY,
            "grasp": comp.sample_selection == PROTOTYPE,
            "asv": comp.sample_selection in (ASV, ASV_PC),
            "adaptive_entropy_threshold": comp.adaptive,
        }
        for attr, required in need.items():
            present = getattr(self, attr) is not None
            if present != required:
                state = "requires" if required else "does not take"
                raise ConfigError(f"{name} {state} {attr}")
        t = self.adaptive_entropy_threshold
        if t is not None and not 0.0 <= t <= 1.0:
            raise ConfigError("adaptive_entropy_threshold must lie in [0, 1]")

    @property
    def composition(self) -> Composition:
        return ALGORITHMS[self.name]

    @classmethod
    def create(cls, name: str, *, swil_w=None, grasp_w=None, asv_c=None, asv_K=None,
               candidate_count=None, adaptive_entropy_threshold=None) -> "AlgorithmSpec":
        name = canonical_name(name)
        comp = ALGORITHMS[name]
        kw = {}
        if comp.class_selection == SIMILARITY:
            kw["swil"] = SwilConfig(1.0 if swil_w is None else swil_w)
        if comp.sample_selection == PROTOTYPE:
            kw["grasp"] = GraspConfig(1.0 if grasp_w is None else grasp_w)
        if comp.sample_selection in (ASV, ASV_PC):
            kw["asv"] = AsvConfig(
                c=0.15 if asv_c is None else asv_c,
                K=20 if asv_K is None else asv_K,
                candidate_count=(DEFAULT_CANDIDATES[comp.sample_selection]
                                 if candidate_count is None else candidate_count),
            )
        if comp.adaptive:
            kw["adaptive_entropy_threshold"] = (DEFAULT_ADAPTIVE_THRESHOLD
                                                if adaptive_entropy_threshold is None
                                                else adaptive_entropy_threshold)
        return cls(name, **kw)


class DedupSchedule(enum.Enum):
    NONE = "none"
    PER_EPOCH = "epoch"
    PER_DATASET = "dataset"
    BUFFER_THIRD = "buffer-third"

    @classmethod
    def parse(cls, value) -> "DedupSchedule":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"perepoch": "epoch", "per-epoch": "epoch", "perdataset": "dataset",
                   "per-dataset": "dataset", "bufferthird": "buffer-third"}
        key = aliases.get(key, key)
        for member in cls:
            if member.value == key:
                return member
        raise ConfigError(f"unknown dedup schedule {value!r}")


EPOCH_END, DATASET_END, REPLAY_RECORDED = "epoch_end", "dataset_end", "replay_recorded"


@dataclass
class DedupState:
    """Samples replayed in the current window plus window bookkeeping."""

    replayed: set[int] = field(default_factory=set)
    epoch_index: int = 0
    dataset_index: int = 0
    since_clear: int = 0
    window_index: int = 0

    def clear(self) -> None:
        self.replayed.clear()
        self.since_clear = 0
        self.window_index += 1


def dedup_mask(state: DedupState, buffer: ReplayBuffer) -> np.ndarray:
    """Eligibility over buffer positions: True iff not replayed in this window."""
    mask = np.ones(len(buffer), dtype=bool)
    if state.replayed:
        pos = [buffer.position(i) for i in state.replayed]
        mask[pos] = False
    return mask


def advance_window(state: DedupState, event: str, schedule: DedupSchedule, buffer_size: int) -> DedupState:
    """Update counters for ``event`` and clear the window at its boundary."""
    if event == EPOCH_END:
        state.epoch_index += 1
        if schedule is DedupSchedule.PER_EPOCH:
            state.clear()
    elif event == DATASET_END:
        state.dataset_index += 1
        state.epoch_index = 0
        if schedule is DedupSchedule.PER_DATASET:
            state.clear()
    elif event == REPLAY_RECORDED:
        if schedule is DedupSchedule.BUFFER_THIRD and state.since_clear >= math.ceil(buffer_size / 3):
            state.clear()
    else:
        raise ValueError(f"unknown window event {event!r}")
    return state


@dataclass(frozen=True)
class RetrievalPlan:
    """Ordered ids to replay, the replay-loss weight, and for each id the
    dedup window it was drawn in and the batch image it answers."""

    sample_ids: tuple[int, ...]
    replay_weight: float = 1.0
    windows: tuple[int, ...] = ()
    image_indices: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.sample_ids)


def adaptive_route(image_embeddings, buffer: ReplayBuffer, spec: AlgorithmSpec) -> str:
    """``"grasp"`` when the image's SWIL distribution is near-uniform, else ``"swil"``.

    Equality with the threshold routes to GRASP; a single-class buffer always
    does.
    """
    if len(buffer.classes) < 2:
        return "grasp"
    p = swil_distribution(image_embeddings, buffer.prototype_matrix, spec.swil)
    h = normalized_entropy(p)
    return "grasp" if h >= spec.adaptive_entropy_threshold else "swil"


@dataclass
class EngineState:
    """Mutable per-engine state: balanced cursor, dedup window and options."""

    schedule: DedupSchedule = DedupSchedule.NONE
    cursor: BalancedCursor = field(default_factory=BalancedCursor)
    dedup: DedupState = field(default_factory=DedupState)
    fallback: bool = True
    eligible: np.ndarray | None = None
    alive: np.ndarray | None = None


class _Tracer:
    """No-op tracing hooks; the harness supplies a recording subclass."""

    def wants(self, image_index: int) -> bool:
        return False

    def distribution(self, source: str, image_index: int, probs) -> None:
        pass

    def asv(self, result: AsvResult, buffer: ReplayBuffer, eval_batch: BatchContext) -> None:
        pass


NULL_TRACER = _Tracer()


def _reset_eligibility(state: EngineState, buffer: ReplayBuffer) -> None:
    state.eligible = dedup_mask(state.dedup, buffer)
    state.alive = buffer.class_counts(state.eligible)


class _Selection:
    """Bookkeeping for building one plan under a dedup mask.

    ``state.eligible``/``state.alive`` track the dedup window across plans;
    ``available``/``alive`` additionally exclude ids already in this plan.
    """

    def __init__(self, state: EngineState, buffer: ReplayBuffer):
        self.state = state
        self.buffer = buffer
        if state.eligible is None or state.eligible.shape[0] != len(buffer):
            _reset_eligibility(state, buffer)
        self.available = state.eligible.copy()
        self.alive = state.alive.copy()
        self.ids: list[int] = []
        self.windows: list[int] = []
        self.images: list[int] = []

    def class_alive(self, class_pos: int) -> bool:
        return self.alive[class_pos] > 0

    def exhausted(self) -> None:
        """Called when nothing eligible remains for the current request."""
        state = self.state
        if not state.fallback:
            raise ExhaustionError("dedup window exhausted and fallback is disabled")
        state.dedup.clear()
        _reset_eligibility(state, self.buffer)
        self.available = state.eligible.copy()
        for sid in self.ids:
            self.available[self.buffer.position(sid)] = False
        self.alive = self.buffer.class_counts(self.available)
        if not self.available.any():
            raise ExhaustionError("plan already covers the whole buffer")

    def take(self, pos: int, image_index: int) -> None:
        state = self.state
        sid = int(self.buffer.ids[pos])
        classes = self.buffer.sample_class_positions(pos)
        self.available[pos] = False
        self.alive[classes] -= 1
        if state.schedule is not DedupSchedule.NONE:
            state.eligible[pos] = False
            state.alive[classes] -= 1
            state.dedup.replayed.add(sid)
        state.dedup.since_clear += 1
        self.ids.append(sid)
        self.windows.append(state.dedup.window_index)
        self.images.append(image_index)


def _balanced_class(sel: _Selection) -> int:
    """Next class in cyclic order with an eligible member, advancing the cursor."""
    buf = sel.buffer
    n = len(buf.classes)
    for _attempt in range(2):
        start = sel.state.cursor.next_class % n
        for step in range(n):
            pos = (start + step) % n
            if sel.class_alive(pos):
                sel.state.cursor = BalancedCursor((pos + 1) % n)
                return buf.classes[pos]
        sel.exhausted()
    raise ExhaustionError("no class has eligible samples")


def _class_weights_available(sel: _Selection, probs: np.ndarray) -> np.ndarray:
    return np.where(sel.alive > 0, probs, 0.0)


def _similarity_class(sel: _Selection, probs: np.ndarray, rng) -> int:
    for _attempt in range(2):
        p = _class_weights_available(sel, probs)
        if p.sum() > 0:
            return sel.buffer.classes[draw_index(p, rng)]
        alive = (sel.alive > 0).astype(np.float64)
        if alive.any():
            # only zero-probability classes remain; fall back to them uniformly
            return sel.buffer.classes[draw_index(alive, rng)]
        sel.exhausted()
    raise ExhaustionError("no class has eligible samples")


def _sample_in_class(sel: _Selection, c: int, how: str, w: float | None, rng, tracer, image_index) -> int:
    members = sel.buffer.member_positions(c)
    avail = sel.available[members]
    if how == UNIFORM:
        eligible = members[avail]
        return int(eligible[_pick_uniform(eligible.size, rng)])
    if tracer.wants(image_index) and members.size >= 2:
        tracer.distribution("GRASP", image_index, grasp_probabilities(sel.buffer.prototype_distances(c), w))
    # same distribution as grasp_probabilities, computed from cached logs
    lw = np.where(avail, -w * sel.buffer.log_prototype_distances(c), -np.inf)
    weights = np.exp(lw - lw.max())
    return int(members[draw_index(weights, rng)])


def _uniform_any(sel: _Selection, rng) -> int:
    for _attempt in range(2):
        eligible = np.flatnonzero(sel.available)
        if eligible.size:
            return int(eligible[_pick_uniform(eligible.size, rng)])
        sel.exhausted()
    raise ExhaustionError("buffer exhausted")


def _class_then_sample(sel, batch, image_indices, spec, rng, tracer):
    comp = spec.composition
    buf = sel.buffer
    w = spec.grasp.w if spec.grasp is not None else None
    if comp.class_selection == SIMILARITY:
        all_probs = batch_swil_distributions(batch, buf.unit_prototype_matrix, spec.swil)
    for i in image_indices:
        if comp.class_selection is None:
            sel.take(_uniform_any(sel, rng), i)
            continue
        route = SIMILARITY if comp.class_selection == SIMILARITY else BALANCED
        probs = None
        if route == SIMILARITY:
            probs = all_probs[i]
            if tracer.wants(i) and probs.size >= 2:
                tracer.distribution("SWIL", i, probs)
            if comp.adaptive:
                if probs.size < 2 or normalized_entropy(probs) >= spec.adaptive_entropy_threshold:
                    route = BALANCED
        if route == BALANCED:
            c = _balanced_class(sel)
        else:
            c = _similarity_class(sel, probs, rng)
        sel.take(_sample_in_class(sel, c, comp.sample_selection, w, rng, tracer, i), i)


def _asv_family(sel, batch, image_indices, spec, rng, tracer, left_term):
    comp = spec.composition
    buf = sel.buffer
    n = len(image_indices)
    if comp.class_selection == BALANCED:
        classes = []
        for _ in range(n):
            c = _balanced_class(sel)
            classes.append(c)
    else:
        classes = []
        all_probs = batch_swil_distributions(batch, buf.unit_prototype_matrix, spec.swil)
        for i in image_indices:
            probs = all_probs[i]
            if tracer.wants(i) and probs.size >= 2:
                tracer.distribution("SWIL", i, probs)
            classes.append(_similarity_class(sel, probs, rng))
    pool = np.zeros(len(buf), dtype=bool)
    for c in set(classes):
        pool[buf.member_positions(c)] = True
    pool &= sel.available
    if pool.sum() < n:
        pool = sel.available.copy()
    if pool.sum() < n:
        sel.exhausted()
        pool = sel.available.copy()
        if pool.sum() < n:
            raise ExhaustionError(f"only {int(pool.sum())} eligible samples for {n} replays")
    eval_batch = batch.subset(image_indices)
    result = asv_rank(buf, eval_batch, spec.asv, n, pool, rng,
                      left_term if comp.sample_selection == ASV_PC else None)
    tracer.asv(result, buf, eval_batch)
    for i, sid in zip(image_indices, result.selected):
        sel.take(buf.position(sid), i)


def retrieve(
    state: EngineState,
    batch: BatchContext,
    buffer: ReplayBuffer,
    spec: AlgorithmSpec,
    rng: np.random.Generator,
    *,
    loss_adapt: LossAdaptConfig | None = None,
    left_term: LeftTerm | None = None,
    tracer=NULL_TRACER,
) -> RetrievalPlan:
    """Produce the replay plan for one new-task batch.

    One replay is drawn per selected batch image. Without loss adaptivity
    every image is selected (1:1 replay); with it, only images whose loss
    exceeds the threshold are, and the plan carries the weight ``r/|B|``.
    """
    if len(batch) == 0:
        raise ValueError("batch is empty")
    cfg = loss_adapt if loss_adapt is not None else LossAdaptConfig(enabled=False)
    r, weight = replay_budget(batch, cfg)
    if cfg.enabled:
        image_indices = [i for i, im in enumerate(batch.images) if im.loss > cfg.threshold]
    else:
        image_indices = list(range(len(batch)))
    sel = _Selection(state, buffer)
    if r:
        if spec.composition.sample_selection in (ASV, ASV_PC):
            if spec.composition.sample_selection == ASV_PC and left_term is None:
                left_term = precompute_left_term(buffer, spec.asv.K)
            _asv_family(sel, batch, image_indices, spec, rng, tracer, left_term)
        else:
            _class_then_sample(sel, batch, image_indices, spec, rng, tracer)
    window_mid = state.dedup.window_index
    advance_window(state.dedup, REPLAY_RECORDED, state.schedule, len(buffer))
    if state.dedup.window_index != window_mid:
        _reset_eligibility(state, buffer)
    return RetrievalPlan(tuple(sel.ids), weight, tuple(sel.windows), tuple(sel.images))


class RetrievalEngine:
    """Owns the mutable retrieval state for one buffer and one algorithm.

    Calls are not thread-safe; run one engine per execution context.
    """

    def __init__(
        self,
        buffer: ReplayBuffer,
        spec: AlgorithmSpec,
        schedule=DedupSchedule.NONE,
        *,
        seed=None,
        rng: np.random.Generator | None = None,
        loss_adapt: LossAdaptConfig | None = None,
        fallback: bool = True,
        left_term: LeftTerm | None = None,
        tracer=NULL_TRACER,
    ):
        self.buffer = buffer
        self.spec = spec
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.state = EngineState(schedule=DedupSchedule.parse(schedule), fallback=fallback)
        self.loss_adapt = loss_adapt
        self.tracer = tracer
        if spec.composition.sample_selection == ASV_PC and left_term is None:
            left_term = precompute_left_term(buffer, spec.asv.K)
        if left_term is not None and left_term.values.shape[0] != len(buffer):
            raise ConfigError("pre-computed left term does not match the buffer size")
        self.left_term = left_term

    def retrieve(self, batch: BatchContext) -> RetrievalPlan:
        return retrieve(self.state, batch, self.buffer, self.spec, self.rng,
                        loss_adapt=self.loss_adapt, left_term=self.left_term, tracer=self.tracer)

    def _event(self, event: str) -> None:
        before = self.state.dedup.window_index
        advance_window(self.state.dedup, event, self.state.schedule, len(self.buffer))
        if self.state.dedup.window_index != before:
            _reset_eligibility(self.state, self.buffer)

    def end_epoch(self) -> None:
        self._event(EPOCH_END)

    def end_dataset(self) -> None:
        self._event(DATASET_END)

    @property
    def window_index(self) -> int:
        return self.state.dedup.window_index
