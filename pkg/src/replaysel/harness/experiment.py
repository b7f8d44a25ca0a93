"""Runs one algorithm over a synthetic stream and collects a RunReport."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from replaysel.buffer import BufferSelectionConfig, ReplayBuffer, select_buffer
from replaysel.class_selection import BatchContext
from replaysel.engine import NULL_TRACER, AlgorithmSpec, DedupSchedule, RetrievalEngine, _Tracer
from replaysel.geometry import cosine_distance_matrix
from replaysel.harness.analysis import DistributionRecord, distance_rank, rank_counts
from replaysel.harness.stream import Stream
from replaysel.loss_adapt import LossAdaptConfig
from replaysel.sample_selection import AsvResult, LeftTerm, batch_instances, sample_instances

DEFAULT_TRACE_RATE = 50


class RunTracer(_Tracer):
    """Records sampled class/sample distributions and ASV distance ranks."""

    def __init__(self, rate: int = DEFAULT_TRACE_RATE):
        if rate < 1:
            raise ValueError("trace rate must be >= 1")
        self.rate = rate
        self.records: list[DistributionRecord] = []
        self.ranks: list[dict] = []
        self.position = (0, 0, 0)
        self.image_offset = 0

    def wants(self, image_index: int) -> bool:
        return (self.image_offset + image_index) % self.rate == 0

    def distribution(self, source, image_index, probs) -> None:
        d, e, b = self.position
        self.records.append(DistributionRecord.create(source, d, e, b, image_index, probs))

    def asv(self, result: AsvResult, buffer: ReplayBuffer, eval_batch: BatchContext) -> None:
        d, e, b = self.position
        cands = [buffer.sample(int(i)) for i in result.candidate_ids]
        cf, _, cs = sample_instances(cands)
        ef, _, es = batch_instances(eval_batch)
        dist = np.minimum.reduceat(np.minimum.reduceat(cosine_distance_matrix(cf, ef), cs, axis=0), es, axis=1)
        right = result.right_table.scores
        for j in range(right.shape[1]):
            lowest = int(np.argmin(right[:, j]))
            self.ranks.append({
                "type": "rank",
                "dataset_index": d,
                "epoch_index": e,
                "batch_index": b,
                "eval_index": j,
                "rank": distance_rank(dist[:, j], lowest),
                "candidates": int(right.shape[0]),
            })


@dataclass
class RunReport:
    """Forgetting proxies and selectivity statistics for one run.

    Coverage and per-class replay counts stand in for forgetting; no model
    is trained.
    """

    algorithm: str
    schedule: str
    seed: int
    buffer_size: int
    batches: int
    new_images: int
    replays: int
    replay_fraction: float
    mean_replay_weight: float
    coverage_per_dataset: list[float]
    duplicates_per_dataset: list[int]
    duplicates_within_windows: int
    windows: int
    dataset_sizes: list[int]
    per_class_replays: dict[str, int]
    entropy_summary: dict[str, dict[str, float]]
    distance_rank_histogram: list[int]
    loss_adapt_threshold: float | None = None
    timing: dict[str, float] | None = field(default=None)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["timing"] is None:
            del d["timing"]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _entropy_summary(records) -> dict:
    out = {}
    for source in sorted({r.source for r in records}):
        h = np.array([r.normalized_entropy for r in records if r.source == source])
        out[source] = {
            "count": int(h.size),
            "min": float(h.min()),
            "median": float(np.median(h)),
            "max": float(h.max()),
        }
    return out


@dataclass
class RunResult:
    report: RunReport
    records: list[DistributionRecord]
    ranks: list[dict]

    def trace_jsonl(self) -> str:
        lines = [json.dumps(r.to_dict(), sort_keys=True) for r in self.records]
        lines += [json.dumps(r, sort_keys=True) for r in self.ranks]
        return "".join(line + "\n" for line in lines)


def run_experiment(
    stream: Stream,
    spec: AlgorithmSpec,
    schedule=DedupSchedule.NONE,
    la: LossAdaptConfig | None = None,
    *,
    buffer: ReplayBuffer | None = None,
    buffer_cfg: BufferSelectionConfig | None = None,
    seed: int | None = None,
    trace_rate: int = DEFAULT_TRACE_RATE,
    trace: bool = True,
    fallback: bool = True,
    measure_time: bool = False,
    left_term: LeftTerm | None = None,
) -> RunResult:
    """Replay over every dataset, epoch and batch of ``stream``.

    The buffer is, in order of preference, ``buffer``, the pool filtered by
    ``buffer_cfg``, or the whole pool. ``seed`` defaults to the stream seed.
    """
    schedule = DedupSchedule.parse(schedule)
    if buffer is None:
        buffer = select_buffer(stream.pool, buffer_cfg) if buffer_cfg else ReplayBuffer(stream.pool)
    seed = stream.config.seed if seed is None else seed
    tracer = RunTracer(trace_rate) if trace else NULL_TRACER
    engine = RetrievalEngine(buffer, spec, schedule, seed=seed, loss_adapt=la,
                             fallback=fallback, left_term=left_term, tracer=tracer)

    class_counts = {c: 0 for c in buffer.classes}
    coverage, dup_dataset = [], []
    window_seen: dict[int, set[int]] = {}
    dup_window = 0
    batches = images = replays = 0
    fractions, weights, times = [], [], []

    for d, epochs in enumerate(stream.datasets):
        seen: set[int] = set()
        dups = 0
        for e, batch_list in enumerate(epochs):
            for b, batch in enumerate(batch_list):
                if trace:
                    tracer.position = (d, e, b)
                t0 = time.perf_counter()
                plan = engine.retrieve(batch)
                if measure_time:
                    times.append(time.perf_counter() - t0)
                if trace:
                    tracer.image_offset += len(batch)
                for sid, win in zip(plan.sample_ids, plan.windows):
                    if schedule is DedupSchedule.NONE:
                        # no window masks anything; the only guarantee is per plan
                        win = batches
                    if sid in seen:
                        dups += 1
                    seen.add(sid)
                    bucket = window_seen.setdefault(win, set())
                    if sid in bucket:
                        dup_window += 1
                    bucket.add(sid)
                    for c in buffer.sample(sid).class_embeddings:
                        class_counts[c] += 1
                batches += 1
                images += len(batch)
                replays += len(plan)
                fractions.append(len(plan) / len(batch))
                weights.append(plan.replay_weight)
            engine.end_epoch()
        engine.end_dataset()
        coverage.append(len(seen) / len(buffer))
        dup_dataset.append(dups)

    ranks = tracer.ranks if trace else []
    records = tracer.records if trace else []
    hist = rank_counts([r["rank"] for r in ranks], spec.asv.candidate_count if spec.asv else None)
    timing = None
    if measure_time and times:
        t = np.array(times) * 1e3
        timing = {"retrievals": int(t.size), "mean_ms_per_retrieval": float(t.mean()),
                  "max_ms_per_retrieval": float(t.max())}
    report = RunReport(
        algorithm=spec.name,
        schedule=schedule.value,
        seed=int(seed),
        buffer_size=len(buffer),
        batches=batches,
        new_images=images,
        replays=replays,
        replay_fraction=float(np.mean(fractions)) if fractions else 0.0,
        mean_replay_weight=float(np.mean(weights)) if weights else 0.0,
        coverage_per_dataset=coverage,
        duplicates_per_dataset=dup_dataset,
        duplicates_within_windows=dup_window,
        windows=len(window_seen),
        dataset_sizes=stream.dataset_sizes(),
        per_class_replays={str(c): n for c, n in class_counts.items()},
        entropy_summary=_entropy_summary(records),
        distance_rank_histogram=[int(x) for x in hist] if ranks else [],
        loss_adapt_threshold=la.threshold if la is not None and la.enabled else None,
        timing=timing,
    )
    return RunResult(report, records, ranks)
