"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 exhaustion, 4 bad data.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from replaysel.buffer import BufferSelectionConfig, ReplayBuffer, read_jsonl, select_buffer, write_jsonl
from replaysel.errors import ConfigError, DataFormatError, EmptyBufferError, ExhaustionError, ReplaySelError
from replaysel.harness.analysis import (
    DistributionRecord,
    entropy_histogram,
    entropy_histogram_csv,
    rank_counts,
    rank_histogram_csv,
    size_forgetting_correlation,
    to_csv,
)
from replaysel.harness.config import ExperimentConfig
from replaysel.harness.experiment import run_experiment
from replaysel.harness.stream import generate_stream
from replaysel.sample_selection import LeftTerm, precompute_left_term

log = logging.getLogger("replaysel")

EXIT_CONFIG, EXIT_EXHAUSTED, EXIT_DATA = 2, 3, 4


def _write(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def cmd_generate_pool(args) -> int:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.set("seed", args.seed)
    stream = generate_stream(cfg.stream_config())
    write_jsonl(args.out, stream.pool)
    log.info("wrote %d pool samples to %s", len(stream.pool), args.out)
    return 0


def cmd_build_buffer(args) -> int:
    pool = read_jsonl(args.pool)
    cfg = BufferSelectionConfig(loss_threshold=args.loss_threshold, class_floor=args.class_floor)
    buffer = select_buffer(pool, cfg)
    write_jsonl(args.out, buffer.samples)
    log.info("kept %d of %d samples over %d classes", len(buffer), len(pool), len(buffer.classes))
    return 0


def cmd_precompute_left(args) -> int:
    buffer = ReplayBuffer(read_jsonl(args.buffer))
    left = precompute_left_term(buffer, args.K)
    out = args.out
    if out is None or os.path.isdir(out):
        out = os.path.join(out or ".", f"left-{buffer.content_hash()[:16]}-K{args.K}.bin")
    left.save(out)
    print(out)
    return 0


def cmd_run(args) -> int:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if args.algorithm is not None:
        cfg.set("algorithm", args.algorithm)
    if args.dedup is not None:
        cfg.set("dedup", args.dedup)
    if args.loss_adapt_threshold is not None:
        cfg.set("loss_adapt_threshold", args.loss_adapt_threshold)
    if args.replay_target is not None:
        cfg.set("replay_target", args.replay_target)
    if args.seed is not None:
        cfg.set("seed", args.seed)
    stream = generate_stream(cfg.stream_config())
    spec = cfg.algorithm_spec()
    buffer = ReplayBuffer(read_jsonl(args.buffer)) if args.buffer else None
    if buffer is not None and buffer.embedding_dim != stream.config.embedding_dim:
        raise DataFormatError("buffer embedding dimension does not match the stream")
    left = LeftTerm.load(args.left) if args.left else None
    result = run_experiment(
        stream, spec, cfg.schedule(), cfg.loss_adapt(stream),
        buffer=buffer,
        buffer_cfg=cfg.buffer_selection(),
        trace_rate=cfg.run.get("trace_rate", 50),
        fallback=cfg.run.get("fallback", True),
        measure_time=args.timing,
        left_term=left,
    )
    _write(args.out, result.report.to_json())
    if args.trace_out:
        _write(args.trace_out, result.trace_jsonl())
    if args.rank_csv:
        _write(args.rank_csv, rank_histogram_csv(result.report.distance_rank_histogram))
    return 0


def _read_trace(path):
    records, ranks = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if obj.get("type") == "distribution":
                    records.append(DistributionRecord.from_dict(obj))
                elif obj.get("type") == "rank":
                    ranks.append(int(obj["rank"]))
                else:
                    raise ValueError(f"unknown record type {obj.get('type')!r}")
            except (ValueError, KeyError, TypeError) as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
    return records, ranks


def cmd_analyze(args) -> int:
    records, ranks = _read_trace(args.trace)
    os.makedirs(args.out_dir, exist_ok=True)
    written = []
    for source in sorted({r.source for r in records}):
        subset = [r for r in records if r.source == source]
        hist = entropy_histogram(subset, args.bins)
        name = os.path.join(args.out_dir, f"entropy_{source.lower()}.csv")
        _write(name, entropy_histogram_csv(hist))
        extremes = os.path.join(args.out_dir, f"entropy_{source.lower()}_extremes.csv")
        rows = []
        for label, rec in (("min", hist.minimum), ("median", hist.median), ("max", hist.maximum)):
            rows.append((label, rec.normalized_entropy, rec.dataset_index, rec.epoch_index,
                         rec.batch_index, rec.image_index, " ".join(repr(p) for p in rec.probs)))
        _write(extremes, to_csv(["which", "normalized_entropy_unitless", "dataset_index", "epoch_index",
                                 "batch_index", "image_index", "probabilities_unitless"], rows))
        written += [name, extremes]
    if ranks:
        name = os.path.join(args.out_dir, "distance_ranks.csv")
        _write(name, rank_histogram_csv(rank_counts(ranks)))
        written.append(name)
    if args.correlation:
        points = []
        try:
            with open(args.correlation, encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    points.append((float(row["size"]), float(row["metric_delta"])))
        except (KeyError, ValueError) as exc:
            raise DataFormatError(f"{args.correlation}: expected columns size,metric_delta ({exc})") from exc
        r = size_forgetting_correlation(points)
        name = os.path.join(args.out_dir, "correlation.csv")
        _write(name, to_csv(["datasets_count", "pearson_r_unitless"], [(len(points), r)]))
        written.append(name)
    for name in written:
        print(name)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="replaysel", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-pool", help="write a synthetic candidate pool as JSONL")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_pool)

    b = sub.add_parser("build-buffer", help="select a replay buffer from a candidate pool")
    b.add_argument("pool")
    b.add_argument("--out", required=True)
    b.add_argument("--loss-threshold", type=float, default=0.15)
    b.add_argument("--class-floor", type=int, default=50)
    b.set_defaults(func=cmd_build_buffer)

    pl = sub.add_parser("precompute-left", help="pre-compute ASV representativeness over a buffer")
    pl.add_argument("buffer")
    pl.add_argument("--K", type=int, default=20)
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_precompute_left)

    r = sub.add_parser("run", help="run one algorithm over a synthetic stream")
    r.add_argument("--config")
    r.add_argument("--algorithm")
    r.add_argument("--dedup", choices=["none", "epoch", "dataset", "buffer-third"])
    r.add_argument("--loss-adapt-threshold", type=float)
    r.add_argument("--replay-target", type=float,
                   help="calibrate the loss-adapt threshold to this replay fraction")
    r.add_argument("--seed", type=int)
    r.add_argument("--buffer", help="buffer JSONL to use instead of the synthetic pool")
    r.add_argument("--left", help="pre-computed left-term file for ASER-PC variants")
    r.add_argument("--out", help="RunReport JSON path (default stdout)")
    r.add_argument("--trace-out")
    r.add_argument("--rank-csv", help="write the distance-rank histogram as CSV")
    r.add_argument("--timing", action="store_true", help="record wall time per retrieval")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("analyze", help="histograms and correlations from a trace")
    a.add_argument("trace")
    a.add_argument("--out-dir", required=True)
    a.add_argument("--bins", type=int, default=20)
    a.add_argument("--correlation", help="CSV with columns size,metric_delta")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except ExhaustionError as exc:
        log.error("exhausted: %s", exc)
        return EXIT_EXHAUSTED
    except (DataFormatError, EmptyBufferError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except ReplaySelError as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
