"""Flat ``key = value`` experiment configuration.

Blank lines and ``#`` comments are ignored. Keys are the StreamConfig
fields plus the run keys in :data:`RUN_KEYS`; any other key is an error.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from replaysel.buffer import BufferSelectionConfig
from replaysel.engine import AlgorithmSpec, DedupSchedule
from replaysel.errors import ConfigError
from replaysel.harness.stream import StreamConfig
from replaysel.loss_adapt import LossAdaptConfig, calibrate_threshold

RUN_KEYS = {
    "algorithm": str,
    "dedup": str,
    "swil_w": float,
    "grasp_w": float,
    "asv_c": float,
    "asv_K": int,
    "candidate_count": int,
    "adaptive_entropy_threshold": float,
    "loss_adapt_threshold": float,
    "replay_target": float,
    "buffer_loss_threshold": float,
    "buffer_class_floor": int,
    "trace_rate": int,
    "fallback": bool,
}

_STREAM_TYPES = {f.name: f.type for f in dataclasses.fields(StreamConfig)}


def _coerce(key: str, raw: str, kind):
    kind = {"int": int, "float": float, "bool": bool, "str": str}.get(kind, kind)
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


@dataclass
class ExperimentConfig:
    stream: dict = field(default_factory=dict)
    run: dict = field(default_factory=lambda: {"algorithm": "Uniform", "dedup": "none"})

    def set(self, key: str, value) -> None:
        if key in _STREAM_TYPES:
            self.stream[key] = _coerce(key, str(value), _STREAM_TYPES[key]) if isinstance(value, str) else value
        elif key in RUN_KEYS:
            self.run[key] = _coerce(key, str(value), RUN_KEYS[key]) if isinstance(value, str) else value
        else:
            raise ConfigError(f"unknown configuration key {key!r}")

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            cfg.set(key, value)
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.parse(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def stream_config(self) -> StreamConfig:
        return StreamConfig(**self.stream)

    def algorithm_spec(self) -> AlgorithmSpec:
        r = self.run
        return AlgorithmSpec.create(
            r["algorithm"],
            swil_w=r.get("swil_w"),
            grasp_w=r.get("grasp_w"),
            asv_c=r.get("asv_c"),
            asv_K=r.get("asv_K"),
            candidate_count=r.get("candidate_count"),
            adaptive_entropy_threshold=r.get("adaptive_entropy_threshold"),
        )

    def schedule(self) -> DedupSchedule:
        return DedupSchedule.parse(self.run.get("dedup", "none"))

    def loss_adapt(self, stream=None) -> LossAdaptConfig | None:
        """Fixed threshold, or one calibrated on ``stream`` to hit ``replay_target``."""
        t = self.run.get("loss_adapt_threshold")
        target = self.run.get("replay_target")
        if t is not None and target is not None:
            raise ConfigError("set loss_adapt_threshold or replay_target, not both")
        if target is not None:
            if stream is None:
                raise ConfigError("replay_target needs the stream to calibrate against")
            t = calibrate_threshold(stream.batch_losses(), target)
        return None if t is None else LossAdaptConfig(threshold=t, enabled=True)

    def buffer_selection(self) -> BufferSelectionConfig | None:
        t = self.run.get("buffer_loss_threshold")
        floor = self.run.get("buffer_class_floor")
        if t is None and floor is None:
            return None
        return BufferSelectionConfig(
            loss_threshold=0.15 if t is None else t,
            class_floor=50 if floor is None else floor,
        )
