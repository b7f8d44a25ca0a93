"""Loss-adaptive replay: how many samples to replay and how much their loss counts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from replaysel.errors import ConfigError


@dataclass(frozen=True)
class LossAdaptConfig:
    threshold: float = 0.0
    enabled: bool = True

    def __post_init__(self):
        if np.isnan(self.threshold) or self.threshold == np.inf:
            raise ConfigError("loss-adapt threshold must be a number below +inf")


def replay_budget(batch, cfg: LossAdaptConfig) -> tuple[int, float]:
    """Replay count ``r`` (images with loss above the threshold) and weight ``r/|B|``.

    ``batch`` is a :class:`~replaysel.class_selection.BatchContext` or a
    plain sequence of losses. Disabled adaptivity replays the whole batch
    at weight 1.
    """
    losses = batch.losses if hasattr(batch, "losses") else np.asarray(batch, dtype=np.float64)
    size = len(losses)
    if size == 0:
        raise ValueError("batch is empty")
    if not cfg.enabled:
        return size, 1.0
    r = int(np.count_nonzero(losses > cfg.threshold))
    return r, r / size


def combined_loss(batch_loss: float, replay_loss: float, weight: float) -> float:
    """Total loss: new-batch mean plus the weighted replay-batch mean."""
    if not 0.0 <= weight <= 1.0:
        raise ValueError("weight must lie in [0, 1]")
    return batch_loss + weight * replay_loss


def calibrate_threshold(losses, target_fraction: float) -> float:
    """Threshold ``l`` under which ``round(target * n)`` of ``losses`` lie strictly above it.

    Exact when the losses are distinct; ties at the cut can only lower the
    realized fraction.
    """
    x = np.sort(np.asarray(losses, dtype=np.float64).reshape(-1))
    if x.size == 0:
        raise ValueError("need at least one loss")
    if not 0.0 <= target_fraction <= 1.0:
        raise ConfigError("target replay fraction must lie in [0, 1]")
    r = int(round(target_fraction * x.size))
    if r == 0:
        return float(x[-1])
    if r == x.size:
        return float(np.nextafter(x[0], -np.inf))
    return float(x[x.size - r - 1])
