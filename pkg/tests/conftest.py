import numpy as np
import pytest

from replaysel.buffer import BufferSample, ReplayBuffer
from replaysel.class_selection import BatchContext, BatchImage

ACCEPTANCE_LINES: list[str] = []


def make_sample(sid, loss, classes, dim=4, rng=None, k=1):
    """A sample whose class embeddings are ``classes[c]`` or random rows."""
    rng = rng or np.random.default_rng(sid)
    emb = {}
    for c, value in (classes.items() if isinstance(classes, dict) else ((c, None) for c in classes)):
        emb[c] = rng.normal(size=(k, dim)) if value is None else np.atleast_2d(value)
    return BufferSample(sid, loss, emb)


def random_buffer(num_classes, per_class, dim=8, seed=0, k=2):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(num_classes, dim))
    samples = []
    sid = 0
    for c in range(num_classes):
        for _ in range(per_class):
            emb = centers[c] + 0.5 * rng.normal(size=(k, dim))
            samples.append(BufferSample(sid, float(rng.uniform(0, 0.1)), {c: emb}))
            sid += 1
    return ReplayBuffer(samples)


def random_batch(n, dim=8, seed=0, k=2, losses=None):
    rng = np.random.default_rng(seed)
    losses = [1.0] * n if losses is None else losses
    return BatchContext(tuple(BatchImage(rng.normal(size=(k, dim)), l) for l in losses))


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
