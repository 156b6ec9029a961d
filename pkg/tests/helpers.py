"""Shared test utilities: random instance builders used by several suites."""

import numpy as np

from deskocr.losses import SeqLabel


def random_ctc_instance(rng, max_steps=6, max_classes=4, max_label=3):
    """A random (probs, label) pair within the oracle-tractable regime."""
    steps = int(rng.integers(1, max_steps + 1))
    classes = int(rng.integers(2, max_classes + 1))
    lab_len = int(rng.integers(1, max_label + 1))
    symbols = tuple(int(s) for s in rng.integers(1, classes, size=lab_len))
    probs = rng.dirichlet(np.ones(classes), size=steps)
    return probs, SeqLabel(symbols)


def random_simplex(rng, shape):
    """Rows summing to 1 with no tiny entries (safe for KL floors and logs)."""
    raw = rng.uniform(0.1, 1.0, size=shape)
    return raw / raw.sum(axis=-1, keepdims=True)
