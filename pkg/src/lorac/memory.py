"""FIFO memory bank of negative-key embeddings.

A fixed-capacity ring of unit-norm rows.  Until the ring has seen enough
pushes it serves its warm-start rows: unit-normalized Gaussian vectors, so
the contrastive loss sees valid inputs from the first step.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .tensor import Tensor


class NegativeQueue:
    """Ring buffer of the ``capacity`` most recent key embeddings."""

    def __init__(self, capacity: int, dim: int, rng: np.random.Generator | None = None):
        if capacity < 1:
            raise ShapeError(f"queue capacity must be positive, got {capacity}")
        if rng is None:
            rng = np.random.Generator(np.random.Philox(key=0))
        store = rng.normal(size=(capacity, dim))
        store /= np.sqrt((store * store).sum(axis=1, keepdims=True))
        self.capacity = capacity
        self.dim = dim
        self.store = store
        self.head = 0      # next write position; also the oldest row
        self.filled = 0    # rows that came from push_batch, capped at capacity

    def push_batch(self, keys) -> None:
        """Replace the ``n`` oldest rows with ``keys`` (n <= capacity)."""
        keys = np.asarray(keys, dtype=np.float64)
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ShapeError(f"expected (n, {self.dim}) keys, got {keys.shape}")
        n = keys.shape[0]
        if n > self.capacity:
            raise ShapeError(f"push of {n} rows exceeds capacity {self.capacity}")
        norms = np.sqrt((keys * keys).sum(axis=1))
        if not np.allclose(norms, 1.0, atol=1e-8):
            raise DegenerateInputError("queue keys must be unit-norm rows")
        idx = (self.head + np.arange(n)) % self.capacity
        self.store[idx] = keys
        self.head = (self.head + n) % self.capacity
        self.filled = min(self.filled + n, self.capacity)

    def as_negatives(self) -> Tensor:
        """Detached snapshot of all rows; unaffected by later pushes."""
        return Tensor(self.store.copy())
