"""Negative queue: FIFO semantics against a replay oracle, and contracts."""

from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lorac.errors import DegenerateInputError, ShapeError
from lorac.memory import NegativeQueue

from conftest import unit_rows


def make_queue(capacity=4, dim=3, seed=0):
    return NegativeQueue(capacity, dim, rng=np.random.Generator(np.random.Philox(key=seed)))


class TestFifo:
    def test_three_pushes_keep_last_four(self, rng):
        q = make_queue(capacity=4)
        a, b, c = unit_rows(rng, 2, 3), unit_rows(rng, 2, 3), unit_rows(rng, 2, 3)
        q.push_batch(a)
        q.push_batch(b)
        q.push_batch(c)
        held = {tuple(r) for r in q.store}
        assert held == {tuple(r) for r in np.vstack([b, c])}

    def test_full_push_replaces_everything(self, rng):
        q = make_queue(capacity=4)
        keys = unit_rows(rng, 4, 3)
        q.push_batch(keys)
        np.testing.assert_array_equal(np.sort(q.store, axis=0), np.sort(keys, axis=0))

    def test_push_larger_than_capacity_rejected(self, rng):
        q = make_queue(capacity=4)
        with pytest.raises(ShapeError):
            q.push_batch(unit_rows(rng, 5, 3))

    def test_non_unit_rows_rejected(self, rng):
        q = make_queue()
        with pytest.raises(DegenerateInputError):
            q.push_batch(rng.normal(size=(2, 3)) * 3.0)

    def test_warm_start_rows_unit_norm(self):
        q = make_queue(capacity=16, dim=5)
        np.testing.assert_allclose(np.linalg.norm(q.store, axis=1), 1.0, atol=1e-12)

    def test_warm_start_cleared_after_enough_pushes(self, rng):
        q = make_queue(capacity=10)
        pushed = []
        for _ in range(-(-10 // 3)):  # ceil(K / n) pushes of size 3
            batch = unit_rows(rng, 3, 3)
            pushed.append(batch)
            q.push_batch(batch)
        held = {tuple(r) for r in q.store}
        assert held <= {tuple(r) for r in np.vstack(pushed)}
        assert q.filled == 10

    @given(st.lists(st.integers(1, 6), min_size=1, max_size=12), st.integers(0, 999))
    @settings(max_examples=50, deadline=None)
    def test_replay_oracle_random_push_sequence(self, batch_sizes, seed):
        """Ring contents always equal the last-K pushed rows, oldest first."""
        capacity = 6
        rng = np.random.default_rng(seed)
        q = make_queue(capacity=capacity, dim=3, seed=seed)
        model = deque(maxlen=capacity)
        stamp = 0
        for n in batch_sizes:
            batch = unit_rows(rng, n, 3)
            batch[:, 0] = np.arange(stamp, stamp + n)  # unique stamps
            batch /= np.linalg.norm(batch, axis=1, keepdims=True)
            stamp += n
            q.push_batch(batch)
            model.extend(map(tuple, batch))
        held = {tuple(r) for r in q.store if tuple(r) in set(model) or len(model) == capacity}
        if len(model) == capacity:
            assert {tuple(r) for r in q.store} == set(model)
        else:
            pushed_rows = {tuple(r) for r in q.store} & set(model)
            assert pushed_rows == set(model)


class TestSnapshots:
    def test_shape_is_full_capacity(self):
        q = make_queue(capacity=7, dim=4)
        assert q.as_negatives().data.shape == (7, 4)

    def test_snapshot_detached_and_immune_to_pushes(self, rng):
        q = make_queue(capacity=4)
        snap = q.as_negatives()
        before = snap.data.copy()
        q.push_batch(unit_rows(rng, 4, 3))
        np.testing.assert_array_equal(snap.data, before)
        assert snap.tape is None
