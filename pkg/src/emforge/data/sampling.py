"""Deterministic batch sampling over shuffled epochs."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .records import DataError, Dataset, ExampleRecord


@lru_cache(maxsize=64)
def _epoch_perm(seed: int, task_index: int, n: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, task_index, epoch, 7]).permutation(n)


class BatchSampler:
    """Draws training batches so that ``(seed, step)`` fixes the result.

    Each task is read as an endless stream of shuffled epochs. With several
    tasks, every batch slot picks a task uniformly at random and takes that
    task's next stream element; stream positions come from replaying the
    task picks of earlier steps.
    """

    def __init__(self, dataset: Dataset, batch_size: int, seed: int = 0, replacement: bool = False):
        records = [r for r in dataset.records if r.split == "train"]
        if not records:
            raise DataError("no training records to sample from")
        groups = dataset.subset(records).by_task()
        self.task_ids = sorted(groups)
        self.groups = [groups[t] for t in self.task_ids]
        if batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if not replacement and batch_size > len(records):
            raise DataError(f"batch_size {batch_size} exceeds {len(records)} training records")
        self.batch_size = batch_size
        self.seed = seed
        self.replacement = replacement
        self._cursor: list[np.ndarray] = [np.zeros(len(self.groups), dtype=np.int64)]

    def _picks(self, step: int) -> np.ndarray:
        if len(self.groups) == 1:
            return np.zeros(self.batch_size, dtype=np.int64)
        rng = np.random.default_rng([self.seed, step, 11])
        return rng.integers(len(self.groups), size=self.batch_size)

    def _cursor_at(self, step: int) -> np.ndarray:
        while len(self._cursor) <= step:
            s = len(self._cursor) - 1
            self._cursor.append(self._cursor[s] + np.bincount(self._picks(s), minlength=len(self.groups)))
        return self._cursor[step]

    def indices(self, step: int) -> list[tuple[int, int]]:
        """(task index, record index within task) for every slot of ``step``."""
        if step < 0:
            raise ValueError("step must be >= 0")
        picks = self._picks(step)
        if self.replacement:
            rng = np.random.default_rng([self.seed, step, 13])
            return [(int(t), int(rng.integers(len(self.groups[t])))) for t in picks]
        pos = self._cursor_at(step).copy()
        out = []
        for t in picks:
            n = len(self.groups[t])
            p = int(pos[t])
            out.append((int(t), int(_epoch_perm(self.seed, int(t), n, p // n)[p % n])))
            pos[t] += 1
        return out

    def batch(self, step: int) -> list[ExampleRecord]:
        return [self.groups[t][i] for t, i in self.indices(step)]


def sample_batch(dataset: Dataset, batch_size: int, step: int, seed: int = 0,
                 replacement: bool = False) -> list[ExampleRecord]:
    return BatchSampler(dataset, batch_size, seed, replacement).batch(step)
