"""Segment-aware FIFO replay.

Transitions live in a ring of fixed capacity.  A segment is the run of
transitions produced by one guide decision (phases ``t mod K == 0`` up to
the next boundary or episode end) and is stored only as ``(start, length)``
over the global insertion counter, so evicting its first transition
invalidates it automatically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sac import ControlBatch


@dataclass
class Transition:
    task: int
    state: np.ndarray
    action: np.ndarray | int
    guide: int
    reward: float
    next_state: np.ndarray
    terminated: bool
    truncated: bool
    t: int  # step index within the episode


@dataclass
class SegmentRecord:
    task: int
    start_t: int
    guide: int
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    final_state: np.ndarray
    terminated: bool

    def __post_init__(self):
        if len(self.rewards) == 0:
            raise ValueError("empty segment")
        if not len(self.states) == len(self.actions) == len(self.rewards):
            raise ValueError("segment sequences must have equal length")

    def __len__(self):
        return len(self.rewards)


@dataclass
class SegmentBatch:
    """Padded batch of segments; ``valid[b, k]`` marks real steps."""

    tasks: np.ndarray
    guides: np.ndarray
    feats: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    valid: np.ndarray
    lengths: np.ndarray
    final_feats: np.ndarray
    terminated: np.ndarray
    weights: np.ndarray | None = None

    def __len__(self):
        return len(self.tasks)

    @classmethod
    def from_records(cls, records: list[SegmentRecord], k: int | None = None, weights=None) -> "SegmentBatch":
        k = k or max(len(r) for r in records)
        B = len(records)
        s0, a0 = np.asarray(records[0].states[0]), np.asarray(records[0].actions[0])
        feats = np.zeros((B, k) + s0.shape, dtype=s0.dtype)
        actions = np.zeros((B, k) + a0.shape, dtype=a0.dtype)
        rewards = np.zeros((B, k))
        valid = np.zeros((B, k), dtype=bool)
        for b, r in enumerate(records):
            n = len(r)
            if n > k:
                raise ValueError("segment longer than guide step")
            feats[b, :n] = np.asarray(r.states)
            feats[b, n:] = np.asarray(r.states[0])
            actions[b, :n] = np.asarray(r.actions)
            actions[b, n:] = np.asarray(r.actions[0])
            rewards[b, :n] = r.rewards
            valid[b, :n] = True
        return cls(
            tasks=np.array([r.task for r in records], dtype=np.int64),
            guides=np.array([r.guide for r in records], dtype=np.int64),
            feats=feats, actions=actions, rewards=rewards, valid=valid,
            lengths=valid.sum(axis=1),
            final_feats=np.stack([np.asarray(r.final_state) for r in records]),
            terminated=np.array([float(r.terminated) for r in records]),
            weights=None if weights is None else np.asarray(weights, dtype=np.float64),
        )

    def record(self, b: int) -> SegmentRecord:
        n = int(self.lengths[b])
        return SegmentRecord(int(self.tasks[b]), 0, int(self.guides[b]), self.feats[b, :n], self.actions[b, :n],
                             self.rewards[b, :n], self.final_feats[b], bool(self.terminated[b]))


class _IndexLog:
    """Append-only int64 log with a moving head (FIFO view)."""

    def __init__(self):
        self.data = np.empty(64, dtype=np.int64)
        self.size = 0
        self.head = 0

    def append(self, value: int) -> None:
        if self.size == len(self.data):
            self.data = np.concatenate([self.data, np.empty_like(self.data)])
        self.data[self.size] = value
        self.size += 1

    def drop_below(self, oldest: int) -> None:
        while self.head < self.size and self.data[self.head] < oldest:
            self.head += 1

    def __len__(self):
        return self.size - self.head

    def view(self) -> np.ndarray:
        return self.data[self.head:self.size]


class ReplayBuffer:
    def __init__(self, capacity: int, n_tasks: int, guide_step: int = 10):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        if guide_step < 1:
            raise ValueError("guide step must be >= 1")
        self.capacity, self.n_tasks, self.k = capacity, n_tasks, guide_step
        self.total = 0  # global insertion counter
        self._arrays = None
        self._task_idx = [_IndexLog() for _ in range(n_tasks)]
        self._seg_start = [_IndexLog() for _ in range(n_tasks)]
        self._seg_len: list[dict] = [dict() for _ in range(n_tasks)]
        self._open: tuple[int, int] | None = None  # (start global idx, task)

    def _alloc(self, tr: Transition) -> None:
        state = np.asarray(tr.state)
        action = np.asarray(tr.action)
        cap = self.capacity
        self._arrays = {
            "task": np.zeros(cap, dtype=np.int64),
            "state": np.zeros((cap,) + state.shape, dtype=state.dtype),
            "action": np.zeros((cap,) + action.shape, dtype=action.dtype),
            "guide": np.zeros(cap, dtype=np.int64),
            "reward": np.zeros(cap),
            "next_state": np.zeros((cap,) + state.shape, dtype=state.dtype),
            "terminated": np.zeros(cap),
            "truncated": np.zeros(cap, dtype=bool),
            "t": np.zeros(cap, dtype=np.int64),
        }

    def __len__(self):
        return min(self.total, self.capacity)

    @property
    def oldest(self) -> int:
        return max(0, self.total - self.capacity)

    def push(self, tr: Transition) -> None:
        if not np.isfinite(tr.reward):
            raise ValueError("non-finite reward")
        if not 0 <= tr.task < self.n_tasks or not 0 <= tr.guide < self.n_tasks:
            raise ValueError("task or guide index out of range")
        if self._arrays is None:
            self._alloc(tr)
        g = self.total
        slot = g % self.capacity
        a = self._arrays
        a["task"][slot] = tr.task
        a["state"][slot] = tr.state
        a["action"][slot] = tr.action
        a["guide"][slot] = tr.guide
        a["reward"][slot] = tr.reward
        a["next_state"][slot] = tr.next_state
        a["terminated"][slot] = float(tr.terminated)
        a["truncated"][slot] = tr.truncated
        a["t"][slot] = tr.t
        self.total += 1

        # segment bookkeeping
        if tr.t % self.k == 0:
            self._open = (g, tr.task)
        if self._open is not None:
            start, task = self._open
            if task != tr.task or tr.t - a["t"][start % self.capacity] != g - start:
                self._open = None  # broken chain: drop the partial segment
            elif (tr.t % self.k == self.k - 1) or tr.terminated or tr.truncated:
                self._seg_start[task].append(start)
                self._seg_len[task][start] = g - start + 1
                self._open = None

        self._task_idx[tr.task].append(g)
        oldest = self.oldest
        if oldest > 0:
            for t in range(self.n_tasks):
                self._task_idx[t].drop_below(oldest)
                log = self._seg_start[t]
                while log.head < log.size and log.data[log.head] < oldest:
                    self._seg_len[t].pop(int(log.data[log.head]), None)
                    log.head += 1

    # -- sampling -------------------------------------------------------------
    def count(self, task: int) -> int:
        return len(self._task_idx[task])

    def n_segments(self, task: int) -> int:
        return len(self._seg_start[task])

    def _gather(self, gidx: np.ndarray):
        return gidx % self.capacity

    def sample_control_batch(self, per_task_count: int, rng: np.random.Generator) -> ControlBatch:
        """``per_task_count`` uniform draws (with replacement) per task, concatenated by task."""
        picks = []
        for t in range(self.n_tasks):
            log = self._task_idx[t]
            if len(log) == 0:
                raise ValueError(f"task {t} has no stored transitions")
            picks.append(log.view()[rng.integers(0, len(log), size=per_task_count)])
        slots = self._gather(np.concatenate(picks))
        a = self._arrays
        return ControlBatch(a["task"][slots], a["state"][slots], a["action"][slots], a["reward"][slots],
                            a["next_state"][slots], a["terminated"][slots])

    def segments(self, task: int) -> list[tuple[int, int]]:
        return [(int(s), self._seg_len[task][int(s)]) for s in self._seg_start[task].view()]

    def sample_guide_batch(self, block_set, count: int, rng: np.random.Generator) -> SegmentBatch | None:
        """Uniform draws over valid segments of tasks in ``block_set``; None when none exist."""
        tasks = sorted(int(t) for t in block_set)
        if not tasks:
            raise ValueError("block set must be non-empty")
        sizes = np.array([len(self._seg_start[t]) for t in tasks])
        if sizes.sum() == 0:
            return None
        draws = rng.integers(0, sizes.sum(), size=count)
        bounds = np.cumsum(sizes)
        which = np.searchsorted(bounds, draws, side="right")
        starts = np.empty(count, dtype=np.int64)
        lengths = np.empty(count, dtype=np.int64)
        for b, (w, d) in enumerate(zip(which, draws)):
            t = tasks[w]
            off = d - (bounds[w] - sizes[w])
            s = int(self._seg_start[t].view()[off])
            starts[b] = s
            lengths[b] = self._seg_len[t][s]
        return self._segment_batch(starts, lengths)

    def _segment_batch(self, starts: np.ndarray, lengths: np.ndarray) -> SegmentBatch:
        a = self._arrays
        steps = np.arange(self.k)
        valid = steps[None, :] < lengths[:, None]
        gidx = np.where(valid, starts[:, None] + steps[None, :], starts[:, None])
        slots = self._gather(gidx)
        last = self._gather(starts + lengths - 1)
        first = self._gather(starts)
        return SegmentBatch(
            tasks=a["task"][first], guides=a["guide"][first],
            feats=a["state"][slots], actions=a["action"][slots],
            rewards=np.where(valid, a["reward"][slots], 0.0), valid=valid, lengths=lengths,
            final_feats=a["next_state"][last], terminated=a["terminated"][last],
        )

    def segment(self, start: int) -> SegmentBatch:
        """Materialize one stored segment by its global start index."""
        task = int(self._arrays["task"][start % self.capacity])
        if start < self.oldest or start not in self._seg_len[task]:
            raise KeyError(f"segment at {start} is not stored")
        return self._segment_batch(np.array([start]), np.array([self._seg_len[task][start]]))
