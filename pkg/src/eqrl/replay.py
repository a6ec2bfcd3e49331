"""Experience replay: a uniform ring buffer and a proportional prioritized one.

The prioritized buffer keeps priorities^alpha in a sum tree; sampling is
stratified over equal probability segments and returns importance weights
(N * P)^-beta normalized by the batch maximum.  New transitions enter at the
current maximum priority so they are seen at least once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray
    weights: np.ndarray
    indices: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring buffer; overwrites oldest entries first."""

    def __init__(self, capacity: int, obs_shape, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs = np.zeros((capacity, *obs_shape), dtype=np.uint8)
        self.next_obs = np.zeros_like(self.obs)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.dones = np.zeros(capacity, dtype=np.float32)
        self._size = 0
        self._head = 0
        self._rng = np.random.default_rng(seed)

    def __len__(self):
        return self._size

    def push(self, obs, action, reward, next_obs, done):
        i = self._head
        self.obs[i] = obs
        self.next_obs[i] = next_obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.dones[i] = float(done)
        self._head = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        return i

    def _gather(self, idx) -> Batch:
        return Batch(
            self.obs[idx],
            self.actions[idx],
            self.rewards[idx],
            self.next_obs[idx],
            self.dones[idx],
            np.ones(len(idx), dtype=np.float32),
            np.asarray(idx),
        )

    def sample(self, batch_size: int, beta: float = 0.0) -> Batch:
        if batch_size > self._size:
            raise ValueError(f"cannot sample {batch_size} from {self._size} stored transitions")
        idx = self._rng.choice(self._size, size=batch_size, replace=False)
        return self._gather(idx)

    def update_priorities(self, indices, td_errors):
        pass


class SumTree:
    """Binary indexed tree over leaf values; supports prefix-sum descent."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._tree = np.zeros(2 * capacity, dtype=np.float64)

    def update(self, i: int, value: float):
        if not 0 <= i < self.capacity:
            raise IndexError(f"leaf {i} out of range")
        if value < 0:
            raise ValueError("sum tree values must be non-negative")
        j = self.capacity + i
        self._tree[j] = value
        j //= 2
        while j >= 1:
            self._tree[j] = self._tree[2 * j] + self._tree[2 * j + 1]
            j //= 2

    def get(self, i: int) -> float:
        return float(self._tree[self.capacity + i])

    def total(self) -> float:
        return float(self._tree[1])

    def find(self, value: float) -> int:
        """Leaf index whose cumulative range contains ``value``."""
        j = 1
        while j < self.capacity:
            left = 2 * j
            if value < self._tree[left]:
                j = left
            else:
                value -= self._tree[left]
                j = left + 1
        return j - self.capacity


class PrioritizedReplayBuffer(ReplayBuffer):
    def __init__(self, capacity: int, obs_shape, seed: int = 0,
                 alpha: float = 0.6, priority_eps: float = 1e-6):
        super().__init__(capacity, obs_shape, seed)
        self.alpha = alpha
        self.priority_eps = priority_eps
        self.tree = SumTree(capacity)
        self.max_priority = 1.0

    def push(self, obs, action, reward, next_obs, done):
        i = super().push(obs, action, reward, next_obs, done)
        self.tree.update(i, self.max_priority**self.alpha)
        return i

    def sample(self, batch_size: int, beta: float = 0.4) -> Batch:
        if batch_size > self._size:
            raise ValueError(f"cannot sample {batch_size} from {self._size} stored transitions")
        total = self.tree.total()
        seg = total / batch_size
        idx = np.empty(batch_size, dtype=np.int64)
        probs = np.empty(batch_size, dtype=np.float64)
        for k in range(batch_size):
            v = (k + self._rng.random()) * seg
            i = self.tree.find(min(v, total * (1 - 1e-12)))
            idx[k] = i
            probs[k] = self.tree.get(i) / total
        weights = (self._size * probs) ** (-beta)
        weights /= weights.max()
        batch = self._gather(idx)
        batch.weights = weights.astype(np.float32)
        return batch

    def update_priorities(self, indices, td_errors):
        for i, td in zip(np.asarray(indices), np.asarray(td_errors, dtype=np.float64)):
            p = abs(float(td)) + self.priority_eps
            self.tree.update(int(i), p**self.alpha)
            self.max_priority = max(self.max_priority, p)

    def probabilities(self) -> np.ndarray:
        """Current sampling distribution over stored slots (diagnostics)."""
        total = self.tree.total()
        leaves = np.array([self.tree.get(i) for i in range(self._size)])
        return leaves / total
