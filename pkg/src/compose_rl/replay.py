"""Ring-buffer experience replay with uniform sampling."""
from __future__ import annotations

import numpy as np


class ReplayBuffer:
    """Fixed-capacity FIFO store of named array fields.

    The schema is fixed by the first ``push``.  Storage grows geometrically up
    to ``capacity`` so a large nominal capacity costs nothing until used.
    """

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.rng = rng
        self._store: dict[str, np.ndarray] = {}
        self._alloc = 0
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def _grow(self, needed: int) -> None:
        new = min(self.capacity, max(needed, 2 * self._alloc, 64))
        for k, arr in self._store.items():
            grown = np.zeros((new,) + arr.shape[1:], dtype=arr.dtype)
            grown[:self._alloc] = arr[:self._alloc]
            self._store[k] = grown
        self._alloc = new

    def push(self, **item) -> None:
        if not self._store:
            for k, v in item.items():
                v = np.asarray(v)
                self._store[k] = np.zeros((0,) + v.shape, dtype=np.float64 if v.dtype != bool else bool)
        elif set(item) != set(self._store):
            raise KeyError(f"fields {sorted(item)} do not match buffer schema {sorted(self._store)}")
        if self.cursor >= self._alloc:
            self._grow(self.cursor + 1)
        for k, v in item.items():
            arr = self._store[k]
            v = np.asarray(v)
            if v.shape != arr.shape[1:]:
                raise ValueError(f"field {k!r}: shape {v.shape} != schema shape {arr.shape[1:]}")
            arr[self.cursor] = v
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def indices(self, k: int) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        return self.rng.integers(0, self.size, size=k)

    def sample(self, k: int) -> dict[str, np.ndarray]:
        """``k`` items drawn uniformly with replacement."""
        idx = self.indices(k)
        return {name: arr[idx] for name, arr in self._store.items()}

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "cursor": self.cursor, "size": self.size,
                "store": {k: v[:self._alloc].copy() for k, v in self._store.items()},
                "rng": self.rng.bit_generator.state}

    def load_state_dict(self, state: dict) -> None:
        self.capacity = state["capacity"]
        self.cursor = state["cursor"]
        self.size = state["size"]
        self._store = {k: np.array(v) for k, v in state["store"].items()}
        self._alloc = next(iter(self._store.values())).shape[0] if self._store else 0
        self.rng.bit_generator.state = state["rng"]
