"""Cross-session FIFO replay buffer of flattened transitions."""

from __future__ import annotations

import logging
from collections import deque
from typing import Deque, List

import numpy as np

from retention_lab.exceptions import NotReadyError
from retention_lab.gfn_policy import Transition
from retention_lab.rollout import SessionTrajectory, to_transitions

logger = logging.getLogger(__name__)


class CrossSessionBuffer:
    """
    Bounded FIFO of transitions; the oldest entries are evicted first.

    Args:
        capacity (int): Maximum number of stored transitions.
        min_fill (int): Size below which training should wait.
    """

    def __init__(self, capacity: int = 100_000, min_fill: int = 1000) -> None:
        if capacity < 1:
            raise ValueError(f"buffer capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.min_fill = min_fill
        self.insert_count = 0
        self._storage: Deque[Transition] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._storage)

    def push(self, trajectory: SessionTrajectory) -> None:
        transitions = to_transitions(trajectory)
        self._storage.extend(transitions)
        self.insert_count += len(transitions)

    def ready(self, batch_size: int) -> bool:
        return len(self) >= max(batch_size, self.min_fill)

    def sample(self, batch_size: int, rng: np.random.Generator) -> List[Transition]:
        """Uniform sample without replacement."""
        if len(self) < batch_size:
            raise NotReadyError(f"buffer holds {len(self)} transitions, {batch_size} requested")
        indices = rng.choice(len(self), size=batch_size, replace=False)
        return [self._storage[int(i)] for i in indices]

    def transitions(self) -> List[Transition]:
        return list(self._storage)
