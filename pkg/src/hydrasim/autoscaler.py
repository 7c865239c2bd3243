"""Sliding-window demand estimate and pipeline-group sizing.

Each model keeps arrival counts for the last ``ring_k`` completed windows.
The busiest of those windows is the forecast for the next one; together
with the waiting queue it sets how many standalone workers the model needs.
A deficit is covered with pipeline groups: each group of size ``s`` later
turns into ``k <= s`` standalone workers (one survivor when ``k == 1``).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from hydrasim.allocator import AllocationError, Choice

SCALE_DOWN = "scale_down"
SCALE_UP = "scale_up"
PIPELINE_ONLY = "none"


def group_mode(k: int) -> str:
    if k == 0:
        return PIPELINE_ONLY
    return SCALE_DOWN if k == 1 else SCALE_UP


@dataclass
class ModelDemandState:
    window_len_s: float = 10.0
    ring_k: int = 3
    ring: deque = field(default=None)
    current_count: int = 0
    waiting_queue_len: int = 0
    live_workers: int = 0
    inflight_group_sizes: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.ring is None:
            self.ring = deque([0] * self.ring_k, maxlen=self.ring_k)
        elif not isinstance(self.ring, deque) or self.ring.maxlen != self.ring_k:
            self.ring = deque(self.ring, maxlen=self.ring_k)
        if len(self.ring) != self.ring_k:
            raise ValueError(f"ring holds {len(self.ring)} windows, expected {self.ring_k}")

    def record_arrival(self) -> None:
        self.current_count += 1

    def tick(self) -> None:
        """Close the current window."""
        self.ring.append(self.current_count)
        self.current_count = 0

    @property
    def predicted_max(self) -> int:
        return max(self.ring, default=0)

    @property
    def inflight(self) -> int:
        return sum(self.inflight_group_sizes)


def desired_workers(state: ModelDemandState, batch_capacity: int) -> int:
    if batch_capacity < 1:
        raise ValueError("batch_capacity must be >= 1")
    demand = max(0, state.waiting_queue_len) + max(0, state.predicted_max)
    return math.ceil(demand / batch_capacity)


@dataclass(frozen=True)
class GroupRequest:
    choice: Choice
    k: int
    mode: str

    @property
    def s(self) -> int:
        return self.choice.s


def plan_cold_start(
    state: ModelDemandState,
    allocator: Callable[[int], Choice],
    batch_capacity: int,
    *,
    max_groups: int | None = None,
    survivors: Callable[[int, int], int] | None = None,
) -> list[GroupRequest]:
    """Groups covering the deficit ``desired - live - inflight``.

    ``allocator(remaining)`` returns the placement for the next group; it
    is called once per group so earlier groups' reservations are visible to
    later calls. An allocation failure stops planning and the rest of the
    demand waits for the next retry.

    ``survivors(deficit, s)`` overrides how many standalone workers a group
    of size ``s`` turns into (default ``min(deficit, s)``). Zero keeps the
    group pipelined for life; it then counts as one worker.
    """
    deficit = desired_workers(state, batch_capacity) - state.live_workers - state.inflight
    groups: list[GroupRequest] = []
    while deficit > 0 and (max_groups is None or len(groups) < max_groups):
        try:
            choice = allocator(deficit)
        except AllocationError:
            break
        k = survivors(deficit, choice.s) if survivors else min(deficit, choice.s)
        groups.append(GroupRequest(choice, k, group_mode(k)))
        deficit -= max(1, k)
    return groups
