"""Co-simulation clock: the guest tick loop plus periodic host-side tasks.

A tick executes atomically at its start time.  Host tasks due anywhere inside
that tick's interval run after it, in due-time order, and see the state the
tick left behind.  Memory events raised during a tick are delivered first.
"""
from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Callable

from .game import ToyGame


@dataclass(order=True)
class HostTask:
    due: int
    order: int
    seq: int
    interval: int = field(compare=False)
    fn: Callable[[int], None] = field(compare=False)
    name: str = field(compare=False, default="task")
    cancelled: bool = field(compare=False, default=False)


class Simulation:
    def __init__(self, game: ToyGame):
        self.game = game
        self._tasks: list[HostTask] = []
        self._seq = itertools.count()

    @property
    def now(self) -> int:
        return self.game.tick

    @property
    def time_units(self) -> int:
        return self.game.time_units

    def ms_to_units(self, ms: float) -> int:
        units = round(ms * self.game.units_per_second / 1000)
        if units <= 0:
            raise ValueError("task interval must be positive")
        return units

    def every(self, interval_ms: float, fn: Callable[[int], None], order: int = 0,
              name: str = "task") -> HostTask:
        """Run ``fn(due_units)`` every ``interval_ms`` of simulated time from now.

        Tasks due at the same instant run in ``order``.
        """
        task = HostTask(self.time_units, order, next(self._seq), self.ms_to_units(interval_ms), fn, name)
        heapq.heappush(self._tasks, task)
        return task

    def cancel(self, task: HostTask) -> None:
        task.cancelled = True

    def step(self) -> list:
        record = self.game.step()
        session = self.game.guest.vmi_session
        delivered = session.deliver_pending(record.tick) if session is not None else []
        end = record.start_units + record.duration_units
        tasks = self._tasks
        while tasks and tasks[0].due < end:
            task = heapq.heappop(tasks)
            if task.cancelled:
                continue
            task.fn(task.due)
            task.due += task.interval
            task.seq = next(self._seq)
            heapq.heappush(tasks, task)
        return delivered

    def run(self, ticks: int) -> None:
        for _ in range(ticks):
            self.step()

    def run_until(self, time_units: int) -> None:
        while self.game.time_units < time_units:
            self.step()
