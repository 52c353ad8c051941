"""Learning-progress measurement and adaptive per-round privacy budget allocation.

The offline rule (:func:`normalize_allocations`) splits the budget in
proportion to a complete progress trace. It needs every round's progress, so
training uses the causal online rule in :func:`next_round_epsilon`: a uniform
first round, progress-weighted shares of the remaining budget afterwards, and
the final round takes whatever is left.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from dpfed.errors import BudgetExhaustedError

DEFAULT_PROGRESS_FLOOR = 1e-6


def learning_progress(loss_prev: float, loss_curr: float) -> float:
    """Relative loss improvement; negative when the loss went up."""
    if not loss_prev > 0:
        raise ValueError(f"previous loss must be positive, got {loss_prev}")
    return (loss_prev - loss_curr) / loss_prev


def floor_progress(progress: Sequence[float], floor: float) -> list[float]:
    return [max(float(p), floor) for p in progress]


def normalize_allocations(
    progress_trace: Sequence[float],
    epsilon_total: float,
    floor: float = DEFAULT_PROGRESS_FLOOR,
) -> list[float]:
    """``epsilon_total * p_t / sum(p)`` over the trace floored at ``floor``."""
    if len(progress_trace) == 0:
        raise ValueError("progress trace is empty")
    if not epsilon_total > 0:
        raise ValueError("epsilon_total must be positive")
    if not floor > 0:
        raise ValueError("progress floor must be positive")
    floored = floor_progress(progress_trace, floor)
    total = math.fsum(floored)
    return [epsilon_total * p / total for p in floored]


@dataclass
class BudgetSchedule:
    """Mutable allocation state for one run; owned by the training loop."""

    epsilon_total: float
    rounds_total: int
    progress_floor: float = DEFAULT_PROGRESS_FLOOR
    progress_trace: list[float] = field(default_factory=list)
    allocations: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.epsilon_total > 0 or not math.isfinite(self.epsilon_total):
            raise ValueError("epsilon_total must be positive and finite")
        if isinstance(self.rounds_total, bool) or int(self.rounds_total) != self.rounds_total or self.rounds_total < 1:
            raise ValueError("rounds_total must be a positive integer")
        if not self.progress_floor > 0:
            raise ValueError("progress_floor must be positive")

    @property
    def spent(self) -> float:
        return math.fsum(self.allocations)

    @property
    def remaining(self) -> float:
        return self.epsilon_total - self.spent

    def allocate(self, round_index: int) -> float:
        """Compute and commit the budget for ``round_index``."""
        if round_index != len(self.allocations) + 1:
            raise ValueError(f"round {round_index} allocated out of order (next is {len(self.allocations) + 1})")
        eps = next_round_epsilon(self, round_index)
        self.allocations.append(eps)
        return eps

    def observe(self, progress: float) -> None:
        self.progress_trace.append(float(progress))

    def offline_allocations(self) -> list[float]:
        """Allocations the offline rule assigns to the progress observed so far."""
        return normalize_allocations(self.progress_trace, self.epsilon_total, self.progress_floor)


def next_round_epsilon(schedule: BudgetSchedule, round_index: int) -> float:
    """Budget for ``round_index`` (1-based) under the online rule.

    Round 1 gets ``epsilon / T``. Round ``t > 1`` gets
    ``remaining * p / (p + (T - t) * mean_p)``, where ``p`` is the latest floored
    progress and ``mean_p`` the mean floored progress so far; at ``t = T`` this
    is the whole remainder.
    """
    T = schedule.rounds_total
    if isinstance(round_index, bool) or int(round_index) != round_index or not 1 <= round_index <= T:
        raise ValueError(f"round_index must be in [1, {T}], got {round_index}")
    remaining = schedule.remaining
    if not remaining > 0:
        raise BudgetExhaustedError(f"privacy budget exhausted before round {round_index} (remaining {remaining!r})")
    if round_index == T:
        return remaining
    if round_index == 1:
        return min(schedule.epsilon_total / T, remaining)
    if len(schedule.progress_trace) < round_index - 1:
        raise ValueError(f"progress for round {round_index - 1} has not been observed")
    floored = floor_progress(schedule.progress_trace[: round_index - 1], schedule.progress_floor)
    latest = floored[-1]
    mean = math.fsum(floored) / len(floored)
    eps = remaining * latest / (latest + (T - round_index) * mean)
    if not eps > 0:
        raise BudgetExhaustedError(f"round {round_index} allocation underflowed to {eps!r}")
    return min(eps, remaining)
