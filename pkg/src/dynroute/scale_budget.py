"""Object-scale encoding and per-sample computation budgets.

An image's scale encoding S is an m-bit vector: bit i is set when some
ground-truth box has max(h, w) inside interval i. Intervals are defined
by ascending thresholds b_1 < ... < b_{m-1}:

    [0, b_1], (b_1, b_2], ..., (b_{m-1}, inf)

The dynamic budget maps the encoding to C0 * sum(S) / m; two baselines
(fixed, loss-aware rank over a FIFO buffer of recent detection losses)
share the interface for strategy comparison.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DataError, UsageError

STRATEGIES = ("fixed", "loss_aware", "scale_dynamic")


@dataclass(frozen=True)
class ScaleIntervals:
    boundaries: tuple[float, ...] = (8.0, 16.0, 32.0)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.boundaries, self.boundaries[1:])):
            raise ConfigurationError(
                f"interval boundaries must be strictly increasing, got {self.boundaries}"
            )
        if self.boundaries and self.boundaries[0] <= 0:
            raise ConfigurationError("interval boundaries must be positive")

    @property
    def m(self) -> int:
        return len(self.boundaries) + 1

    def interval_of(self, longest_side: float) -> int:
        """0-based interval index; the first interval is closed above."""
        for i, b in enumerate(self.boundaries):
            if longest_side <= b:
                return i
        return len(self.boundaries)


@dataclass(frozen=True)
class BudgetConfig:
    c0: float
    strategy: str = "scale_dynamic"
    loss_buffer_len: int = 100

    def __post_init__(self):
        if self.c0 <= 0:
            raise ConfigurationError(f"C0 must be positive, got {self.c0}")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(
                f"unknown budget strategy {self.strategy!r}; expected one of {STRATEGIES}"
            )
        if self.loss_buffer_len < 1:
            raise ConfigurationError("loss_buffer_len must be >= 1")


def encode_scales(boxes: list[tuple[float, float]], intervals: ScaleIntervals) -> np.ndarray:
    """m-bit occupancy vector over box longest sides max(h, w).

    boxes is a list of (h, w) pairs; an empty list encodes to all zeros.
    """
    s = np.zeros(intervals.m, dtype=np.int64)
    for k, (h, w) in enumerate(boxes):
        if h <= 0 or w <= 0:
            raise DataError(f"box {k} has non-positive side (h={h}, w={w})")
        s[intervals.interval_of(max(h, w))] = 1
    return s


def expected_budget(s: np.ndarray, c0: float, m: int, floor_empty: bool = True) -> float:
    """C0 * sum(S) / m; images with no boxes get a one-interval floor."""
    s = np.asarray(s)
    if s.shape != (m,):
        raise UsageError(f"scale encoding has shape {s.shape}, expected ({m},)")
    occupied = int(s.sum())
    if occupied == 0 and floor_empty:
        occupied = 1
    return c0 * occupied / m


def global_budget_loss(c_net, c_expect) -> Tensor:
    """Squared gap between normalized network cost and budget, batch mean.

    Both arguments are in normalized (cost / total-cost) units; c_net may
    be a Tensor of per-sample costs, c_expect a constant of the same shape.
    """
    gap = ad.sub(ad.as_tensor(c_net), ad.as_tensor(c_expect))
    return ad.mean(ad.square(gap))


def fixed_budget(c0: float) -> float:
    """Every sample gets the same expected budget."""
    return c0


class LossAwareBudget:
    """Rank the current detection loss in a FIFO buffer of recent losses
    and map the rank linearly onto [C0, 4*C0]."""

    def __init__(self, c0: float, buffer_len: int = 100):
        self.c0 = c0
        self.buffer: deque[float] = deque(maxlen=buffer_len)

    def budget_for(self, current_loss: float) -> float:
        if not self.buffer:
            rank = 0.0  # pessimistic until history accumulates
        else:
            below = sum(1 for v in self.buffer if v < current_loss)
            rank = below / len(self.buffer)
        return self.c0 * (1.0 + 3.0 * rank)

    def push(self, loss_value: float) -> None:
        self.buffer.append(loss_value)


def loss_aware_budget(buffer: LossAwareBudget, current_loss: float) -> float:
    """Budget for the current sample, then record its loss in the buffer."""
    value = buffer.budget_for(current_loss)
    buffer.push(current_loss)
    return value
