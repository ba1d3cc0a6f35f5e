"""Deterministic blend schedule and degradation map.

A schedule holds weights ``alpha_0 .. alpha_T`` with ``alpha_0 = 1`` and
``alpha_T = 0``. The degraded state at step ``t`` is the convex blend

    D(x, t) = alpha_t * x + (1 - alpha_t) * y_T

of the clean image ``x`` and the measured raw pattern ``y_T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ddm.exceptions import DomainError, ShapeError


@dataclass(frozen=True)
class Schedule:
    T: int
    alphas: np.ndarray

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=np.float64)
        if alphas.shape != (self.T + 1,):
            raise ShapeError(f"expected {self.T + 1} weights, got {alphas.shape}")
        alphas.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)

    def delta(self, t: int) -> float:
        """``alpha_{t-1} - alpha_t``, the weight step ``t`` moves toward the restoration."""
        return float(self.alphas[t - 1] - self.alphas[t])


def alpha_cosine(T: int) -> Schedule:
    """``alpha_t = cos^2(pi t / 2T)`` with the endpoints snapped to exactly 1 and 0.

    Evaluated in the half-angle form ``(1 + cos(pi t / T)) / 2``, which lands
    exactly on 0.5 at ``t = T/2``.
    """
    if int(T) != T or T < 1:
        raise DomainError(f"T must be a positive integer, got {T}")
    T = int(T)
    alphas = 0.5 * (1.0 + np.cos(np.pi * (np.arange(T + 1) / T)))
    alphas[0] = 1.0
    alphas[T] = 0.0
    return Schedule(T, alphas)


def _check_step(sched: Schedule, t: int):
    if not 0 <= t <= sched.T:
        raise DomainError(f"step {t} outside [0, {sched.T}]")


def degrade(sched: Schedule, x, y_T, t: int) -> np.ndarray:
    """Blend ``x`` toward the raw pattern ``y_T`` by the step-``t`` weight."""
    _check_step(sched, t)
    x = np.asarray(x)
    y_T = np.asarray(y_T)
    if x.shape != y_T.shape:
        raise ShapeError(f"x {x.shape} and y_T {y_T.shape} differ")
    a = sched.alphas[t]
    if a == 1.0:
        return x.copy()
    if a == 0.0:
        return y_T.copy()
    dtype = np.result_type(x, y_T)
    return (a * x + (1.0 - a) * y_T).astype(dtype, copy=False)


def validate(sched: Schedule) -> list[str]:
    """Invariant violations of ``sched``; an empty list means the schedule is valid."""
    problems = []
    a = sched.alphas
    if a[0] != 1.0:
        problems.append(f"endpoint: alpha_0 = {a[0]!r}, expected exactly 1")
    if a[-1] != 0.0:
        problems.append(f"endpoint: alpha_{sched.T} = {a[-1]!r}, expected exactly 0")
    if np.any(a < 0) or np.any(a > 1):
        problems.append("range: weights must lie in [0, 1]")
    bad = np.nonzero(np.diff(a) >= 0)[0]
    if bad.size:
        problems.append(f"monotonicity: alpha_{bad[0] + 1} >= alpha_{bad[0]}")
    return problems
