"""TEMP neuron: piecewise-linear membrane, causal-set spike-time solver.

A non-leaky TEMP neuron fires at the first time ``t`` where
``sum_j max(t - t_j, 0) == gamma``.  Between arrivals the membrane rises
with slope equal to the number of arrivals seen so far, so the crossing
has the closed form ``t = (gamma + sum(causal arrivals)) / |causal|``.

Every solver in the package evaluates that expression the same way:
arrivals are visited in ascending order, accumulated with a sequential
running sum, and the first candidate that does not exceed the next
arrival is accepted.  This is what makes the batched, online and routed
paths agree bit-for-bit.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

NEVER = math.inf
"""Sentinel spike time for a neuron that did not fire."""


class Polarity(enum.IntEnum):
    PLUS = 0
    MINUS = 1

    def flipped(self) -> "Polarity":
        return Polarity(1 - self)


class Mode(str, enum.Enum):
    NON_LEAKY = "non_leaky"
    LEAKY = "leaky"


@dataclass(frozen=True, order=True)
class SpikeEvent:
    time: float
    source: int
    polarity: Polarity = Polarity.PLUS

    def __post_init__(self):
        if not math.isfinite(self.time):
            raise ValueError(f"spike events must have finite time, got {self.time}")
        if self.source < 0:
            raise ValueError(f"negative source address {self.source}")


@dataclass(frozen=True)
class NeuronParams:
    gamma: float
    time_out: float = NEVER
    mode: Mode = Mode.NON_LEAKY
    leak_offset: float = 0.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if not self.time_out > 0:
            raise ValueError(f"time_out must be > 0, got {self.time_out}")
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.mode is Mode.LEAKY and not self.leak_offset > 0:
            raise ValueError("leaky mode requires leak_offset > 0")
        if self.leak_offset < 0:
            raise ValueError("leak_offset must be >= 0")


@dataclass(frozen=True)
class CausalSolve:
    """Output spike time and the indices of the arrivals that produced it."""

    t_z: float
    causal_set: tuple[int, ...] = ()

    @property
    def fired(self) -> bool:
        return self.t_z != NEVER

    def __len__(self) -> int:
        return len(self.causal_set)


def _check_arrivals(arrivals: Sequence[float]) -> np.ndarray:
    a = np.asarray(arrivals, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(a)):
        raise ValueError("arrival times must be finite")
    return a


def solve_spike_time(arrivals: Sequence[float], params: NeuronParams) -> CausalSolve:
    """Solve the non-leaky firing condition for one neuron.

    Arrivals at exactly the returned time are not causal.  Equal arrival
    times keep their input-index order in ``causal_set``.
    """
    if params.mode is not Mode.NON_LEAKY:
        raise ValueError("solve_spike_time needs a non-leaky neuron; use leaky_membrane")
    a = _check_arrivals(arrivals)
    if a.size == 0:
        return CausalSolve(NEVER)
    order = np.argsort(a, kind="stable")
    s = a[order].tolist()
    gamma = float(params.gamma)
    total = 0.0
    for k, ak in enumerate(s):
        total += ak
        cand = (gamma + total) / (k + 1)
        nxt = s[k + 1] if k + 1 < len(s) else NEVER
        if cand <= nxt:
            if not cand < params.time_out:
                return CausalSolve(NEVER)
            return CausalSolve(cand, tuple(sorted(order[: k + 1].tolist())))
    raise AssertionError("unreachable: the last candidate is always accepted")


def solve_batch(arrivals: np.ndarray, gamma, time_out=NEVER) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``solve_spike_time`` over the last axis.

    Returns ``(t_z, causal_count)``; ``t_z`` is ``NEVER`` where the neuron
    misses its time-out.  Bitwise identical to the scalar solver because
    ``np.cumsum`` accumulates sequentially.
    """
    arr = np.asarray(arrivals, dtype=np.float64)
    if arr.shape[-1] == 0:
        shape = arr.shape[:-1]
        return np.full(shape, NEVER), np.zeros(shape, dtype=np.int64)
    s = np.sort(arr, axis=-1)
    csum = np.cumsum(s, axis=-1)
    k = np.arange(1, arr.shape[-1] + 1, dtype=np.float64)
    cand = (np.asarray(gamma, dtype=np.float64)[..., None] + csum) / k
    nxt = np.concatenate([s[..., 1:], np.full(s.shape[:-1] + (1,), NEVER)], axis=-1)
    first = np.argmax(cand <= nxt, axis=-1)
    t = np.take_along_axis(cand, first[..., None], axis=-1)[..., 0]
    fired = t < time_out
    return np.where(fired, t, NEVER), np.where(fired, first + 1, 0)


@dataclass
class MembraneState:
    """Online state of one non-leaky neuron.

    ``arrival_sum`` is kept alongside the potential so the crossing time
    is computed with the same arithmetic as ``solve_spike_time``.
    """

    arrivals_seen: int = 0
    potential_at_last_event: float = 0.0
    last_event_time: float = 0.0
    fired_at: float = NEVER
    arrival_sum: float = 0.0
    timed_out: bool = False
    causal_count: int = field(default=0, compare=False)

    @property
    def done(self) -> bool:
        return self.fired_at != NEVER or self.timed_out

    def pending_fire_time(self, params: NeuronParams) -> float:
        """Crossing time implied by the arrivals seen so far (NEVER if none)."""
        if self.done or self.arrivals_seen == 0:
            return NEVER
        t = (params.gamma + self.arrival_sum) / self.arrivals_seen
        return t if t < params.time_out else NEVER

    def _reset(self) -> None:
        self.arrivals_seen = 0
        self.potential_at_last_event = 0.0
        self.arrival_sum = 0.0


def advance(state: MembraneState, t: float, params: NeuronParams) -> float:
    """Move the clock to ``t`` without delivering an arrival.

    Fires if the crossing lies in ``(last_event_time, t]`` and applies the
    time-out reset.  Returns the fire time or NEVER.
    """
    if t < state.last_event_time:
        raise ValueError(f"event at {t} precedes last event at {state.last_event_time}")
    if state.done:
        return NEVER
    cand = state.pending_fire_time(params)
    if cand != NEVER and cand <= t:
        state.fired_at = cand
        state.causal_count = state.arrivals_seen
        state.last_event_time = cand
        state._reset()
        return cand
    if t >= params.time_out:
        state.timed_out = True
        state.last_event_time = params.time_out
        state._reset()
        return NEVER
    if math.isfinite(t):
        n = state.arrivals_seen
        state.potential_at_last_event += n * (t - state.last_event_time)
        state.last_event_time = t
    return NEVER


def step_event(state: MembraneState, event_time: float, params: NeuronParams) -> tuple[MembraneState, float]:
    """Deliver one arrival at ``event_time``; returns ``(state, fired)``.

    Passing ``NEVER`` flushes the neuron to the end of its window.
    Arrivals after firing or time-out are absorbed.
    """
    if params.mode is not Mode.NON_LEAKY:
        raise ValueError("step_event models the non-leaky neuron")
    fired = advance(state, event_time, params)
    if fired == NEVER and not state.done and math.isfinite(event_time):
        state.arrivals_seen += 1
        state.arrival_sum += event_time
    return state, fired


def replay(arrivals: Sequence[float], params: NeuronParams) -> MembraneState:
    """Feed sorted arrivals through ``step_event`` and flush."""
    state = MembraneState()
    for a in sorted(_check_arrivals(arrivals).tolist()):
        step_event(state, a, params)
    step_event(state, NEVER, params)
    return state


def leaky_membrane(arrivals: Sequence[float], params: NeuronParams) -> list[float]:
    """Spike train of a leaky TEMP neuron.

    Each arrival adds a step of ``leak_offset`` that then decays with
    slope -1 until it reaches zero.  The neuron fires whenever the summed
    potential reaches ``gamma``, clears every contribution and keeps
    integrating later arrivals.
    """
    if params.mode is not Mode.LEAKY:
        raise ValueError("leaky_membrane needs a leaky neuron")
    a = _check_arrivals(arrivals)
    if np.any(np.diff(a) < 0):
        raise ValueError("arrivals must be sorted")
    c = params.leak_offset
    fires: list[float] = []
    live: list[float] = []  # arrival times of contributions not yet reset
    for t in a.tolist():
        if t >= params.time_out:
            break
        live = [s for s in live if t - s < c]
        live.append(t)
        # potential only decays between arrivals, so its maximum is at t
        if len(live) * c - sum(t - s for s in live) >= params.gamma:
            fires.append(t)
            live = []
    return fires


def leaky_potential(t: float, arrivals: Sequence[float], fires: Sequence[float], c: float) -> float:
    """Membrane value at ``t`` given the arrivals and the resets that occurred."""
    last_reset = max((f for f in fires if f <= t), default=-math.inf)
    return sum(max(c - (t - s), 0.0) for s in arrivals if last_reset < s <= t)


def nonleaky_potential(t: float, arrivals: Sequence[float]) -> float:
    return float(sum(max(t - s, 0.0) for s in arrivals))
