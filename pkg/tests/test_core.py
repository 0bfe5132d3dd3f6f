import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from tempnet.core import (NEVER, CausalSolve, Mode, MembraneState, NeuronParams, SpikeEvent, leaky_membrane,
                          nonleaky_potential, replay, solve_batch, solve_spike_time, step_event)

times = st.floats(0.0, 10.0, allow_nan=False, allow_infinity=False)
arrival_lists = st.lists(times, min_size=1, max_size=12)
gammas = st.floats(0.01, 10.0)


def brute_force(arrivals, gamma, time_out=NEVER):
    """Scan every prefix of the sorted arrivals independently."""
    s = sorted(arrivals)
    for k in range(1, len(s) + 1):
        t = (gamma + sum(s[:k])) / k
        if all(a < t for a in s[:k]) and (k == len(s) or s[k] >= t):
            return t if t < time_out else NEVER
    return NEVER


# ---------------------------------------------------------------- examples
def test_single_arrival():
    r = solve_spike_time([0.0], NeuronParams(1.0))
    assert r.t_z == 1.0 and r.causal_set == (0,)


def test_two_arrivals_both_causal():
    r = solve_spike_time([0.0, 0.5], NeuronParams(1.0))
    assert r.t_z == 0.75 and r.causal_set == (0, 1)


def test_late_arrival_not_causal():
    r = solve_spike_time([2.0, 3.0], NeuronParams(0.5))
    assert r.t_z == 2.5 and r.causal_set == (0,)


def test_arrival_exactly_at_crossing_is_not_causal():
    r = solve_spike_time([0.0, 1.0], NeuronParams(1.0))
    assert r.t_z == 1.0 and r.causal_set == (0,)


def test_empty_input_never_fires():
    assert solve_spike_time([], NeuronParams(1.0)).t_z == NEVER
    assert not solve_spike_time([], NeuronParams(1.0)).fired


def test_time_out():
    assert solve_spike_time([0.0], NeuronParams(1.0, time_out=1.0)).t_z == NEVER
    assert solve_spike_time([0.0], NeuronParams(1.0, time_out=1.0 + 1e-12)).t_z == 1.0


@pytest.mark.parametrize("kw", [dict(gamma=0.0), dict(gamma=-1.0), dict(gamma=1.0, time_out=0.0),
                                dict(gamma=1.0, mode="leaky"), dict(gamma=1.0, leak_offset=-1.0)])
def test_bad_params(kw):
    with pytest.raises(ValueError):
        NeuronParams(**kw)


def test_non_finite_arrivals_rejected():
    with pytest.raises(ValueError):
        solve_spike_time([0.0, math.inf], NeuronParams(1.0))
    with pytest.raises(ValueError):
        solve_spike_time([math.nan], NeuronParams(1.0))


def test_spike_event_validation():
    with pytest.raises(ValueError):
        SpikeEvent(math.inf, 0)
    with pytest.raises(ValueError):
        SpikeEvent(1.0, -1)


def test_leaky_mode_is_rejected_by_solver():
    p = NeuronParams(1.0, mode=Mode.LEAKY, leak_offset=1.0)
    with pytest.raises(ValueError):
        solve_spike_time([0.0], p)
    with pytest.raises(ValueError):
        step_event(MembraneState(), 0.0, p)


def test_step_event_rejects_time_travel():
    p = NeuronParams(5.0)
    s = MembraneState()
    step_event(s, 2.0, p)
    with pytest.raises(ValueError):
        step_event(s, 1.0, p)


# ------------------------------------------------------------------ leaky
def test_leaky_burst_fires_and_resets():
    p = NeuronParams(1.5, mode=Mode.LEAKY, leak_offset=1.0)
    # two coincident arrivals reach 2 >= 1.5 and fire, then the state clears
    assert leaky_membrane([0.0, 0.0], p) == [0.0]
    assert leaky_membrane([0.0, 0.0, 0.1], p) == [0.0]


def test_leaky_decay_prevents_firing():
    p = NeuronParams(1.5, mode=Mode.LEAKY, leak_offset=1.0)
    assert leaky_membrane([0.0, 0.9], p) == []      # 0.1 + 1 < 1.5
    assert leaky_membrane([0.0, 0.4], p) == [0.4]   # 0.6 + 1 >= 1.5


def test_leaky_rate_ordering():
    p = NeuronParams(3.0, mode=Mode.LEAKY, leak_offset=2.0)
    fast = leaky_membrane(np.arange(0, 100, 0.5).tolist(), p)
    slow = leaky_membrane(np.arange(0, 100, 3.0).tolist(), p)
    assert len(fast) > len(slow) == 0


def test_leaky_unreachable_gamma():
    p = NeuronParams(100.0, mode=Mode.LEAKY, leak_offset=1.0)
    assert leaky_membrane(np.arange(0, 10, 0.5).tolist(), p) == []


# -------------------------------------------------------------- properties
@given(arrival_lists, gammas)
def test_matches_brute_force(arrivals, gamma):
    assert solve_spike_time(arrivals, NeuronParams(gamma)).t_z == brute_force(arrivals, gamma)


@given(arrival_lists, gammas)
def test_potential_reaches_gamma_at_crossing(arrivals, gamma):
    r = solve_spike_time(arrivals, NeuronParams(gamma))
    assert math.isclose(nonleaky_potential(r.t_z, arrivals), gamma, rel_tol=1e-9, abs_tol=1e-9)
    before = r.t_z - 1e-6 * max(1.0, r.t_z)
    assert nonleaky_potential(before, arrivals) < gamma


@given(arrival_lists, gammas)
def test_causal_set_is_exactly_the_earlier_arrivals(arrivals, gamma):
    r = solve_spike_time(arrivals, NeuronParams(gamma))
    assert set(r.causal_set) == {i for i, a in enumerate(arrivals) if a < r.t_z}
    assert r.t_z > max(arrivals[i] for i in r.causal_set)


@given(arrival_lists, gammas, st.floats(0.0, 5.0))
def test_monotone_in_gamma(arrivals, gamma, extra):
    assert solve_spike_time(arrivals, NeuronParams(gamma + extra)).t_z >= solve_spike_time(
        arrivals, NeuronParams(gamma)).t_z


@given(arrival_lists, gammas, st.integers(0, 11), st.floats(0.0, 5.0))
def test_monotone_in_arrivals(arrivals, gamma, i, delay):
    later = list(arrivals)
    later[i % len(later)] += delay
    assert solve_spike_time(later, NeuronParams(gamma)).t_z >= solve_spike_time(arrivals, NeuronParams(gamma)).t_z


@given(arrival_lists, gammas, st.integers(-8, 8))
def test_shift_equivariance(arrivals, gamma, k):
    # shifts by a power of two keep every sum exact
    shift = float(k)
    base = solve_spike_time(arrivals, NeuronParams(gamma))
    moved = solve_spike_time([a + 16.0 + shift for a in arrivals], NeuronParams(gamma))
    assert math.isclose(moved.t_z, base.t_z + 16.0 + shift, rel_tol=1e-12, abs_tol=1e-9)
    assert moved.causal_set == base.causal_set


@given(arrival_lists, gammas, st.floats(0.0, 10.0))
def test_late_arrivals_do_not_matter(arrivals, gamma, extra):
    r = solve_spike_time(arrivals, NeuronParams(gamma))
    assert solve_spike_time(arrivals + [r.t_z + extra], NeuronParams(gamma)).t_z == r.t_z


@given(arrival_lists, gammas)
def test_permutation_invariance(arrivals, gamma):
    r = solve_spike_time(arrivals, NeuronParams(gamma))
    rev = solve_spike_time(arrivals[::-1], NeuronParams(gamma))
    assert rev.t_z == r.t_z
    n = len(arrivals)
    assert sorted(n - 1 - i for i in rev.causal_set) == list(r.causal_set)


@given(arrival_lists, gammas, st.floats(0.1, 30.0))
def test_replay_is_bitwise_identical(arrivals, gamma, time_out):
    p = NeuronParams(gamma, time_out=time_out)
    r = solve_spike_time(arrivals, p)
    s = replay(arrivals, p)
    assert s.fired_at == r.t_z
    assert s.causal_count == (len(r) if r.fired else 0)
    assert s.timed_out == (not r.fired)


@given(arrival_lists, gammas)
def test_step_event_reports_the_fire(arrivals, gamma):
    p = NeuronParams(gamma)
    s = MembraneState()
    fires = []
    for a in sorted(arrivals) + [NEVER]:
        s, f = step_event(s, a, p)
        if f != NEVER:
            fires.append(f)
    assert fires == [solve_spike_time(arrivals, p).t_z]


@given(st.lists(arrival_lists, min_size=1, max_size=6), gammas)
def test_batch_solver_is_bitwise_identical(rows, gamma):
    width = max(len(r) for r in rows)
    padded = np.array([r + [1e6] * (width - len(r)) for r in rows])
    t, cnt = solve_batch(padded, np.full(len(rows), gamma), time_out=1e5)
    for row, tz, c in zip(rows, t, cnt):
        ref = solve_spike_time(row, NeuronParams(gamma, time_out=1e5))
        assert tz == ref.t_z and c == len(ref)


def test_causal_solve_len():
    assert len(CausalSolve(1.0, (0, 2))) == 2
