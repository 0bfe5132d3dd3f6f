import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tempnet.core import NEVER
from tempnet.lif import (LifParams, correspondence_check, decay_spike_time, dirac_gamma, fit_c,
                         lif_coincident_spike_time, lif_peak_time, lif_potential, lif_spike_time, lse_transfer,
                         nlif_potential, nlif_single_spike_time, nlif_spike_time, pwl_exp, pwl_transfer,
                         ramp_spike_time, random_battery, rank_correlation, soft_min, tangency_check,
                         temp_spike_time)


# ------------------------------------------------------------ PWL expansion
def test_pwl_exp_examples():
    assert float(pwl_exp(2.0, 2.0)) == 1.0 == math.exp(0.0)
    assert float(pwl_exp(3.0, 2.0)) == 0.0
    assert abs(math.exp(-1.0) - float(pwl_exp(3.0, 2.0))) == pytest.approx(0.36788, abs=1e-5)
    assert float(pwl_exp(1.0, 2.0, c=0.7)) == 0.7


@given(st.floats(-100, 100))
def test_tangency(t_i):
    assert tangency_check(t_i) == (True, True)


# ------------------------------------------------------------------- n-LIF
@pytest.mark.parametrize("tau_s,v_th", [(1.0, 0.3), (2.0, 1.5), (50.0, 2.0), (0.5, 0.49)])
def test_nlif_closed_form(tau_s, v_th):
    p = LifParams(C_m=1.0, R=3.0, tau_s=tau_s, v_th=v_th)
    assert abs(nlif_spike_time([0.0], None, p) - nlif_single_spike_time(p)) < 1e-9


def test_nlif_unreachable():
    p = LifParams(C_m=1.0, tau_s=1.0, v_th=2.0)
    assert nlif_spike_time([0.0, 0.5], None, p) == NEVER
    assert nlif_single_spike_time(p) == NEVER


def test_nlif_two_coincident_spikes_double_the_potential():
    p = LifParams(C_m=1.0, tau_s=2.0, v_th=1.0)
    t = np.linspace(0, 5, 11)
    np.testing.assert_allclose(nlif_potential(t, [0.0, 0.0], None, p), 2 * nlif_potential(t, [0.0], None, p))
    # two spikes reach v_th when one spike reaches v_th/2
    half = LifParams(C_m=1.0, tau_s=2.0, v_th=0.5)
    assert abs(nlif_spike_time([0.0, 0.0], None, p) - nlif_single_spike_time(half)) < 1e-9


def test_nlif_rejects_nonpositive_weights():
    with pytest.raises(ValueError):
        nlif_spike_time([0.0], [-1.0], LifParams())


@given(st.lists(st.floats(0, 3), min_size=1, max_size=6), st.floats(0.05, 3.0))
def test_nlif_first_crossing(arr, v_th):
    p = LifParams(C_m=1.0, tau_s=2.0, v_th=v_th)
    t = nlif_spike_time(arr, None, p)
    if t != NEVER:
        grid = np.linspace(min(arr), t, 200)[:-1]
        assert np.all(nlif_potential(grid, arr, None, p) < v_th + 1e-12)
        assert abs(float(nlif_potential(t, arr, None, p)) - v_th) < 1e-9 or t in arr


# --------------------------------------------------------------------- LIF
@pytest.mark.parametrize("n", [1, 2, 3, 5])
@pytest.mark.parametrize("tau_s,v_th", [(1.0, 0.3), (2.0, 0.2), (5.0, 1.0)])
def test_lif_coincident_closed_form(n, tau_s, v_th):
    p = LifParams(C_m=1.0, R=2 * tau_s, tau_s=tau_s, v_th=v_th)
    exact = lif_coincident_spike_time(n, p)
    found = lif_spike_time([0.0] * n, None, p)
    assert (exact == found == NEVER) or abs(exact - found) < 1e-9


def test_lif_peak():
    p = LifParams(C_m=1.0, R=3.0, tau_s=1.0, v_th=1.0)
    t_star = lif_peak_time(p)
    peak = float(lif_potential(t_star, [0.0], None, p))
    just_below = LifParams(C_m=1.0, R=3.0, tau_s=1.0, v_th=peak * (1 - 1e-6))
    t = lif_spike_time([0.0], None, just_below)
    assert t < t_star and t_star - t < 0.05
    above = LifParams(C_m=1.0, R=3.0, tau_s=1.0, v_th=peak * 1.001)
    assert lif_spike_time([0.0], None, above) == NEVER


@given(st.lists(st.floats(0, 3), min_size=1, max_size=5), st.floats(0.05, 1.0), st.floats(0.0, 0.5))
def test_lif_lower_threshold_never_delays(arr, v_th, drop):
    hi = LifParams(C_m=1.0, R=3.0, tau_s=1.0, v_th=v_th)
    lo = LifParams(C_m=1.0, R=3.0, tau_s=1.0, v_th=max(v_th - drop, 1e-3))
    assert lif_spike_time(arr, None, lo) <= lif_spike_time(arr, None, hi)


def test_lif_validation():
    with pytest.raises(ValueError):
        lif_potential(1.0, [0.0], None, LifParams(R=1.0, tau_s=1.0))
    with pytest.raises(ValueError):
        lif_coincident_spike_time(1, LifParams(R=3.0, tau_s=1.0))
    with pytest.raises(ValueError):
        LifParams(C_m=0.0)
    with pytest.raises(ValueError):
        LifParams(kernel="alpha")


def test_dirac_kernel():
    p = LifParams(C_m=1.0, R=2.0, tau_s=1.0, v_th=1.5, kernel="dirac")
    assert lif_spike_time([0.0, 0.1], None, p) == 0.1
    assert lif_spike_time([0.0, 5.0], None, p) == NEVER
    assert dirac_gamma(3, 1.0, p) == 1.5


# --------------------------------------------------------- approximations
def test_ramp_with_unit_c_is_temp():
    rng = np.random.default_rng(0)
    for _ in range(50):
        arr = rng.uniform(0, 2, 5)
        assert math.isclose(ramp_spike_time(arr, 0.4, 0.0, 2.0), temp_spike_time(arr, 0.8), rel_tol=1e-12)


def test_decay_fires_only_at_arrivals():
    arr = [0.0, 0.1, 0.2]
    t = decay_spike_time(arr, 1.5, 1.0, 5.0)
    assert t in arr
    assert decay_spike_time(arr, 10.0, 1.0, 5.0) == NEVER


def test_coincident_temp_time():
    p = LifParams(C_m=1.0, tau_s=10.0, v_th=0.6)
    rep = correspondence_check([np.full(3, 0.5)], p)
    assert rep.temp[0] == pytest.approx(0.5 + p.temp_gamma / 3)
    assert np.isfinite(rep.error[0])


def test_rank_correlation_basics():
    assert rank_correlation([1, 2, 3], [10, 20, 30]) == 1.0
    assert rank_correlation([1, 2, 3], [3, 2, 1]) == -1.0
    assert math.isnan(rank_correlation([1, np.inf], [1, 2]))


def test_battery_tracks_nlif_in_slow_synapse_regime():
    rng = np.random.default_rng(0)
    p = LifParams(C_m=1.0, R=200.0, tau_s=50.0, v_th=2.0)
    rep = correspondence_check(random_battery(rng, 300, 6, 1.0), p)
    assert rep.rank_temp >= 0.95
    assert rep.tracking_convention == "ramp"
    assert rep.rank_decay < rep.rank_ramp


@given(st.integers(0, 2**31), st.floats(0.5, 20.0))
def test_common_shift_preserves_rank(seed, shift):
    rng = np.random.default_rng(seed)
    base = rng.uniform(0, 1, 5)
    fam = [base, base + shift, base + 2 * shift]
    p = LifParams(C_m=1.0, R=200.0, tau_s=50.0, v_th=2.0)
    rep = correspondence_check(fam, p)
    assert np.argsort(rep.temp).tolist() == [0, 1, 2] == np.argsort(rep.exact).tolist()
    assert rep.rank_temp == 1.0


def test_fit_c_is_in_bounds():
    rng = np.random.default_rng(1)
    p = LifParams(C_m=1.0, R=200.0, tau_s=50.0, v_th=2.0)
    c = fit_c(random_battery(rng, 40, 6, 1.0), p)
    assert 0.0 <= c <= 2.0


# ------------------------------------------------------------ log-sum-exp
def test_lse_single_term():
    tp, tm = lse_transfer([1.5], [0.5], [0.25], [0.75], 1.0)
    # two terms per rail in the differential form; a single effective term reduces exactly
    assert soft_min([2.0], 0.3) == 2.0


def test_lse_hard_min_limit():
    arr = [3.0, 1.0, 2.0]
    assert abs(soft_min(arr, 1e-4) - 1.0) < 1e-3
    assert soft_min(arr, 1.0) < 1.0


def test_lse_overflow_safe():
    assert np.isfinite(soft_min([1e6, 1e6 + 1.0], 1e-3))
    with pytest.raises(ValueError):
        lse_transfer([np.inf], [0.0], [0.0], [0.0], 1.0)


@given(st.integers(0, 2**31), st.floats(-1e6, 1e6))
def test_lse_shift_invariance(seed, delta):
    rng = np.random.default_rng(seed)
    tp, tm, wp, wm = (rng.uniform(0, 3, 4) for _ in range(4))
    a = lse_transfer(tp, tm, wp, wm, 0.7)
    b = lse_transfer(tp + delta, tm + delta, wp, wm, 0.7)
    assert abs(b[0] - (a[0] + delta)) <= 1e-8 and abs(b[1] - (a[1] + delta)) <= 1e-8


def test_pwl_vs_lse_gap_shrinks_with_spread():
    rng = np.random.default_rng(0)
    med = []
    for spread in (0.1, 1.0, 4.0, 16.0):
        errs = []
        for _ in range(200):
            tp, tm, wp, wm = (rng.uniform(0, spread, 4) for _ in range(4))
            errs.append(abs(lse_transfer(tp, tm, wp, wm, 1.0)[0] - pwl_transfer(tp, tm, wp, wm, 1.0)[0]))
        med.append(np.median(errs))
    assert all(a > b for a, b in zip(med, med[1:]))
