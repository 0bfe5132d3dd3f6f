"""Integrate-and-fire references for the TEMP neuron.

The TEMP membrane replaces ``exp(-(t - t_i))`` by its tangent at the
arrival, ``c - |t - t_i|_+``.  This module evaluates the exact neurons that
the approximation starts from and measures how closely TEMP spike times
follow them:

* n-LIF with exponential synapse:
  ``u(t) C_m / tau_s = sum_i w_i theta(t - t_i) (1 - exp(-(t - t_i)/tau_s))``
* LIF with exponential synapse:
  ``u(t) = K/C_m sum_i w_i theta(t - t_i) (exp(-s/tau_m) - exp(-s/tau_s))``,
  ``K = tau_m tau_s / (tau_m - tau_s)``
* LIF with a Dirac synapse: ``u(t) = 1/C_m sum_j theta(s_j) exp(-s_j/tau_m)``
  with ``s_j = t - t_j - w_j``.

Expanding either exponential kernel to first order gives
``sum_i |t_z - t_i|_+ = C_m v_th``, i.e. a TEMP neuron with
``gamma = C_m v_th``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from .core import NEVER, NeuronParams, solve_spike_time

ROOT_XTOL = 1e-12
SCAN_FRACTION = 100   # LIF scan step is min(tau_m, tau_s) / SCAN_FRACTION


@dataclass(frozen=True)
class LifParams:
    C_m: float = 1.0
    R: float = 1.0
    tau_s: float = 1.0
    u_rest: float = 0.0
    v_th: float = 1.0
    kernel: str = "exponential"

    def __post_init__(self):
        if not (self.C_m > 0 and self.R > 0 and self.tau_s > 0):
            raise ValueError("C_m, R and tau_s must be > 0")
        if self.kernel not in ("exponential", "dirac"):
            raise ValueError(f"unknown kernel {self.kernel!r}")

    @property
    def tau_m(self) -> float:
        return self.R * self.C_m

    @property
    def temp_gamma(self) -> float:
        """TEMP threshold from the first-order expansion."""
        return self.C_m * self.v_th


def pwl_exp(t, t_i, c=1.0):
    """``c - max(t - t_i, 0)``, the tangent-line stand-in for ``exp(-(t - t_i))``."""
    return c - np.maximum(np.asarray(t, dtype=np.float64) - t_i, 0.0)


def tangency_check(t_i: float) -> tuple[bool, bool]:
    """Value and right-hand slope of ``pwl_exp`` (c=1) against the exponential at ``t_i``.

    Both are compared exactly; the slope of the PWL form is read off two
    points to the right of ``t_i``, taken as offsets from the arrival so
    no rounding enters (``pwl_exp`` only depends on ``t - t_i``).
    """
    value_ok = float(pwl_exp(t_i, t_i, 1.0)) == math.exp(-(t_i - t_i))
    h = 0.5
    slope = (float(pwl_exp(2 * h, 0.0)) - float(pwl_exp(h, 0.0))) / h
    # d/dt exp(-(t - t_i)) at t_i+ is -exp(0) = -1
    return value_ok, slope == -math.exp(0.0)


def _check(arrivals, weights):
    a = np.asarray(arrivals, dtype=np.float64)
    w = np.ones_like(a) if weights is None else np.asarray(weights, dtype=np.float64)
    if a.shape != w.shape:
        raise ValueError("one weight per arrival")
    if not np.all(np.isfinite(a)):
        raise ValueError("arrival times must be finite")
    order = np.argsort(a, kind="stable")
    return a[order], w[order]


# ------------------------------------------------------------------ n-LIF
def nlif_potential(t, arrivals, weights, p: LifParams):
    a, w = _check(arrivals, weights)
    s = np.subtract.outer(np.asarray(t, dtype=np.float64), a)
    terms = np.where(s > 0, w * -np.expm1(-np.maximum(s, 0.0) / p.tau_s), 0.0)
    return p.tau_s / p.C_m * terms.sum(axis=-1)


def nlif_spike_time(arrivals: Sequence[float], weights: Sequence[float] | None, p: LifParams) -> float:
    """First time the n-LIF membrane reaches ``v_th`` (NEVER if it cannot).

    With positive weights the potential is nondecreasing, so each
    inter-arrival interval holds at most one crossing and its endpoints
    bracket it.
    """
    a, w = _check(arrivals, weights)
    if np.any(w <= 0):
        raise ValueError("n-LIF crossing search needs positive weights")
    if len(a) == 0:
        return NEVER

    def f(t):
        return float(nlif_potential(t, a, w, p)) - p.v_th

    asymptote = p.tau_s / p.C_m * w.sum()
    if asymptote <= p.v_th:
        return NEVER
    for k in range(len(a)):
        lo = a[k]
        if k + 1 < len(a):
            hi = a[k + 1]
            if hi == lo or f(hi) < 0:
                continue
        else:
            hi = lo + p.tau_s
            while f(hi) < 0:
                hi = lo + 2 * (hi - lo)
        if f(lo) >= 0:
            return float(lo)
        return optimize.brentq(f, lo, hi, xtol=ROOT_XTOL, rtol=4 * np.finfo(float).eps)
    return NEVER


def nlif_single_spike_time(p: LifParams, weight: float = 1.0) -> float:
    """Closed form for one arrival at t=0."""
    r = p.v_th * p.C_m / (p.tau_s * weight)
    return NEVER if r >= 1 else -p.tau_s * math.log1p(-r)


# -------------------------------------------------------------------- LIF
def lif_kernel(s, p: LifParams):
    s = np.asarray(s, dtype=np.float64)
    if p.tau_m == p.tau_s:
        raise ValueError("tau_m must differ from tau_s")
    k = p.tau_m * p.tau_s / (p.tau_m - p.tau_s)
    pos = np.maximum(s, 0.0)
    return np.where(s > 0, k * (np.exp(-pos / p.tau_m) - np.exp(-pos / p.tau_s)), 0.0)


def lif_potential(t, arrivals, weights, p: LifParams):
    a, w = _check(arrivals, weights)
    s = np.subtract.outer(np.asarray(t, dtype=np.float64), a)
    if p.kernel == "dirac":
        terms = np.where(s >= 0, w * np.exp(-np.maximum(s, 0.0) / p.tau_m), 0.0)
        return p.u_rest + terms.sum(axis=-1) / p.C_m
    return p.u_rest + (w * lif_kernel(s, p)).sum(axis=-1) / p.C_m


def lif_peak_time(p: LifParams) -> float:
    """Time of the single-arrival kernel maximum."""
    return p.tau_m * p.tau_s / (p.tau_m - p.tau_s) * math.log(p.tau_m / p.tau_s)


def lif_spike_time(arrivals: Sequence[float], weights: Sequence[float] | None, p: LifParams,
                   resolution: float | None = None, horizon: float | None = None) -> float:
    """First threshold crossing of the LIF membrane (NEVER if none).

    The exponential-synapse membrane is not monotone, so every interval
    after an arrival is scanned at ``resolution`` (default
    ``min(tau_m, tau_s) / 100``) and the first sign change is refined with
    a bracketing root finder.  A super-threshold excursion narrower than
    the scan step can be missed.  With a Dirac synapse the membrane only
    jumps up at arrivals, so crossings are checked there.
    """
    a, w = _check(arrivals, weights)
    if len(a) == 0:
        return NEVER
    if p.kernel == "dirac":
        for t in np.unique(a):
            if float(lif_potential(t, a, w, p)) >= p.v_th:
                return float(t)
        return NEVER
    h = resolution or min(p.tau_m, p.tau_s) / SCAN_FRACTION
    horizon = horizon if horizon is not None else 20 * max(p.tau_m, p.tau_s)

    def f(t):
        return float(lif_potential(t, a, w, p)) - p.v_th

    ends = list(a[1:]) + [a[-1] + horizon]
    for lo, hi in zip(a, ends):
        if hi <= lo:
            continue
        grid = np.append(np.arange(lo, hi, h), hi)
        vals = lif_potential(grid, a, w, p) - p.v_th
        above = np.nonzero(vals >= 0)[0]
        if len(above) == 0:
            continue
        k = int(above[0])
        if k == 0:
            return float(grid[0])
        return optimize.brentq(f, grid[k - 1], grid[k], xtol=ROOT_XTOL, rtol=4 * np.finfo(float).eps)
    return NEVER


def lif_coincident_spike_time(n: int, p: LifParams, weight: float = 1.0) -> float:
    """Closed form for ``n`` arrivals at t=0 when ``tau_m = 2 tau_s``.

    With ``x = exp(-t/tau_m)`` the kernel is ``K (x - x**2)``, so the first
    crossing is the larger root of a quadratic.
    """
    if p.tau_m != 2 * p.tau_s:
        raise ValueError("closed form needs tau_m == 2 * tau_s")
    k = p.tau_m * p.tau_s / (p.tau_m - p.tau_s)
    v = (p.v_th - p.u_rest) * p.C_m / (n * weight * k)
    disc = 1 - 4 * v
    if disc < 0:
        return NEVER
    x = (1 + math.sqrt(disc)) / 2
    return -p.tau_m * math.log(x)


# --------------------------------------------------- TEMP approximations
def ramp_spike_time(arrivals: Sequence[float], threshold: float, step: float, tau: float) -> float:
    """First time ``sum_{a_i <= t} (step + (t - a_i)/tau)`` reaches ``threshold``.

    ``step = 0`` is the TEMP neuron with ``gamma = tau * threshold``.
    """
    a = np.sort(np.asarray(arrivals, dtype=np.float64))
    total = 0.0
    for k in range(len(a)):
        total += a[k]
        n = k + 1
        # potential right after the k-th arrival
        if n * step + (n * a[k] - total) / tau >= threshold:
            return float(a[k])
        cand = (tau * (threshold - n * step) + total) / n
        if k + 1 == len(a) or cand <= a[k + 1]:
            return float(cand)
    return NEVER


def decay_spike_time(arrivals: Sequence[float], threshold: float, c: float, tau: float) -> float:
    """First time ``sum_{a_i <= t} (c - (t - a_i)/tau)`` reaches ``threshold``.

    The literal tangent form decays between arrivals, so it can only cross
    at an arrival instant.
    """
    a = np.sort(np.asarray(arrivals, dtype=np.float64))
    for k in range(len(a)):
        if (k + 1) * c - float(np.sum(a[k] - a[:k + 1])) / tau >= threshold:
            return float(a[k])
    return NEVER


def temp_spike_time(arrivals: Sequence[float], gamma: float) -> float:
    return solve_spike_time(list(arrivals), NeuronParams(gamma)).t_z


def dirac_gamma(n_inputs: int, c: float, p: LifParams) -> float:
    """``sum_j c - C_m v_th`` for the delay form of the Dirac-synapse LIF."""
    return n_inputs * c - p.C_m * p.v_th


@dataclass
class CorrespondenceReport:
    """TEMP against the exact neuron over a battery of instances."""

    exact: np.ndarray
    temp: np.ndarray
    ramp: np.ndarray          # growing form, 1 - c + s/tau_s
    decay: np.ndarray         # literal decaying form, c - s/tau_s
    rank_temp: float
    rank_ramp: float
    rank_decay: float
    c: float

    @property
    def error(self) -> np.ndarray:
        return self.temp - self.exact

    @property
    def tracking_convention(self) -> str:
        return "ramp" if _nan_to(self.rank_ramp) >= _nan_to(self.rank_decay) else "decay"


def _nan_to(x, v=-2.0):
    return v if not np.isfinite(x) else x


def rank_correlation(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    ok = np.isfinite(a) & np.isfinite(b)
    if ok.sum() < 2:
        return float("nan")
    r = stats.spearmanr(a[ok], b[ok]).statistic
    return float(r)


def correspondence_check(instances: Sequence[Sequence[float]], p: LifParams, model: str = "nlif",
                         c: float = 1.0) -> CorrespondenceReport:
    """Compare TEMP (``gamma = C_m v_th``) with the exact neuron on each instance.

    ``model`` is ``"nlif"`` or ``"lif"``.  The n-LIF expansion is also
    evaluated in both sign conventions with constant ``c``; with ``c = 1``
    the growing form coincides with TEMP.
    """
    exact, temp, ramp, decay = [], [], [], []
    theta = p.v_th * p.C_m / p.tau_s
    for arr in instances:
        if model == "nlif":
            exact.append(nlif_spike_time(arr, None, p))
        elif model == "lif":
            exact.append(lif_spike_time(arr, None, p))
        else:
            raise ValueError(f"unknown model {model!r}")
        temp.append(temp_spike_time(arr, p.temp_gamma))
        ramp.append(ramp_spike_time(arr, theta, 1.0 - c, p.tau_s))
        decay.append(decay_spike_time(arr, theta, c, p.tau_s))
    exact, temp, ramp, decay = map(np.array, (exact, temp, ramp, decay))
    return CorrespondenceReport(exact, temp, ramp, decay, rank_correlation(temp, exact),
                                rank_correlation(ramp, exact), rank_correlation(decay, exact), c)


def fit_c(instances, p: LifParams, bounds=(0.0, 2.0)) -> float:
    """Constant ``c`` of the growing form that best matches n-LIF spike times."""
    exact = np.array([nlif_spike_time(a, None, p) for a in instances])
    theta = p.v_th * p.C_m / p.tau_s

    def loss(c):
        r = np.array([ramp_spike_time(a, theta, 1.0 - c, p.tau_s) for a in instances])
        ok = np.isfinite(r) & np.isfinite(exact)
        return float(np.mean((r[ok] - exact[ok]) ** 2)) if ok.any() else math.inf

    return float(optimize.minimize_scalar(loss, bounds=bounds, method="bounded").x)


def random_battery(rng: np.random.Generator, n_instances: int, n_arrivals: int, spread: float) -> list[np.ndarray]:
    return [rng.uniform(0.0, spread, n_arrivals) for _ in range(n_instances)]


def battery_csv(report: CorrespondenceReport, model: str, comment: str | None = None) -> str:
    """Rows ``(instance, model, spike_time, error)``; error is relative to the exact neuron."""
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["instance", "model", "spike_time", "error"])
    for i, ex in enumerate(report.exact):
        for name, t in ((model, ex), ("temp", report.temp[i]), ("ramp", report.ramp[i]),
                        ("decay", report.decay[i])):
            err = t - ex if math.isfinite(t) and math.isfinite(ex) else math.nan
            w.writerow([i, name, repr(float(t)), repr(float(err))])
    return buf.getvalue()


# ---------------------------------------------------------- log-sum-exp
def soft_min(arrivals, tau_m: float) -> float:
    """``-tau_m log sum exp(-a/tau_m)`` with the minimum factored out."""
    a = np.asarray(arrivals, dtype=np.float64)
    if a.size == 0:
        return NEVER
    m = a.min()
    return float(m - tau_m * math.log(np.exp(-(a - m) / tau_m).sum()))


def lse_transfer(t_plus, t_minus, w_plus, w_minus, tau_m: float) -> tuple[float, float]:
    """Smooth rail times of a differential unit.

    ``e^{-t+/tau} = sum_j e^{-(t_j+ + w_j+)/tau} + e^{-(t_j- + w_j-)/tau}`` and
    ``e^{-t-/tau} = sum_j e^{-(t_j+ + w_j-)/tau} + e^{-(t_j- + w_j+)/tau}``.
    """
    if not tau_m > 0:
        raise ValueError("tau_m must be > 0")
    tp, tm, wp, wm = (np.asarray(x, dtype=np.float64) for x in (t_plus, t_minus, w_plus, w_minus))
    if not all(np.all(np.isfinite(x)) for x in (tp, tm, wp, wm)):
        raise ValueError("lse_transfer needs finite inputs")
    plus = np.concatenate([tp + wp, tm + wm])
    minus = np.concatenate([tp + wm, tm + wp])
    return soft_min(plus, tau_m), soft_min(minus, tau_m)


def pwl_transfer(t_plus, t_minus, w_plus, w_minus, tau_m: float) -> tuple[float, float]:
    """The TEMP counterpart of ``lse_transfer`` (``gamma = tau_m``)."""
    tp, tm, wp, wm = (np.asarray(x, dtype=np.float64) for x in (t_plus, t_minus, w_plus, w_minus))
    plus = np.concatenate([tp + wp, tm + wm])
    minus = np.concatenate([tp + wm, tm + wp])
    return temp_spike_time(plus, tau_m), temp_spike_time(minus, tau_m)
