"""Measurements on trained networks: sparsity, latency, activity, patterns.

Definitions used throughout:

* causal fraction of a rail = |causal set| / fan_in, i.e. causal spikes
  counted against the number of pre-synaptic inputs (784 for MNIST), averaged
  over rails that fired; ``per="arrival"`` divides by the 2 * fan_in
  arrivals a rail actually sees instead;
* latency of a sample = time of the first output-layer spike (the earliest
  classifier rail after time-out substitution); ``winner_t_minus`` is also
  reported;
* A_h = fraction of first-hidden-layer rails with a finite spike time;
* pattern distance between two samples = mean absolute difference of
  their hidden rail times (silent rails at the layer time-out), divided by
  that time-out.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import NEVER, NeuronParams, leaky_potential, solve_spike_time
from .network import ForwardResult, Network


def _forward(net: Network, t_plus, t_minus, batch: int = 500) -> list[ForwardResult]:
    return [net.forward(t_plus[s:s + batch], t_minus[s:s + batch]) for s in range(0, len(t_plus), batch)]


def causal_fraction(fwd: ForwardResult | Sequence[ForwardResult], net: Network, layer: int = 0,
                    per: str = "input") -> float:
    """Mean causal fraction over rails of ``layer`` that fired."""
    if per not in ("input", "arrival"):
        raise ValueError(f"per must be 'input' or 'arrival', got {per!r}")
    parts = fwd if isinstance(fwd, (list, tuple)) else [fwd]
    n_arr = net.spec.fan_in(layer) * (2 if per == "arrival" else 1)
    total, n = 0.0, 0
    for f in parts:
        rec = f.records[layer]
        for cnt, raw in ((rec.count_plus, rec.raw_plus), (rec.count_minus, rec.raw_minus)):
            fired = np.isfinite(raw)
            total += float(cnt[fired].sum()) / n_arr
            n += int(fired.sum())
    return total / n if n else float("nan")


def random_delay_causal_fraction(net: Network, t_plus, t_minus, layer: int, rng: np.random.Generator,
                                 mean: float, std: float, per: str = "input") -> float:
    """Causal fraction of an untrained network: same spec and thresholds, delays
    freshly drawn from the training initialisation."""
    base = Network.initialise(net.spec, rng, mean, std)
    return causal_fraction(_forward(base, t_plus, t_minus), base, layer, per)


def active_fraction(fwd: ForwardResult | Sequence[ForwardResult], layer: int = 0) -> float:
    """A_h: fraction of rails in ``layer`` that fired before their time-out."""
    parts = fwd if isinstance(fwd, (list, tuple)) else [fwd]
    fired = sum(int(np.isfinite(f.records[layer].raw_plus).sum() + np.isfinite(f.records[layer].raw_minus).sum())
                for f in parts)
    size = sum(f.records[layer].raw_plus.size * 2 for f in parts)
    return fired / size if size else float("nan")


def latencies(fwd: ForwardResult) -> tuple[np.ndarray, np.ndarray]:
    """``(first output spike, winner t-)`` per sample."""
    rec = fwd.records[-1]
    b = rec.out_plus.shape[0]
    tp = rec.out_plus.reshape(b, -1)
    tm = rec.out_minus.reshape(b, -1)
    first = np.minimum(tp.min(axis=1), tm.min(axis=1))
    win = fwd.winners
    return first, tm[np.arange(b), win]


@dataclass
class SweepRow:
    gamma: float
    latency: float
    winner_t_minus: float
    accuracy: float
    active_fraction: float
    causal_fraction: float


def evaluate_gamma(net: Network, gamma: float, t_plus, t_minus, labels, layer: int = 0) -> SweepRow:
    """Metrics with the threshold of ``layer`` replaced by ``gamma``."""
    thresholds = [l.threshold for l in net.spec.layers]
    thresholds[layer] = gamma
    n2 = net.with_thresholds(thresholds)
    parts = _forward(n2, t_plus, t_minus)
    first = np.concatenate([latencies(f)[0] for f in parts])
    wtm = np.concatenate([latencies(f)[1] for f in parts])
    pred = np.concatenate([f.winners for f in parts])
    return SweepRow(float(gamma), float(first.mean()), float(wtm.mean()), float((pred == labels).mean()),
                    active_fraction(parts, layer), causal_fraction(parts, n2, layer))


def sweep_csv(rows: Sequence[SweepRow], comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["gamma", "latency", "winner_t_minus", "accuracy", "active_fraction", "causal_fraction"])
    for r in rows:
        w.writerow([repr(r.gamma), repr(r.latency), repr(r.winner_t_minus), repr(r.accuracy),
                    repr(r.active_fraction), repr(r.causal_fraction)])
    return buf.getvalue()


# ----------------------------------------------------------------- rasters
RASTER_HEADER = ["sample", "layer", "neuron", "polarity", "time"]


def raster_rows(fwd: ForwardResult, sample_offset: int = 0, raw: bool = True) -> list[tuple]:
    """One row per spike: ``(sample, layer, neuron, polarity, time)``.

    With ``raw`` only genuine crossings are listed; otherwise the emitted
    times (after time-out substitution and ReLU) of every rail.
    """
    rows = []
    for li, rec in enumerate(fwd.records):
        if rec.raw_plus is None:
            continue
        rp = (rec.raw_plus if raw else rec.out_plus).reshape(rec.raw_plus.shape[0], -1)
        rm = (rec.raw_minus if raw else rec.out_minus).reshape(rec.raw_plus.shape[0], -1)
        for pol, arr in ((0, rp), (1, rm)):
            s, n = np.nonzero(np.isfinite(arr))
            rows += [(int(a) + sample_offset, li, int(b), pol, float(arr[a, b])) for a, b in zip(s, n)]
    rows.sort()
    return rows


def raster_csv(rows: Sequence[tuple], comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RASTER_HEADER)
    for s, l, n, p, t in rows:
        w.writerow([s, l, n, p, repr(float(t))])
    return buf.getvalue()


def parse_raster_csv(text: str) -> tuple[str | None, list[tuple]]:
    lines = text.splitlines()
    comment = None
    if lines and lines[0].startswith("#"):
        comment = lines[0][2:] if lines[0].startswith("# ") else lines[0][1:]
        lines = lines[1:]
    reader = csv.reader(lines)
    header = next(reader, None)
    if header != RASTER_HEADER:
        raise ValueError(f"not a raster CSV (header {header})")
    return comment, [(int(s), int(l), int(n), int(p), float(t)) for s, l, n, p, t in reader]


def active_fraction_from_raster(rows: Sequence[tuple], n_samples: int, n_units: int, layer: int = 0) -> float:
    fired = sum(1 for r in rows if r[1] == layer)
    return fired / (2 * n_units * n_samples)


# ---------------------------------------------------------------- patterns
def hidden_pattern(fwd: ForwardResult, layer: int = 0) -> np.ndarray:
    """(B, 2U) rail times handed downstream (silent rails sit at the time-out)."""
    rec = fwd.records[layer]
    b = rec.out_plus.shape[0]
    return np.concatenate([rec.out_plus.reshape(b, -1), rec.out_minus.reshape(b, -1)], axis=1)


def pattern_distance(a: np.ndarray, b: np.ndarray, time_out: float) -> float:
    return float(np.mean(np.abs(np.asarray(a) - np.asarray(b)))) / time_out


def class_distance_matrix(patterns: np.ndarray, labels: np.ndarray, time_out: float,
                          n_classes: int) -> np.ndarray:
    """Mean pairwise pattern distance between every pair of classes.

    Diagonal entries exclude pairs of a sample with itself.
    """
    p = np.asarray(patterns, dtype=np.float64)
    d = np.empty((len(p), len(p)))
    for s in range(0, len(p), 64):
        d[s:s + 64] = np.abs(p[s:s + 64, None, :] - p[None, :, :]).mean(axis=2) / time_out
    out = np.zeros((n_classes, n_classes))
    for i in range(n_classes):
        for j in range(n_classes):
            block = d[np.ix_(labels == i, labels == j)]
            if i == j:
                n = block.shape[0]
                out[i, j] = block.sum() / (n * (n - 1)) if n > 1 else np.nan
            else:
                out[i, j] = block.mean() if block.size else np.nan
    return out


def intra_inter(dist: np.ndarray) -> tuple[float, float]:
    k = dist.shape[0]
    off = ~np.eye(k, dtype=bool)
    return float(np.nanmean(np.diag(dist))), float(np.nanmean(dist[off]))


def firing_correlation(times: np.ndarray) -> np.ndarray:
    """Pearson correlation of unit firing times across samples; diagonal 1.

    Units that never vary get zero off-diagonal correlation.
    """
    t = np.asarray(times, dtype=np.float64)
    c = t - t.mean(axis=0)
    sd = np.sqrt((c * c).mean(axis=0))
    ok = sd > 0
    z = np.zeros_like(c)
    z[:, ok] = c[:, ok] / sd[ok]
    corr = z.T @ z / len(t)
    np.fill_diagonal(corr, 1.0)
    return corr


def delay_histograms(net: Network, bins: int = 30, layer: int = -1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per output unit histograms of incoming ``w+`` and ``w-`` on shared bins."""
    p = net.params[layer]
    both = np.concatenate([p.w_plus.ravel(), p.w_minus.ravel()])
    edges = np.linspace(both.min(), both.max() if both.max() > both.min() else both.min() + 1, bins + 1)
    hp = np.stack([np.histogram(r, edges)[0] for r in p.w_plus])
    hm = np.stack([np.histogram(r, edges)[0] for r in p.w_minus])
    return edges, hp, hm


def matrix_csv(m: np.ndarray, row_name: str = "row", comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([row_name] + [str(j) for j in range(m.shape[1])])
    for i, r in enumerate(m):
        w.writerow([i] + [repr(float(x)) for x in r])
    return buf.getvalue()


def histogram_csv(edges, hp, hm, comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["unit", "rail", "bin_lo", "bin_hi", "count"])
    for rail, h in (("plus", hp), ("minus", hm)):
        for u, row in enumerate(h):
            for k, c in enumerate(row):
                w.writerow([u, rail, repr(float(edges[k])), repr(float(edges[k + 1])), int(c)])
    return buf.getvalue()


# ---------------------------------------------------------------- dynamics
def input_train(rate_hz: float, duration_ms: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """Spike times in ms: regular at ``rate_hz``, or Poisson when ``rng`` is given."""
    if not rate_hz > 0:
        raise ValueError("rate must be > 0")
    isi = 1000.0 / rate_hz
    if rng is None:
        return np.arange(0.0, duration_ms, isi)
    t = np.cumsum(rng.exponential(isi, int(duration_ms / isi) + 10))
    while t[-1] < duration_ms:
        t = np.concatenate([t, t[-1] + np.cumsum(rng.exponential(isi, len(t)))])
    return t[t < duration_ms]


def nonleaky_train(arrivals: np.ndarray, gamma: float, window: float) -> list[float]:
    """Non-leaky neuron reset every ``window``: at most one spike per window."""
    a = np.asarray(arrivals, dtype=np.float64)
    out = []
    if len(a) == 0:
        return out
    for k in range(int(np.floor(a.max() / window)) + 1):
        lo, hi = k * window, (k + 1) * window
        sel = a[(a >= lo) & (a < hi)]
        t = solve_spike_time(sel.tolist(), NeuronParams(gamma, hi)).t_z
        if t != NEVER:
            out.append(t)
    return out


def nonleaky_trace(arrivals, gamma: float, window: float, grid: np.ndarray) -> np.ndarray:
    """Membrane value on ``grid``; it drops to zero after a spike until the window ends."""
    a = np.asarray(arrivals, dtype=np.float64)
    fires = nonleaky_train(a, gamma, window)
    v = np.zeros(len(grid))
    for i, t in enumerate(grid):
        k = np.floor(t / window)
        lo = k * window
        fired = [f for f in fires if lo <= f <= t]
        if fired:
            continue
        s = a[(a >= lo) & (a <= t)]
        v[i] = float(np.sum(t - s))
    return v


def leaky_trace(arrivals, fires, c: float, grid: np.ndarray) -> np.ndarray:
    return np.array([leaky_potential(t, arrivals, fires, c) for t in grid])
