"""Address-event routing fabric for trained differential TEMP networks.

A dense layer with ``K`` inputs and ``U`` units becomes a fabric with
``M = 2K`` senders and ``N = 2U`` receivers.  Sender ``2j + p`` is input
``j`` on polarity ``p`` and receiver ``2i + r`` is rail ``r`` of unit ``i``.
Delays are quantized onto ``2**q`` grids; grid ``g`` delays every spike by
``offset + g * delta`` time units.  A delay ``w+[i, j]`` sets the bits
``(2i, 2j)`` and ``(2i+1, 2j+1)`` of its grid, ``w-[i, j]`` sets
``(2i, 2j+1)`` and ``(2i+1, 2j)``.

Inference runs one sample at a time through a single priority queue.  Event
times are floats: input spikes are not restricted to the lattice, only the
routing delays are.  Receivers integrate with ``core.step_event``, so a
network whose delays sit exactly on the lattice reproduces the dense
forward pass bit for bit.

Fabric file layout (little-endian)::

    magic  b"TEMPFAB\\0"
    u16 version, u16 q, f64 delta, f64 offset, u32 N, u32 M, u32 layer, u64 entries
    entries * (u16 grid, u32 sender, u32 receiver)
"""

from __future__ import annotations

import csv
import heapq
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import NEVER, MembraneState, NeuronParams, Polarity, SpikeEvent, advance, step_event
from .network import DENSE, Network

FABRIC_MAGIC = b"TEMPFAB\x00"
FABRIC_VERSION = 1
_HEADER = struct.Struct("<8sHHddIIIQ")
ENTRY_DTYPE = np.dtype([("grid", "<u2"), ("sender", "<u4"), ("receiver", "<u4")])

# queue phases at equal time: pending crossings, then deliveries, then time-outs
_FIRE, _DELIVER, _TIMEOUT = 0, 1, 2


class FabricError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Tick:
    value: int

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("ticks are nonnegative")

    def time(self, delta: float, offset: float = 0.0) -> float:
        return offset + self.value * delta


@dataclass(frozen=True)
class RoutingGrid:
    """One binary receiver-by-sender matrix bound to a single delay."""

    delay: Tick
    bits: np.ndarray

    def __post_init__(self):
        if self.bits.ndim != 2 or not np.isin(self.bits, (0, 1)).all():
            raise FabricError("grid bits must be a 0/1 matrix")


@dataclass(frozen=True, order=True)
class BusEvent:
    """A spike on the shared bus; field order is the bus arbitration order."""

    deliver_at: float
    receiver: int
    source: int
    grid: int
    polarity: int


@dataclass
class RoutingFabric:
    """Sparse storage of ``2**q`` grids for one layer."""

    q: int
    delta: float
    offset: float
    n_receivers: int
    n_senders: int
    layer: int
    entries: np.ndarray  # ENTRY_DTYPE, sorted by (sender, grid, receiver)
    _adj: list | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.q < 1 or self.q > 16:
            raise FabricError("q must be in 1..16")
        if not (self.delta >= 0 and math.isfinite(self.delta)):
            raise FabricError("delta must be finite and >= 0")
        e = self.entries
        if len(e):
            if e["grid"].max() >= self.n_grids or e["sender"].max() >= self.n_senders \
                    or e["receiver"].max() >= self.n_receivers:
                raise FabricError("routing entry out of range")
        self.entries = np.sort(np.asarray(e, dtype=ENTRY_DTYPE), order=("sender", "grid", "receiver"))

    @property
    def n_grids(self) -> int:
        return 2 ** self.q

    def grid_delay(self, g: int) -> float:
        return self.offset + g * self.delta

    def grid(self, g: int) -> RoutingGrid:
        bits = np.zeros((self.n_receivers, self.n_senders), dtype=np.uint8)
        sel = self.entries[self.entries["grid"] == g]
        bits[sel["receiver"], sel["sender"]] = 1
        return RoutingGrid(Tick(g), bits)

    @property
    def grids(self) -> list[RoutingGrid]:
        return [self.grid(g) for g in range(self.n_grids)]

    def adjacency(self, sender: int) -> tuple[np.ndarray, np.ndarray]:
        """``(receivers, grids)`` reached from ``sender``."""
        if self._adj is None:
            e = self.entries
            bounds = np.searchsorted(e["sender"], np.arange(self.n_senders + 1))
            self._adj = [(e["receiver"][a:b].astype(np.int64), e["grid"][a:b].astype(np.int64))
                         for a, b in zip(bounds[:-1], bounds[1:])]
        return self._adj[sender]

    def column_popcount(self) -> np.ndarray:
        return np.bincount(self.entries["sender"], minlength=self.n_senders)

    # ------------------------------------------------------------ file format
    def to_bytes(self) -> bytes:
        head = _HEADER.pack(FABRIC_MAGIC, FABRIC_VERSION, self.q, self.delta, self.offset,
                            self.n_receivers, self.n_senders, self.layer, len(self.entries))
        return head + self.entries.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "RoutingFabric":
        if len(data) < _HEADER.size or data[:8] != FABRIC_MAGIC:
            raise FabricError("not a fabric file")
        magic, version, q, delta, offset, n, m, layer, count = _HEADER.unpack_from(data)
        if version != FABRIC_VERSION:
            raise FabricError(f"fabric version {version}, this build reads {FABRIC_VERSION}")
        if len(data) != _HEADER.size + count * ENTRY_DTYPE.itemsize:
            raise FabricError("fabric file size does not match its entry count")
        entries = np.frombuffer(data, dtype=ENTRY_DTYPE, count=count, offset=_HEADER.size).copy()
        return cls(q, delta, offset, n, m, layer, entries)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "RoutingFabric":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- compilation
def round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def quantize_delays(w_plus: np.ndarray, w_minus: np.ndarray, q: int, delta: float | None = None,
                    offset: float | None = None) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Integer ticks for both delay matrices plus ``(delta, offset)``.

    By default the lattice spans ``[min, max]`` of the layer's delays.  An
    explicit ``delta`` (with ``offset`` defaulting to 0) requires every delay
    to fit in ``2**q`` ticks.
    """
    if q < 1:
        raise FabricError("q must be >= 1")
    both = np.concatenate([np.ravel(w_plus), np.ravel(w_minus)])
    if not np.all(np.isfinite(both)):
        raise FabricError("delays must be finite")
    levels = 2 ** q - 1
    if delta is None:
        lo, hi = float(both.min()), float(both.max())
        offset = lo if offset is None else offset
        delta = (hi - offset) / levels
    else:
        offset = 0.0 if offset is None else offset
        if not delta > 0:
            raise FabricError("explicit delta must be > 0")
    if delta == 0:
        return (np.zeros(np.shape(w_plus), dtype=np.int64), np.zeros(np.shape(w_minus), dtype=np.int64),
                0.0, offset)
    ticks = [round_half_up((np.asarray(w) - offset) / delta).astype(np.int64) for w in (w_plus, w_minus)]
    if min(t.min() for t in ticks) < 0 or max(t.max() for t in ticks) > levels:
        raise FabricError(f"delays do not fit in {levels + 1} ticks of {delta} from {offset}")
    return ticks[0], ticks[1], float(delta), float(offset)


def dequantize(ticks: np.ndarray, delta: float, offset: float) -> np.ndarray:
    return offset + ticks * delta


def build_fabric(tick_plus: np.ndarray, tick_minus: np.ndarray, q: int, delta: float, offset: float,
                 layer: int = 0) -> RoutingFabric:
    units, k = tick_plus.shape
    i, j = np.meshgrid(np.arange(units), np.arange(k), indexing="ij")
    i, j = i.ravel(), j.ravel()
    tp, tm = tick_plus.ravel(), tick_minus.ravel()
    parts = []
    # (grid, sender, receiver) for the four bits of every synapse
    for g, s, r in ((tp, 2 * j, 2 * i), (tp, 2 * j + 1, 2 * i + 1),
                    (tm, 2 * j + 1, 2 * i), (tm, 2 * j, 2 * i + 1)):
        e = np.empty(len(g), dtype=ENTRY_DTYPE)
        e["grid"], e["sender"], e["receiver"] = g, s, r
        parts.append(e)
    return RoutingFabric(q, delta, offset, 2 * units, 2 * k, layer, np.concatenate(parts))


@dataclass
class FabricNetwork:
    """A compiled network: one fabric plus neuron settings per layer."""

    fabrics: list[RoutingFabric]
    thresholds: list[float]
    time_outs: list[float]
    relu: list[bool]

    @property
    def n_inputs(self) -> int:
        return self.fabrics[0].n_senders // 2


def compile_network(net: Network, q: int, delta: float | None = None, offset: float | None = None,
                    quantize_thresholds: bool = True) -> FabricNetwork:
    """Quantize every layer's delays (per-layer lattice) and build its fabric.

    Thresholds are rounded onto the same lattice (never below one step).
    Only dense layers without batch norm can be routed.
    """
    fabrics, gammas, outs, relus = [], [], [], []
    for i, (layer, p) in enumerate(zip(net.spec.layers, net.params)):
        if layer.kind != DENSE or layer.normalization != "none":
            raise FabricError(f"layer {i}: only plain dense layers can be routed")
        tp, tm, d, off = quantize_delays(p.w_plus, p.w_minus, q, delta, offset)
        fabrics.append(build_fabric(tp, tm, q, d, off, i))
        g = float(layer.threshold)
        if quantize_thresholds and d > 0:
            g = max(float(round_half_up(g / d)) * d, d)
        gammas.append(g)
        outs.append(float(net.spec.time_outs[i]))
        relus.append(layer.relu)
    return FabricNetwork(fabrics, gammas, outs, relus)


def dequantized_network(net: Network, fnet: FabricNetwork) -> Network:
    """The dense network whose delays and thresholds are exactly the fabric's."""
    out = net.copy().with_thresholds(fnet.thresholds)
    for p, fab in zip(out.params, fnet.fabrics):
        units, k = p.w_plus.shape
        wp, wm = np.empty((units, k)), np.empty((units, k))
        e = fab.entries
        d = dequantize(e["grid"].astype(np.int64), fab.delta, fab.offset)
        s, r = e["sender"].astype(np.int64), e["receiver"].astype(np.int64)
        # plus rail receivers 2i: sender 2j carries w+, sender 2j+1 carries w-
        m = r % 2 == 0
        same = (s % 2 == 0) & m
        cross = (s % 2 == 1) & m
        wp[r[same] // 2, s[same] // 2] = d[same]
        wm[r[cross] // 2, s[cross] // 2] = d[cross]
        p.w_plus, p.w_minus = wp, wm
    return out


# ------------------------------------------------------------------ routing
def route(fabric: RoutingFabric, spike: SpikeEvent) -> list[BusEvent]:
    """Bus events produced when ``spike`` enters ``fabric``."""
    sender = 2 * spike.source + int(spike.polarity)
    if not 0 <= sender < fabric.n_senders:
        raise FabricError(f"sender address {sender} out of range")
    receivers, grids = fabric.adjacency(sender)
    out = [BusEvent(spike.time + fabric.grid_delay(int(g)), int(r), sender, int(g), int(r) % 2)
           for r, g in zip(receivers, grids)]
    out.sort()
    return out


@dataclass
class FabricRun:
    """Per-sample record of one routed inference."""

    out_plus: list[np.ndarray]          # emitted rail times per layer (after ReLU hold)
    out_minus: list[np.ndarray]
    raw_plus: list[np.ndarray]          # crossing times, NEVER if silent
    raw_minus: list[np.ndarray]
    causal_plus: list[np.ndarray]
    causal_minus: list[np.ndarray]
    bus_events: int = 0
    grid_events: dict[int, np.ndarray] = field(default_factory=dict)
    max_queue: int = 0
    spikes_sent: list[int] = field(default_factory=list)  # sender spikes entering each fabric
    trace: list[tuple] | None = None

    @property
    def logits(self) -> np.ndarray:
        return self.out_plus[-1] - self.out_minus[-1]

    @property
    def winner(self) -> int:
        return int(np.argmax(self.logits))


def input_events(t_plus: Sequence[float], t_minus: Sequence[float]) -> list[SpikeEvent]:
    ev = [SpikeEvent(float(t), j, Polarity.PLUS) for j, t in enumerate(t_plus)]
    ev += [SpikeEvent(float(t), j, Polarity.MINUS) for j, t in enumerate(t_minus)]
    return ev


def run_fabric(fnet: FabricNetwork, events: Iterable[SpikeEvent], keep_trace: bool = False,
               early_stop: bool = False) -> FabricRun:
    """Route one sample's input spikes through every layer.

    Receivers follow ``step_event``.  A rail that has not fired by its
    layer's time-out emits a spike at the time-out.  Where a layer applies
    the differential ReLU, a plus spike is held until the minus rail of the
    same unit has spiked, then released at the later of the two times.
    The loop drains the queue unless ``early_stop``, which ends it once
    every output rail has resolved (later hidden activity is then missing
    from the record).
    """
    L = len(fnet.fabrics)
    params = [NeuronParams(g, t) for g, t in zip(fnet.thresholds, fnet.time_outs)]
    units = [f.n_receivers // 2 for f in fnet.fabrics]
    states = [[MembraneState() for _ in range(2 * u)] for u in units]
    out_t = [np.full(2 * u, NEVER) for u in units]
    raw_t = [np.full(2 * u, NEVER) for u in units]
    causal = [np.zeros(2 * u, dtype=np.int64) for u in units]
    held = [dict() for _ in units]
    grid_events = {i: np.zeros(f.n_grids, dtype=np.int64) for i, f in enumerate(fnet.fabrics)}
    trace = [] if keep_trace else None
    heap: list[tuple] = []
    counters = {"bus": 0, "max_queue": 0}
    sent = [0] * L

    def send(layer, spike: SpikeEvent):
        if layer == L:
            return
        fab = fnet.fabrics[layer]
        sender = 2 * spike.source + int(spike.polarity)
        if not 0 <= sender < fab.n_senders:
            raise FabricError(f"layer {layer}: sender address {sender} out of range")
        receivers, grids = fab.adjacency(sender)
        for r, g in zip(receivers.tolist(), grids.tolist()):
            heapq.heappush(heap, (spike.time + fab.grid_delay(g), _DELIVER, layer, r, sender, g))
        np.add.at(grid_events[layer], grids, 1)
        counters["bus"] += len(receivers)
        sent[layer] += 1

    def emit(layer, rail, t):
        out_t[layer][rail] = t
        send(layer + 1, SpikeEvent(t, rail // 2, Polarity(rail % 2)))

    def resolve(layer, rail, t):
        """Rail ``rail`` spiked (or timed out) at ``t``."""
        if not fnet.relu[layer]:
            emit(layer, rail, t)
            return
        unit = rail // 2
        if rail % 2 == Polarity.MINUS:
            emit(layer, rail, t)
            if unit in held[layer]:
                held[layer].pop(unit)
                emit(layer, rail - 1, t)
        elif out_t[layer][rail + 1] != NEVER:
            emit(layer, rail, t)
        else:
            held[layer][unit] = t

    def schedule(layer, rail):
        t = states[layer][rail].pending_fire_time(params[layer])
        if t != NEVER:
            heapq.heappush(heap, (t, _FIRE, layer, rail, -1, -1))

    for ev in sorted(events):
        send(0, ev)
    for i, p in enumerate(params):
        if math.isfinite(p.time_out):
            heapq.heappush(heap, (p.time_out, _TIMEOUT, i, -1, -1, -1))

    while heap:
        counters["max_queue"] = max(counters["max_queue"], len(heap))
        t, phase, layer, rail, sender, g = heapq.heappop(heap)
        st = states[layer]
        if phase == _DELIVER:
            if trace is not None:
                trace.append((layer, t, rail, sender, g, rail % 2))
            state = st[rail]
            if state.done:
                continue
            _, fired = step_event(state, t, params[layer])
            if fired != NEVER:
                raw_t[layer][rail] = fired
                causal[layer][rail] = state.causal_count
                resolve(layer, rail, fired)
            else:
                schedule(layer, rail)
        elif phase == _FIRE:
            state = st[rail]
            fired = advance(state, t, params[layer])
            if fired != NEVER:
                raw_t[layer][rail] = fired
                causal[layer][rail] = state.causal_count
                resolve(layer, rail, fired)
        else:
            for state in st:
                advance(state, t, params[layer])
            # minus rail first so a held plus spike is released at the same time
            for unit in range(units[layer]):
                for r in (2 * unit + 1, 2 * unit):
                    if raw_t[layer][r] == NEVER and out_t[layer][r] == NEVER:
                        resolve(layer, r, t)
        if early_stop and all(s.done for s in states[-1]) and not held[-1]:
            break

    return FabricRun([o[0::2] for o in out_t], [o[1::2] for o in out_t],
                     [r[0::2] for r in raw_t], [r[1::2] for r in raw_t],
                     [c[0::2] for c in causal], [c[1::2] for c in causal],
                     counters["bus"], grid_events, counters["max_queue"], sent, trace)


def fabric_forward(fnet: FabricNetwork, t_plus: np.ndarray, t_minus: np.ndarray) -> list[FabricRun]:
    """Run every sample of a batch; inputs are ``(B, n_inputs)`` rail times."""
    tp = np.asarray(t_plus, dtype=np.float64).reshape(len(t_plus), -1)
    tm = np.asarray(t_minus, dtype=np.float64).reshape(len(t_minus), -1)
    return [run_fabric(fnet, input_events(a, b)) for a, b in zip(tp, tm)]


def fabric_stats(run: FabricRun) -> dict:
    return {
        "bus_events": run.bus_events,
        "events_per_grid": {k: v.copy() for k, v in run.grid_events.items()},
        "max_queue_depth": run.max_queue,
        "spikes_sent": list(run.spikes_sent),
        "causal_plus": [c.copy() for c in run.causal_plus],
        "causal_minus": [c.copy() for c in run.causal_minus],
    }


def trace_csv(run: FabricRun, comment: str | None = None) -> str:
    """Bus trace as CSV; ``time`` is the delivery time in time units."""
    if run.trace is None:
        raise FabricError("run was made without keep_trace")
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "time", "receiver", "source", "grid", "polarity"])
    for layer, t, r, s, g, pol in run.trace:
        w.writerow([layer, repr(float(t)), r, s, g, pol])
    return buf.getvalue()
