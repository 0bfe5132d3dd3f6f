"""Differential TEMP layers and feed-forward networks.

Every value travels as a pair of spike times ``(t_plus, t_minus)`` and
encodes ``t_plus - t_minus``.  Every synapse is a pair of non-negative
axonal delays ``(w_plus, w_minus)`` encoding ``w_plus - w_minus``.  A unit
has two rails, each a plain TEMP neuron:

* plus rail sees ``t_j+ + w_ij+`` and ``t_j- + w_ij-``
* minus rail sees ``t_j+ + w_ij-`` and ``t_j- + w_ij+``

A rail that misses its time-out is recorded as NEVER and handed to the
next layer as a spike at the time-out.

Model files are little-endian: 8-byte magic, u16 version, u32 header
length, a UTF-8 JSON header (layer kinds, shapes, thresholds, time-outs,
encoder), then every parameter array as row-major float64 in header order.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import ClassVar, Sequence

import numpy as np

from . import kernels
from .core import NEVER, CausalSolve, NeuronParams, solve_spike_time

DENSE = "dense"
CONV2D = "conv2d"
MAXPOOL = "maxpool"
LAYER_KINDS = (DENSE, CONV2D, MAXPOOL)

MODEL_MAGIC = b"TEMPNET\x00"
MODEL_VERSION = 1
BN_EPS = 1e-5


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DifferentialTime:
    t_plus: float
    t_minus: float

    @property
    def value(self) -> float:
        return self.t_plus - self.t_minus


@dataclass(frozen=True)
class DelayWeight:
    w_plus: float
    w_minus: float

    def __post_init__(self):
        if not (self.w_plus >= 0 and self.w_minus >= 0):
            raise ValueError(f"delays must be non-negative, got ({self.w_plus}, {self.w_minus})")

    @property
    def weight(self) -> float:
        return self.w_plus - self.w_minus


@dataclass(frozen=True)
class LayerSpec:
    """One layer.  ``threshold`` is the firing threshold of both rails.

    ``units`` is the dense fan-out; ``channels``/``kernel``/``stride``
    describe a convolution; ``kernel``/``stride`` also size a max-pool.
    ``relu=False`` skips the differential ReLU (used on the classifier).
    """

    kind: str
    units: int = 0
    channels: int = 0
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    threshold: float = 1.0
    relu: bool = True
    normalization: str = "none"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if self.kind != MAXPOOL and not self.threshold > 0:
            raise ValueError("threshold must be > 0")
        if self.kind == DENSE and self.units < 1:
            raise ValueError("dense layer needs units >= 1")
        if self.kind == CONV2D and self.channels < 1:
            raise ValueError("conv2d layer needs channels >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.normalization not in ("none", "batch_norm"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.kind == MAXPOOL and self.normalization != "none":
            raise ValueError("max-pool layers cannot be normalised")

    @property
    def has_weights(self) -> bool:
        return self.kind in (DENSE, CONV2D)


def dense(units, threshold, relu=True, normalization="none") -> LayerSpec:
    return LayerSpec(DENSE, units=units, threshold=threshold, relu=relu, normalization=normalization)


def conv2d(channels, threshold, kernel=(3, 3), stride=1, normalization="none") -> LayerSpec:
    return LayerSpec(CONV2D, channels=channels, kernel=kernel, stride=stride,
                     threshold=threshold, normalization=normalization)


def maxpool(size=2) -> LayerSpec:
    return LayerSpec(MAXPOOL, kernel=(size, size), stride=size)


def _output_shape(layer: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    if layer.kind == DENSE:
        return (layer.units,)
    if len(in_shape) != 3:
        raise ValueError(f"{layer.kind} layer needs an (H, W, C) input, got {in_shape}")
    h, w, c = in_shape
    kh, kw = layer.kernel
    s = layer.stride
    if h < kh or w < kw or (h - kh) % s or (w - kw) % s:
        raise ValueError(f"kernel {layer.kernel}/stride {s} does not tile input {in_shape}")
    out_hw = ((h - kh) // s + 1, (w - kw) // s + 1)
    return out_hw + ((layer.channels,) if layer.kind == CONV2D else (c,))


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    time_outs: tuple[float, ...]
    encoding_offset: float = 1.0
    encoding_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "time_outs", tuple(float(t) for t in self.time_outs))
        if len(self.time_outs) != len(self.layers):
            raise ValueError("need one time_out per layer")
        if any(not t > 0 for t in self.time_outs):
            raise ValueError("time_outs must be > 0")
        self.shapes  # validates composition

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        out = [self.input_shape]
        for layer in self.layers:
            out.append(_output_shape(layer, out[-1]))
        return out

    @property
    def n_classes(self) -> int:
        return int(np.prod(self.shapes[-1]))

    def fan_in(self, index: int) -> int:
        layer = self.layers[index]
        in_shape = self.shapes[index]
        if layer.kind == DENSE:
            return int(np.prod(in_shape))
        kh, kw = layer.kernel
        return kh * kw * in_shape[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [asdict(layer) for layer in self.layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = [LayerSpec(**{**ld, "kernel": tuple(ld["kernel"])}) for ld in d["layers"]]
        return cls(tuple(d["input_shape"]), tuple(layers), tuple(d["time_outs"]),
                   d.get("encoding_offset", 1.0), d.get("encoding_scale", 1.0))


def default_time_outs(layers: Sequence[LayerSpec], input_max_time: float, max_delay: float,
                      factor: float = 2.0) -> tuple[float, ...]:
    """``factor * (latest input time + largest delay) + threshold``, chained layer by layer.

    A rail whose arrivals are all in by ``T`` fires by ``T + threshold``, so
    the bound leaves room for large thresholds.  Max-pool layers do not add
    latency and inherit the previous bound.
    """
    outs = []
    t = input_max_time
    for layer in layers:
        if layer.has_weights:
            t = factor * (t + max_delay) + layer.threshold
        outs.append(t)
    return tuple(outs)


@dataclass
class LayerParams:
    w_plus: np.ndarray | None = None
    w_minus: np.ndarray | None = None
    bn_scale: np.ndarray | None = None
    bn_shift: np.ndarray | None = None
    bn_mean: np.ndarray | None = None
    bn_var: np.ndarray | None = None

    NAMES: ClassVar[tuple[str, ...]] = ("w_plus", "w_minus", "bn_scale", "bn_shift", "bn_mean", "bn_var")

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(n, getattr(self, n)) for n in self.NAMES if getattr(self, n) is not None]


@dataclass
class LayerRecord:
    """Everything one layer produced for a batch; enough to backpropagate."""

    kind: str
    in_plus: np.ndarray
    in_minus: np.ndarray
    raw_plus: np.ndarray | None = None     # solver output, NEVER as inf
    raw_minus: np.ndarray | None = None
    count_plus: np.ndarray | None = None   # causal-set sizes
    count_minus: np.ndarray | None = None
    clamped: np.ndarray | None = None      # differential ReLU took the (t-, t-) branch
    out_plus: np.ndarray | None = None     # effective times handed downstream
    out_minus: np.ndarray | None = None
    rows_plus: np.ndarray | None = None    # per-row inputs fed to the kernel
    rows_minus: np.ndarray | None = None
    pool_index: np.ndarray | None = None
    bn_cache: tuple | None = None


@dataclass
class ForwardResult:
    logits: np.ndarray
    records: list[LayerRecord] = field(default_factory=list)

    @property
    def winners(self) -> np.ndarray:
        return argmax_first(self.logits)


def argmax_first(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ``np.argmax`` already breaks ties by lowest index."""
    return np.argmax(logits, axis=-1)


def differential_relu(t_plus, t_minus):
    """Pass ``(t+, t-)`` through when ``t+ >= t-``, otherwise ``(t-, t-)``.

    Works on floats or arrays; returns ``(t_plus, t_minus, clamped)``.
    NEVER is an ordinary (largest) time here.
    """
    tp = np.asarray(t_plus, dtype=np.float64)
    tm = np.asarray(t_minus, dtype=np.float64)
    clamped = tp < tm
    out = np.where(clamped, tm, tp)
    if out.ndim == 0:
        return float(out), float(tm), bool(clamped)
    return out, tm, clamped


def neuron_forward(inputs: Sequence[DifferentialTime], weights: Sequence[DelayWeight], tau_m: float,
                   time_out: float = NEVER) -> tuple[DifferentialTime, tuple[CausalSolve, CausalSolve]]:
    """Both raw rail times of one differential unit plus their causal sets.

    Causal indices refer to the arrival list ``[plus-pair arrivals for every
    input j] + [minus-pair arrivals for every input j]`` of each rail.  NEVER
    inputs never arrive.
    """
    if len(inputs) != len(weights):
        raise ValueError("one weight per input")
    params = NeuronParams(tau_m, time_out)
    tp = [x.t_plus for x in inputs]
    tm = [x.t_minus for x in inputs]
    wp = [w.w_plus for w in weights]
    wm = [w.w_minus for w in weights]
    plus = [a + b for a, b in zip(tp, wp)] + [a + b for a, b in zip(tm, wm)]
    minus = [a + b for a, b in zip(tp, wm)] + [a + b for a, b in zip(tm, wp)]
    solves = []
    for arrivals in (plus, minus):
        keep = [i for i, a in enumerate(arrivals) if math.isfinite(a)]
        s = solve_spike_time([arrivals[i] for i in keep], params)
        solves.append(CausalSolve(s.t_z, tuple(keep[i] for i in s.causal_set)))
    return DifferentialTime(solves[0].t_z, solves[1].t_z), (solves[0], solves[1])


def _patches(x: np.ndarray, kernel: tuple[int, int], stride: int) -> np.ndarray:
    """(B, H, W, C) -> (B, Ho, Wo, kh*kw*C) receptive fields, row-major (kh, kw, C)."""
    kh, kw = kernel
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]                    # (B, Ho, Wo, C, kh, kw)
    win = win.transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(win).reshape(win.shape[:3] + (kh * kw * x.shape[3],))


def _fold_patches(grad: np.ndarray, in_shape: tuple[int, ...], kernel, stride) -> np.ndarray:
    """Adjoint of ``_patches``."""
    b, ho, wo, _ = grad.shape
    kh, kw = kernel
    c = in_shape[-1]
    g = grad.reshape(b, ho, wo, kh, kw, c)
    out = np.zeros((b,) + tuple(in_shape))
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += g[:, :, :, i, j, :]
    return out


def _maxpool(tp, tm, size):
    b, h, w, c = tp.shape
    ho, wo = h // size, w // size
    def blocks(a):
        a = a[:, :ho * size, :wo * size].reshape(b, ho, size, wo, size, c)
        return a.transpose(0, 1, 3, 5, 2, 4).reshape(b, ho, wo, c, size * size)
    bp, bm = blocks(tp), blocks(tm)
    idx = np.argmax(bp - bm, axis=-1)
    op = np.take_along_axis(bp, idx[..., None], -1)[..., 0]
    om = np.take_along_axis(bm, idx[..., None], -1)[..., 0]
    return op, om, idx


def _unpool(g, idx, size, in_shape):
    b, ho, wo, c = g.shape
    blk = np.zeros((b, ho, wo, c, size * size))
    np.put_along_axis(blk, idx[..., None], g[..., None], -1)
    blk = blk.reshape(b, ho, wo, c, size, size).transpose(0, 1, 4, 2, 5, 3)
    out = np.zeros((b,) + tuple(in_shape))
    out[:, :ho * size, :wo * size] = blk.reshape(b, ho * size, wo * size, c)
    return out


class Network:
    """A ``NetworkSpec`` plus its delays (and batch-norm state, if any)."""

    def __init__(self, spec: NetworkSpec, params: list[LayerParams]):
        if len(params) != len(spec.layers):
            raise ValueError("one LayerParams per layer")
        self.spec = spec
        self.params = params
        shapes = spec.shapes
        for i, (layer, p) in enumerate(zip(spec.layers, params)):
            if not layer.has_weights:
                continue
            want = (int(np.prod(shapes[i + 1][-1:])) if layer.kind == CONV2D else layer.units,
                    spec.fan_in(i))
            for w in (p.w_plus, p.w_minus):
                if w is None or w.shape != want:
                    raise ValueError(f"layer {i}: expected delay matrices of shape {want}")

    @classmethod
    def initialise(cls, spec: NetworkSpec, rng: np.random.Generator, mean=0.5, std=0.1) -> "Network":
        params = []
        shapes = spec.shapes
        for i, layer in enumerate(spec.layers):
            p = LayerParams()
            if layer.has_weights:
                n_out = layer.channels if layer.kind == CONV2D else layer.units
                shape = (n_out, spec.fan_in(i))
                p.w_plus = np.maximum(rng.normal(mean, std, shape), 0.0)
                p.w_minus = np.maximum(rng.normal(mean, std, shape), 0.0)
                if layer.normalization == "batch_norm":
                    n = shapes[i + 1][-1]
                    p.bn_scale, p.bn_shift = np.ones(n), np.zeros(n)
                    p.bn_mean, p.bn_var = np.zeros(n), np.ones(n)
            params.append(p)
        return cls(spec, params)

    def copy(self) -> "Network":
        return Network(self.spec, [LayerParams(**{n: a.copy() for n, a in p.arrays()}) for p in self.params])

    def delay_arrays(self) -> list[np.ndarray]:
        out = []
        for p in self.params:
            if p.w_plus is not None:
                out += [p.w_plus, p.w_minus]
        return out

    def neuron_params(self, index: int) -> NeuronParams:
        return NeuronParams(self.spec.layers[index].threshold, self.spec.time_outs[index])

    def with_thresholds(self, thresholds: Sequence[float]) -> "Network":
        layers = tuple(LayerSpec(**{**asdict(layer), "threshold": g}) if layer.has_weights else layer
                       for layer, g in zip(self.spec.layers, thresholds))
        spec = NetworkSpec(self.spec.input_shape, layers, self.spec.time_outs,
                           self.spec.encoding_offset, self.spec.encoding_scale)
        return Network(spec, self.params)

    # ----------------------------------------------------------------- forward
    def forward(self, t_plus: np.ndarray, t_minus: np.ndarray, training: bool = False,
                keep_rows: bool = False) -> ForwardResult:
        """Evaluate a batch; inputs have shape ``(B,) + input_shape``.

        ``training`` uses batch statistics for batch-norm layers and keeps
        the per-row kernel inputs needed by the backward pass.
        """
        tp = np.asarray(t_plus, dtype=np.float64)
        tm = np.asarray(t_minus, dtype=np.float64)
        if tp.shape[1:] != self.spec.input_shape:
            tp = tp.reshape((-1,) + self.spec.input_shape)
            tm = tm.reshape((-1,) + self.spec.input_shape)
        records = []
        for i, layer in enumerate(self.spec.layers):
            rec = self._layer(i, layer, tp, tm, training, keep_rows or training)
            records.append(rec)
            tp, tm = rec.out_plus, rec.out_minus
        b = tp.shape[0]
        logits = (tp - tm).reshape(b, -1)
        return ForwardResult(logits, records)

    def _layer(self, i, layer, tp, tm, training, keep_rows) -> LayerRecord:
        rec = LayerRecord(layer.kind, tp, tm)
        if layer.kind == MAXPOOL:
            rec.out_plus, rec.out_minus, rec.pool_index = _maxpool(tp, tm, layer.kernel[0])
            return rec
        p = self.params[i]
        b = tp.shape[0]
        if layer.kind == DENSE:
            rows_p, rows_m = tp.reshape(b, -1), tm.reshape(b, -1)
            out_shape = (b, layer.units)
        else:
            rows_p = _patches(tp, layer.kernel, layer.stride)
            rows_m = _patches(tm, layer.kernel, layer.stride)
            out_shape = rows_p.shape[:3] + (layer.channels,)
            rows_p = rows_p.reshape(-1, rows_p.shape[-1])
            rows_m = rows_m.reshape(-1, rows_m.shape[-1])
        rp, rm, cp, cm = kernels.layer_forward_rows(
            np.ascontiguousarray(rows_p), np.ascontiguousarray(rows_m),
            p.w_plus, p.w_minus, float(layer.threshold), float(self.spec.time_outs[i]))
        rec.raw_plus, rec.raw_minus = rp.reshape(out_shape), rm.reshape(out_shape)
        rec.count_plus, rec.count_minus = cp.reshape(out_shape), cm.reshape(out_shape)
        if keep_rows:
            rec.rows_plus, rec.rows_minus = rows_p, rows_m
        t_out = self.spec.time_outs[i]
        ep = np.where(np.isfinite(rec.raw_plus), rec.raw_plus, t_out)
        em = np.where(np.isfinite(rec.raw_minus), rec.raw_minus, t_out)
        if layer.normalization == "batch_norm":
            ep, rec.bn_cache = self._batch_norm(p, ep, em, training)
        if layer.relu:
            ep, em, rec.clamped = differential_relu(ep, em)
        else:
            rec.clamped = np.zeros(ep.shape, dtype=bool)
        rec.out_plus, rec.out_minus = ep, em
        return rec

    @staticmethod
    def _batch_norm(p: LayerParams, ep, em, training, momentum=0.9):
        # standardise the encoded value, re-attach it to the minus rail
        v = ep - em
        axes = tuple(range(v.ndim - 1))
        if training:
            mu = v.mean(axis=axes)
            var = v.var(axis=axes)
            p.bn_mean[:] = momentum * p.bn_mean + (1 - momentum) * mu
            p.bn_var[:] = momentum * p.bn_var + (1 - momentum) * var
        else:
            mu, var = p.bn_mean, p.bn_var
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (v - mu) * inv
        return em + p.bn_scale * xhat + p.bn_shift, (xhat, inv, training)

    def predict(self, t_plus, t_minus, batch_size: int = 1000) -> np.ndarray:
        out = []
        for s in range(0, len(t_plus), batch_size):
            out.append(self.forward(t_plus[s:s + batch_size], t_minus[s:s + batch_size]).winners)
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    # -------------------------------------------------------------- model file
    def to_bytes(self) -> bytes:
        arrays = []
        layer_arrays = []
        for p in self.params:
            names = []
            for name, a in p.arrays():
                names.append([name, list(a.shape)])
                arrays.append(np.ascontiguousarray(a, dtype="<f8"))
            layer_arrays.append(names)
        header = {"network": self.spec.to_dict(), "arrays": layer_arrays}
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        buf = io.BytesIO()
        buf.write(MODEL_MAGIC)
        buf.write(struct.pack("<HI", MODEL_VERSION, len(hb)))
        buf.write(hb)
        for a in arrays:
            buf.write(a.tobytes(order="C"))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Network":
        try:
            return cls._from_bytes(data)
        except ModelFormatError:
            raise
        except (struct.error, ValueError, KeyError, TypeError, UnicodeDecodeError) as e:
            raise ModelFormatError(f"corrupt model file ({e})") from None

    @classmethod
    def _from_bytes(cls, data: bytes) -> "Network":
        if data[:8] != MODEL_MAGIC:
            raise ModelFormatError("not a TEMP model file")
        version, hlen = struct.unpack_from("<HI", data, 8)
        if version != MODEL_VERSION:
            raise ModelFormatError(f"model version {version}, this build reads {MODEL_VERSION}")
        off = 14
        header = json.loads(data[off:off + hlen].decode())
        off += hlen
        spec = NetworkSpec.from_dict(header["network"])
        params = []
        for names in header["arrays"]:
            p = LayerParams()
            for name, shape in names:
                if name not in LayerParams.NAMES:
                    raise ModelFormatError(f"unknown array {name!r}")
                n = int(np.prod(shape))
                if off + 8 * n > len(data):
                    raise ModelFormatError("truncated model file")
                a = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
                setattr(p, name, a.astype(np.float64))
                off += 8 * n
            params.append(p)
        if off != len(data):
            raise ModelFormatError("trailing bytes in model file")
        return cls(spec, params)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Network":
        return cls.from_bytes(Path(path).read_bytes())


def layer_forward(t_plus: np.ndarray, t_minus: np.ndarray, layer: LayerSpec, params: LayerParams,
                  time_out: float = NEVER) -> LayerRecord:
    """Evaluate one layer on a batch of input pairs."""
    in_shape = t_plus.shape[1:]
    spec = NetworkSpec(in_shape, (layer,), (time_out,))
    return Network(spec, [params])._layer(0, layer, t_plus, t_minus, False, True)


def network_forward(net: Network, t_plus, t_minus) -> ForwardResult:
    return net.forward(t_plus, t_minus)
