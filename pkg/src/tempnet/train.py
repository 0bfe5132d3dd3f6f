"""Supervised training of TEMP networks with exact spike-time gradients.

Within a fixed causal set a rail time is ``(gamma + sum(arrivals)) / |C|``,
so ``d t / d arrival = 1/|C|`` for causal arrivals and 0 otherwise.  Each
arrival is an input time plus a delay, so the same factor reaches both.
The forward ``LayerRecord`` list doubles as the gradient tape.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import CausalSolve
from .data import Dataset
from .network import DENSE, MAXPOOL, ForwardResult, Network, _fold_patches, _unpool
from . import kernels

log = logging.getLogger(__name__)

STD_EPS = 1e-5


class EncodingError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    """Feature ``x`` becomes ``(offset + scale*x, offset - scale*x)``."""

    offset: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise EncodingError("encoder scale must be > 0")
        if self.offset < 0:
            raise EncodingError("encoder offset must be >= 0")

    @property
    def max_time(self) -> float:
        return self.offset + self.scale


def encode_input(features, cfg: EncoderConfig) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise EncodingError("features must be finite")
    if x.size and cfg.offset - cfg.scale * np.abs(x).max() < 0:
        raise EncodingError(f"offset {cfg.offset} too small for |x| up to {np.abs(x).max()} "
                            f"at scale {cfg.scale}: spike times would be negative")
    return cfg.offset + cfg.scale * x, cfg.offset - cfg.scale * x


def decode_input(t_plus, t_minus, cfg: EncoderConfig) -> np.ndarray:
    return (np.asarray(t_plus) - np.asarray(t_minus)) / (2 * cfg.scale)


def spike_time_grad(solve: CausalSolve, n_arrivals: int) -> tuple[np.ndarray, float]:
    """``(d t_z / d arrival_k for every k, d t_z / d gamma)``.

    A neuron that did not fire has no gradient.
    """
    g = np.zeros(n_arrivals)
    if not solve.fired or not solve.causal_set:
        return g, 0.0
    inv = 1.0 / len(solve.causal_set)
    g[list(solve.causal_set)] = inv
    return g, inv


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.0
    step_count: int = 0
    _m: list = field(default_factory=list, repr=False)
    _v: list = field(default_factory=list, repr=False)

    @property
    def current_lr(self) -> float:
        # time-based decay: lr / (1 + decay * step)
        return self.lr / (1.0 + self.decay * self.step_count)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], nonneg: list[bool]) -> None:
        if not self._m:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        lr = self.current_lr
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v, proj in zip(params, grads, self._m, self._v, nonneg):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if proj:
                np.maximum(p, 0.0, out=p)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 1
    lr_decay: float = 0.0
    standardize_logits: bool = True
    logit_scale: float = 1.0
    init_mean: float = 0.5
    init_std: float = 0.1
    seed: int = 0
    eval_batch: int = 1000

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_decay < 0:
            raise ValueError("lr_decay must be >= 0")


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    test_acc: float | None = None
    seconds: float = 0.0

    def to_csv(self, comment: str | None = None) -> str:
        buf = io.StringIO()
        if comment:
            buf.write(f"# {comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_acc", "val_acc"])
        for r in self.rows:
            w.writerow([r["epoch"], repr(r["train_loss"]), repr(r["train_acc"]), repr(r["val_acc"])])
        return buf.getvalue()


# ------------------------------------------------------------------- loss
def softmax_xent(logits: np.ndarray, labels: np.ndarray, standardize: bool, scale: float = 1.0):
    """Mean cross-entropy and its gradient w.r.t. ``logits``.

    With ``standardize`` the logits are first mapped to ``(z - mean) / std``
    over the whole batch, std floored at 1e-5.  The (standardized) logits
    are then multiplied by ``scale`` before the softmax.
    """
    z = np.asarray(logits, dtype=np.float64)
    b = z.shape[0]
    if standardize:
        mu = z.mean()
        sd_raw = z.std()
        sd = max(sd_raw, STD_EPS)
        zs = (z - mu) / sd
    else:
        zs = z
    zs = zs * scale
    shifted = zs - zs.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()
    g = np.exp(logp)
    g[rows, labels] -= 1.0
    g *= scale / b
    zs = zs / scale
    if standardize:
        if sd_raw > STD_EPS:
            g = (g - g.mean() - zs * (g * zs).mean()) / sd
        else:
            g = (g - g.mean()) / sd
    return float(loss), g


def backward(net: Network, fwd: ForwardResult, g_logits: np.ndarray):
    """Gradients for every parameter array, ordered like ``trainable(net)``."""
    spec = net.spec
    gp = g_logits.reshape(fwd.records[-1].out_plus.shape)
    gm = -gp
    grads: list[list[np.ndarray]] = [[] for _ in spec.layers]
    for i in reversed(range(len(spec.layers))):
        layer = spec.layers[i]
        rec = fwd.records[i]
        p = net.params[i]
        if layer.kind == MAXPOOL:
            shape = rec.in_plus.shape
            gp = _unpool(gp, rec.pool_index, layer.kernel[0], shape[1:])
            gm = _unpool(gm, rec.pool_index, layer.kernel[0], shape[1:])
            continue
        if layer.relu:
            gm = gm + np.where(rec.clamped, gp, 0.0)
            gp = np.where(rec.clamped, 0.0, gp)
        bn_grads = []
        if layer.normalization == "batch_norm":
            xhat, inv, training = rec.bn_cache
            axes = tuple(range(xhat.ndim - 1))
            d_shift = gp.sum(axis=axes)
            d_scale = (gp * xhat).sum(axis=axes)
            dx = gp * p.bn_scale
            if training:
                n = xhat.size // xhat.shape[-1]
                dv = inv / n * (n * dx - dx.sum(axis=axes) - xhat * (dx * xhat).sum(axis=axes))
            else:
                dv = dx * inv
            gm = gm + gp - dv
            gp = dv
            bn_grads = [d_scale, d_shift]
        gp = np.where(np.isfinite(rec.raw_plus), gp, 0.0)
        gm = np.where(np.isfinite(rec.raw_minus), gm, 0.0)
        rows = rec.rows_plus.shape[0]
        dwp, dwm, dtp, dtm = kernels.layer_backward_rows(
            rec.rows_plus, rec.rows_minus, p.w_plus, p.w_minus,
            rec.raw_plus.reshape(rows, -1), rec.raw_minus.reshape(rows, -1),
            rec.count_plus.reshape(rows, -1), rec.count_minus.reshape(rows, -1),
            np.ascontiguousarray(gp.reshape(rows, -1)), np.ascontiguousarray(gm.reshape(rows, -1)))
        grads[i] = [dwp, dwm] + bn_grads
        if i == 0:
            break
        in_shape = rec.in_plus.shape
        if layer.kind == DENSE:
            gp, gm = dtp.reshape(in_shape), dtm.reshape(in_shape)
        else:
            out_hw = rec.raw_plus.shape[:3]
            gp = _fold_patches(dtp.reshape(out_hw + (-1,)), in_shape[1:], layer.kernel, layer.stride)
            gm = _fold_patches(dtm.reshape(out_hw + (-1,)), in_shape[1:], layer.kernel, layer.stride)
    return [g for layer_g in grads for g in layer_g]


def trainable(net: Network) -> tuple[list[np.ndarray], list[bool]]:
    """Parameter arrays in gradient order and whether each is a delay."""
    params, nonneg = [], []
    for layer, p in zip(net.spec.layers, net.params):
        if layer.has_weights:
            params += [p.w_plus, p.w_minus]
            nonneg += [True, True]
            if layer.normalization == "batch_norm":
                params += [p.bn_scale, p.bn_shift]
                nonneg += [False, False]
    return params, nonneg


def loss_and_grad(net: Network, t_plus, t_minus, labels, standardize: bool = True, training: bool = True,
                  scale: float = 1.0):
    """Mean loss over the batch, parameter gradients and the forward tape."""
    fwd = net.forward(t_plus, t_minus, training=training, keep_rows=True)
    loss, g = softmax_xent(fwd.logits, np.asarray(labels), standardize, scale)
    return loss, backward(net, fwd, g), fwd


def accuracy(net: Network, x, y, enc: EncoderConfig, batch: int = 1000) -> float:
    if len(x) == 0:
        return float("nan")
    tp, tm = encode_input(x, enc)
    return float((net.predict(tp, tm, batch) == y).mean())


def _check_finite(params: list[np.ndarray], where: str) -> None:
    if not all(np.isfinite(p).all() for p in params):
        raise TrainingDiverged(f"non-finite {where}")


def train(dataset: Dataset, net: Network, cfg: TrainConfig, enc: EncoderConfig,
          on_epoch: Callable[[dict], None] | None = None) -> tuple[Network, History]:
    """Adam on every delay, clamped at zero after each step."""
    rng = np.random.default_rng([cfg.seed, 1])
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.lr_decay)
    params, nonneg = trainable(net)
    hist = History()
    started = time.perf_counter()
    _check_finite(params, "initial parameters")
    tp_all, tm_all = encode_input(dataset.train_x, enc)
    n = len(tp_all)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            yb = dataset.train_y[idx]
            loss, grads, fwd = loss_and_grad(net, tp_all[idx], tm_all[idx], yb, cfg.standardize_logits,
                                             scale=cfg.logit_scale)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, batch {s // cfg.batch_size}")
            total_loss += loss * len(idx)
            correct += int((fwd.winners == yb).sum())
            opt.step(params, grads, nonneg)
            _check_finite(params, f"parameters after epoch {epoch}, batch {s // cfg.batch_size}")
        row = {"epoch": epoch, "train_loss": total_loss / n, "train_acc": correct / n,
               "val_acc": accuracy(net, dataset.val_x, dataset.val_y, enc, cfg.eval_batch)}
        hist.rows.append(row)
        log.info("epoch %d loss %.4f train %.4f val %.4f", epoch, row["train_loss"], row["train_acc"], row["val_acc"])
        if on_epoch:
            on_epoch(row)
    hist.test_acc = accuracy(net, dataset.test_x, dataset.test_y, enc, cfg.eval_batch)
    hist.seconds = time.perf_counter() - started
    return net, hist
