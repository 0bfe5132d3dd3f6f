"""``temp`` command line.

    temp train        --config run.toml [--task xor] [--seed N] [--out DIR]
    temp infer        --model model.bin [--input x.csv] [--fabric Q | --dense]
    temp sweep-gamma  --config sweep.toml [--model model.bin]
    temp patterns     --model model.bin
    temp dynamics
    temp lif-battery
    temp plot         a.csv [b.csv ...]

Exit codes: 0 success, 2 configuration error, 3 data or model-file error,
4 numeric divergence.  Every CSV starts with a ``# tempnet <version>
config <hash>`` line.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, aer, analysis, lif, plot
from .core import Mode, NeuronParams, leaky_membrane
from .config import MNIST_TASKS, ConfigError, config_hash, load, resolve
from .data import DataError, Dataset, load_mnist, synthetic
from .network import LayerSpec, ModelFormatError, Network, NetworkSpec, default_time_outs
from .train import EncoderConfig, EncodingError, TrainConfig, TrainingDiverged, encode_input, train

log = logging.getLogger("tempnet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


# ------------------------------------------------------------------ helpers
def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _stamp(cfg: dict) -> str:
    return f"tempnet {__version__} config {config_hash(cfg)}"


def _table_csv(header, rows, comment) -> str:
    buf = io.StringIO()
    buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue()


def layer_specs(cfg: dict) -> tuple[LayerSpec, ...]:
    out = []
    for d in cfg["network"]["layers"]:
        d = dict(d)
        if d["kind"] == "maxpool":
            size = d.get("size", 2)
            out.append(LayerSpec("maxpool", kernel=(size, size), stride=size))
            continue
        d.pop("size", None)
        if "kernel" in d:
            d["kernel"] = tuple(d["kernel"])
        out.append(LayerSpec(**d))
    return tuple(out)


def encoder(cfg: dict) -> EncoderConfig:
    return EncoderConfig(cfg["encoder"]["offset"], cfg["encoder"]["scale"])


def build_spec(cfg: dict, input_shape, layers=None) -> NetworkSpec:
    layers = layers or layer_specs(cfg)
    enc = encoder(cfg)
    net = cfg["network"]
    outs = default_time_outs(layers, enc.max_time, net["max_delay"], net["time_out_factor"])
    try:
        return NetworkSpec(tuple(input_shape), layers, outs, enc.offset, enc.scale)
    except ValueError as e:
        raise ConfigError("network.layers", str(e)) from None


def load_dataset(cfg: dict, data_dir=None) -> Dataset:
    task = cfg["experiment"]["task"]
    d = cfg["data"]
    if task in MNIST_TASKS:
        flat = cfg["network"]["layers"][0]["kind"] == "dense"
        return load_mnist(data_dir or d["dir"] or None, d["n_train"], d["n_val"], d["n_test"], flat=flat)
    kind = "moon" if task == "moon" else "xor"
    return synthetic(kind, d["n_train"] or 0, d["n_val"], d["n_test"] or 0, cfg["experiment"]["seed"],
                     d["noise"])


def train_config(cfg: dict, epochs: int | None = None) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(lr=t["lr"], beta1=t["beta1"], beta2=t["beta2"], adam_eps=t["adam_eps"],
                       batch_size=t["batch_size"], epochs=t["epochs"] if epochs is None else epochs,
                       lr_decay=t["lr_decay"], standardize_logits=t["standardize_logits"],
                       logit_scale=t["logit_scale"], init_mean=cfg["network"]["init_mean"],
                       init_std=cfg["network"]["init_std"], seed=cfg["experiment"]["seed"],
                       eval_batch=t["eval_batch"])


def fit(cfg: dict, ds: Dataset, layers=None, epochs=None):
    """Initialise from the seed and train; returns ``(net, history)``."""
    spec = build_spec(cfg, ds.feature_shape, layers)
    tc = train_config(cfg, epochs)
    rng = np.random.default_rng([tc.seed, 0])
    net = Network.initialise(spec, rng, tc.init_mean, tc.init_std)
    return train(ds, net, tc, encoder(cfg))


def _load_model(path) -> Network:
    try:
        return Network.load(path)
    except OSError as e:
        raise DataError(f"{path}: {e.strerror}") from None
    except ModelFormatError as e:
        raise ModelFormatError(f"{path}: {e}") from None


def _model_encoder(net: Network) -> EncoderConfig:
    return EncoderConfig(net.spec.encoding_offset, net.spec.encoding_scale)


# ----------------------------------------------------------------- commands
def cmd_train(cfg: dict, args) -> int:
    out = Path(cfg["experiment"]["out"])
    ds = load_dataset(cfg, args.data_dir)
    started = time.perf_counter()
    net, hist = fit(cfg, ds)
    out.mkdir(parents=True, exist_ok=True)
    net.save(out / "model.bin")
    _write(out / "history.csv", hist.to_csv(_stamp(cfg)))
    _write(out / "summary.csv", _table_csv(["metric", "value"], [("test_accuracy", hist.test_acc)], _stamp(cfg)))
    print(f"test accuracy {hist.test_acc:.4f} ({time.perf_counter() - started:.1f} s) -> {out}")
    return EXIT_OK


def read_inputs(path, n_features: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Feature CSV: header row, one row per sample, optional trailing ``label`` column."""
    text = Path(path).read_text()
    rows = [r for r in csv.reader(line for line in text.splitlines() if not line.startswith("#")) if r]
    if not rows:
        return np.zeros((0, n_features)), None
    header, body = rows[0], rows[1:]
    has_label = header[-1] == "label"
    width = len(header) - has_label
    if width != n_features:
        raise DataError(f"{path}: {width} feature columns, model expects {n_features}")
    try:
        x = np.array([[float(v) for v in r[:width]] for r in body]).reshape(len(body), width)
        y = np.array([int(r[-1]) for r in body], dtype=np.int64) if has_label else None
    except (ValueError, IndexError) as e:
        raise DataError(f"{path}: {e}") from None
    return x, y


def cmd_infer(cfg: dict, args) -> int:
    if not args.model:
        raise ConfigError("--model", "required")
    net = _load_model(args.model)
    enc = _model_encoder(net)
    n_features = int(np.prod(net.spec.input_shape))
    if args.input:
        x, y = read_inputs(args.input, n_features)
    else:
        ds = load_dataset(cfg, args.data_dir)
        n = args.limit if args.limit is not None else cfg["fabric"]["n_samples"]
        x, y = ds.test_x[:n], ds.test_y[:n]
    x = x.reshape((len(x),) + net.spec.input_shape) if len(x) else x
    out = Path(cfg["experiment"]["out"])
    stamp = _stamp(cfg)
    rows, raster = [], []
    if len(x):
        tp, tm = encode_input(x, enc)
        if args.fabric:
            fnet = aer.compile_network(net, args.fabric, args.delta or None)
            runs = aer.fabric_forward(fnet, tp, tm)
            logits = np.stack([r.logits for r in runs])
            for s, r in enumerate(runs):
                for li in range(len(r.raw_plus)):
                    for pol, arr in ((0, r.raw_plus[li]), (1, r.raw_minus[li])):
                        raster += [(s, li, int(n), pol, float(arr[n])) for n in np.nonzero(np.isfinite(arr))[0]]
            raster.sort()
        else:
            logits = []
            for s in range(0, len(tp), 500):
                f = net.forward(tp[s:s + 500], tm[s:s + 500])
                logits.append(f.logits)
                raster += analysis.raster_rows(f, s)
            logits = np.concatenate(logits)
        pred = np.argmax(logits, axis=1)
        for i in range(len(x)):
            rows.append([i, int(pred[i])] + ([int(y[i])] if y is not None else []) + [float(v) for v in logits[i]])
        if y is not None:
            print(f"accuracy {(pred == y).mean():.4f} on {len(x)} samples")
    n_out = net.spec.n_classes
    header = ["sample", "prediction"] + (["label"] if y is not None else []) + [f"logit{k}" for k in range(n_out)]
    _write(out / "predictions.csv", _table_csv(header, rows, stamp))
    _write(out / "raster.csv", analysis.raster_csv(raster, stamp))
    return EXIT_OK


def cmd_sweep_gamma(cfg: dict, args) -> int:
    sw = cfg["sweep"]
    out = Path(cfg["experiment"]["out"])
    ds = load_dataset(cfg, args.data_dir)
    rows = []
    if sw["mode"] == "evaluate":
        if not args.model:
            raise ConfigError("--model", "evaluate mode needs a trained model")
        net = _load_model(args.model)
        x, y = ds.test_x[:sw["n_eval"]], ds.test_y[:sw["n_eval"]]
        tp, tm = encode_input(x.reshape((len(x),) + net.spec.input_shape), _model_encoder(net))
        for g in sw["gammas"]:
            rows.append(analysis.evaluate_gamma(net, float(g), tp, tm, y, sw["layer"]))
    else:
        base = layer_specs(cfg)
        for g in sw["gammas"]:
            layers = list(base)
            k = sw["layer"]
            if not 0 <= k < len(layers) or not layers[k].has_weights:
                raise ConfigError("sweep.layer", "must index a dense or conv2d layer")
            layers[k] = replace(layers[k], threshold=float(g))
            net, hist = fit(cfg, ds, tuple(layers), sw["epochs"])
            x, y = ds.test_x[:sw["n_eval"]], ds.test_y[:sw["n_eval"]]
            tp, tm = encode_input(x, encoder(cfg))
            r = analysis.evaluate_gamma(net, float(g), tp, tm, y, k)
            log.info("gamma %g accuracy %.4f latency %.3f", g, r.accuracy, r.latency)
            rows.append(r)
    _write(out / "sweep.csv", analysis.sweep_csv(rows, _stamp(cfg)))
    _write(out / "sweep.svg", plot.sweep_svg([r.gamma for r in rows], [r.latency for r in rows],
                                             [r.accuracy for r in rows]))
    for r in rows:
        print(f"gamma {r.gamma:g}: latency {r.latency:.4f} accuracy {r.accuracy:.4f} A_h {r.active_fraction:.3f}")
    return EXIT_OK


def cmd_patterns(cfg: dict, args) -> int:
    if not args.model:
        raise ConfigError("--model", "required")
    net = _load_model(args.model)
    ds = load_dataset(cfg, args.data_dir)
    n = cfg["patterns"]["n_samples"]
    x, y = ds.test_x[:n], ds.test_y[:n]
    tp, tm = encode_input(x.reshape((len(x),) + net.spec.input_shape), _model_encoder(net))
    parts = [net.forward(tp[s:s + 500], tm[s:s + 500]) for s in range(0, len(tp), 500)]
    hidden = [i for i, l in enumerate(net.spec.layers) if l.has_weights][0]
    pats = np.concatenate([analysis.hidden_pattern(f, hidden) for f in parts])
    t_out = net.spec.time_outs[hidden]
    dist = analysis.class_distance_matrix(pats, y, t_out, net.spec.n_classes)
    intra, inter = analysis.intra_inter(dist)
    units = pats.shape[1] // 2
    corr = analysis.firing_correlation(pats[:, :units])
    edges, hp, hm = analysis.delay_histograms(net, cfg["patterns"]["bins"])
    raster = []
    for k, f in enumerate(parts):
        raster += analysis.raster_rows(f, 500 * k)
    stamp = _stamp(cfg)
    out = Path(cfg["experiment"]["out"])
    _write(out / "pattern_distance.csv", analysis.matrix_csv(
        dist, "class", f"{stamp}; d(a,b) = mean over hidden rails |t_a - t_b| / time_out, "
                       f"silent rails at time_out; entry = mean over sample pairs, self-pairs excluded"))
    _write(out / "firing_correlation.csv", analysis.matrix_csv(
        corr, "unit", f"{stamp}; Pearson correlation of plus-rail spike times across samples, "
                      f"silent rails at time_out"))
    _write(out / "delay_histograms.csv", analysis.histogram_csv(edges, hp, hm, stamp))
    _write(out / "raster.csv", analysis.raster_csv(raster, stamp))
    summary = [("samples", len(x)), ("intra_class_distance", intra), ("inter_class_distance", inter),
               ("causal_fraction", analysis.causal_fraction(parts, net, hidden)),
               ("causal_fraction_per_arrival", analysis.causal_fraction(parts, net, hidden, per="arrival")),
               ("random_delay_causal_fraction", analysis.random_delay_causal_fraction(
                   net, tp, tm, hidden, np.random.default_rng([cfg["experiment"]["seed"], 1]),
                   cfg["network"]["init_mean"], cfg["network"]["init_std"])),
               ("active_fraction", analysis.active_fraction(parts, hidden))]
    _write(out / "patterns_summary.csv", _table_csv(["metric", "value"], summary, stamp))
    _write(out / "pattern_distance.svg", plot.matrix_svg(dist, "class pattern distance"))
    _write(out / "firing_correlation.svg", plot.matrix_svg(corr, "hidden firing-time correlation"))
    print(f"intra {intra:.4f} inter {inter:.4f}")
    return EXIT_OK


def cmd_dynamics(cfg: dict, args) -> int:
    d = cfg["dynamics"]
    out = Path(cfg["experiment"]["out"])
    rng = np.random.default_rng(cfg["experiment"]["seed"]) if d["poisson"] else None
    grid = np.arange(0.0, d["duration_ms"], 1.0)
    spikes, traces, counts = [], [], []
    series = {}
    for rate in d["rates_hz"]:
        arr = analysis.input_train(rate, d["duration_ms"], rng)
        for g in d["gammas"]:
            nl = analysis.nonleaky_train(arr, g, d["window_ms"])
            lk = leaky_membrane(arr.tolist(), NeuronParams(g, mode=Mode.LEAKY, leak_offset=d["leak_offset"]))
            v_nl = analysis.nonleaky_trace(arr, g, d["window_ms"], grid)
            v_lk = analysis.leaky_trace(arr, lk, d["leak_offset"], grid)
            for mode, sp, v in (("non_leaky", nl, v_nl), ("leaky", lk, v_lk)):
                spikes += [(mode, float(rate), float(g), float(t)) for t in sp]
                traces += [(mode, float(rate), float(g), float(t), float(u)) for t, u in zip(grid, v)]
                counts.append((mode, float(rate), float(g), len(sp)))
                series[f"{mode} {rate:g} Hz g={g:g}"] = v
    stamp = _stamp(cfg)
    _write(out / "dynamics_spikes.csv", _table_csv(["mode", "rate_hz", "gamma", "spike_time"], spikes, stamp))
    _write(out / "dynamics_trace.csv", _table_csv(["mode", "rate_hz", "gamma", "time", "potential"], traces, stamp))
    _write(out / "dynamics_counts.csv", _table_csv(["mode", "rate_hz", "gamma", "spikes"], counts, stamp))
    leaky = {k: v for k, v in series.items() if k.startswith("leaky")}
    _write(out / "dynamics.svg", plot.curves_svg(grid, leaky, "time (ms)", "membrane", "leaky TEMP"))
    for c in counts:
        print(f"{c[0]:>9} {c[1]:g} Hz gamma {c[2]:g}: {c[3]} spikes")
    return EXIT_OK


def lif_report(cfg: dict) -> tuple[list[tuple], lif.CorrespondenceReport, str]:
    """Run the whole battery; returns summary rows, the n-LIF report and its CSV body."""
    c = cfg["lif"]
    rng = np.random.default_rng(cfg["experiment"]["seed"])
    p = lif.LifParams(C_m=c["C_m"], R=c["tau_m_factor"] * c["tau_s"] / c["C_m"], tau_s=c["tau_s"], v_th=c["v_th"])
    inst = lif.random_battery(rng, c["n_instances"], c["n_arrivals"], c["spread"])
    rep = lif.correspondence_check(inst, p, "nlif")
    rep_lif = lif.correspondence_check(inst[: max(2, c["n_instances"] // 5)], p, "lif")
    # closed-form oracles
    p1 = lif.LifParams(C_m=1.0, R=2.0, tau_s=1.0, v_th=0.3)
    nlif_err = abs(lif.nlif_spike_time([0.0], None, p1) - lif.nlif_single_spike_time(p1))
    lif_err = max(abs(lif.lif_spike_time([0.0] * n, None, p1) - lif.lif_coincident_spike_time(n, p1))
                  for n in (1, 2, 3))
    value_ok, slope_ok = lif.tangency_check(0.0)
    # smooth vs piecewise-linear transfer as the arrival spread grows
    trend = []
    for spread in (0.1, 0.5, 1.0, 2.0, 4.0, 8.0):
        errs = []
        for _ in range(100):
            tpl, tmi = rng.uniform(0, spread, 4), rng.uniform(0, spread, 4)
            wp, wm = rng.uniform(0, spread, 4), rng.uniform(0, spread, 4)
            s = lif.lse_transfer(tpl, tmi, wp, wm, 1.0)
            q = lif.pwl_transfer(tpl, tmi, wp, wm, 1.0)
            errs.append(abs(s[0] - q[0]))
        trend.append((spread, float(np.median(errs))))
    rows = [("tangency_value", value_ok), ("tangency_slope", slope_ok),
            ("nlif_closed_form_error", nlif_err), ("lif_closed_form_error", lif_err),
            ("rank_temp_nlif", rep.rank_temp), ("rank_ramp_nlif", rep.rank_ramp),
            ("rank_decay_nlif", rep.rank_decay), ("tracking_convention", rep.tracking_convention),
            ("rank_temp_lif", rep_lif.rank_temp),
            ("mean_abs_error_nlif", float(np.nanmean(np.abs(rep.error))))]
    rows += [(f"lse_pwl_median_error_spread_{s:g}", e) for s, e in trend]
    return rows, rep, lif.battery_csv(rep, "nlif", _stamp(cfg))


def cmd_lif_battery(cfg: dict, args) -> int:
    out = Path(cfg["experiment"]["out"])
    rows, rep, battery = lif_report(cfg)
    _write(out / "lif_battery.csv", battery)
    _write(out / "lif_summary.csv", _table_csv(["metric", "value"], rows, _stamp(cfg)))
    for k, v in rows:
        print(f"{k}: {v}")
    return EXIT_OK


PLOTTERS = {
    ("sample", "layer", "neuron", "polarity", "time"): "raster",
    ("gamma", "latency", "winner_t_minus", "accuracy", "active_fraction", "causal_fraction"): "sweep",
    ("epoch", "train_loss", "train_acc", "val_acc"): "history",
    ("mode", "rate_hz", "gamma", "time", "potential"): "trace",
    ("instance", "model", "spike_time", "error"): "battery",
}


def plot_csv(text: str) -> str:
    lines = [l for l in text.splitlines() if not l.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows:
        return plot.raster_svg([])
    header, body = tuple(rows[0]), [r for r in rows[1:] if r]
    if header[0] in ("class", "unit") and header[1:] == tuple(str(j) for j in range(len(header) - 1)):
        m = np.array([[float(v) for v in r[1:]] for r in body]) if body else np.zeros((0, 0))
        return plot.matrix_svg(m, header[0])
    kind = PLOTTERS.get(header)
    if kind is None:
        raise DataError(f"unrecognised CSV columns {list(header)}")
    if kind == "raster":
        _, parsed = analysis.parse_raster_csv(text)
        return plot.raster_svg(parsed)
    cols = list(zip(*body)) if body else [[] for _ in header]
    if kind == "sweep":
        return plot.sweep_svg([float(v) for v in cols[0]], [float(v) for v in cols[1]],
                              [float(v) for v in cols[3]])
    if kind == "history":
        x = [int(v) for v in cols[0]]
        return plot.curves_svg(x, {"train_loss": [float(v) for v in cols[1]],
                                   "val_acc": [float(v) for v in cols[3]]}, "epoch", "value", "training")
    if kind == "trace":
        series: dict[str, tuple[list, list]] = {}
        for r in body:
            key = f"{r[0]} {r[1]} Hz g={r[2]}"
            series.setdefault(key, ([], []))
            series[key][0].append(float(r[3]))
            series[key][1].append(float(r[4]))
        x = next(iter(series.values()))[0] if series else []
        return plot.curves_svg(x, {k: v[1] for k, v in series.items() if len(v[1]) == len(x)}, "time", "membrane")
    # battery: one bar per model with the mean absolute error
    errs: dict[str, list[float]] = {}
    for r in body:
        if r[3] not in ("nan", ""):
            errs.setdefault(r[1], []).append(abs(float(r[3])))
    names = sorted(errs)
    return plot.bars_svg(names, [float(np.mean(errs[k])) for k in names], "mean |error|")


def cmd_plot(cfg: dict, args) -> int:
    out = Path(cfg["experiment"]["out"])
    for name in args.inputs:
        p = Path(name)
        try:
            text = p.read_text()
        except OSError as e:
            raise DataError(f"{p}: {e.strerror}") from None
        _write(out / (p.stem + ".svg"), plot_csv(text))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "sweep-gamma": cmd_sweep_gamma,
    "patterns": cmd_patterns,
    "dynamics": cmd_dynamics,
    "lif-battery": cmd_lif_battery,
    "plot": cmd_plot,
}

DEFAULT_TASK = {"dynamics": "dynamics-demo", "lif-battery": "lif-battery", "sweep-gamma": "gamma-sweep"}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="temp", description="TEMP spiking network experiments")
    ap.add_argument("--version", action="version", version=f"tempnet {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment file")
    common.add_argument("--task", help="preset to start from (overrides experiment.task)")
    common.add_argument("--seed", type=int, help="overrides experiment.seed")
    common.add_argument("--out", help="output directory (overrides experiment.out)")
    common.add_argument("--data-dir", help="MNIST directory (else data.dir or $TEMP_DATA_DIR)")
    common.add_argument("-v", "--verbose", action="store_true")
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("infer", "sweep-gamma", "patterns"):
            p.add_argument("--model", help="trained model file")
        if name == "infer":
            p.add_argument("--input", help="feature CSV (header row, optional label column)")
            p.add_argument("--limit", type=int, help="number of test samples when no --input")
            g = p.add_mutually_exclusive_group()
            g.add_argument("--fabric", type=int, metavar="Q", help="route through a q-bit fabric")
            g.add_argument("--dense", action="store_true", help="dense evaluation (default)")
            p.add_argument("--delta", type=float, help="explicit fabric lattice step")
        if name == "plot":
            p.add_argument("inputs", nargs="*", help="CSV files")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        user = load(args.config) if args.config else {}
        user.setdefault("experiment", {})
        if args.seed is not None:
            user["experiment"]["seed"] = args.seed
        if args.out is not None:
            user["experiment"]["out"] = args.out
        task = args.task or (None if "task" in user["experiment"] else DEFAULT_TASK.get(args.command))
        cfg = resolve(user, task)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ModelFormatError, aer.FabricError, EncodingError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
