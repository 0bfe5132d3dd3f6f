"""Exit criteria, each a single test that records one PASS/FAIL line.

MNIST criteria use the cached runs from ``acceptance_runs.py`` (training
them on first use takes hours) and skip when the dataset is absent.
``TEMP_ACCEPT_CONV=1`` adds the 1-conv MNIST run to criterion 3.
"""

import os
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

import acceptance_runs
from conftest import ACCEPTANCE, mnist_dir
from oracles import finite_difference_check, lattice_network, random_dense_net, relative_error, \
    time_stepped_spike_time
from tempnet import analysis, aer, cli, lif
from tempnet.config import resolve
from tempnet.core import NEVER, NeuronParams, replay, solve_spike_time
from tempnet.network import Network
from tempnet.train import encode_input

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]


def record(n: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[f"{n} {title}"] = f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}"
    print(ACCEPTANCE[f"{n} {title}"])
    assert ok, detail


def skip(n: int, title: str, why: str) -> None:
    ACCEPTANCE[f"{n} {title}"] = f"[SKIP] {n:>2}. {title}: {why}"
    pytest.skip(why)


def timed_train(task: str, out, *extra) -> tuple[Network, float, float]:
    started = time.perf_counter()
    assert cli.main(["train", "--task", task, "--out", str(out), *extra]) == 0
    seconds = time.perf_counter() - started
    return Network.load(out / "model.bin"), acceptance_runs.summary_accuracy(out), seconds


@pytest.fixture(scope="module")
def xor_run(tmp_path_factory):
    return timed_train("xor", tmp_path_factory.mktemp("xor"))


@pytest.fixture(scope="module")
def mnist():
    d = mnist_dir()
    if d is None:
        return None
    out, timing = acceptance_runs.ensure("mnist-dense", d)
    cfg = resolve({}, "mnist-dense")
    ds = cli.load_dataset(cfg, str(d))
    net = Network.load(out / "model.bin")
    tp, tm = encode_input(ds.test_x, cli.encoder(cfg))
    return {"dir": out, "cpu_hours": timing["cpu_seconds"] / 3600, "net": net, "tp": tp, "tm": tm, "y": ds.test_y,
            "cfg": cfg, "data_dir": d, "acc": acceptance_runs.summary_accuracy(out)}


def test_01_xor(xor_run):
    _, acc, seconds = xor_run
    record(1, "XOR", acc >= 0.99 and seconds <= 300,
           f"test accuracy {acc:.4f} (>= 0.99) in {seconds:.0f} s (<= 300 s)")


def test_02_moon(tmp_path):
    accs, total = [], 0.0
    for seed in (0, 1, 2):
        _, acc, seconds = timed_train("moon", tmp_path / str(seed), "--seed", str(seed))
        accs.append(acc)
        total += seconds
    record(2, "MOON", min(accs) >= 0.985 and total <= 600,
           f"test accuracy {', '.join(f'{a:.4f}' for a in accs)} over seeds 0-2 (each >= 0.985) "
           f"in {total:.0f} s total (<= 600 s)")


def test_03_mnist(mnist):
    if mnist is None:
        skip(3, "MNIST", "dataset not found (set TEMP_DATA_DIR)")
    smoke_dir, smoke_t = acceptance_runs.ensure("mnist-smoke", mnist["data_dir"])
    smoke, smoke_min = acceptance_runs.summary_accuracy(smoke_dir), smoke_t["seconds"] / 60
    ok = mnist["acc"] >= 0.97 and mnist["cpu_hours"] <= 4 and smoke >= 0.92 and smoke_min <= 20
    detail = (f"dense 30 epochs {mnist['acc']:.4f} (>= 0.97) in {mnist['cpu_hours']:.2f} CPU h (<= 4 h); "
              f"10k smoke {smoke:.4f} (>= 0.92) in {smoke_min:.1f} min (<= 20 min)")
    if os.environ.get("TEMP_ACCEPT_CONV"):
        conv_dir, conv_t = acceptance_runs.ensure("mnist-conv", mnist["data_dir"])
        conv = acceptance_runs.summary_accuracy(conv_dir)
        ok = ok and conv >= 0.96
        detail += f"; 1-conv {conv:.4f} (>= 0.96) in {conv_t['cpu_seconds'] / 3600:.2f} CPU h"
    else:
        detail += "; 1-conv not run (TEMP_ACCEPT_CONV=1)"
    record(3, "MNIST", ok, detail)


def test_04_gradient_oracle():
    """Delay gradients on random small nets, through two losses.

    The linear probe ``sum(c * logits)`` checks the delay Jacobian itself and is
    well conditioned everywhere.  The standardized cross-entropy is checked where
    its logits spread at least 0.1: on nearly flat logits the standardization
    amplifies one-ulp changes of t+ - t- into spurious finite differences.
    """
    rng = np.random.default_rng(2024)
    probe_err, xent_err, boundary, silent = [], [], 0, 0
    while len(probe_err) < 200:
        sizes = (int(rng.integers(2, 5)),) + tuple(int(rng.integers(2, 5)) for _ in range(int(rng.integers(1, 3)))) \
            + (int(rng.integers(2, 4)),)
        net = random_dense_net(rng, sizes, time_out=50.0)
        tp = rng.uniform(0, 2, (4, sizes[0]))
        tm = rng.uniform(0, 2, (4, sizes[0]))
        y = rng.integers(0, sizes[-1], 4)
        c = rng.normal(size=(4, sizes[-1]))
        ana, num, used = finite_difference_check(net, tp, tm, y, probe=c)
        if not used.any():
            boundary += 1
            continue
        if np.abs(num[used]).max() < 1e-9:   # every output clamped: no delay reaches the logits
            silent += 1
            continue
        probe_err.append(relative_error(ana[used], num[used]))
        if np.ptp(net.forward(tp, tm).logits) >= 0.1:
            standardize = bool(rng.integers(0, 2))
            ana, num, used = finite_difference_check(net, tp, tm, y, standardize=standardize,
                                                     scale=6.0 if standardize else 1.0)
            if used.any() and np.abs(num[used]).max() > 0:
                xent_err.append(relative_error(ana[used], num[used]))
    worst, worst_x = max(probe_err), max(xent_err)
    record(4, "gradient oracle", worst <= 1e-4 and worst_x <= 1e-4,
           f"{len(probe_err)} networks, max relative error {worst:.2e} on the logit probe and {worst_x:.2e} "
           f"on the training loss ({len(xent_err)} nets) (<= 1e-4); skipped {boundary} all-boundary and "
           f"{silent} fully clamped networks")


def test_05_solver_oracle():
    rng = np.random.default_rng(5)
    dt, worst, replay_ok, fired = 1e-4, 0.0, True, 0
    for _ in range(10_000):
        n = int(rng.integers(1, 9))
        arrivals = rng.uniform(0, 1, n)
        gamma = float(rng.uniform(0.01, 2.0))
        p = NeuronParams(gamma)
        exact = solve_spike_time(arrivals, p).t_z
        stepped = time_stepped_spike_time(arrivals, gamma, dt)
        worst = max(worst, abs(exact - stepped))
        replay_ok &= replay(arrivals, p).fired_at == exact
        fired += exact != NEVER
    record(5, "solver oracle", worst <= 2 * dt and replay_ok and fired == 10_000,
           f"10000 instances, max |exact - time-stepped| {worst:.2e} (<= {2 * dt:.0e}); "
           f"step_event replay bitwise equal: {replay_ok}")


def test_06_routed_dense(mnist):
    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(1000):
        q = int(rng.integers(1, 5))
        delta = float(rng.choice([0.5, 0.25, 0.125]))
        sizes = (int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(1, 4)))
        net = lattice_network(rng, sizes, delta, q)
        fnet = aer.compile_network(net, q, delta=delta)
        tp = rng.integers(0, 16, (3, sizes[0])) * delta
        tm = rng.integers(0, 16, (3, sizes[0])) * delta
        f = net.forward(tp, tm)
        for b, run in enumerate(aer.fabric_forward(fnet, tp, tm)):
            for li, rec in enumerate(f.records):
                mismatches += not (np.array_equal(run.raw_plus[li], rec.raw_plus[b])
                                   and np.array_equal(run.raw_minus[li], rec.raw_minus[b]))
    detail = f"1000 lattice networks, {mismatches} layer mismatches against the dense forward"
    ok = mismatches == 0
    if mnist is None:
        detail += "; q=8 MNIST part skipped (dataset not found)"
    else:
        net, tp, tm, y = mnist["net"], mnist["tp"], mnist["tm"], mnist["y"]
        fnet = aer.compile_network(net, 8)
        q8 = aer.dequantized_network(net, fnet)
        full = float(np.mean(net.predict(tp, tm) == y))
        quant = float(np.mean(q8.predict(tp, tm) == y))
        # the event-driven fabric agrees with the dequantized dense path on real digits
        routed = [r.winner for r in aer.fabric_forward(fnet, tp[:5], tm[:5])]
        agree = routed == q8.predict(tp[:5], tm[:5]).tolist()
        gap = 100 * (full - quant)
        ok = ok and gap <= 0.5 and agree
        detail += (f"; MNIST q=8 accuracy {quant:.4f} vs full {full:.4f} (drop {gap:.2f} pp <= 0.5), "
                   f"fabric winners match on 5 digits: {agree}")
    record(6, "routed/dense equivalence", ok, detail)


def test_07_sparsity(mnist):
    if mnist is None:
        skip(7, "sparsity", "dataset not found (set TEMP_DATA_DIR)")
    net, cfg = mnist["net"], mnist["cfg"]
    tp, tm = mnist["tp"], mnist["tm"]
    parts = analysis._forward(net, tp, tm)
    trained = analysis.causal_fraction(parts, net, 0)
    base = analysis.random_delay_causal_fraction(net, tp, tm, 0, np.random.default_rng([0, 1]),
                                                 cfg["network"]["init_mean"], cfg["network"]["init_std"])
    record(7, "sparsity", 0.08 <= trained <= 0.30 and trained < base,
           f"mean hidden causal fraction {trained:.4f} of 784 inputs (in [0.08, 0.30]), "
           f"random-delay baseline {base:.4f} (must be higher)")


def test_08_gamma_behaviour(xor_run, tmp_path):
    net = xor_run[0]
    cfg = resolve({}, "gamma-sweep")
    ds = cli.load_dataset(cfg, None)
    tp, tm = encode_input(ds.test_x[:2000], cli.encoder(cfg))
    grid = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 35.0, 64.0)
    rows = [analysis.evaluate_gamma(net, g, tp, tm, ds.test_y[:2000], 0) for g in grid]
    lat = [r.latency for r in rows]
    act = [r.active_fraction for r in rows]
    mono = all(b >= a for a, b in zip(lat, lat[1:])) and all(b <= a for a, b in zip(act, act[1:]))
    assert cli.main(["sweep-gamma", "--task", "gamma-sweep", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()[2:]
    gammas = [float(r.split(",")[0]) for r in lines]
    accs = [float(r.split(",")[3]) for r in lines]
    best = int(np.argmax(accs))
    interior = 0 < best < len(accs) - 1 and accs[0] < accs[best] and accs[-1] < accs[best]
    record(8, "gamma behaviour", mono and interior,
           f"fixed net: latency {lat[0]:.3f}->{lat[-1]:.3f} nondecreasing, A_h {act[0]:.3f}->{act[-1]:.3f} "
           f"nonincreasing: {mono}; trained per gamma: accuracy {accs[0]:.3f} at {gammas[0]:g}, "
           f"peak {accs[best]:.3f} at {gammas[best]:g}, {accs[-1]:.3f} at {gammas[-1]:g}")


def test_09_patterns(mnist):
    if mnist is None:
        skip(9, "patterns", "dataset not found (set TEMP_DATA_DIR)")
    net, n = mnist["net"], 1000
    parts = analysis._forward(net, mnist["tp"][:n], mnist["tm"][:n])
    pats = np.concatenate([analysis.hidden_pattern(f, 0) for f in parts])
    dist = analysis.class_distance_matrix(pats, mnist["y"][:n], net.spec.time_outs[0], net.spec.n_classes)
    intra, inter = analysis.intra_inter(dist)
    record(9, "patterns", intra < inter,
           f"{n} test digits: mean intra-class distance {intra:.4f} < inter-class {inter:.4f}")


def test_10_lif_battery():
    cfg = resolve({}, "lif-battery")
    rows = dict(cli.lif_report(cfg)[0])
    c = cfg["lif"]
    p = lif.LifParams(C_m=c["C_m"], R=c["tau_m_factor"] * c["tau_s"] / c["C_m"], tau_s=c["tau_s"], v_th=c["v_th"])
    base = np.random.default_rng(10).uniform(0, c["spread"], c["n_arrivals"])
    shifts = np.linspace(0.0, 5.0, 11)
    rep = lif.correspondence_check([base + s for s in shifts], p, "nlif")
    shift_ok = (spearmanr(rep.temp, shifts)[0] == 1.0 and spearmanr(rep.exact, shifts)[0] == 1.0
                and np.argsort(rep.temp).tolist() == np.argsort(rep.exact).tolist())
    ok = (rows["tangency_value"] and rows["tangency_slope"] and rows["nlif_closed_form_error"] <= 1e-9
          and rows["lif_closed_form_error"] <= 1e-9 and rows["rank_temp_nlif"] >= 0.95 and shift_ok)
    record(10, "LIF battery", ok,
           f"tangency exact {rows['tangency_value'] and rows['tangency_slope']}; closed-form errors "
           f"n-LIF {rows['nlif_closed_form_error']:.1e}, LIF {rows['lif_closed_form_error']:.1e} (<= 1e-9); "
           f"TEMP vs n-LIF rank {rows['rank_temp_nlif']:.4f} (>= 0.95, tau_s={c['tau_s']:g}, "
           f"spread={c['spread']:g}); common-shift ranks exact {shift_ok}")


SMALL = """[data]
n_train = 3000
n_val = 200
n_test = 500
[train]
epochs = 2
[sweep]
n_eval = 200
epochs = 1
gammas = [0.5, 2.0]
[patterns]
n_samples = 200
[lif]
n_instances = 40
"""


def _run_all(root, cfg, mnist_data) -> dict:
    def run(*argv):
        assert cli.main(list(argv)) == 0, argv
    run("train", "--config", str(cfg), "--task", "xor", "--out", str(root / "xor"))
    run("train", "--config", str(cfg), "--task", "moon", "--out", str(root / "moon"))
    model = str(root / "xor" / "model.bin")
    run("infer", "--config", str(cfg), "--task", "xor", "--model", model, "--out", str(root / "infer"))
    run("infer", "--config", str(cfg), "--task", "xor", "--model", model, "--fabric", "8",
        "--out", str(root / "fabric"))
    run("sweep-gamma", "--config", str(cfg), "--task", "xor", "--model", model, "--out", str(root / "sweep"))
    run("sweep-gamma", "--config", str(cfg), "--task", "gamma-sweep", "--out", str(root / "sweep-train"))
    run("patterns", "--config", str(cfg), "--task", "xor", "--model", model, "--out", str(root / "patterns"))
    run("dynamics", "--out", str(root / "dynamics"))
    run("lif-battery", "--config", str(cfg), "--out", str(root / "lif"))
    if mnist_data is not None:
        run("train", "--config", str(cfg), "--task", "mnist-dense", "--data-dir", str(mnist_data),
            "--out", str(root / "mnist"))
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_11_determinism(tmp_path):
    cfg = tmp_path / "small.toml"
    cfg.write_text(SMALL)
    d = mnist_dir()
    a = _run_all(tmp_path / "a", cfg, d)
    b = _run_all(tmp_path / "b", cfg, d)
    differ = sorted(str(k) for k in a if a[k] != b.get(k))
    kinds = sorted({k.suffix for k in a})
    record(11, "determinism", set(a) == set(b) and not differ,
           f"{len(a)} output files ({', '.join(kinds)}) from every command re-run byte-identical"
           + (f"; differ: {differ}" if differ else "") + ("" if d else "; MNIST training not included"))
