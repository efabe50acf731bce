"""Acceptance criteria, one test each, at the stated tolerances.

Every test prints a single ``CRITERION n: PASS|FAIL ...`` line. Criteria 6 and 7
read the artifacts of the two acceptance training runs::

    steercnn train configs/accept_c8.cfg
    steercnn train configs/accept_plain.cfg

Set ``STEERCNN_ACCEPT_TRAIN=1`` to have the test launch them when missing.
"""
import math
import os
import time

import numpy as np
import pytest

from conftest import ROOT, central
from steercnn import checkpoint, gradcheck, tensor
from steercnn.basis import build_basis, param_count, rotate_atomic
from steercnn.config import load_config, parse_config
from steercnn.gconv import GConvLayer, gshift_rot, hidden_g_conv, input_g_conv
from steercnn.model import (ModelConfig, analytic_param_count, budget_filters, build_classifier,
                            build_segmenter, calibrate_bn)
from steercnn.report import feature_variance
from steercnn.train import load_model, predict, prepare_split, read_metrics, train

C8_CFG = os.path.join(ROOT, "configs", "accept_c8.cfg")
PLAIN_CFG = os.path.join(ROOT, "configs", "accept_plain.cfg")
WALL_BUDGET = 30 * 60.0
BUDGET_CORES = 4


@pytest.fixture
def emit(capsys):
    def _emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    return _emit


def blobs(rng, count, size=32, sigma=4.0, k=4):
    # smooth images: a few wide Gaussian bumps near the centre
    y, x = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2
    out = np.zeros((count, 1, size, size))
    for i in range(count):
        for _ in range(k):
            r, a = rng.uniform(0, size / 4), rng.uniform(0, 2 * np.pi)
            cx, cy = c + r * np.cos(a), c + r * np.sin(a)
            out[i, 0] += rng.uniform(0.5, 1) * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sigma ** 2))
    return out


def test_criterion_1_exact_steerable_rotation(emit):
    start = time.perf_counter()
    basis = build_basis(size=7, sigma=0.6)
    thetas = np.random.default_rng(1).uniform(-4 * np.pi, 4 * np.pi, 100)
    # second route: evaluate exp(-(r - j)^2 / 2 sigma^2) exp(ik(phi - theta)) on the grid directly
    y, x = np.mgrid[0:7, 0:7]
    u = (x - 3.0) + 1j * (3.0 - y)
    r, phi = np.abs(u), np.angle(u)
    worst = 0.0
    for f in basis.filters:
        radial = np.exp(-((r - f.j) ** 2) / (2 * 0.6 ** 2)) / f.norm
        for th in thetas:
            got = rotate_atomic(f, th)
            direct = radial * np.exp(1j * f.k * (phi - th))
            if f.k:
                direct[3, 3] = 0.0
            worst = max(worst, np.abs(got - np.exp(-1j * f.k * th) * f.samples).max(),
                        np.abs(got - direct).max())
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-14 and elapsed < 1.0 and len(basis) == 11
    emit(1, ok, f"max abs error {worst:.2e} over {len(basis)} filters x 100 angles, {elapsed:.3f}s")
    assert worst <= 1e-14
    assert elapsed < 1.0


def test_criterion_2_layer_equivariance(emit):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    b7 = build_basis(size=7)
    worst = {}
    for n in (4, 8, 12):
        w = 0.0
        for _ in range(50):
            inp = GConvLayer.random(b7, 1, 2, n, True, rng)
            hid = GConvLayer.random(b7, 2, 2, n, False, rng)
            x = rng.normal(size=(1, 1, 11, 11))
            f = input_g_conv(x, inp)
            for m in (1, 2, 3):
                s = m * n // 4
                e_in = np.abs(central(input_g_conv(tensor.rot90(x, m), inp) - gshift_rot(f, s), 3)).max()
                e_hid = np.abs(central(hidden_g_conv(gshift_rot(f, s), hid)
                                       - gshift_rot(hidden_g_conv(f, hid), s), 3)).max()
                w = max(w, e_in, e_hid)
        worst[n] = w
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-12 and elapsed < 30
    emit(2, ok, "max error " + ", ".join(f"n={n}: {e:.2e}" for n, e in worst.items())
         + f" (50 draws each), {elapsed:.1f}s")
    assert max(worst.values()) <= 1e-12
    assert elapsed < 30


def test_criterion_3_end_to_end_invariance(emit):
    rng = np.random.default_rng(3)
    # smallest classifier: one pooling stage, one dense block
    model = build_classifier(ModelConfig(n=8, block_units=(1,), width=0.25), seed=0)
    calibrate_bn(model, blobs(rng, 32))
    x = blobs(rng, 16)
    base = model(x)
    err90 = max(np.abs(model(tensor.rot90(x, q)) - base).max() / np.abs(base).max() for q in (1, 2, 3))
    rot45 = model(tensor.rotate_interp(x, math.pi / 4))
    err45 = float(np.linalg.norm(rot45 - base) / np.linalg.norm(base))
    ok = err90 <= 1e-8 and err45 <= 0.02
    emit(3, ok, f"90 deg max relative deviation {err90:.2e}; 45 deg relative L2 {100 * err45:.2f}%")
    assert err90 <= 1e-8
    assert err45 <= 0.02


def test_criterion_4_gradient_oracle(emit):
    start = time.perf_counter()
    errors = gradcheck.run(seed=4)
    elapsed = time.perf_counter() - start
    worst_name = max(errors, key=errors.get)
    failed = [k for k, v in errors.items() if not v <= gradcheck.TOLERANCE]
    ok = not failed and elapsed < 120 and "model" in errors
    emit(4, ok, f"{len(errors)} checks, worst {worst_name} {errors[worst_name]:.2e}, {elapsed:.1f}s"
         + (f", failed: {failed}" if failed else ""))
    assert not failed
    assert elapsed < 120


def test_criterion_5_parameter_accounting(emit):
    per_filter = param_count([(0, 0), (1, 2), (2, 3), (3, 2)], n=1, hidden=False)
    configs = [ModelConfig(), ModelConfig(n=4, width=0.5), ModelConfig(n=12, block_units=(2, 2)),
               ModelConfig(n=1, family="plain", width=0.4694),
               ModelConfig(n=8, head="segmenter", width=0.125),
               load_config(C8_CFG).model, load_config(PLAIN_CFG).model]
    mismatches = []
    for cfg in configs:
        model = build_segmenter(cfg) if cfg.head == "segmenter" else build_classifier(cfg)
        if model.num_params() != analytic_param_count(cfg):
            mismatches.append((cfg, model.num_params(), analytic_param_count(cfg)))
    budget = (budget_filters(64, 4, family="standard"), budget_filters(64, 1, family="standard"),
              budget_filters(18, 4, 18, 7, "steerable"))
    ok = per_filter == 18 and not mismatches and budget == (32, 64, 25)
    emit(5, ok, f"7x7 filter {per_filter} params; ledger exact on {len(configs) - len(mismatches)}/"
         f"{len(configs)} models; budget_filters {budget}")
    assert per_filter == 18
    assert not mismatches
    assert budget == (32, 64, 25)


def _ensure_run(cfg_path, emit, n):
    rc = load_config(cfg_path)
    last = os.path.join(rc["output.dir"], "last.dsfc")
    rows = read_metrics(rc.metrics_path) if os.path.exists(rc.metrics_path) else []
    if not (os.path.exists(last) and len(rows) == rc["train.epochs"]):
        if os.environ.get("STEERCNN_ACCEPT_TRAIN") != "1":
            msg = (f"no finished run for {cfg_path}; run `steercnn train {cfg_path}` "
                   "or set STEERCNN_ACCEPT_TRAIN=1")
            emit(n, False, msg)
            pytest.fail(msg)
        train(rc)
        rows = read_metrics(rc.metrics_path)
    return rc, rows, last


def test_criterion_6_rotated_digits(emit):
    c8, c8_rows, c8_last = _ensure_run(C8_CFG, emit, 6)
    plain, plain_rows, plain_last = _ensure_run(PLAIN_CFG, emit, 6)
    # the logged accuracy must match a fresh evaluation of the saved weights
    start = time.perf_counter()
    test = prepare_split(c8, "test")
    prep = time.perf_counter() - start
    train_prep = prep * c8["data.train_size"] / c8["data.test_size"]
    c8_acc = float((predict(load_model(c8, c8_last), test.x).argmax(1) == test.y).mean())
    plain_acc = float((predict(load_model(plain, plain_last), test.x).argmax(1) == test.y).mean())
    assert c8_acc == float(c8_rows[-1]["test_acc"])
    assert plain_acc == float(plain_rows[-1]["test_acc"])
    c8_err, plain_err = 100 * (1 - c8_acc), 100 * (1 - plain_acc)
    wall = float(c8_rows[-1]["wall_seconds"]) + prep + train_prep
    cores = os.cpu_count() or 1
    # the budget is 30 min on 4 cores; with fewer cores compare core-seconds instead
    budget_cores = min(cores, BUDGET_CORES)
    cost = wall * budget_cores
    within_time = cost <= WALL_BUDGET * BUDGET_CORES
    params = (analytic_param_count(c8.model), analytic_param_count(plain.model))
    ok = (c8["train.epochs"] <= 20 and c8_err <= 5.0 and plain_err - c8_err >= 1.0 and within_time)
    emit(6, ok, f"C8 test error {c8_err:.2f}% vs plain {plain_err:.2f}% ({params[0]} vs {params[1]} params, "
         f"{c8['train.epochs']} epochs, {c8['data.train_size']} samples); C8 run {wall / 60:.1f} min on "
         f"{cores} core(s) = {cost / 60:.0f} of {WALL_BUDGET * BUDGET_CORES / 60:.0f} core-min")
    assert c8["train.epochs"] <= 20 and c8["data.train_size"] == 10000
    assert c8_err <= 5.0
    assert plain_err - c8_err >= 1.0
    assert within_time


def test_criterion_7_variance_contrast(emit):
    c8, _, c8_last = _ensure_run(C8_CFG, emit, 7)
    plain, _, plain_last = _ensure_run(PLAIN_CFG, emit, 7)
    image = prepare_split(c8, "test").x[:1]
    model = load_model(c8, c8_last)
    baseline = load_model(plain, plain_last)
    exact = feature_variance(model, image, "exact")
    full = feature_variance(model, image, "all")
    base = feature_variance(baseline, image, "all")
    exact_worst = max(exact[k]["mean"] for k in ("A", "B", "logits"))
    ratios = {k: base[k]["mean"] / max(full[k]["mean"], 1e-300) for k in ("A", "B")}
    ok = exact_worst <= 1e-16 and min(ratios.values()) >= 10
    emit(7, ok, f"exact-subset mean variance {exact_worst:.2e}; plain/C8 mean variance ratio "
         + ", ".join(f"probe {k} ({full[k]['layer']}) {r:.1f}x" for k, r in ratios.items()))
    assert exact_worst <= 1e-16
    assert min(ratios.values()) >= 10


def test_criterion_8_persistence(emit, tmp_path):
    rng = np.random.default_rng(8)
    cfg = ModelConfig(n=8, block_units=(1, 1), width=0.25)
    model = build_classifier(cfg, seed=5)
    calibrate_bn(model, rng.uniform(size=(8, 1, 16, 16)))
    path = tmp_path / "m.dsfc"
    checkpoint.save(path, model)
    restored = build_classifier(cfg, seed=6)
    checkpoint.load(path, restored)
    batch = rng.uniform(size=(4, 1, 16, 16))
    same_logits = model(batch).tobytes() == restored(batch).tobytes()

    d = os.path.join(ROOT, "data")
    text = (f"model.n = 4\nmodel.width = 0.125\nmodel.block_units = 1,1,1,1\ntrain.epochs = 2\n"
            f"train.batch_size = 16\ndata.train_size = 96\ndata.test_size = 32\n"
            f"output.wall_clock = false\n"
            f"data.train_images = {d}/train-images-idx3-ubyte\ndata.train_labels = {d}/train-labels-idx1-ubyte\n"
            f"data.test_images = {d}/t10k-images-idx3-ubyte\ndata.test_labels = {d}/t10k-labels-idx1-ubyte\n")
    csvs = []
    for run in ("a", "b"):
        rc = parse_config(text + f"output.dir = {tmp_path / run}\n", str(tmp_path))
        train(rc, log=lambda *a: None)
        csvs.append(open(rc.metrics_path, "rb").read())
    same_csv = csvs[0] == csvs[1]
    ok = same_logits and same_csv
    emit(8, ok, f"checkpoint round-trip logits bit-identical: {same_logits}; "
         f"seeded metrics CSV byte-identical: {same_csv}")
    assert same_logits
    assert same_csv
