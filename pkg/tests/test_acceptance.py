"""Acceptance checks. Each test records a verdict line per criterion (see conftest)."""

import csv
import json
import math
import random
import time
from fractions import Fraction as F
from pathlib import Path

import numpy as np
import pytest

from oracles import bisect_crossover, oracle_plan, random_profile, random_table
from splitwire import attention, codec, latency
from splitwire import model as model_io
from splitwire.cli import RunConfig, datasets, main
from splitwire.nn import (
    ChannelAttention,
    Conv2d,
    Dense,
    FeatureRecovery,
    GlobalAvgPool,
    GlobalMaxPool,
    Normalize,
    ReLU,
    ResidualBlock,
    Sigmoid,
    grad_check,
)

# ---- 1: gradient fidelity ----------------------------------------------------------


def _shape(r, *lo_hi):
    return tuple(int(r.integers(lo, hi + 1)) for lo, hi in lo_hi)


def _fr(r):
    c = int(r.choice([2, 4, 8]))
    keep = np.sort(r.choice(c, size=c // int(r.choice([2, c])), replace=False))
    n, h, w = _shape(r, (1, 2), (2, 5), (2, 5))
    return FeatureRecovery.init(r, keep, c), (n, len(keep), h, w)


def _conv(r):
    c_in, c_out, k = _shape(r, (1, 4), (1, 4), (1, 3))
    stride = int(r.integers(1, 3))
    n, h, w = _shape(r, (1, 2), (k, 6), (k, 6))
    return Conv2d.init(r, c_in, c_out, k, stride, int(r.integers(0, 2))), (n, c_in, h, w)


def _block(r):
    c_in, c_out, stride = _shape(r, (1, 4), (1, 4), (1, 2))
    if stride == 1:
        c_out = c_in if r.random() < 0.5 else c_out
    return ResidualBlock.init(r, c_in, c_out, stride), (2, c_in) + _shape(r, (2, 5), (2, 5))


GRAD_KINDS = {
    "conv2d": _conv,
    "relu": lambda r: (ReLU(), _shape(r, (1, 3), (1, 4), (1, 4), (1, 4))),
    "sigmoid": lambda r: (Sigmoid(), _shape(r, (1, 3), (1, 4), (1, 4), (1, 4))),
    "global_avg_pool": lambda r: (GlobalAvgPool(), _shape(r, (1, 3), (1, 4), (1, 5), (1, 5))),
    "global_max_pool": lambda r: (GlobalMaxPool(), _shape(r, (1, 3), (1, 4), (1, 5), (1, 5))),
    "dense": lambda r: (lambda d_in, d_out: (Dense.init(r, d_in, d_out), (2, d_in)))(
        *_shape(r, (1, 12), (1, 6))),
    "normalize": lambda r: (Normalize(1e-5), (2,) + _shape(r, (2, 8)) + (1, 1)),
    "residual_block": _block,
    "channel_attention": lambda r: (ChannelAttention(1e-5),
                                    (2,) + _shape(r, (2, 6), (1, 4), (1, 4))),
    "feature_recovery": _fr,
}


def test_criterion_1_gradient_fidelity(verdict):
    t0 = time.perf_counter()
    worst, failures = {}, []
    for kind, make in GRAD_KINDS.items():
        for seed in range(20):
            r = np.random.default_rng([seed, len(kind)])
            layer, shape = make(r)
            report = grad_check(layer, r.standard_normal(shape), tolerance=1e-4, seed=seed)
            worst[kind] = max(worst.get(kind, 0.0), report.max_error)
            if not report.passed:
                failures.append((kind, seed, report.max_error, report.failures))
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 60
    top = max(worst.values())
    verdict(1, "grad checks", ok, f"{len(GRAD_KINDS)} kinds x 20 instances, max rel err "
            f"{top:.2e} <= 1e-4, {elapsed:.1f}s")
    assert ok, failures


# ---- 2: codec ------------------------------------------------------------------------


def _codec_cases(count=1000, seed=2024):
    r = np.random.default_rng(seed)
    kinds = ["uniform", "gaussian", "geometric", "sparse", "constant", "features"]
    for i in range(count):
        c, h, w = int(r.integers(1, 65)), int(r.integers(1, 17)), int(r.integers(1, 17))
        n, bits, kind = c * h * w, int(r.integers(1, 17)), kinds[i % len(kinds)]
        top = (1 << bits) - 1
        if kind == "uniform":
            s = r.integers(0, top + 1, n)
        elif kind == "gaussian":
            s = np.rint(r.normal(r.uniform(0, top), r.uniform(0.5, max(1.0, top / 8)), n))
        elif kind == "geometric":
            s = r.geometric(r.uniform(0.01, 0.9), n) - 1
        elif kind == "sparse":
            s = np.where(r.random(n) < r.uniform(0.6, 0.98), 0, r.integers(0, top + 1, n))
        elif kind == "constant":
            s = np.full(n, r.integers(0, top + 1))
        else:
            feats = np.maximum(r.standard_normal((c, h, w)) * r.uniform(0.1, 5), 0)
            yield kind, codec.quantize(feats, bits)
            continue
        s = np.clip(s, 0, top).astype(np.int64)
        yield kind, codec.QuantizedTensor(s, bits, -1.0, 1.0, (c, h, w))


@pytest.fixture(scope="module")
def codec_runs():
    t0 = time.perf_counter()
    runs = []
    for kind, q in _codec_cases():
        payload = codec.entropy_encode(q)
        header = codec.PacketHeader(1, 2, q.bits, q.min_value, q.max_value, q.shape, len(payload))
        back = codec.entropy_decode(payload, header)
        runs.append((kind, q, payload, back))
    return runs, time.perf_counter() - t0


def test_criterion_2_losslessness(codec_runs, verdict):
    runs, elapsed = codec_runs
    bad = [i for i, (_, q, _, back) in enumerate(runs)
           if not np.array_equal(back.symbols, q.symbols) or back.shape != q.shape]
    ok = not bad and len(runs) == 1000 and elapsed < 60
    verdict(2, "lossless", ok, f"{len(runs) - len(bad)}/{len(runs)} exact round trips, "
            f"{elapsed:.1f}s")
    assert ok, bad[:10]


def test_criterion_2_efficiency(codec_runs, verdict):
    runs, _ = codec_runs
    over = []
    for kind, q, payload, _ in runs:
        n = q.symbols.size
        h = codec.empirical_entropy(q.symbols)
        allowed = n * (h + 0.1) + 512
        if 8 * len(payload) > allowed:
            over.append((kind, q.bits, n, 8 * len(payload) / n - h))
    by_kind = {}
    for kind, *_ in over:
        by_kind[kind] = by_kind.get(kind, 0) + 1
    worst = max((o[3] for o in over), default=0.0)
    verdict(2, "efficiency", not over,
            f"{len(runs) - len(over)}/{len(runs)} within H+0.1 bit/sym+512/n; over bound by kind "
            f"{by_kind or '{}'}; worst excess {worst:.2f} bit/sym")
    assert not over, over[:10]


# ---- 3: latency exactness -------------------------------------------------------------


def test_criterion_3_latency_exactness(verdict):
    t0 = time.perf_counter()
    size_ok = latency.tensor_bytes(64, 56, 56) == 802_816
    comm = latency.comm_time(F(802_816), 4, F(10**7))
    comm_ok = comm == F("0.1605632")
    prof = latency.LatencyProfile(
        {1: latency.SplitProfile((64, 56, 56), F(5, 1000), {4: F(3, 100)})}, 0, 0, 0)
    total_ok = latency.completion_time(prof, 1, 4, F(10**7)) == F("0.1955632")
    r = random.Random(7)
    mismatches = 0
    for _ in range(1000):
        p = random_profile(r)
        table = random_table(r, p)
        rate, deadline = F(r.randint(1, 10**9)), F(r.randint(1, 3000), 1000)
        got = latency.plan(p, table, rate, deadline)
        if (got.decision, got.completion_s, got.feasible) != oracle_plan(p, table, rate, deadline):
            mismatches += 1
    elapsed = time.perf_counter() - t0
    ok = size_ok and comm_ok and total_ok and mismatches == 0 and elapsed < 60
    verdict(3, "exact arithmetic + plan oracle", ok,
            f"802816 B {size_ok}, 0.1605632 s {comm_ok}, 0.1955632 s {total_ok}, "
            f"{mismatches} plan mismatches / 1000, {elapsed:.1f}s")
    assert ok


# ---- 4: crossover ------------------------------------------------------------------


def test_criterion_4_crossover(verdict):
    r = random.Random(11)
    worst, bad = 0.0, 0
    for _ in range(100):
        p = random_profile(r, exact=False)
        l = r.choice(sorted(p.splits))
        k = r.choice(sorted(p.splits[l].t_iot))
        got, want = latency.crossover_rate(p, l, k), bisect_crossover(p, l, k)
        if (got is None) != (want is None):
            bad += 1
        elif got is not None:
            err = abs(got - want) / want
            worst = max(worst, err)
            bad += err > 1e-3
    demo = latency.demo_profile()
    r_star = latency.crossover_rate(demo, 1, 64)
    finite = r_star is not None and math.isfinite(r_star)
    faster_low = finite and (latency.completion_time(demo, 1, 64, r_star / 10)
                             < latency.full_offload_time(demo, r_star / 10))
    ok = bad == 0 and finite and faster_low and demo.input_image_bytes == 200_000
    verdict(4, "crossover", ok, f"{100 - bad}/100 within 0.1% of bisection (worst "
            f"{worst:.1e}); demo crossover {r_star / 1e6:.2f} Mbit/s, split faster below it")
    assert ok


# ---- 5, 6, 8: full pipeline -------------------------------------------------------------


def _run_pipeline(out: Path) -> float:
    t0 = time.perf_counter()
    assert main(["train", "--out-dir", str(out)]) == 0
    assert main(["compress", "--out-dir", str(out)]) == 0
    return time.perf_counter() - t0


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("default_a")
    elapsed = _run_pipeline(out)
    rows = list(csv.DictReader((out / "results.csv").open()))
    return out, rows, elapsed


def _column(rows, name):
    return [float(r[name]) for r in sorted(rows, key=lambda r: int(r["ratio"]))]


def test_criterion_5a_aecnn_vs_pruned(default_run, verdict):
    _, rows, elapsed = default_run
    ca, ae = _column(rows, "accuracy_ca_pruned"), _column(rows, "accuracy_aecnn")
    every = all(a >= c - 0.5 for a, c in zip(ae, ca))
    mean_gap = np.mean(ae) - np.mean(ca)
    ok = every and mean_gap > 0 and elapsed < 30 * 60 and len(rows) == 6
    verdict(5, "a", ok, f"AECNN {ae} vs CA_Pruned {ca}; mean gain {mean_gap:+.2f} pt; "
            f"pipeline {elapsed:.0f}s")
    assert ok


def test_criterion_5b_accuracy_monotone(default_run, verdict):
    _, rows, _ = default_run
    worst = {}
    for col in ("accuracy_ca_pruned", "accuracy_aecnn"):
        acc = _column(rows, col)
        worst[col] = max(b - a for a, b in zip(acc, acc[1:]))
    ok = all(v <= 1.0 for v in worst.values())
    verdict(5, "b", ok, "largest rise with ratio (pt): "
            + ", ".join(f"{k} {v:+.2f}" for k, v in worst.items()))
    assert ok


def test_criterion_5c_bits_monotone(default_run, verdict):
    _, rows, _ = default_run
    bits = _column(rows, "bits_per_element")
    inversions = sum(b > a for a, b in zip(bits, bits[1:]))
    verdict(5, "c", inversions <= 1, f"bits/element {bits}; {inversions} inversion(s)")
    assert inversions <= 1


def test_criterion_5d_total_ratio(default_run, verdict):
    _, rows, _ = default_run
    last = max(rows, key=lambda r: int(r["ratio"]))
    k, bits = int(last["ratio"]), float(last["bits_per_element"])
    total = codec.total_compression_ratio(k, bits)
    verdict(5, "d", total > 2 * k, f"total ratio at {k}x = {total:.1f} > {2 * k}")
    assert total > 2 * k


def test_criterion_6_ranking_stability(default_run, verdict):
    out, _, _ = default_run
    cfg = RunConfig.from_dict(json.loads((out / "config.json").read_text()))
    train_set, _ = datasets(cfg)
    l = cfg.split_points[0]
    ca_model = model_io.load(out / f"ca_l{l}.swml")
    rho = attention.ranking_stability(ca_model, l, train_set.images, 3, 256, cfg.seed)
    verdict(6, "spearman", rho >= 0.8, f"min pairwise rho over 3 x 256 samples = {rho:.4f}")
    assert rho >= 0.8


def test_criterion_7_plan_demo(verdict):
    profile = latency.demo_profile()
    table = latency.accuracy_table_from_results(latency.demo_results())
    got = latency.plan(profile, table, 10**7, 0.1)
    exact = {d: F(acc).limit_denominator(10**4) for d, acc in table.items()}
    want = oracle_plan(profile, exact, F(10**7), F(1, 10))
    ok = got.decision == latency.Decision.split(1, 8) and got.decision == want[0] and got.feasible
    verdict(7, "demo plan", ok, f"selected {got.decision} ({got.completion_s:.4f} s), "
            f"oracle {want[0]}")
    assert ok


def test_criterion_8_reproducibility(default_run, tmp_path_factory, verdict):
    first, _, _ = default_run
    second = tmp_path_factory.mktemp("default_b")
    _run_pipeline(second)
    names = sorted(p.name for p in first.glob("*.csv"))
    differing = [n for n in names if (first / n).read_bytes() != (second / n).read_bytes()]
    ok = bool(names) and not differing and names == sorted(p.name for p in second.glob("*.csv"))
    verdict(8, "byte-identical CSV", ok, f"{len(names) - len(differing)}/{len(names)} CSV files "
            f"identical across two full runs ({', '.join(names)})")
    assert ok
