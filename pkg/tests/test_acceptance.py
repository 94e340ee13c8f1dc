"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line."""

import itertools
import math
import time

import numpy as np
import pytest

from tsad import tensor as tt
from tsad.dataio import TimeSeries, make_windows, synthetic_profile
from tsad.experiment import (
    DatasetStats, benchmark, contamination_study, derive_candidates, result_for, search, select_best,
)
from tsad.labeling import COMBINATIONS, ThresholdSpec, combine_local, extract_labels, threshold_pot
from tsad.losses import huber, mse, softdtw
from tsad.metrics import Confusion, confusion, mcc, precision_recall_f1
from tsad.models import ModelConfig, TransformerModel, attention, linear
from tsad.scoring import score_baseline

from conftest import VERDICTS, brute_select, brute_softdtw, check_grads, random_results


def verdict(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def profile():
    return synthetic_profile(T=5000, N=5, n_collective=10, n_point=10, seed=0)


@pytest.fixture(scope="module")
def grid(profile):
    t0 = time.perf_counter()
    report = search(profile, combination="local_or")
    return report, time.perf_counter() - t0


# 1


def _projected(out, R):
    # a random projection keeps every output element in play
    return tt.tsum(out * R)


def _gradient_cases(rng):
    def lin(x, w, b):
        return _projected(linear(x, w, b), R[(2, 3, 4)])

    def attn(x, wq, wk, wv, wo):
        p = {"a.wq": wq, "a.wk": wk, "a.wv": wv, "a.wo": wo}
        for k in "qkvo":
            p[f"a.b{k}"] = tt.Tensor(bias[k])
        return _projected(attention(x, p, "a", 2), R[(2, 3, 4)])

    def lnorm(x):
        return _projected(tt.layer_norm(x), R[(2, 3, 4)])

    def embedding(kind):
        m = TransformerModel(ModelConfig(kind, W=4, S=1, M=4, n_heads=1, n_layers=1), n_vars=3)

        def f(x, w, b):
            m.params["embed.w"], m.params["embed.b"] = w, b
            tokens = m.embed(x)
            return _projected(tokens, R[tokens.shape])
        return f, m.params["embed.w"].shape

    R = {s: rng.normal(size=s) for s in [(2, 3, 4), (2, 4, 4)]}
    bias = {k: rng.normal(size=4) * 0.1 for k in "qkvo"}
    inv, inv_w = embedding("itransformer_reco")
    std, std_w = embedding("transformer_reco")
    x234 = lambda: rng.normal(size=(2, 3, 4))
    return {
        "linear": (lin, lambda: [x234(), rng.normal(size=(4, 4)), rng.normal(size=4)]),
        "attention": (attn, lambda: [x234()] + [rng.normal(size=(4, 4)) * 0.5 for _ in range(4)]),
        "layernorm": (lnorm, lambda: [x234()]),
        "inverted embedding": (inv, lambda: [rng.normal(size=(2, 4, 3)), rng.normal(size=inv_w), rng.normal(size=4)]),
        "standard embedding": (std, lambda: [rng.normal(size=(2, 4, 3)), rng.normal(size=std_w), rng.normal(size=4)]),
        "mse": (lambda a, b: mse(a, b), lambda: [x234(), x234()]),
        "huber": (lambda a, b: huber(a, b, 1.0), lambda: [x234(), x234()]),
        "soft-dtw": (lambda a, b: softdtw(a, b, 1.0),
                     lambda: [rng.normal(size=(int(rng.integers(1, 6)), 2)), rng.normal(size=(int(rng.integers(1, 6)), 2))]),
    }


def _away_from_kink(a, b):
    r = a - b
    return a, np.where(np.abs(np.abs(r) - 1.0) < 1e-3, b + 0.01, b)


def test_criterion_1_gradient_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {}
    for name, (build, draw) in _gradient_cases(rng).items():
        errs = []
        for _ in range(20):
            inputs = draw()
            if name == "huber":
                inputs = list(_away_from_kink(*inputs))
            errs.append(check_grads(build, inputs, h=1e-5))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(1, "gradient oracle", ok, f"max rel err {detail}; {elapsed:.1f}s")


# 2


def test_criterion_2_softdtw_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    soft_err = hard_err = 0.0
    for n, m in itertools.product(range(1, 5), repeat=2):
        x, y = rng.normal(size=(n, 2)), rng.normal(size=(m, 2))
        soft_err = max(soft_err, abs(softdtw(x, y, 1.0).item() - brute_softdtw(x, y, 1.0)))
        hard_err = max(hard_err, abs(softdtw(x, y, 1e-3).item() - brute_softdtw(x, y, 0)))
    elapsed = time.perf_counter() - t0
    ok = soft_err < 1e-8 and hard_err < 1e-3 and elapsed < 30
    verdict(2, "soft-dtw oracle", ok,
            f"max |soft - enum| {soft_err:.1e}, max |gamma=1e-3 - dtw| {hard_err:.1e}; {elapsed:.1f}s")


# 3


def test_criterion_3_pot_oracle():
    t0 = time.perf_counter()
    fits = []
    for seed in range(5):
        x = np.random.default_rng(seed).exponential(size=100_000)
        thr, fit = threshold_pot(x, 1e-3, 0.98)
        fits.append((thr, fit.xi))
    elapsed = time.perf_counter() - t0
    ok = all(6.6 <= t <= 7.2 and abs(xi) < 0.1 for t, xi in fits) and elapsed < 10
    detail = ", ".join(f"{t:.3f}/{xi:+.3f}" for t, xi in fits)
    verdict(3, "POT oracle", ok, f"threshold/xi {detail} (analytic {-math.log(1e-3):.3f}); {elapsed:.2f}s")


# 4


def _direct_mcc(tp, tn, fp, fn):
    factors = [tp + fp, tp + fn, tn + fp, tn + fn]
    if 0 in factors:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(math.prod(factors))


def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(11)
    worst, zero_cases = 0.0, 0
    for _ in range(1000):
        cells = rng.integers(0, 20, 4)
        cells[rng.random(4) < 0.25] = 0  # empty marginals show up often
        tp, tn, fp, fn = map(int, cells)
        zero_cases += 0 in (tp + fp, tp + fn, tn + fp, tn + fn)
        worst = max(worst, abs(mcc(Confusion(tp, tn, fp, fn)) - _direct_mcc(tp, tn, fp, fn)))
    perfect = mcc(Confusion(7, 13, 0, 0))
    inverted = mcc(Confusion(0, 0, 13, 7))
    a, b = Confusion(5, 10, 3, 2), Confusion(5, 1000, 3, 2)
    f1_same = precision_recall_f1(a)[2] == precision_recall_f1(b)[2]
    mcc_moves = mcc(a) != mcc(b)
    ok = worst < 1e-12 and zero_cases > 0 and perfect == 1.0 and inverted == -1.0 and f1_same and mcc_moves
    verdict(4, "metric oracles", ok,
            f"max |mcc - direct| {worst:.1e} over 1000 tables ({zero_cases} zero-denominator), "
            f"perfect {perfect}, inverted {inverted}, F1 fixed under +tn: {f1_same}, MCC changes: {mcc_moves}")


# 5


def test_criterion_5_window_laws():
    rng = np.random.default_rng(5)
    failures = []
    for _ in range(400):
        T = int(rng.integers(1, 501))
        W = int(rng.integers(1, T + 1))
        S = int(rng.integers(1, W + 1))
        ts = TimeSeries(np.arange(T, dtype=float))
        w = make_windows(ts, W, S)
        X = w.array()[:, :, 0]
        R = make_windows(ts, W, purpose="test_reco")
        checks = (
            w.count == math.ceil((T - W) / S) + 1,
            X[:, 0].tolist() == [i * S for i in range(w.count)],
            0 <= w.pad_len < W and bool(np.all(X[-1, W - w.pad_len:] == T - 1)),
            np.array_equal(R.array().reshape(-1)[:T], ts.values[:, 0]),
        )
        if not all(checks):
            failures.append((T, W, S))
    verdict(5, "window laws", not failures,
            f"count, padding and reassembly fail on {len(failures)}/400 random (T, W, S) with T <= 500"
            + (f", first {failures[0]}" if failures else ""))


# 6


def test_criterion_6_combination_laws():
    rng = np.random.default_rng(6)
    violations = 0
    for _ in range(10_000):
        mat = rng.integers(0, 2, size=(int(rng.integers(1, 20)), int(rng.integers(1, 8))))
        violations += int(np.any(combine_local(mat, "or") < combine_local(mat, "majority")))
    identical = True
    for seed, spec in itertools.product(range(5), (ThresholdSpec(), ThresholdSpec("percentile", f=0.01))):
        s = np.random.default_rng(seed).exponential(size=(3000, 1))
        labels = [extract_labels(s, spec, c).labels.tobytes() for c in COMBINATIONS]
        identical &= len(set(labels)) == 1
    ok = violations == 0 and identical
    verdict(6, "combination laws", ok,
            f"OR < majority on {violations}/10000 matrices; univariate labels identical across methods: {identical}")


# 7


@pytest.mark.slow
def test_criterion_7_synthetic_end_to_end(profile, grid):
    report, elapsed = grid
    chosen = result_for(report.results, report.selected)
    model_mcc = chosen.mean("local_or")
    base = score_baseline(profile.test)
    cal = score_baseline(profile.train)
    baseline = {c: mcc(confusion(extract_labels(base, ThresholdSpec(), c, calibration=cal).labels,
                                 profile.test.labels))
                for c in COMBINATIONS}
    best_base = max(baseline.values())
    ok = model_mcc >= 0.7 and model_mcc >= best_base and elapsed < 600
    verdict(7, "synthetic end-to-end", ok,
            f"selected W={report.selected.W} S={report.selected.S} M={report.selected.M}, local-OR MCC "
            f"{model_mcc:.3f} +- {chosen.std('local_or'):.3f} over {len(chosen.seeds)} seeds; "
            f"baseline best {best_base:.3f}; grid {elapsed:.0f}s")


# 8


@pytest.mark.slow
def test_criterion_8_contamination(profile, grid):
    report, _ = grid
    t0 = time.perf_counter()
    study = contamination_study(profile, report.selected, rates=(0.0, 0.02), combination="local_or")
    elapsed = time.perf_counter() - t0
    clean, dirty = study.mean("mse", 0.0), study.mean("mse", 0.02)
    robust = {loss: study.mean(loss, 0.02) for loss in ("huber", "softdtw")}
    ok = clean > dirty and max(robust.values()) >= dirty - 0.02 and elapsed < 1200
    verdict(8, "contamination", ok,
            f"MSE clean {clean:.3f} vs 2% {dirty:.3f}; at 2% huber {robust['huber']:.3f}, "
            f"soft-dtw {robust['softdtw']:.3f}; {elapsed:.0f}s")


# 9


def test_criterion_9_grid_and_selection():
    def triples(a, b=1):
        return {(c.W, c.S, c.M) for c in derive_candidates(DatasetStats(a, b, 1, 1000, 1000))}
    credit = (10, 1, 2) in triples(1)
    msl = (96, 10, 96) in triples(215, 10)
    rng = np.random.default_rng(9)
    mismatches = 0
    for _ in range(1000):
        rs = random_results(rng)
        rows = [(r.mean("global"), r.std("global"), r.config.M, r.config.S, r.config.W) for r in rs]
        mismatches += select_best(rs, "global") != rs[brute_select(rows)].config
    ok = credit and msl and mismatches == 0
    verdict(9, "grid and selection", ok,
            f"Credit Card (10,1,2) present: {credit}; MSL (96,10,96) present: {msl}; "
            f"select_best disagrees with brute force on {mismatches}/1000 sets")


# 10


@pytest.mark.slow
def test_criterion_10_determinism(profile):
    t0 = time.perf_counter()
    first = benchmark(profile, seeds=[0]).to_json()
    second = benchmark(profile, seeds=[0]).to_json()
    elapsed = time.perf_counter() - t0
    same = first.encode() == second.encode()
    verdict(10, "determinism", same, f"two benchmark runs byte-identical: {same} ({len(first)} bytes); {elapsed:.0f}s")
