"""Acceptance suite: one test and one printed PASS/FAIL line per criterion.

Exact property criteria (1-4, 12) run on small instances. The desk-scale
criteria (5-11) share five seeds of the headline configuration: synthetic
K=4, 1x8x8, 200 per class, delta 0.1 exact_count, 3x3 patch, MLP, 200 epochs.
Tolerances and seed quotas are pinned below and never loosened.
"""

import json
import math
import time

import numpy as np
import pytest

from nctrojan import collapse as nc
from nctrojan.etfkit import construct_etf, etf_gram, ideal_gram
from nctrojan.harness.cli import main
from nctrojan.harness.desk import DeskSeed
from nctrojan.rng import RngStream

import gradcheck
from conftest import record_acceptance
from oracles import nc_brute_force

SEEDS = range(5)
METRICS = ("nc1", "nc2_norm_M", "nc2_norm_W", "nc2_angle_M", "nc2_angle_W", "nc3", "nc4")

ETF_TOL = 1e-6
ETF_SECONDS = 1.0
ORACLE_TOL = 1e-9
ORACLE_SECONDS = 10.0
COLLAPSE_TOL = 1e-6
GRAD_TOL = 1e-4
GRAD_SECONDS = 30.0
EFFICACY_MIN = 0.90
EFFICACY_CPU_SECONDS = 300.0
CLEAN_ASR_5 = 0.10
CLEAN_ACC_DROP_5 = 0.05
CLEAN_ASR_1 = 0.20
ADAPTIVE_ASR_BEFORE = 0.5
ADAPTIVE_ASR_AFTER = 0.15
ROBUST_ACC_DROP = 0.08
ROBUST_ASR = 0.25
QUOTA = 4
ROBUST_QUOTA = 3


@pytest.fixture(scope="module")
def desk():
    return {s: DeskSeed(s) for s in SEEDS}


@pytest.fixture(scope="module")
def cleansed(desk):
    """ETF-FT results on the trojaned models, shared by criteria 7, 8 and 11."""
    out = {}
    for s, d in desk.items():
        run = d.trojaned()
        out[s] = {"5%": d.cleanse(run, d.subset(0.05)), "1%": d.cleanse(run, d.subset(0.01))}
    return out


def fmt(values):
    return "[" + ", ".join(f"{v:.3g}" for v in values) + "]"


def test_criterion_01_etf_exactness():
    start = time.perf_counter()
    worst = 0.0
    for K in (2, 4, 10, 16):
        for m in (K, 2 * K, 64):
            W = construct_etf(K, m, RngStream(K * 1000 + m, "etf")).W_etf.astype(np.float64)
            norms = np.linalg.norm(W, axis=1)
            cos = (W @ W.T) / np.outer(norms, norms)
            worst = max(worst, np.abs(norms - 1).max(),
                        np.abs(cos[~np.eye(K, dtype=bool)] + 1 / (K - 1)).max(),
                        np.abs(etf_gram(W) - ideal_gram(K)).max())
    elapsed = time.perf_counter() - start
    ok = worst <= ETF_TOL and elapsed < ETF_SECONDS
    record_acceptance(1, ok, "ETF exactness",
                      f"max deviation {worst:.2e} <= {ETF_TOL:g}, {elapsed:.3f}s < {ETF_SECONDS:g}s")
    assert ok


def test_criterion_02_metric_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(20240)
    worst = 0.0
    for _ in range(50):
        K = int(rng.integers(2, 6))
        m = int(rng.integers(1, 9))
        n = int(rng.integers(K, 51))
        labels = np.concatenate([np.arange(K), rng.integers(0, K, n - K)])
        feats = rng.standard_normal((K, m))[labels] * 2 + rng.standard_normal((n, m))
        W = rng.standard_normal((K, m))
        b = rng.standard_normal(K) * 0.1
        for mode in nc.NC1_MODES:
            rep = nc.report_from_features(feats, labels, W, b, nc1_mode=mode)
            want = nc_brute_force(feats, labels, W, b, K, mode)
            worst = max(worst, max(abs(getattr(rep, k) - want[k]) for k in METRICS))
    elapsed = time.perf_counter() - start
    ok = worst <= ORACLE_TOL and elapsed < ORACLE_SECONDS
    record_acceptance(2, ok, "metric oracle equivalence",
                      f"50 instances x 2 NC1 modes, max diff {worst:.2e} <= {ORACLE_TOL:g}, "
                      f"{elapsed:.2f}s < {ORACLE_SECONDS:g}s")
    assert ok


def test_criterion_03_perfect_collapse():
    worst = 0.0
    for K, m in ((2, 4), (4, 8), (10, 32)):
        etf = construct_etf(K, m, RngStream(K, "etf")).W_etf.astype(np.float64)
        labels = np.repeat(np.arange(K), 6)
        feats = 2.5 * etf[labels]
        for mode in nc.NC1_MODES:
            rep = nc.report_from_features(feats, labels, etf, np.zeros(K), nc1_mode=mode)
            worst = max(worst, max(getattr(rep, k) for k in METRICS))
    ok = worst <= COLLAPSE_TOL
    record_acceptance(3, ok, "perfect-collapse fixture", f"max metric {worst:.2e} <= {COLLAPSE_TOL:g}")
    assert ok


def test_criterion_04_gradient_soundness():
    start = time.perf_counter()
    worst = {}
    for seed in range(20):
        for name, err in gradcheck.check_layers(seed).items():
            worst[name] = max(worst.get(name, 0.0), err)
        for kind in ("mlp", "cnn"):
            worst[f"{kind} network"] = max(worst.get(f"{kind} network", 0.0),
                                           gradcheck.check_model(seed, kind))
    elapsed = time.perf_counter() - start
    top = max(worst.values())
    ok = top <= GRAD_TOL and elapsed < GRAD_SECONDS
    record_acceptance(4, ok, "gradient soundness",
                      f"{len(worst)} layers/networks x 20 seeds, max rel err {top:.2e} <= {GRAD_TOL:g}, "
                      f"{elapsed:.1f}s < {GRAD_SECONDS:g}s")
    assert ok


def test_criterion_05_trojan_efficacy(desk):
    start = time.process_time()
    runs = {s: d.trojaned() for s, d in desk.items()}
    cpu = time.process_time() - start
    hits = [r.timeline.tpt_start_epoch is not None and r.acc >= EFFICACY_MIN and r.asr >= EFFICACY_MIN
            for r in runs.values()]
    ok = sum(hits) >= QUOTA and cpu < EFFICACY_CPU_SECONDS
    record_acceptance(5, ok, "desk-scale trojan efficacy",
                      f"{sum(hits)}/5 seeds reach zero train error with ACC and ASR >= {EFFICACY_MIN}; "
                      f"ACC {fmt(r.acc for r in runs.values())}, ASR {fmt(r.asr for r in runs.values())}, "
                      f"TPT {[r.timeline.tpt_start_epoch for r in runs.values()]}, CPU {cpu:.0f}s")
    assert ok


def test_criterion_06_nc_disruption(desk):
    equinorm, target_min, detail = [], [], []
    for s, d in desk.items():
        troj, ben = d.trojaned().timeline, d.benign().timeline
        start = max(troj.tpt_start_epoch or math.inf, ben.tpt_start_epoch or math.inf)
        matched = sorted({r.epoch for r in troj.rows} & {r.epoch for r in ben.rows})
        matched = [e for e in matched if e >= start]
        equinorm.append(bool(matched) and all(
            troj.row_at(e).report.nc2_norm_W >= ben.row_at(e).report.nc2_norm_W for e in matched))
        norms = troj.rows[-1].report.per_class_row_norms_W
        target_min.append(int(np.argmin(norms)) == d.target)
        detail.append(f"seed {s}: W row norms {fmt(norms)}")
    both = [a and b for a, b in zip(equinorm, target_min)]
    ok = sum(both) >= QUOTA
    record_acceptance(6, ok, "NC disruption",
                      f"trojaned NC2_Norm(W) >= benign at all matched post-TPT epochs in {sum(equinorm)}/5 seeds; "
                      f"target row has the smallest norm in {sum(target_min)}/5; both in {sum(both)}/5; "
                      + "; ".join(detail))
    assert ok


def test_criterion_07_cleansing(desk, cleansed):
    hits, asr5, asr1, drops = [], [], [], []
    for s, d in desk.items():
        acc0 = d.trojaned().acc
        (acc5, a5), (_, a1) = cleansed[s]["5%"], cleansed[s]["1%"]
        asr5.append(a5)
        asr1.append(a1)
        drops.append(acc0 - acc5)
        hits.append(a5 <= CLEAN_ASR_5 and acc0 - acc5 <= CLEAN_ACC_DROP_5 and a1 <= CLEAN_ASR_1)
    ok = sum(hits) >= QUOTA
    record_acceptance(7, ok, "desk-scale cleansing",
                      f"{sum(hits)}/5 seeds; 5% ASR {fmt(asr5)} <= {CLEAN_ASR_5}, "
                      f"ACC drop {fmt(drops)} <= {CLEAN_ACC_DROP_5}, 1% ASR {fmt(asr1)} <= {CLEAN_ASR_1}")
    assert ok


def test_criterion_08_baseline_ordering(desk, cleansed):
    ft, etf = [], []
    for s, d in desk.items():
        ft.append(d.cleanse(d.trojaned(), d.subset(0.01), method="ft")[1])
        etf.append(cleansed[s]["1%"][1])
    hits = [a >= b for a, b in zip(ft, etf)]
    ok = sum(hits) >= QUOTA
    record_acceptance(8, ok, "FT vs ETF-FT at 1%",
                      f"FT ASR {fmt(ft)} >= ETF-FT ASR {fmt(etf)} in {sum(hits)}/5 seeds")
    assert ok


def test_criterion_09_adaptive_attack(desk):
    before, after = [], []
    for d in desk.values():
        run = d.adaptive()
        before.append(run.asr)
        after.append(d.cleanse(run, d.subset(0.05), etf_label="etf/fresh")[1])
    hits = [b >= ADAPTIVE_ASR_BEFORE and a <= ADAPTIVE_ASR_AFTER for b, a in zip(before, after)]
    ok = sum(hits) >= QUOTA
    record_acceptance(9, ok, "adaptive attack",
                      f"{sum(hits)}/5 seeds; ASR before {fmt(before)} >= {ADAPTIVE_ASR_BEFORE}, "
                      f"after ETF-FT with a fresh ETF seed {fmt(after)} <= {ADAPTIVE_ASR_AFTER}")
    assert ok


def test_criterion_10_not_overtrained(desk):
    hits, stops, asr5, asr1 = [], [], [], []
    for d in desk.values():
        run = d.not_overtrained()
        stops.append(run.timeline.rows[-1].epoch)
        acc5, a5 = d.cleanse(run, d.subset(0.05))
        _, a1 = d.cleanse(run, d.subset(0.01))
        asr5.append(a5)
        asr1.append(a1)
        hits.append(run.timeline.rows[-1].epoch == run.timeline.tpt_start_epoch
                    and a5 <= CLEAN_ASR_5 and run.acc - acc5 <= CLEAN_ACC_DROP_5 and a1 <= CLEAN_ASR_1)
    ok = sum(hits) >= QUOTA
    record_acceptance(10, ok, "not-overtrained",
                      f"{sum(hits)}/5 seeds; stopped at epochs {stops}; 5% ASR {fmt(asr5)}, 1% ASR {fmt(asr1)}")
    assert ok


def _robust_variant(desk, corruption):
    hits, notes = [], []
    for s, d in desk.items():
        try:
            subset = d.subset(0.01, corruption)
        except ValueError as exc:
            hits.append(False)
            notes.append(f"seed {s}: {exc}")
            continue
        acc, asr = d.cleanse(d.trojaned(), subset)
        hits.append(d.trojaned().acc - acc <= ROBUST_ACC_DROP and asr <= ROBUST_ASR)
        notes.append(f"seed {s}: ACC {acc:.3g} ASR {asr:.3g}")
    return sum(hits), notes


def test_criterion_11_robustness(desk):
    n_imb, imb_notes = _robust_variant(desk, "imbalance")
    n_era, era_notes = _robust_variant(desk, "erasure")
    ok = n_imb >= ROBUST_QUOTA and n_era >= ROBUST_QUOTA
    record_acceptance(11, ok, "robustness at 1%",
                      f"imbalance ratio 10: {n_imb}/5 seeds ({imb_notes[0]}); "
                      f"erasure prob 0.5: {n_era}/5 seeds ({'; '.join(era_notes)})")
    assert ok


def test_criterion_12_reproducibility(tmp_path):
    first, second = tmp_path / "first", tmp_path / "second"
    assert main(["run", "--config", "configs/headline.json", "--out", str(first)]) == 0
    assert main(["run", "--config", str(first / "config.resolved.json"), "--out", str(second)]) == 0
    a = (first / "summary.json").read_bytes()
    b = (second / "summary.json").read_bytes()
    summary = json.loads(a)
    ok = a == b and not summary["incomplete"]
    record_acceptance(12, ok, "reproducibility from config.resolved.json",
                      f"summary.json identical: {a == b}; ACC {summary['acc_before']} -> {summary['acc_after']}, "
                      f"ASR {summary['asr_before']} -> {summary['asr_after']}")
    assert ok
