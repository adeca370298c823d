"""Acceptance suite: one PASS/FAIL line per criterion.

Lines are printed in the pytest terminal summary (see conftest.py) and also
written to ``acceptance.txt`` at the repository root. The slow
benchmark criteria (5 to 8) share one set of training runs.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from contsep import autodiff as ad
from contsep.autodiff import Tensor, gradcheck
from contsep.config import ExperimentConfig
from contsep.data import generate_class_bank, generate_dataset
from contsep.dsp import DESK, PAPER, apply_mask_and_reconstruct, istft, log_freq_resample, \
    ratio_mask, stft
from contsep.harness import (Frontend, aggregate_old_class_means, batch_losses, build_pairs,
                             run_experiment)
from contsep.losses import (CROSS_PAIRS, LossWeights, class_similarity_loss, cross_sdc,
                            instance_similarity_loss, main_separation_loss,
                            output_distillation_loss)
from contsep.metrics import bss_decompose, bss_eval
from contsep.model import Separator
from contsep.report import load_run, memory_sweep, read_metrics, summarize

from helpers import random_batch
from oracles import contrastive_loop

RESULTS: dict[int, tuple[bool, str]] = {}
OUT_FILE = Path(__file__).resolve().parent.parent / "acceptance.txt"

GRAD_TOL = 1e-4
ORACLE_TOL = 1e-10
FAST_BUDGET_S = 60.0
BENCH_BUDGET_S = 15 * 60.0
MARGIN_DB = 1.0
METHODS = ("finetune", "distill_only", "contav_sep", "upper_bound")
MEMORY_SIZES = (1, 2, 4, 8)


def report(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (ok, detail)
    OUT_FILE.write_text("".join(line(k) + "\n" for k in sorted(RESULTS)))
    print(line(n))


def line(n: int) -> str:
    ok, detail = RESULTS[n]
    return f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"


def check(n: int, ok: bool, detail: str) -> None:
    report(n, ok, detail)
    assert ok, detail


def _snr_db(ref, est):
    return 10 * np.log10(np.sum(ref ** 2) / np.sum((ref - est) ** 2))


# ---------------------------------------------------------------------------
# fast criteria


def test_criterion_1_gradients_match_finite_differences():
    start = time.process_time()
    rng = np.random.default_rng(1)
    worst = {"main": 0.0, "dist": 0.0, "inst": 0.0, "cls": 0.0}
    for _ in range(50):
        n = int(rng.integers(2, 7))
        shape = (n, 3, 4)
        z1 = Tensor(rng.standard_normal(shape), requires_grad=True)
        z2 = Tensor(rng.standard_normal(shape), requires_grad=True)
        g1, g2 = rng.random(shape), rng.random(shape)
        o1, o2 = rng.random(shape), rng.random(shape)
        m1, m2 = rng.random(n) < 0.5, rng.random(n) < 0.5
        m1[0] = True

        def main():
            return main_separation_loss(ad.sigmoid(z1), ad.sigmoid(z2), g1, g2)

        def dist():
            return output_distillation_loss(ad.sigmoid(z1), ad.sigmoid(z2), o1, o2, m1, m2)

        worst["main"] = max(worst["main"], *gradcheck(main, [z1, z2]))
        worst["dist"] = max(worst["dist"], *gradcheck(dist, [z1, z2]))
        batch, _ = random_batch(rng, n, dim=4)
        inputs = list(batch.current.values())
        worst["inst"] = max(worst["inst"], *gradcheck(
            lambda: cross_sdc(batch, LossWeights(1.0, 0.0)), inputs))
        worst["cls"] = max(worst["cls"], *gradcheck(
            lambda: cross_sdc(batch, LossWeights(0.0, 1.0)), inputs))
    secs = time.process_time() - start
    ok = max(worst.values()) <= GRAD_TOL and secs <= FAST_BUDGET_S
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    check(1, ok, f"max relative error {detail} (tol {GRAD_TOL:g}); {secs:.1f}s CPU")


def test_criterion_2_contrastive_losses_match_loop_oracle():
    start = time.process_time()
    worst = 0.0
    grads_zero = True
    for seed in range(100):
        rng = np.random.default_rng(seed)
        for n in range(1, 9):
            batch, raw = random_batch(rng, n)
            for pair in CROSS_PAIRS:
                for fn, by_class in ((instance_similarity_loss, False),
                                     (class_similarity_loss, True)):
                    got = fn(batch, pair, 0.07).item()
                    want = contrastive_loop(raw["sample_ids"], raw["class_ids"],
                                            raw["is_memory"], raw["cur"], raw["old"],
                                            pair[0], pair[1], 0.07, by_class, True)
                    worst = max(worst, abs(got - want))
        # old features enter the graph as constants
        batch, raw = random_batch(rng, 6)
        batch.is_memory[:] = True
        old = {m: Tensor(raw["old"][m], requires_grad=True) for m in "aom"}
        batch.old = {m: old[m].data for m in "aom"}
        cross_sdc(batch, LossWeights()).backward()
        grads_zero &= all(t.grad is None or not np.any(t.grad) for t in old.values())
    # and through the real separator: the frozen previous model never accumulates gradient
    data = generate_dataset(generate_class_bank(4, seed=0), 5, DESK.clip_samples, DESK.sample_rate)
    cfg = ExperimentConfig()
    model = Separator(cfg.separator_config(), seed=0)
    old_model = model.frozen_clone()
    train = data.subset("train")
    pairs = build_pairs(Frontend(DESK), train, 4, np.random.default_rng(0),
                        frozenset(s.sample_id for s in train))
    batch_losses(model, old_model, pairs, cfg.loss_weights())["total"].backward()
    grads_zero &= all(p.grad is None or not np.any(p.grad) for p in old_model.params.values())
    secs = time.process_time() - start
    ok = worst <= ORACLE_TOL and grads_zero and secs <= FAST_BUDGET_S
    check(2, ok, f"max |loss - oracle| {worst:.1e} (tol {ORACLE_TOL:g}); old-model gradients "
                 f"{'zero' if grads_zero else 'NONZERO'}; {secs:.1f}s CPU")


def test_criterion_3_dsp_fidelity():
    start = time.process_time()
    rng = np.random.default_rng(3)
    snrs = {}
    for label, prof in (("desk", DESK), ("paper", PAPER)):
        x = rng.standard_normal(prof.clip_samples)
        y = istft(stft(x, prof.window_len, prof.hop), x.size).samples
        n = prof.window_len
        snrs[label] = _snr_db(x[n:-n], y[n:-n])
    sr, n = DESK.sample_rate, DESK.clip_samples
    t = np.arange(n) / sr
    s1 = 0.5 * np.sin(2 * np.pi * 440 * t)
    s2 = 0.3 * np.sin(2 * np.pi * 1230 * t + 0.4)
    mix = stft(s1 + s2, DESK.window_len, DESK.hop)
    sdrs = []
    for target, ref in ((0, s1), (1, s2)):
        mag = stft(ref, DESK.window_len, DESK.hop).magnitude()
        for log_grid in (False, True):
            if log_grid:
                mask = ratio_mask(log_freq_resample(mag, DESK.log_bins),
                                  log_freq_resample(mix.magnitude(), DESK.log_bins))
            else:
                mask = ratio_mask(mag, mix.magnitude())
            est = apply_mask_and_reconstruct(mask, mix, n).samples
            sdrs.append(bss_eval(est, [s1, s2], target, filter_len=512)[0])
    secs = time.process_time() - start
    ok = min(snrs.values()) >= 60.0 and min(sdrs) >= 10.0 and secs <= FAST_BUDGET_S
    snr_txt = ", ".join(f"{k} {v:.1f} dB" for k, v in snrs.items())
    check(3, ok, f"round-trip SNR {snr_txt} (>= 60); two-tone mask SDR min {min(sdrs):.1f} dB "
                 f"(>= 10); {secs:.1f}s CPU")


def _band_noise(seed, n, lo, hi):
    spec = np.fft.rfft(np.random.default_rng(seed).standard_normal(n))
    keep = np.zeros(spec.size, dtype=bool)
    keep[lo:hi] = True
    x = np.fft.irfft(np.where(keep, spec, 0), n)
    return x / np.sqrt(np.mean(x * x))


def test_criterion_4_metric_correctness():
    start = time.process_time()
    rng = np.random.default_rng(4)
    refs = list(rng.standard_normal((2, 2000)))
    est = 0.8 * refs[0] + 0.3 * refs[1] + 0.1 * rng.standard_normal(2000)
    d = bss_decompose(est, refs, 0, filter_len=64)
    padded = np.pad(est, (0, 63))
    identity = np.linalg.norm(d.s_target + d.e_interf + d.e_artif - padded) / np.linalg.norm(padded)
    s1, s2 = _band_noise(0, 4096, 20, 600), _band_noise(1, 4096, 900, 1800)
    sir_val = bss_eval(s1 + 0.1 * s2, [s1, s2], 0, filter_len=64)[1]
    base = np.array(bss_eval(est, refs, 0, 64))
    drift = max(np.max(np.abs(np.array(bss_eval(k * est, refs, 0, 64)) - base))
                for k in (1e-3, 0.37, 12.0, -4.0))
    secs = time.process_time() - start
    ok = identity <= 1e-9 and abs(sir_val - 20.0) <= 0.5 and drift <= 1e-9 \
        and secs <= FAST_BUDGET_S
    check(4, ok, f"identity residual {identity:.1e} (<= 1e-9); orthogonal SIR {sir_val:.3f} dB "
                 f"(20 +- 0.5); scale drift {drift:.1e} dB (<= 1e-9); {secs:.1f}s CPU")


# ---------------------------------------------------------------------------
# benchmark criteria


def _final_and_old(records_by_seed):
    final = {s: recs[-1].sdr for s, recs in records_by_seed.items()}
    old = {s: aggregate_old_class_means(recs) for s, recs in records_by_seed.items()}
    return final, {s: (o[0] if o else None) for s, o in old.items()}


@pytest.fixture(scope="module")
def benchmark(desk_data, tmp_path_factory):
    """Train every method on the desk benchmark; returns per-method records and CPU time."""
    root = tmp_path_factory.mktemp("bench")
    cfg = ExperimentConfig()
    start = time.process_time()
    runs = {}
    for m in METHODS:
        run_experiment(cfg.with_overrides(method=m), desk_data, root / m)
        runs[m] = {seed: recs for (_, seed), recs in read_metrics(root / m / "metrics.csv").items()}
    return root, runs, time.process_time() - start


def _seed_mean(d):
    return float(np.mean(list(d.values())))


def test_criterion_5_forgetting_mitigation_trend(benchmark):
    _, runs, secs = benchmark
    finals = {m: _final_and_old(runs[m])[0] for m in METHODS}
    means = {m: _seed_mean(finals[m]) for m in METHODS}
    per_seed = [finals["contav_sep"][s] - finals["finetune"][s] for s in sorted(finals["finetune"])]
    gap_ok = all(g >= MARGIN_DB for g in per_seed)
    order = [means[m] for m in METHODS]
    order_ok = all(a <= b for a, b in zip(order, order[1:]))
    ok = gap_ok and order_ok and secs <= BENCH_BUDGET_S
    means_txt = ", ".join(f"{m} {means[m]:.2f}" for m in METHODS)
    gaps_txt = ", ".join(f"{g:+.2f}" for g in per_seed)
    check(5, ok, f"seed-mean final SDR {means_txt}; contav - finetune per seed {gaps_txt} "
                 f"(>= {MARGIN_DB}); ordering {'holds' if order_ok else 'violated'}; "
                 f"{secs / 60:.1f} min CPU (<= 15)")


def test_criterion_6_old_class_retention(benchmark):
    _, runs, _ = benchmark
    old_c = _seed_mean(_final_and_old(runs["contav_sep"])[1])
    old_f = _seed_mean(_final_and_old(runs["finetune"])[1])
    check(6, old_c - old_f >= MARGIN_DB,
          f"old-class mean SDR contav_sep {old_c:.2f} vs finetune {old_f:.2f} "
          f"(gap {old_c - old_f:+.2f}, needs >= {MARGIN_DB})")


def test_criterion_7_memory_size_trend(benchmark, desk_data, tmp_path_factory):
    root, _, _ = benchmark
    sweep_root = tmp_path_factory.mktemp("sweep")
    cfg = ExperimentConfig(method="contav_sep")
    dirs = [root / "contav_sep"]
    for k in MEMORY_SIZES[1:]:
        run_experiment(cfg.with_overrides(memory_per_class=k), desk_data, sweep_root / f"mem{k}")
        dirs.append(sweep_root / f"mem{k}")
    sweep = memory_sweep(summarize([load_run(d) for d in dirs]))
    sdrs = ", ".join(f"{k}: {r.final['sdr'][0]:.2f}" for k, r in zip(sweep.sizes, sweep.rows))
    rho = sweep.spearman
    check(7, rho is not None and rho > 0,
          f"seed-mean final SDR by memory size {{{sdrs}}}; Spearman {rho:.3f} (> 0)")


def test_criterion_8_full_constraint_beats_distillation_only(benchmark):
    _, runs, _ = benchmark
    full = _seed_mean(_final_and_old(runs["contav_sep"])[0])
    dist = _seed_mean(_final_and_old(runs["distill_only"])[0])
    check(8, full >= dist, f"seed-mean final SDR contav_sep {full:.2f} vs distill_only {dist:.2f}")


def test_criterion_9_metrics_are_bitwise_reproducible(desk_data, tmp_path):
    cfg = ExperimentConfig(steps_per_task=10, seeds=(0,), eval_mixtures=8)
    run_experiment(cfg, desk_data, tmp_path / "a")
    prev = os.environ.get("CONTSEP_THREADS")
    os.environ["CONTSEP_THREADS"] = "2"
    try:
        run_experiment(cfg, desk_data, tmp_path / "b")
    finally:
        if prev is None:
            os.environ.pop("CONTSEP_THREADS")
        else:
            os.environ["CONTSEP_THREADS"] = prev
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "metrics.csv").read_bytes()
    check(9, a == b, f"two runs of one config and seed give {'identical' if a == b else 'DIFFERENT'} "
                     f"metrics.csv ({len(a)} bytes; second run with 2 evaluation threads)")
