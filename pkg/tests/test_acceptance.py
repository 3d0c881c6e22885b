"""Acceptance gate: one test per criterion, each at its stated tolerance.

Run ``pytest tests/test_acceptance.py -v`` and read the "acceptance
criteria" section at the end of the report for one PASS/FAIL line each.
"""

import math
import time
import warnings

import numpy as np
import pytest

from mrfdesign.bloch import IsochromatEnsemble, TissueParams, conventional_schedule, simulate
from mrfdesign.crb import crb, fisher, irfisp_state_space, sensitivity_trajectory, state_space_sensitivities
from mrfdesign.design import DesignConfig, optimize, per_tissue_ncrb
from mrfdesign.dictionary import GridSpec, build_grid, generate, match_batch
from mrfdesign.mc import NoiseModel, local_grid, run_mc, snr_to_sigma

from conftest import random_schedule, random_tissue, record

SIGMA = snr_to_sigma(33.0, 0.6)


def test_c1_sensitivities_match_finite_differences():
    t0 = time.perf_counter()
    ens = IsochromatEnsemble.uniform(40)
    worst = 0.0
    for seed in range(3):
        rng = np.random.default_rng(100 + seed)
        s = random_schedule(rng, 100, phi=True)
        theta = random_tissue(rng)
        _, jac = sensitivity_trajectory(s, theta, ens)
        base = theta.as_array()
        for i in range(3):
            h = 1e-5 * base[i]
            up, dn = base.copy(), base.copy()
            up[i] += h
            dn[i] -= h
            fd = (simulate(s, TissueParams(*up), ens) - simulate(s, TissueParams(*dn), ens)) / (2 * h)
            # normwise per parameter: some channels are identically ~0 by symmetry
            err = np.max(np.abs(jac[..., i] - fd)) / np.max(np.abs(fd))
            worst = max(worst, err)
    dt = time.perf_counter() - t0
    ok = worst < 1e-5 and dt < 10
    record("C1", ok, f"max relative error {worst:.2e} (< 1e-5), {dt:.1f} s (< 10 s)")
    assert ok


def test_c2_fisher_scaling_and_psd(white_matter):
    t0 = time.perf_counter()
    ens = IsochromatEnsemble.uniform(40)
    _, jac = sensitivity_trajectory(conventional_schedule(400), white_matter, ens)
    f1 = fisher(jac, SIGMA).matrix
    f2 = fisher(jac, 2 * SIGMA).matrix
    scale_err = np.max(np.abs(4 * f2 - f1)) / np.max(np.abs(f1))
    sym_err = np.max(np.abs(f1 - f1.T)) / np.max(np.abs(f1))
    c1 = crb(fisher(jac, SIGMA), white_matter).crb_matrix
    c2 = crb(fisher(jac, 2 * SIGMA), white_matter).crb_matrix
    crb_err = np.max(np.abs(c2 - 4 * c1) / np.abs(4 * c1))
    w = np.linalg.eigvalsh(f1)
    dt = time.perf_counter() - t0
    ok = max(scale_err, sym_err, crb_err) < 1e-10 and w.min() >= -1e-10 * w.max() and dt < 1
    record("C2", ok, f"scaling {scale_err:.1e}, CRB scaling {crb_err:.1e}, asymmetry {sym_err:.1e}, "
                     f"min/max eig {w.min() / w.max():.2e}, {dt:.2f} s")
    assert ok


def test_c3_prefix_monotonicity(white_matter):
    t0 = time.perf_counter()
    s = conventional_schedule(400)
    ens = IsochromatEnsemble.uniform(400)
    diags = []
    for n in range(50, 401, 50):
        _, jac = sensitivity_trajectory(s.prefix(n), white_matter, ens)
        diags.append(np.diag(crb(fisher(jac, SIGMA), white_matter).crb_matrix))
    steps = np.diff(np.array(diags), axis=0)
    dt = time.perf_counter() - t0
    ok = bool(np.all(steps <= 0)) and dt < 30
    t2 = [math.sqrt(d[1]) / 60 for d in diags]
    record("C3", ok, f"nCRB(T2) over n=50..400: {' '.join(f'{v:.3f}' for v in t2)}; {dt:.1f} s")
    assert ok


def test_c4_coordinate_invariance():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    s = random_schedule(rng, 100, phi=True)
    theta = random_tissue(rng)
    ss = irfisp_state_space(s, theta, IsochromatEnsemble.uniform(40))
    u, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    base = crb(fisher(state_space_sensitivities(ss)[1], SIGMA), theta).crb_matrix
    moved = crb(fisher(state_space_sensitivities(ss.transformed(u))[1], SIGMA), theta).crb_matrix
    err = np.max(np.abs(moved - base)) / np.max(np.abs(base))
    dt = time.perf_counter() - t0
    ok = err < 1e-10 and dt < 10
    record("C4", ok, f"relative CRB change under basis rotation {err:.1e}, {dt:.1f} s")
    assert ok


def test_c5_design_improvement(designs_400):
    cfg = designs_400["cfg2"]
    before = per_tissue_ncrb(designs_400["init"], cfg)[0]
    after = designs_400["opt2"].per_tissue_ncrb[0]
    gain = before[1] / after[1]
    t1_change = after[0] / before[0] - 1

    t0 = time.perf_counter()
    cfg_ci = DesignConfig(n=200)
    init_ci = conventional_schedule(200, seed=0)
    res_ci = optimize(cfg_ci, init_ci)
    dt = time.perf_counter() - t0
    gain_ci = per_tissue_ncrb(init_ci, cfg_ci)[0, 1] / res_ci.per_tissue_ncrb[0, 1]

    ok = gain >= 1.5 and t1_change <= 0.10 and gain_ci >= 1.3 and dt < 1800
    record("C5", ok, f"N=400 Optimized-II nCRB(T2) {before[1]:.4f} -> {after[1]:.4f} (x{gain:.3f}, >= 1.5), "
                     f"nCRB(T1) change {t1_change:+.1%} (<= +10%); N=200 x{gain_ci:.3f} (>= 1.3) in {dt:.0f} s")
    assert ok


def test_c6_bang_bang_repetition_times(designs_400):
    cfg = designs_400["cfg2"]
    tr = designs_400["opt2"].schedule.tr
    band = 0.01 * (cfg.tr_max - cfg.tr_min)
    frac = float(np.mean((tr - cfg.tr_min <= band) | (cfg.tr_max - tr <= band)))
    ok = frac >= 0.8
    record("C6", ok, f"{frac:.1%} of TRs within 1% of a bound (>= 80%, warning-level)",
           status=None if ok else "WARN")
    if not ok:
        warnings.warn(f"only {frac:.1%} of optimized TRs are at a bound")


def test_c7_ml_efficiency(designs_400, white_matter):
    t0 = time.perf_counter()
    sched = designs_400["opt2"].schedule
    ens = IsochromatEnsemble.uniform(400)
    d = generate(sched, local_grid(white_matter, 120.0, 2.0, 15.0, 0.25), ens)
    res = run_mc(sched, white_matter, NoiseModel(SIGMA, seed=0), d, trials=500)
    r = res.empirical_std_over_crb
    dt = time.perf_counter() - t0
    ok = 0.95 <= r[1] <= 1.3 and bool(np.all(r >= 0.8)) and dt < 600
    record("C7", ok, f"std/sqrt(CRB) T1 {r[0]:.3f}, T2 {r[1]:.3f} (in [0.95, 1.3]), M0 {r[2]:.3f} "
                     f"(all >= 0.8); 500 trials, {len(d)} atoms, {dt:.0f} s")
    assert ok


def test_c8_dictionary_self_consistency(designs_400):
    t0 = time.perf_counter()
    sched = designs_400["opt2"].schedule
    spec = GridSpec()
    d = generate(sched, build_grid(spec), IsochromatEnsemble.uniform(400), spec)
    rng = np.random.default_rng(8)
    idx = rng.choice(len(d), size=math.ceil(0.01 * len(d)), replace=False)
    scales = rng.uniform(0.1, 2.0, idx.size)
    out = match_batch(d.trajectories[idx] * scales[:, None], d)
    hits = int(np.sum(np.all(out[:, :2] == d.atoms[idx], axis=1)))
    scale_err = float(np.max(np.abs(out[:, 2] / scales - 1)))
    dt = time.perf_counter() - t0
    ok = len(d) == 199 * 231 and hits == idx.size and scale_err < 1e-12 and dt < 300
    record("C8", ok, f"{hits}/{idx.size} atoms recovered of {len(d)}, max scale error {scale_err:.1e}, {dt:.0f} s")
    assert ok


def test_c9_excluded_image_experiments():
    record("C9", True, "phantom, scanner and in vivo reconstructions are out of scope; covered by C1-C8",
           status="EXCLUDED")
