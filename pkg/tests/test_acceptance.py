"""The ten acceptance criteria at their stated tolerances.

Each test prints one ``ACCEPTANCE <k> PASS|FAIL`` line with the measured
values and its runtime against the stated budget. Criterion 9 runs the
full desk-scale 2D pipeline (tens of minutes on one core).
"""

import json
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.linalg import expm

from langevin_rom.cir import CirClosedForms, operator_affine_mc, simulate_exact
from langevin_rom.config import load_config
from langevin_rom.lagstats import empirical_correlation, polynomial_library
from langevin_rom.pipeline import Pipeline
from langevin_rom.rom import FunctionMobility, build_rom, simulate_rom
from langevin_rom.score import (NoiseSchedule, ScoreTrainConfig, conditional_score, extract_lagged_pairs,
                                train_joint_score, train_stationary_score)
from langevin_rom.sde import CirParams, DataConfig, OuParams, TrajectoryEnsemble, ou_conditional_score

ROOT = Path(__file__).resolve().parents[1]
pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(acceptance_line):
    def check(k, ok, seconds, budget, detail):
        in_time = seconds < budget
        status = "PASS" if ok and in_time else "FAIL"
        line = f"ACCEPTANCE {k} {status}: {detail}; runtime {seconds:.1f} s (budget {budget:g} s)"
        acceptance_line(line)
        assert ok, line
        assert in_time, line

    return check


def test_1_cir_analytic_recovery(tmp_path, report):
    cfg = load_config("cir-analytic")
    t0 = time.perf_counter()
    rec = Pipeline(cfg, tmp_path).run()["cir-analytic"]
    dt = time.perf_counter() - t0
    err = rec.summary["abs_error"]
    report(1, err <= 1e-10 and list(cfg.cir.alphas) == [2, 3], dt, 1.0,
           f"a = {rec.summary['a']:.15f}, |a - gamma| = {err:.2e} (limit 1e-10)")


def test_2_coordinate_nullspace(report):
    cf = CirClosedForms(CirParams(1.0, 1.0, 0.5))
    t0 = time.perf_counter()
    lags = np.linspace(0.1, 1.0, 10)
    k1 = [cf.k_alpha(1, t) for t in lags]
    rng = np.random.default_rng(20)
    z = []
    for t in (0.1, 0.5, 1.0):
        x0, xt = cf.sample_pairs(rng, 1_000_000, t)
        m, se = operator_affine_mc(cf, x0, xt, t, 1, control_variate=False)
        z.append(m / se)
    dt = time.perf_counter() - t0
    ok = all(v == 0.0 for v in k1) and all(abs(v) <= 3 for v in z)
    report(2, ok, dt, 60.0, f"K_1 exactly 0 on 10 lags: {all(v == 0.0 for v in k1)}; "
           f"MC coordinate operator / SE at t=0.1,0.5,1 with 1e6 pairs: {np.round(z, 2).tolist()} (limit 3)")


def test_3_phi_estimator_cir(tmp_path, report):
    cfg = load_config("cir-mc")
    t0 = time.perf_counter()
    recs = Pipeline(cfg, tmp_path).run(only=["data", "correlations"])
    dt = time.perf_counter() - t0
    n = recs["data"].summary["n_samples"]
    s = recs["correlations"].summary
    ok = n >= 5_000_000 and s["Phi_rel_error"] < 0.05
    report(3, ok, dt, 300.0, f"Phi_hat = {s['Phi'][0][0]:.4f} vs 0.5, rel error {s['Phi_rel_error']:.4f} (limit 0.05), "
           f"{n} post-burn-in samples")


def test_4_dsm_gaussian_oracle(report):
    sigma = 0.05
    x = np.random.default_rng(0).standard_normal((100_000, 1))
    t0 = time.perf_counter()
    model = train_stationary_score(x, NoiseSchedule(sigma, sigma), ScoreTrainConfig(
        widths=(128, 64), epochs=1000, lr=1e-3, batch_size=1024, max_steps=3000, seed=0))
    dt = time.perf_counter() - t0
    g = np.linspace(-2, 2, 201)[:, None]
    rmse = float(np.sqrt(np.mean((model(g) + g / (1 + sigma**2)) ** 2)))
    report(4, rmse < 0.05, dt, 300.0, f"RMSE vs -x/(1+sigma^2) on [-2,2] = {rmse:.4f} (limit 0.05)")


def _ou_exact(n_traj, n, h, seed):
    rng = np.random.default_rng(seed)
    a = np.exp(-h)
    states = []
    for _ in range(n_traj):
        x = np.empty(n)
        x[0] = rng.standard_normal()
        eps = rng.standard_normal(n) * np.sqrt(1 - a * a)
        for k in range(1, n):
            x[k] = a * x[k - 1] + eps[k]
        states.append(x[:, None])
    return TrajectoryEnsemble(states, h / 10, 10)


def _conditional_errors(ens, lags, analytic, bulk, stat_cfg, joint_cfg):
    sched = NoiseSchedule(0.05, 0.05)
    pairs = extract_lagged_pairs(ens, lags)
    stat = train_stationary_score(ens.stacked(), sched, stat_cfg)
    joint = train_joint_score(pairs, sched, joint_cfg)
    errs = []
    for p in pairs:
        keep = bulk(p.x0[:, 0]) & bulk(p.xt[:, 0])
        x0, xt = p.x0[keep][:20000], p.xt[keep][:20000]
        ana = analytic(x0, xt, p.lag)
        est = conditional_score(joint, stat, x0, xt, p.lag)
        errs.append(float(np.sqrt(np.mean((est - ana) ** 2)) / np.sqrt(np.mean(ana**2))))
    return errs


def test_5_conditional_score_oracles(report):
    lags = [0.1, 0.25, 0.5]
    t0 = time.perf_counter()
    p = OuParams()
    ou = _conditional_errors(
        _ou_exact(8, 50_000, 0.01, 0), lags, lambda a, b, t: ou_conditional_score(p, a, b, t),
        lambda x: np.abs(x) <= 2.0,
        ScoreTrainConfig(widths=(64, 64), epochs=1000, lr=1e-3, max_steps=3000),
        ScoreTrainConfig(widths=(128, 64), epochs=10000, lr=1e-3, max_steps=6000, batch_size=1024, pairs_per_lag=100_000))
    cf = CirClosedForms(CirParams())
    ens = simulate_exact(cf, 8, 50_000, 0.01, seed=3)
    lo, hi = np.quantile(ens.stacked(), [0.05, 0.95])
    cir = _conditional_errors(
        ens, lags, lambda a, b, t: cf.conditional_score(b[:, 0], a[:, 0], t)[:, None],
        lambda x: (x >= lo) & (x <= hi),
        ScoreTrainConfig(widths=(64, 64), epochs=1000, lr=1e-3, max_steps=3000),
        ScoreTrainConfig(widths=(128, 64), epochs=10000, lr=1e-3, max_steps=10000, batch_size=1024, pairs_per_lag=100_000))
    dt = time.perf_counter() - t0
    ok = max(ou) < 0.1 and max(cir) < 0.15
    report(5, ok, dt, 900.0, f"OU rel RMSE at lags {lags}: {np.round(ou, 3).tolist()} (limit 0.1); "
           f"CIR: {np.round(cir, 3).tolist()} (limit 0.15)")


def test_6_central_identity_ou(tmp_path, report):
    t0 = time.perf_counter()
    rec = Pipeline(load_config("ou-oracle"), tmp_path).run()["identity"]
    dt = time.perf_counter() - t0
    rep = json.loads((tmp_path / "report/identity.json").read_text())
    lags = rep["lags"]
    ok = rec.summary["max_rel_error"] < 0.05 and min(lags) <= 0.1 + 1e-9 and max(lags) >= 1.0 - 1e-9
    report(6, ok, dt, 300.0, f"max relative gap |RHS - Cdot_xx| / |Cdot_xx| over tau in [{min(lags):.2f}, "
           f"{max(lags):.2f}] = {rec.summary['max_rel_error']:.4f} (limit 0.05)")


def _batch_se(per_traj):
    per_traj = np.asarray(per_traj)
    return per_traj.std(ddof=1) / math.sqrt(len(per_traj))


def test_7_stationarity_preservation(report):
    t0 = time.perf_counter()
    p = CirParams(1.0, 1.0, 0.5)
    cf = CirClosedForms(p)
    mob = FunctionMobility(lambda x: p.gamma * x[:, :, None], lambda x: np.full((len(x), 1), p.gamma))
    rom = build_rom(lambda x: cf.stationary_score(np.maximum(x, 1e-12)), mob, dim=1, positivity_floor=1e-12)
    n_traj = 32
    x0 = cf.sample_stationary(np.random.default_rng(7), n_traj)[:, None]
    ens = simulate_rom(rom, DataConfig(n_traj=n_traj, T=200.0, dt=1e-3, seed=7), x0=x0)
    means = [s[:, 0].mean() for s in ens.states]
    mu = float(np.mean(means))
    vars_ = [np.mean((s[:, 0] - mu) ** 2) for s in ens.states]
    var = float(np.mean(vars_))
    z_mean = (mu - p.theta) / _batch_se(means)
    z_var = (var - p.theta * p.gamma / p.kappa) / _batch_se(vars_)

    Phi = np.array([[0.8, -0.4], [0.4, 0.6]])
    rom2 = build_rom(lambda x: -np.asarray(x), Phi)
    ens2 = simulate_rom(rom2, DataConfig(n_traj=16, T=200.0, dt=1e-3, seed=5))
    cur = empirical_correlation(ens2, polynomial_library(2, 1), np.array([0.25, 0.5, 1.0]))
    C = cur.block(0, 0)[1:]
    asym = C[:, 0, 1] - C[:, 1, 0]
    ref = np.array([expm(-Phi * t)[0, 1] - expm(-Phi * t)[1, 0] for t in cur.lags[1:]])
    cov = np.cov(ens2.stacked().T)
    # per-trajectory spread of the asymmetry sets the detection threshold
    per = []
    for s in ens2.states:
        c1 = empirical_correlation(TrajectoryEnsemble([s], ens2.dt_integration, ens2.save_stride),
                                   polynomial_library(2, 1), np.array([0.5])).block(0, 0)[1]
        per.append(c1[0, 1] - c1[1, 0])
    z_asym = float(np.mean(per) / _batch_se(per))
    dt = time.perf_counter() - t0
    ok = (abs(z_mean) <= 3 and abs(z_var) <= 3 and abs(z_asym) > 3 and np.max(np.abs(cov - np.eye(2))) < 0.05
          and np.allclose(asym, ref, atol=0.05))
    report(7, ok, dt, 600.0,
           f"CIR ROM mean {mu:.4f} ({z_mean:+.2f} SE), var {var:.4f} ({z_var:+.2f} SE), limit 3 SE; "
           f"2D C_xy - C_yx at tau=0.25,0.5,1: {np.round(asym, 3).tolist()} vs exact {np.round(ref, 3).tolist()}, "
           f"{z_asym:.1f} SE from 0 at tau=0.5; max |cov - I| = {np.max(np.abs(cov - np.eye(2))):.3f}")


def test_8_gradient_integrity(report):
    t0 = time.perf_counter()
    cmd = [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
           str(ROOT / "tests/test_nn.py"),
           str(ROOT / "tests/test_mobility.py") + "::test_divergence_against_finite_differences",
           str(ROOT / "tests/test_mobility.py") + "::test_loss_gradient_against_finite_differences"]
    out = subprocess.run(cmd, capture_output=True, text=True, cwd=ROOT)
    dt = time.perf_counter() - t0
    tail = out.stdout.strip().splitlines()[-1] if out.stdout.strip() else out.stderr[-200:]
    report(8, out.returncode == 0, dt, 60.0, f"parameter, input and div M finite-difference checks "
           f"(20 draws per shape, rel 1e-4): {tail}")


def test_9_desk_affine2d(tmp_path, report):
    cfg = load_config("desk-affine2d")
    t0 = time.perf_counter()
    recs = Pipeline(cfg, tmp_path).run()
    dt = time.perf_counter() - t0
    s = recs["validate"].summary
    ks_c, ks_l = s["marginal_ks"]["constant"], s["marginal_ks"]["learned"]
    checks = {
        "a": s["mean_correction_ratio"] <= 0.1,
        "b": s["loss_reduction"] >= 5.0,
        "c": s["win_fraction_noncoordinate"] >= 0.7,
        "d": s["ks_ratio"] <= 1.5,
    }
    detail = (f"(a) |<dM>|/|Phi| = {s['mean_correction_ratio']:.4f} (<= 0.1) {checks['a']}; "
              f"(b) loss reduction {s['loss_reduction']:.2f}x (>= 5) {checks['b']}; "
              f"(c) wins on {s['win_fraction_noncoordinate'] * 16:.0f}/16 non-coordinate channels (>= 70%) {checks['c']}; "
              f"(d) KS learned {np.round(ks_l, 4).tolist()} vs constant {np.round(ks_c, 4).tolist()}, "
              f"worst ratio {s['ks_ratio']:.3f} (<= 1.5) {checks['d']}; "
              f"diagnostic Sym dM rel RMSE {s['delta_sym_relative_rmse']:.3f}")
    report(9, all(checks.values()), dt, 7200.0, detail)


def test_10_special_functions(report):
    t0 = time.perf_counter()
    out = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                          str(ROOT / "tests/test_specfun.py")], capture_output=True, text=True, cwd=ROOT)
    dt = time.perf_counter() - t0
    tail = out.stdout.strip().splitlines()[-1] if out.stdout.strip() else out.stderr[-200:]
    report(10, out.returncode == 0, dt, 10.0, f"specfun suite (recurrences, Kummer, small-z 1 - 2F1): {tail}")
