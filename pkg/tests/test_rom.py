import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from langevin_rom.cir import CirClosedForms
from langevin_rom.lagstats import MeanMobility, empirical_correlation, polynomial_library
from langevin_rom.mobility import MobilityModel
from langevin_rom.rom import (FunctionMobility, RomBuildError, ValidationReport, _affine2d_sym_parts,
                              affine2d_reference_sym_delta, build_rom, reconstruct_circulation, simulate_rom,
                              support_grid, validate, write_curves_report_csv, write_marginals_csv)
from langevin_rom.score import Standardizer
from langevin_rom.sde import J2, Affine2dParams, CirParams, DataConfig, affine2d_noise

A = 0.4
PHI = np.array([[0.8, -A], [A, 0.6]])


def gaussian_score(x):
    return -np.asarray(x)


def test_indefinite_phi_rejected():
    with pytest.raises(RomBuildError):
        build_rom(gaussian_score, np.array([[1.0, 0.0], [0.0, -0.1]]))


def test_constant_rom_noise_and_drift():
    rom = build_rom(gaussian_score, PHI)
    x = np.random.default_rng(0).standard_normal((5, 2))
    sig = rom.noise_factor(x)
    assert np.allclose(sig[0] @ sig[0].T, 0.5 * (PHI + PHI.T))
    assert np.allclose(rom.drift(x), -x @ PHI.T)
    spec = rom.diffusion_spec()
    spec.noise_amplitude(x)
    assert np.array_equal(spec.drift(x), rom.drift(x))
    # a fresh state does not reuse the cached drift
    y = x + 1.0
    assert np.allclose(spec.drift(y), rom.drift(y))


def test_cir_rom_is_stationary_with_exact_score():
    p = CirParams(1.0, 1.0, 0.5)
    cf = CirClosedForms(p)
    mob = FunctionMobility(lambda x: p.gamma * x[:, :, None], lambda x: np.full((len(x), 1), p.gamma))
    rom = build_rom(lambda x: cf.stationary_score(np.maximum(x, 1e-12)), mob, dim=1, positivity_floor=1e-12)
    ens = simulate_rom(rom, DataConfig(n_traj=16, T=200.0, dt=1e-3, seed=2), x0=np.full((16, 1), p.theta))
    x = ens.stacked()
    assert x.min() >= 1e-12
    assert abs(x.mean() - p.theta) < 0.05
    assert abs(x.var() - p.theta * p.gamma / p.kappa) < 0.05


def test_antisymmetric_part_breaks_time_reversal():
    rom = build_rom(gaussian_score, PHI)
    ens = simulate_rom(rom, DataConfig(n_traj=16, T=200.0, dt=1e-3, seed=5))
    lib = polynomial_library(2, 1)
    lags = np.array([0.25, 0.5, 1.0])
    cur = empirical_correlation(ens, lib, lags)
    C = cur.block(0, 0)
    x = ens.stacked()
    assert np.allclose(np.cov(x.T), np.eye(2), atol=0.06)
    # for dx = -Phi x dt + ..., C(tau) = E[x_tau x_0^T] = expm(-Phi tau) Cov
    for k, t in enumerate(cur.lags):
        assert np.allclose(C[k], expm(-PHI * t), atol=0.05)
    # a reversible model would give C_xy = C_yx
    asym = C[:, 0, 1] - C[:, 1, 0]
    ref = np.array([(expm(-PHI * t)[0, 1] - expm(-PHI * t)[1, 0]) for t in cur.lags])
    assert np.all(np.abs(asym[1:]) > 0.1) and np.allclose(asym, ref, atol=0.06)


def test_zero_output_mobility_matches_constant_rom():
    P = 0.5 * (PHI + PHI.T) + 0.5 * (PHI - PHI.T)
    mm = MeanMobility(P, np.linalg.eigvalsh(0.5 * (P + P.T)), np.arange(3.0))
    model = MobilityModel.init(mm, Standardizer((0.0, 0.0), (1.0, 1.0)), (8,), 1e-4, 0)
    run = DataConfig(n_traj=2, T=5.0, dt=1e-3, seed=1)
    a = simulate_rom(build_rom(gaussian_score, model, name="learned"), run)
    b = simulate_rom(build_rom(gaussian_score, PHI, name="constant"), run)
    assert np.allclose(a.stacked(), b.stacked(), atol=1e-9)


def test_validate_identical_ensembles_and_io(tmp_path):
    rom = build_rom(gaussian_score, PHI)
    ref = simulate_rom(rom, DataConfig(n_traj=2, T=20.0, seed=3))
    other = simulate_rom(rom, DataConfig(n_traj=2, T=20.0, seed=4))
    lib = polynomial_library(2, 2)
    rep = validate(ref, {"constant": ref, "learned": other}, lib, [0.1, 0.2])
    assert rep.marginal_l1["constant"] == [0.0, 0.0] and rep.marginal_ks["constant"] == [0.0, 0.0]
    assert all(v > 0 for v in rep.marginal_l1["learned"])
    assert len(rep.wins["learned"]) == len(lib.channels) and not any(rep.wins["learned"])
    rep.to_json(tmp_path / "r.json")
    back = ValidationReport.from_json(str(tmp_path / "r.json"))
    assert back.channel_rmse == rep.channel_rmse and back.lags == rep.lags
    write_curves_report_csv(rep, tmp_path / "c.csv")
    write_marginals_csv(ref, {"learned": other}, tmp_path / "m.csv")
    assert (tmp_path / "c.csv").read_text().startswith("m,n,tau,ref")
    assert len((tmp_path / "m.csv").read_text().splitlines()) == 1 + 2 * 100


def test_validate_rejects_mismatched_sampling():
    rom = build_rom(gaussian_score, PHI)
    ref = simulate_rom(rom, DataConfig(n_traj=1, T=5.0, seed=3))
    other = simulate_rom(rom, DataConfig(n_traj=1, T=5.0, save_interval=0.02, seed=3))
    with pytest.raises(ValueError):
        validate(ref, {"learned": other}, polynomial_library(2, 1), [0.1])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_affine_sym_divergence_finite_differences(seed):
    p = Affine2dParams()
    x = np.random.default_rng(seed).uniform(-1.5, 1.5, (4, 2))
    D, div = _affine2d_sym_parts(p, x)
    B = affine2d_noise(p, x)
    assert np.allclose(D, 0.5 * B @ B.transpose(0, 2, 1))
    h = 1e-6
    fd = np.zeros_like(div)
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd += (_affine2d_sym_parts(p, x + e)[0] - _affine2d_sym_parts(p, x - e)[0])[:, :, j] / (2 * h)
    assert np.allclose(div, fd, atol=1e-8)
    assert np.allclose(affine2d_reference_sym_delta(p, D[0], x[:1])[0], 0.0, atol=1e-14)


def test_circulation_recovers_known_r():
    # Gaussian density, constant D, and r(x) = 0.3 + 0.2 x - 0.1 y
    D0 = np.array([[0.5, 0.1], [0.1, 0.4]])
    grad_r = np.array([0.2, -0.1])
    r_fn = lambda x: 0.3 + x @ grad_r

    def drift(x):
        s = -x
        return s @ D0.T + r_fn(x)[:, None] * (s @ J2.T) + grad_r @ J2.T

    sym = lambda x: (np.broadcast_to(D0, (len(x), 2, 2)), np.zeros((len(x), 2)))
    x = np.random.default_rng(0).standard_normal((400_000, 2))
    circ = reconstruct_circulation(drift, sym, gaussian_score, x, n=40, min_count=50)
    err = circ.r - r_fn(circ.points)
    assert np.sqrt(np.mean(err**2)) < 0.01 and circ.residual < 5e-3
    assert len(support_grid(x, 40, 50)) == len(circ.r)
