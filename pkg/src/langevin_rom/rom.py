"""Score-based Langevin reduced models and forward validation.

A reduced model integrates dx = [M(x) s(x) + div M(x)] dt + sqrt(2) Sigma(x) dW
with Sigma Sigma^T = Sym M(x). The constant closure uses M = Phi.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import ks_2samp

from .lagstats import ObservableLibrary, empirical_correlation
from .sde import DataConfig, DiffusionSpec, TrajectoryEnsemble, integrate_ensemble


class RomBuildError(ValueError):
    pass


@dataclass
class ConstantMobility:
    Phi: np.ndarray

    def __post_init__(self):
        self.Phi = np.atleast_2d(np.asarray(self.Phi, dtype=float))
        sym = 0.5 * (self.Phi + self.Phi.T)
        try:
            self.chol = np.linalg.cholesky(sym)
        except np.linalg.LinAlgError as exc:
            raise RomBuildError("Sym(Phi) is not positive definite; was Phi projected?") from exc

    def evaluate(self, x):
        n, d = len(x), self.Phi.shape[0]
        M = np.broadcast_to(self.Phi, (n, d, d))
        return M, None, None, np.zeros((n, d))


@dataclass
class FunctionMobility:
    """Hand-specified field ``M(x) -> (N, D, D)`` with divergence ``div(x) -> (N, D)``."""

    M: Callable[[np.ndarray], np.ndarray]
    div: Callable[[np.ndarray], np.ndarray]

    def evaluate(self, x):
        return self.M(x), None, None, self.div(x)


@dataclass
class RomSpec:
    score: Callable[[np.ndarray], np.ndarray]
    mobility: object
    dim: int
    positivity_floor: np.ndarray | None = None
    name: str = "rom"

    def drift(self, x):
        M, _, _, div = self.mobility.evaluate(x)
        s = np.asarray(self.score(x), dtype=float).reshape(len(x), -1)
        return np.einsum("nij,nj->ni", M, s) + div

    def noise_factor(self, x):
        """Sigma(x) with Sigma Sigma^T = Sym M(x)."""
        if isinstance(self.mobility, ConstantMobility):
            return np.broadcast_to(self.mobility.chol, (len(x), self.dim, self.dim))
        M, D, _, _ = self.mobility.evaluate(x)
        sym = D if D is not None else 0.5 * (M + M.transpose(0, 2, 1))
        return np.linalg.cholesky(sym)

    def drift_and_noise(self, x):
        M, D, _, div = self.mobility.evaluate(x)
        s = np.asarray(self.score(x), dtype=float).reshape(len(x), -1)
        drift = np.einsum("nij,nj->ni", M, s) + div
        if isinstance(self.mobility, ConstantMobility):
            return drift, np.broadcast_to(self.mobility.chol, (len(x), self.dim, self.dim))
        sym = D if D is not None else 0.5 * (M + M.transpose(0, 2, 1))
        return drift, np.linalg.cholesky(sym)

    def diffusion_spec(self) -> DiffusionSpec:
        # the engine calls noise_amplitude then drift at the same state, so one
        # mobility evaluation per step is shared between them
        cache = {}

        def noise(x):
            d, sig = self.drift_and_noise(x)
            cache["x"], cache["d"] = x, d
            return np.sqrt(2.0) * sig

        def drift(x):
            if cache.get("x") is x:
                return cache.pop("d")
            return self.drift(x)

        return DiffusionSpec(self.dim, drift, noise, self.positivity_floor, self.name)


def build_rom(score, mobility, dim: int | None = None, positivity_floor=None, name: str = "rom") -> RomSpec:
    """Learned model when ``mobility`` has ``evaluate``, constant closure for an array Phi."""
    if not hasattr(mobility, "evaluate"):
        mobility = ConstantMobility(mobility)
    if dim is None:
        dim = mobility.Phi.shape[0] if isinstance(mobility, ConstantMobility) else mobility.dim
    return RomSpec(score, mobility, dim, None if positivity_floor is None else np.atleast_1d(positivity_floor), name)


def simulate_rom(rom: RomSpec, run: DataConfig, x0=None, threads: int = 1) -> TrajectoryEnsemble:
    if x0 is None:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=run.seed, spawn_key=(0xA0,)))
        x0 = rng.standard_normal((run.n_traj, rom.dim))
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    ens = integrate_ensemble(rom.diffusion_spec(), x0, run.n_steps, run.dt, run.save_stride, run.seed,
                             run.burn_in, threads=threads)
    ens.meta.update({"system": rom.name, "T": run.T})
    return ens


# --- validation ----------------------------------------------------------------------


@dataclass
class ValidationReport:
    models: list[str]
    marginal_l1: dict
    marginal_ks: dict
    channel_names: list[str]
    channel_rmse: dict
    wins: dict = field(default_factory=dict)
    lags: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_json(self, path=None) -> str:
        s = json.dumps(asdict(self), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(s)
        return s

    @classmethod
    def from_json(cls, text_or_path) -> "ValidationReport":
        text = text_or_path
        if not text.lstrip().startswith("{"):
            with open(text_or_path) as fh:
                text = fh.read()
        return cls(**json.loads(text))


def marginal_histograms(reference: TrajectoryEnsemble, others: Mapping[str, TrajectoryEnsemble], bins: int = 100, width: float = 4.0):
    """Density histograms on reference-defined bins spanning mean +- width * std."""
    ref = reference.stacked()
    mu, sd = ref.mean(axis=0), ref.std(axis=0)
    out = {}
    for j in range(ref.shape[1]):
        edges = np.linspace(mu[j] - width * sd[j], mu[j] + width * sd[j], bins + 1)
        dens = {"reference": np.histogram(ref[:, j], edges)[0] / (len(ref) * np.diff(edges))}
        for name, ens in others.items():
            x = ens.stacked()[:, j]
            dens[name] = np.histogram(x, edges)[0] / (len(x) * np.diff(edges))
        out[j] = (edges, dens)
    return out


def validate(reference: TrajectoryEnsemble, roms: Mapping[str, TrajectoryEnsemble], lib: ObservableLibrary,
             lags: Sequence[float], baseline: str = "constant", bins: int = 100) -> ValidationReport:
    """Marginal L1/KS distances and per-channel correlation RMSE against the reference."""
    for name, ens in roms.items():
        if not np.isclose(ens.sample_interval, reference.sample_interval, rtol=1e-9):
            raise ValueError(f"{name}: sampling interval differs from the reference")
    hists = marginal_histograms(reference, roms, bins)
    ref = reference.stacked()
    l1 = {name: [] for name in roms}
    ks = {name: [] for name in roms}
    for j, (edges, dens) in hists.items():
        w = np.diff(edges)
        for name, ens in roms.items():
            l1[name].append(float(np.sum(np.abs(dens[name] - dens["reference"]) * w)))
            ks[name].append(float(ks_2samp(ref[:, j], ens.stacked()[:, j]).statistic))
    lags = np.asarray(lags, dtype=float)
    ref_c = empirical_correlation(reference, lib, lags)
    curves = {name: empirical_correlation(ens, lib, lags) for name, ens in roms.items()}
    names = [lib.channel_name(c) for c in lib.channels]
    rmse = {}
    for name, cur in curves.items():
        rmse[name] = [float(np.sqrt(np.mean((cur.block(m, n) - ref_c.block(m, n)) ** 2))) for m, n in lib.channels]
    wins = {}
    if baseline in rmse:
        for name in rmse:
            if name != baseline:
                wins[name] = [bool(a < b) for a, b in zip(rmse[name], rmse[baseline])]
    meta = {"bins": bins, "support": "reference mean +- 4 std", "baseline": baseline,
            "reference_curves": {nm: ref_c.block(m, n)[:, 0, 0].tolist() for nm, (m, n) in zip(names, lib.channels)},
            "model_curves": {name: {nm: cur.block(m, n)[:, 0, 0].tolist() for nm, (m, n) in zip(names, lib.channels)}
                             for name, cur in curves.items()}}
    return ValidationReport(list(roms), l1, ks, names, rmse, wins, ref_c.lags.tolist(), meta)


def write_marginals_csv(reference, roms: Mapping[str, TrajectoryEnsemble], path, bins: int = 100) -> None:
    hists = marginal_histograms(reference, roms, bins)
    names = list(roms)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["coord", "bin_center", "ref_density"] + [f"{n}_density" for n in names])
        for j, (edges, dens) in hists.items():
            centers = 0.5 * (edges[1:] + edges[:-1])
            for k, c in enumerate(centers):
                w.writerow([j, repr(float(c)), repr(float(dens["reference"][k]))] + [repr(float(dens[n][k])) for n in names])


def write_curves_report_csv(report: ValidationReport, path) -> None:
    models = report.models
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["m", "n", "tau", "ref"] + models)
        for nm in report.channel_names:
            m, n = nm.split("|")
            ref = report.meta["reference_curves"][nm]
            for k, tau in enumerate(report.lags):
                w.writerow([m, n, repr(tau), repr(ref[k])] + [repr(report.meta["model_curves"][mod][nm][k]) for mod in models])


# --- reference mobility diagnostics --------------------------------------------------


def affine2d_reference_sym_delta(params, Phi, x) -> np.ndarray:
    """Symmetric part of the reference correction: B(x) B(x)^T / 2 - Sym(Phi)."""
    from .sde import affine2d_noise

    B = affine2d_noise(params, np.atleast_2d(x))
    Phi = np.asarray(Phi, dtype=float)
    return 0.5 * B @ B.transpose(0, 2, 1) - 0.5 * (Phi + Phi.T)


def support_grid(samples, n: int = 64, min_count: int = 5):
    """Cell centers of an ``n x n`` histogram over the samples with at least ``min_count`` hits."""
    x = np.asarray(samples)
    H, ex, ey = np.histogram2d(x[:, 0], x[:, 1], bins=n)
    cx, cy = 0.5 * (ex[1:] + ex[:-1]), 0.5 * (ey[1:] + ey[:-1])
    gx, gy = np.meshgrid(cx, cy, indexing="ij")
    keep = H >= min_count
    return np.stack([gx[keep], gy[keep]], axis=1)


def sym_delta_relative_rmse(model, params, samples, n: int = 64) -> float:
    """||Sym dM_theta - Sym dM_ref|| / ||Sym dM_ref|| over occupied grid cells."""
    pts = support_grid(samples, n)
    ref = affine2d_reference_sym_delta(params, model.Phi_proj, pts)
    dm = model.delta(pts)
    est = 0.5 * (dm + dm.transpose(0, 2, 1))
    return float(np.sqrt(np.sum((est - ref) ** 2) / np.sum(ref**2)))


def _affine2d_sym_parts(params, x):
    """D = B B^T / 2 and (div D)_i = sum_j d_j D_ij for the affine noise."""
    from .sde import affine2d_noise

    B = affine2d_noise(params, x)
    _, B1, B2 = params.matrices()
    D = 0.5 * B @ B.transpose(0, 2, 1)
    div = np.zeros((len(x), 2))
    for j, Bj in enumerate((B1, B2)):
        dD = 0.5 * (Bj[None] @ B.transpose(0, 2, 1) + B @ Bj.T[None])
        div += dD[:, :, j]
    return D, div


@dataclass
class CirculationGrid:
    points: np.ndarray
    r: np.ndarray
    counts: np.ndarray
    residual: float


def reconstruct_circulation(drift, sym_parts, score, samples, n: int = 48, min_count: int = 20,
                            reg: float = 1e-6) -> CirculationGrid:
    """Least-squares grid solve for a scalar r with antisymmetric part R = r J.

    ``sym_parts(x)`` returns ``(D, div D)``. The drift identity
    F = (D + r J) s + div D + J grad r gives grad r + r s = J^T (F - D s - div D).
    Central differences on the occupied cells of an ``n x n`` histogram,
    weighted by sqrt(count), with a small ridge term. Diagnostic only: the
    mobility fit never uses this.
    """
    from scipy.sparse import coo_matrix
    from scipy.sparse.linalg import lsqr

    from .sde import J2

    x = np.asarray(samples)
    H, ex, ey = np.histogram2d(x[:, 0], x[:, 1], bins=n)
    hx, hy = ex[1] - ex[0], ey[1] - ey[0]
    cx, cy = 0.5 * (ex[1:] + ex[:-1]), 0.5 * (ey[1:] + ey[:-1])
    mask = H >= min_count
    idx = -np.ones((n, n), dtype=int)
    idx[mask] = np.arange(mask.sum())
    ii, jj = np.nonzero(mask)
    pts = np.stack([cx[ii], cy[jj]], axis=1)
    D, divD = sym_parts(pts)
    s = np.asarray(score(pts), dtype=float)
    rho = drift(pts) - np.einsum("nij,nj->ni", D, s) - divD
    g = rho @ J2  # rows of J^T rho
    rows, cols, vals, rhs = [], [], [], []
    eq = 0
    for k, (i, j) in enumerate(zip(ii, jj)):
        w = np.sqrt(H[i, j])
        for axis, h in ((0, hx), (1, hy)):
            lo = (i - 1, j) if axis == 0 else (i, j - 1)
            hi = (i + 1, j) if axis == 0 else (i, j + 1)
            ok_lo = 0 <= lo[axis] < n and idx[lo] >= 0
            ok_hi = 0 <= hi[axis] < n and idx[hi] >= 0
            if ok_lo and ok_hi:
                terms = [(idx[hi], 0.5 / h), (idx[lo], -0.5 / h)]
            elif ok_hi:
                terms = [(idx[hi], 1.0 / h), (k, -1.0 / h)]
            elif ok_lo:
                terms = [(k, 1.0 / h), (idx[lo], -1.0 / h)]
            else:
                continue
            terms.append((k, s[k, axis]))
            for c, v in terms:
                rows.append(eq)
                cols.append(c)
                vals.append(w * v)
            rhs.append(w * g[k, axis])
            eq += 1
    m = len(pts)
    for k in range(m):
        rows.append(eq + k)
        cols.append(k)
        vals.append(np.sqrt(reg) * np.sqrt(H.max()))
    rhs = np.concatenate([rhs, np.zeros(m)])
    A = coo_matrix((vals, (rows, cols)), shape=(eq + m, m)).tocsr()
    sol = lsqr(A, rhs, atol=1e-12, btol=1e-12, iter_lim=20000)
    r = sol[0]
    resid = float(np.linalg.norm(A @ r - rhs) / max(np.linalg.norm(rhs), 1e-300))
    return CirculationGrid(pts, r, H[mask], resid)


def affine2d_circulation(params, score, samples, **kw) -> CirculationGrid:
    from .sde import affine2d_spec

    return reconstruct_circulation(affine2d_spec(params).drift, lambda x: _affine2d_sym_parts(params, x), score,
                                   samples, **kw)


def full_delta_relative_rmse(model, params, circ: CirculationGrid) -> float:
    """Relative RMSE of dM_theta against D_ref + r_ref J - Phi on the circulation grid."""
    from .sde import J2

    D, _ = _affine2d_sym_parts(params, circ.points)
    ref = D + circ.r[:, None, None] * J2[None] - model.Phi_proj[None]
    est = model.delta(circ.points)
    return float(np.sqrt(np.sum((est - ref) ** 2) / np.sum(ref**2)))
