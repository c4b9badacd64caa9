"""Closed forms for the CIR diffusion dX = kappa (theta - X) dt + sqrt(2 gamma X) dW.

With nu = kappa theta / gamma and beta = kappa / gamma the invariant law is
Gamma(nu, rate beta), the true mobility is M(x) = gamma x and its mean is
Phi = theta gamma. For power observables x^alpha paired with x, the affine
correction dM_a(x) = a (x - theta) is identified exactly: a = gamma.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import specfun
from .lagstats import cir_library, derivative_curves, empirical_correlation, estimate_phi
from .sde import CirParams, TrajectoryEnsemble


class DegenerateDesignError(ValueError):
    pass


class CirDomainError(ValueError):
    pass


def _positive(x, name="x"):
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise CirDomainError(f"{name} must be positive")
    return arr


@dataclass(frozen=True)
class CirClosedForms:
    params: CirParams = field(default_factory=CirParams)

    @property
    def kappa(self):
        return self.params.kappa

    @property
    def theta(self):
        return self.params.theta

    @property
    def gamma(self):
        return self.params.gamma

    @property
    def nu(self) -> float:
        return self.params.nu

    @property
    def beta(self) -> float:
        return self.params.beta

    def z(self, t):
        return np.exp(-self.kappa * np.asarray(t, dtype=float))

    def c(self, t):
        return self.beta / (1.0 - self.z(t))

    @property
    def phi(self) -> float:
        return self.theta * self.gamma

    # --- stationary law -------------------------------------------------------

    def stationary_log_density(self, x):
        x = _positive(x)
        nu, b = self.nu, self.beta
        return nu * math.log(b) + (nu - 1.0) * np.log(x) - b * x - specfun.log_gamma(nu)

    def stationary_density(self, x):
        return np.exp(self.stationary_log_density(x))

    def stationary_score(self, x):
        """s(x) = (nu - 1)/x - beta."""
        x = _positive(x)
        return (self.nu - 1.0) / x - self.beta

    def mobility(self, x):
        return self.gamma * np.asarray(x, dtype=float)

    def stationary_moment(self, alpha):
        return math.exp(specfun.log_gamma(alpha + self.nu) - specfun.log_gamma(self.nu)) * self.beta ** (-alpha)

    # --- transitions ------------------------------------------------------------

    def transition_log_density(self, x, x0, t):
        """log p_t(x | x0) from the Bessel form in u = c z x0, v = c x."""
        x = _positive(x)
        x0 = _positive(x0, "x0")
        if t <= 0:
            raise CirDomainError("t must be positive")
        c, z = self.c(t), self.z(t)
        u, v = c * z * x0, c * x
        q = self.nu - 1.0
        arg = 2.0 * np.sqrt(u * v)
        return math.log(c) - (u + v) + 0.5 * q * np.log(v / u) + specfun.log_bessel_i(q, arg)

    def transition_density(self, x, x0, t):
        return np.exp(self.transition_log_density(x, x0, t))

    def conditional_score(self, x, x0, t):
        """d/dx0 log p_t(x | x0) = c z [-1 + sqrt(x/(z x0)) I_nu(r)/I_{nu-1}(r)], r = 2c sqrt(z x0 x)."""
        x = _positive(x)
        x0 = _positive(x0, "x0")
        if np.any(np.asarray(t) <= 0):
            raise CirDomainError("t must be positive")
        c, z = self.c(t), self.z(t)
        r = 2.0 * c * np.sqrt(z * x0 * x)
        ratio = specfun.bessel_i_ratio(self.nu, r)
        return c * z * (-1.0 + np.sqrt(x / (z * x0)) * ratio)

    def conditional_moment(self, alpha, t, x0):
        """E[X_t^alpha | X_0 = x0] = c^-alpha Gamma(alpha+nu)/Gamma(nu) 1F1(-alpha; nu; -c z x0)."""
        if alpha + self.nu <= 0:
            raise CirDomainError("need alpha + nu > 0")
        x0 = np.asarray(x0, dtype=float)
        if np.isinf(t):
            return np.full_like(x0, self.stationary_moment(alpha))
        c, z = self.c(t), self.z(t)
        g = math.exp(specfun.log_gamma(alpha + self.nu) - specfun.log_gamma(self.nu))
        return c ** (-alpha) * g * specfun.hyp1f1(-alpha, self.nu, -c * z * x0)

    def conditional_moment_dx0(self, alpha, t, x0):
        """d/dx0 of the conditional moment."""
        c, z = self.c(t), self.z(t)
        g = math.exp(specfun.log_gamma(alpha + self.nu) - specfun.log_gamma(self.nu + 1.0))
        return alpha * z * c ** (1.0 - alpha) * g * specfun.hyp1f1(1.0 - alpha, self.nu + 1.0, -c * z * np.asarray(x0, dtype=float))

    # --- correlations -------------------------------------------------------------

    def _gratio(self, alpha, shift):
        return math.exp(specfun.log_gamma(alpha + self.nu) - specfun.log_gamma(self.nu + shift))

    def correlation(self, alpha, t):
        """C_{alpha,1}(t) = <X_t^alpha X_0> = beta^-(alpha+1) Gamma(alpha+nu)/Gamma(nu) (nu + alpha z)."""
        z = self.z(t)
        return self.beta ** (-(alpha + 1.0)) * self._gratio(alpha, 0.0) * (self.nu + alpha * z)

    def correlation_derivative(self, alpha, t):
        z = self.z(t)
        return -alpha * self.theta * self.gamma * self.beta ** (1.0 - alpha) * self._gratio(alpha, 1.0) * z

    def score_correlation(self, alpha, t):
        """<X_t^alpha s(X_0)> = -alpha z beta^(1-alpha) Gamma(alpha+nu)/Gamma(nu+1) 2F1(1-alpha, 1; nu+1; z)."""
        z = self.z(t)
        return -alpha * z * self.beta ** (1.0 - alpha) * self._gratio(alpha, 1.0) * specfun.hyp2f1(1.0 - alpha, 1.0, self.nu + 1.0, z)

    def k_alpha(self, alpha, t):
        z = self.z(t)
        f = specfun.hyp2f1(1.0 - alpha, 1.0, self.nu + 1.0, z)
        return alpha * self.theta * z * self.beta ** (1.0 - alpha) * self._gratio(alpha, 1.0) * (1.0 - f)

    def residual(self, alpha, t):
        """E_{alpha,1}(t) by the defining subtraction Cdot - Phi <X_t^alpha s(X_0)>."""
        return self.correlation_derivative(alpha, t) - self.phi * self.score_correlation(alpha, t)

    def residual_reduced(self, alpha, t):
        """E_{alpha,1}(t) = -gamma K_alpha(t)."""
        return -self.gamma * self.k_alpha(alpha, t)

    def operator_affine(self, alpha, t, a=1.0):
        """A_{t,alpha,1}[a (x - theta)] = -a K_alpha(t)."""
        return -a * self.k_alpha(alpha, t)

    # --- exact sampling ------------------------------------------------------------

    def sample_stationary(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.gamma(self.nu, 1.0 / self.beta, size=n)

    def sample_transition(self, rng: np.random.Generator, x0, t) -> np.ndarray:
        """2 c X_t | x0 is noncentral chi-square with 2 nu dof and noncentrality 2 c z x0."""
        c, z = self.c(t), self.z(t)
        x0 = np.asarray(x0, dtype=float)
        return rng.noncentral_chisquare(2.0 * self.nu, 2.0 * c * z * x0) / (2.0 * c)

    def sample_pairs(self, rng: np.random.Generator, n: int, t: float):
        x0 = self.sample_stationary(rng, n)
        return x0, self.sample_transition(rng, x0, t)


def simulate_exact(cf: CirClosedForms, n_traj: int, n_samples: int, h: float, seed: int = 0) -> TrajectoryEnsemble:
    """Exact CIR chains on the grid ``k h``, started from the stationary law.

    Each step draws from the noncentral chi-square transition, so there is
    no discretization bias and no boundary clipping.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xC1,)))
    x = np.empty((n_samples, n_traj))
    x[0] = cf.sample_stationary(rng, n_traj)
    for k in range(1, n_samples):
        x[k] = cf.sample_transition(rng, x[k - 1], h)
    return TrajectoryEnsemble([x[:, i, None] for i in range(n_traj)], h, 1, 0.0, seed, {"system": "cir", "sampler": "exact"})


def operator_affine_mc(cf: CirClosedForms, x0, xt, t, alpha, a=1.0, control_variate: bool = True):
    """Monte Carlo -<X_t^alpha s_{t|0} a (X_0 - theta)> with the analytic conditional score.

    Since E[s_{t|0}(X_t | x0) | X_0 = x0] = 0, replacing X_t^alpha by
    X_t^alpha - X_0^alpha leaves the mean unchanged; with ``control_variate``
    the difference is used, which removes most of the variance at short lags.
    Returns the estimate and its (i.i.d.) standard error.
    """
    x0 = np.asarray(x0, dtype=float)
    xt = np.asarray(xt, dtype=float)
    obs = xt**alpha - (x0**alpha if control_variate else 0.0)
    terms = -obs * cf.conditional_score(xt, x0, t) * a * (x0 - cf.theta)
    return float(terms.mean()), float(terms.std(ddof=1) / math.sqrt(len(terms)))


@dataclass
class InverseResult:
    a: float
    gamma: float
    alphas: list
    lags: list
    residuals: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def error(self) -> float:
        return abs(self.a - self.gamma)

    def to_json(self, path=None) -> str:
        s = json.dumps(asdict(self), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(s)
        return s


def _lstsq_scalar(design: np.ndarray, target: np.ndarray, tol: float = 1e-14) -> float:
    denom = float(design @ design)
    if denom <= tol * max(1.0, float(target @ target)):
        raise DegenerateDesignError("all operator values vanish; add an observable with alpha != 1")
    return float(design @ target) / denom


def solve_affine_inverse(cf: CirClosedForms, alphas: Sequence[float] = (2, 3), t_grid: Sequence[float] | None = None) -> InverseResult:
    """Least squares for a in A[a (x - theta)] = E over all (alpha, t), analytic objects only."""
    t_grid = np.linspace(0.1, 1.0, 10) if t_grid is None else np.asarray(t_grid, dtype=float)
    rows, design, target = [], [], []
    for alpha in alphas:
        for t in t_grid:
            A1 = cf.operator_affine(alpha, t, 1.0)
            E = cf.residual(alpha, t)
            design.append(A1)
            target.append(E)
            rows.append({"alpha": alpha, "t": float(t), "A_unit": A1, "E": E, "E_reduced": cf.residual_reduced(alpha, t)})
    a = _lstsq_scalar(np.array(design), np.array(target))
    for r in rows:
        r["misfit"] = a * r["A_unit"] - r["E"]
    return InverseResult(a, cf.gamma, list(alphas), [float(t) for t in t_grid], rows, {"path": "analytic"})


def solve_affine_inverse_mc(cf: CirClosedForms, ens: TrajectoryEnsemble, alphas: Sequence[int] = (2,),
                            t_grid: Sequence[float] | None = None, lag_step: float | None = None,
                            bc_type: str = "not-a-knot", control_variate: bool = True) -> InverseResult:
    """Same least squares with empirical residuals and the analytic conditional score.

    Correlations use the grid ``{0, h, 2h, ...}`` up to the largest fit lag,
    with ``h = lag_step`` (default: the sampling interval). Phi is estimated
    from the data, and the stationary score in the baseline term is analytic.
    """
    t_grid = np.linspace(0.1, 1.0, 10) if t_grid is None else np.asarray(t_grid, dtype=float)
    h = ens.sample_interval if lag_step is None else lag_step
    n_lag = int(round(t_grid.max() / h))
    lags = h * np.arange(n_lag + 1)
    lib = cir_library(sorted(set(int(a) for a in alphas) | {1}))
    curves = derivative_curves(empirical_correlation(ens, lib, lags), bc_type)
    phi = estimate_phi(curves)
    phi_hat = float(phi.Phi[0, 0])
    names = lib.names()
    steps = ens.sample_interval
    rows, design, target = [], [], []
    for alpha in alphas:
        m = names.index("x" if alpha == 1 else f"x^{alpha}")
        n = names.index("x")
        for t in t_grid:
            k = int(np.argmin(np.abs(curves.lags - t)))
            kk = int(round(t / steps))
            x0 = np.concatenate([s[: len(s) - kk, 0] for s in ens.states])
            xt = np.concatenate([s[kk:, 0] for s in ens.states])
            G = phi_hat * float(np.mean(xt**alpha * cf.stationary_score(x0)))
            E = float(curves.dblock(m, n)[k, 0, 0]) - G
            A1, se = operator_affine_mc(cf, x0, xt, t, alpha, 1.0, control_variate)
            design.append(A1)
            target.append(E)
            rows.append({"alpha": alpha, "t": float(t), "A_unit": A1, "A_unit_se": se, "E": E,
                         "E_analytic": cf.residual(alpha, t), "A_unit_analytic": cf.operator_affine(alpha, t)})
    a = _lstsq_scalar(np.array(design), np.array(target))
    for r in rows:
        r["misfit"] = a * r["A_unit"] - r["E"]
    meta = {"path": "monte-carlo", "phi_hat": phi_hat, "phi_true": cf.phi, "n_samples": ens.n_samples,
            "lag_step": h, "bc_type": bc_type, "control_variate": control_variate}
    return InverseResult(a, cf.gamma, list(alphas), [float(t) for t in t_grid], rows, meta)
