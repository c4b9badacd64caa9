"""Observable library, lagged correlation curves and the constant mobility Phi.

Correlations are uncentered by default:
``C_{m,n}(tau) = <phi_m(x_tau) phi_n(x_0)^T>`` averaged over every
within-trajectory pair at that lag.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .sde import TrajectoryEnsemble
from .score import lag_to_steps


class InsufficientPairsError(ValueError):
    pass


class DegenerateGridError(ValueError):
    pass


class IndefiniteMobilityError(ValueError):
    pass


# --- observables -------------------------------------------------------------------


@dataclass(frozen=True)
class Coordinate:
    """phi(x) = x, the vector-valued coordinate observable."""

    dim: int
    name: str = "coord"

    @property
    def out_dim(self) -> int:
        return self.dim

    def value(self, x):
        return np.asarray(x, dtype=float)

    def grad(self, x):
        return np.broadcast_to(np.eye(self.dim), (len(x), self.dim, self.dim))

    def hess(self, x):
        return np.zeros((len(x), self.dim, self.dim, self.dim))


VAR_NAMES = "xyzuvw"


@dataclass(frozen=True)
class Monomial:
    """Scalar monomial prod_i x_i^p_i."""

    powers: tuple[int, ...]

    @property
    def dim(self) -> int:
        return len(self.powers)

    @property
    def out_dim(self) -> int:
        return 1

    @property
    def degree(self) -> int:
        return sum(self.powers)

    @property
    def name(self) -> str:
        names = VAR_NAMES if self.dim <= len(VAR_NAMES) else [f"x{i + 1}" for i in range(self.dim)]
        parts = [names[i] + (f"^{p}" if p > 1 else "") for i, p in enumerate(self.powers) if p]
        return "".join(parts) or "1"

    def _pow(self, x, i, k):
        # d^k/dx^k of x^p, coefficient times power
        p = self.powers[i]
        if k > p:
            return np.zeros(len(x))
        c = 1.0
        for j in range(k):
            c *= p - j
        return c * x[:, i] ** (p - k)

    def _term(self, x, orders):
        out = np.ones(len(x))
        for i in range(self.dim):
            out = out * self._pow(x, i, orders[i])
        return out

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return self._term(x, [0] * self.dim)[:, None]

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        cols = []
        for i in range(self.dim):
            o = [0] * self.dim
            o[i] = 1
            cols.append(self._term(x, o))
        return np.stack(cols, axis=1)[:, None, :]

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        h = np.empty((len(x), self.dim, self.dim))
        for i in range(self.dim):
            for j in range(i, self.dim):
                o = [0] * self.dim
                o[i] += 1
                o[j] += 1
                h[:, i, j] = h[:, j, i] = self._term(x, o)
        return h[:, None, :, :]


def monomials(dim: int, max_degree: int) -> list[Monomial]:
    """All monomials of degree 1..max_degree, graded, x-powers descending."""
    out = []
    for deg in range(1, max_degree + 1):
        combos = [p for p in itertools.product(range(deg + 1), repeat=dim) if sum(p) == deg]
        out += [Monomial(tuple(p)) for p in sorted(combos, reverse=True)]
    return out


@dataclass
class ObservableLibrary:
    """Observables with closed-form derivatives and the fitted channel set.

    Index 0 is always the coordinate observable; channels are ordered
    ``(m, n)`` index pairs into ``observables``.
    """

    observables: list
    channels: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.observables or not isinstance(self.observables[0], Coordinate):
            raise ValueError("observable 0 must be the coordinate observable")

    @property
    def dim(self) -> int:
        return self.observables[0].dim

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([o.out_dim for o in self.observables])])

    @property
    def n_features(self) -> int:
        return int(self.offsets[-1])

    def names(self) -> list[str]:
        return [o.name for o in self.observables]

    def channel_name(self, ch) -> str:
        m, n = ch
        return f"{self.observables[m].name}|{self.observables[n].name}"

    def features(self, x) -> np.ndarray:
        """All observable values stacked column-wise, shape ``(N, n_features)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.concatenate([o.value(x) for o in self.observables], axis=1)

    def index(self, name: str) -> int:
        return self.names().index(name)


def polynomial_library(dim: int, max_degree: int = 3, fit_n: Sequence[str] | None = None) -> ObservableLibrary:
    """Coordinate observable plus scalar monomials up to ``max_degree``.

    Channels pair every monomial ``phi_m`` with the degree-one monomials
    ``phi_n`` (or those named in ``fit_n``).
    """
    lib = ObservableLibrary([Coordinate(dim)] + monomials(dim, max_degree))
    names = lib.names()
    n_idx = [names.index(n) for n in fit_n] if fit_n else [i for i, o in enumerate(lib.observables) if getattr(o, "degree", 0) == 1]
    lib.channels = [(m, n) for m in range(1, len(names)) for n in n_idx]
    return lib


def affine2d_library() -> ObservableLibrary:
    """phi_n in {x, y}, phi_m in all monomials of degree 1..3: 18 channels."""
    return polynomial_library(2, 3)


def cir_library(alphas: Sequence[int] = (1, 2, 3)) -> ObservableLibrary:
    """Powers x^alpha paired with phi_n = x."""
    lib = ObservableLibrary([Coordinate(1)] + [Monomial((int(a),)) for a in alphas])
    n = lib.names().index("x")
    lib.channels = [(m, n) for m in range(1, len(lib.observables))]
    return lib


# --- correlations ------------------------------------------------------------------


@dataclass
class CorrelationCurveSet:
    """Full feature-by-feature lagged moment tensors on the grid ``{0} U T``.

    ``C[k]`` is the ``(P, P)`` matrix ``<f(x_{tau_k}) f(x_0)^T>`` over the
    stacked feature vector ``f``; channel blocks are views into it.
    """

    lib: ObservableLibrary
    lags: np.ndarray
    C: np.ndarray
    n_pairs: np.ndarray
    Cdot: np.ndarray | None = None
    Cdot0: np.ndarray | None = None
    bc_type: str | None = None
    centered: bool = False

    def _block(self, arr, m, n):
        off = self.lib.offsets
        return arr[..., off[m] : off[m + 1], off[n] : off[n + 1]]

    def block(self, m, n) -> np.ndarray:
        """``C_{m,n}`` over all lags, shape ``(L, d_m, d_n)``."""
        return self._block(self.C, m, n)

    def dblock(self, m, n) -> np.ndarray:
        if self.Cdot is None:
            raise ValueError("derivatives not computed; call derivative_curves")
        return self._block(self.Cdot, m, n)

    def dblock0(self, m, n) -> np.ndarray:
        if self.Cdot0 is None:
            raise ValueError("derivatives not computed; call derivative_curves")
        return self._block(self.Cdot0, m, n)

    @property
    def positive_lags(self) -> np.ndarray:
        return self.lags[1:]


def default_lag_grid(step: float = 0.05, n: int = 20) -> np.ndarray:
    return step * np.arange(1, n + 1)


def lagged_moments(later: Sequence[np.ndarray], earlier: Sequence[np.ndarray], steps: Sequence[int],
                   min_pairs: int = 30, lags=None):
    """``(1/N_k) sum f(x_{t+k}) g(x_t)^T`` per lag step ``k`` over within-trajectory pairs.

    ``later[i]`` and ``earlier[i]`` are per-sample values along trajectory
    ``i``; returns the ``(K, P, Q)`` moments and the pair counts.
    """
    P, Q = later[0].shape[1], earlier[0].shape[1]
    out = np.zeros((len(steps), P, Q))
    counts = np.zeros(len(steps), dtype=np.int64)
    for k, step in enumerate(steps):
        for f, g in zip(later, earlier):
            m = len(f) - step
            if m <= 0:
                continue
            out[k] += f[step:].T @ g[:m]
            counts[k] += m
        if counts[k] < min_pairs:
            at = step if lags is None else lags[k]
            raise InsufficientPairsError(f"lag {at} has {counts[k]} pairs (< {min_pairs})")
        out[k] /= counts[k]
    return out, counts


def empirical_correlation(ens: TrajectoryEnsemble, lib: ObservableLibrary, lags: Sequence[float],
                          center: bool = False, min_pairs: int = 30) -> CorrelationCurveSet:
    """Lagged moments from all within-trajectory pairs; ``lags`` must include 0."""
    lags = np.asarray(sorted(set(float(t) for t in lags)))
    if lags[0] != 0:
        lags = np.concatenate([[0.0], lags])
    steps = [0] + [lag_to_steps(t, ens.sample_interval) for t in lags[1:]]
    feats = [lib.features(s) for s in ens.states]
    if center:
        mu = np.concatenate(feats).mean(axis=0)
        feats = [f - mu for f in feats]
    C, counts = lagged_moments(feats, feats, steps, min_pairs, lags)
    return CorrelationCurveSet(lib, lags * 1.0, C, counts, centered=center)


def derivative_curves(curves: CorrelationCurveSet, bc_type: str = "not-a-knot") -> CorrelationCurveSet:
    """Entrywise cubic-spline derivatives over ``{0} U T``.

    ``Cdot`` holds the spline derivative at each grid lag and ``Cdot0`` the
    one-sided derivative at ``tau = 0``.
    """
    lags = curves.lags
    if len(lags) < 4 or lags[0] != 0 or np.any(np.diff(lags) <= 0):
        raise DegenerateGridError("need at least 4 strictly increasing lags starting at 0")
    spline = CubicSpline(lags, curves.C, axis=0, bc_type=bc_type)
    d = spline(lags, 1)
    curves.Cdot = d
    curves.Cdot0 = d[0]
    curves.bc_type = bc_type
    return curves


@dataclass
class MeanMobility:
    Phi: np.ndarray
    sym_eigenvalues: np.ndarray
    lags: np.ndarray
    bc_type: str = "not-a-knot"
    clipped: bool = False

    @property
    def dim(self) -> int:
        return self.Phi.shape[0]

    @property
    def sym(self) -> np.ndarray:
        return 0.5 * (self.Phi + self.Phi.T)

    @property
    def anti(self) -> np.ndarray:
        return 0.5 * (self.Phi - self.Phi.T)

    def projected(self) -> np.ndarray:
        """Phi with its symmetric part projected onto the PSD cone."""
        w, v = np.linalg.eigh(self.sym)
        return (v * np.maximum(w, 0.0)) @ v.T + self.anti

    def to_dict(self) -> dict:
        return {"Phi": self.Phi.tolist(), "sym_eigenvalues": self.sym_eigenvalues.tolist(),
                "lags": self.lags.tolist(), "bc_type": self.bc_type, "clipped": self.clipped}

    @classmethod
    def from_dict(cls, d) -> "MeanMobility":
        return cls(np.array(d["Phi"], dtype=float), np.array(d["sym_eigenvalues"]), np.array(d["lags"]),
                   d.get("bc_type", "not-a-knot"), d.get("clipped", False))

    @classmethod
    def constant(cls, Phi) -> "MeanMobility":
        Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
        return cls(Phi, np.linalg.eigvalsh(0.5 * (Phi + Phi.T)), np.zeros(0))


def estimate_phi(curves: CorrelationCurveSet, tol: float = 1e-6) -> MeanMobility:
    """Phi = -Cdot_{x,x}(0+), with the PSD check on its symmetric part."""
    if curves.Cdot0 is None:
        curves = derivative_curves(curves)
    Phi = -np.array(curves.dblock0(0, 0))
    w = np.linalg.eigvalsh(0.5 * (Phi + Phi.T))
    if w.min() < -tol:
        raise IndefiniteMobilityError(f"symmetric part of Phi has eigenvalue {w.min():.3e} < -{tol:g}")
    clipped = bool(w.min() < 0)
    if clipped:
        v = np.linalg.eigh(0.5 * (Phi + Phi.T))[1]
        wc = np.maximum(w, 0.0)
        Phi = (v * wc) @ v.T + 0.5 * (Phi - Phi.T)
        w = wc
    return MeanMobility(Phi, w, curves.lags.copy(), curves.bc_type or "not-a-knot", clipped)


def write_curves_csv(curves: CorrelationCurveSet, path, channels=None) -> None:
    """One row per (channel, entry, lag): channel_m, channel_n, entry_row, entry_col, tau, C, Cdot, n_pairs."""
    lib = curves.lib
    channels = [(0, 0)] + list(lib.channels) if channels is None else channels
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["channel_m", "channel_n", "entry_row", "entry_col", "tau", "C", "Cdot", "n_pairs"])
        for m, n in channels:
            c = curves.block(m, n)
            d = curves.dblock(m, n) if curves.Cdot is not None else np.full_like(c, np.nan)
            for i in range(c.shape[1]):
                for j in range(c.shape[2]):
                    for k, tau in enumerate(curves.lags):
                        w.writerow([lib.observables[m].name, lib.observables[n].name, i, j, repr(float(tau)),
                                    repr(float(c[k, i, j])), repr(float(d[k, i, j])), int(curves.n_pairs[k])])
