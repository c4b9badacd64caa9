"""Euler-Maruyama integration and the reference diffusions.

Fields are vectorized: ``drift`` maps an ``(N, D)`` batch of states to
``(N, D)`` and ``noise_amplitude`` maps it to ``(N, D, D)``, the matrix that
multiplies ``dW``. Each trajectory owns an independent random stream derived
from ``(seed, trajectory index)``, so an ensemble integrated in one batch is
bit-identical to the same trajectories integrated one by one.
"""

from __future__ import annotations

import csv
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

Field = Callable[[np.ndarray], np.ndarray]

J2 = np.array([[0.0, -1.0], [1.0, 0.0]])
CIR_FLOOR = 1e-12
_NOISE_CHUNK = 4096


class DivergenceError(RuntimeError):
    def __init__(self, message: str, trajectory: int | None = None, step: int | None = None):
        super().__init__(message)
        self.trajectory = trajectory
        self.step = step


class ParameterError(ValueError):
    pass


@dataclass
class DiffusionSpec:
    dim: int
    drift: Field
    noise_amplitude: Field
    positivity_floor: np.ndarray | None = None
    name: str = "custom"


@dataclass
class TrajectoryEnsemble:
    """Uniformly sampled trajectories, burn-in already removed.

    ``states[i]`` has shape ``(n_i, D)``; the saved interval is
    ``dt_integration * save_stride`` for every trajectory.
    """

    states: list[np.ndarray]
    dt_integration: float
    save_stride: int
    burn_in_fraction: float = 0.0
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = [np.asarray(s, dtype=float).reshape(len(s), -1) for s in self.states]
        dims = {s.shape[1] for s in self.states}
        if len(dims) != 1:
            raise ValueError("all trajectories must share the state dimension")
        if any(len(s) < 2 for s in self.states):
            raise ValueError("each trajectory needs at least 2 samples")
        if any(not np.all(np.isfinite(s)) for s in self.states):
            raise ValueError("trajectory states must be finite")

    @property
    def dim(self) -> int:
        return self.states[0].shape[1]

    @property
    def n_traj(self) -> int:
        return len(self.states)

    @property
    def sample_interval(self) -> float:
        return self.dt_integration * self.save_stride

    @property
    def n_samples(self) -> int:
        return sum(len(s) for s in self.states)

    def stacked(self) -> np.ndarray:
        return np.concatenate(self.states, axis=0)

    def equals(self, other: "TrajectoryEnsemble") -> bool:
        return (
            self.n_traj == other.n_traj
            and np.isclose(self.sample_interval, other.sample_interval, rtol=1e-12)
            and all(np.array_equal(a, b) for a, b in zip(self.states, other.states))
        )


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def _em_batch(spec, x0, n_steps, dt, save_stride, rngs, floor, cap, first_index):
    n, d = x0.shape
    n_saved = n_steps // save_stride + 1
    out = np.empty((n_saved, n, d))
    x = x0.copy()
    out[0] = x
    sqdt = np.sqrt(dt)
    step = 0
    saved = 1
    while step < n_steps:
        chunk = min(_NOISE_CHUNK, n_steps - step)
        xi = np.stack([r.standard_normal((chunk, d)) for r in rngs], axis=1)
        for j in range(chunk):
            b = spec.noise_amplitude(x)
            x = x + spec.drift(x) * dt + np.einsum("nij,nj->ni", b, xi[j]) * sqdt
            if floor is not None:
                x = np.maximum(x, floor)
            step += 1
            if step % save_stride == 0:
                bad = ~np.all(np.abs(x) <= cap, axis=1)
                if np.any(bad):
                    i = int(np.flatnonzero(bad)[0])
                    raise DivergenceError(
                        f"trajectory {first_index + i} exceeded |x| <= {cap:g} at step {step}",
                        trajectory=first_index + i,
                        step=step,
                    )
                out[saved] = x
                saved += 1
    return out


def integrate_ensemble(
    spec: DiffusionSpec,
    x0: np.ndarray,
    n_steps: int,
    dt: float,
    save_stride: int = 1,
    seed: int = 0,
    burn_in_fraction: float = 0.0,
    magnitude_cap: float = 1e6,
    first_index: int = 0,
    threads: int = 1,
) -> TrajectoryEnsemble:
    """Integrate ``len(x0)`` independent trajectories with Euler-Maruyama.

    x_{k+1} = x_k + drift(x_k) dt + noise_amplitude(x_k) sqrt(dt) xi_k, then
    ``max(x, floor)`` when the DiffusionSpec carries a positivity floor. Trajectory
    ``i`` uses the stream ``trajectory_rng(seed, first_index + i)``.
    """
    if dt <= 0:
        raise ParameterError("dt must be positive")
    if not 0.0 <= burn_in_fraction < 1.0:
        raise ParameterError("burn_in_fraction must lie in [0, 1)")
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if x0.shape[1] != spec.dim:
        raise ParameterError(f"x0 has dimension {x0.shape[1]}, spec expects {spec.dim}")
    floor = None if spec.positivity_floor is None else np.asarray(spec.positivity_floor, dtype=float)
    if floor is not None and np.any(x0 < floor):
        raise ParameterError("x0 lies below the positivity floor")
    n = len(x0)
    idx = np.arange(n)
    groups = np.array_split(idx, max(1, min(threads, n)))

    def run(group):
        rngs = [trajectory_rng(seed, first_index + int(i)) for i in group]
        return _em_batch(spec, x0[group], n_steps, dt, save_stride, rngs, floor, magnitude_cap, first_index + int(group[0]))

    if len(groups) == 1:
        parts = [run(groups[0])]
    else:
        with ThreadPoolExecutor(len(groups)) as pool:
            parts = list(pool.map(run, groups))
    saved = np.concatenate(parts, axis=1)
    drop = int(np.floor(burn_in_fraction * saved.shape[0]))
    states = [saved[drop:, i, :].copy() for i in range(n)]
    return TrajectoryEnsemble(states, dt, save_stride, burn_in_fraction, seed, {"system": spec.name})


def integrate(spec, x0, n_steps, dt, save_stride=1, seed=0, magnitude_cap=1e6, traj_index=0):
    """Single-trajectory Euler-Maruyama run (stream ``(seed, traj_index)``)."""
    return integrate_ensemble(
        spec, np.atleast_2d(x0), n_steps, dt, save_stride, seed, 0.0, magnitude_cap, first_index=traj_index
    )


# --- reference systems -------------------------------------------------------


@dataclass(frozen=True)
class CirParams:
    kappa: float = 1.0
    theta: float = 1.0
    gamma: float = 0.5

    def __post_init__(self):
        if min(self.kappa, self.theta, self.gamma) <= 0:
            raise ParameterError("CIR parameters must be positive")
        if self.kappa * self.theta < self.gamma:
            raise ParameterError("Feller condition kappa*theta >= gamma violated")

    @property
    def nu(self) -> float:
        return self.kappa * self.theta / self.gamma

    @property
    def beta(self) -> float:
        return self.kappa / self.gamma


def cir_spec(p: CirParams) -> DiffusionSpec:
    def drift(x):
        return p.kappa * (p.theta - x)

    def noise(x):
        return np.sqrt(2.0 * p.gamma * np.maximum(x, 0.0))[:, :, None]

    return DiffusionSpec(1, drift, noise, np.array([CIR_FLOOR]), "cir")


@dataclass(frozen=True)
class OuParams:
    """dx = -kappa x dt + sqrt(2 gamma) dW; validation-only system."""

    kappa: float = 1.0
    gamma: float = 1.0
    dim: int = 1


def ou_spec(p: OuParams) -> DiffusionSpec:
    amp = np.sqrt(2.0 * p.gamma) * np.eye(p.dim)

    def drift(x):
        return -p.kappa * x

    def noise(x):
        return np.broadcast_to(amp, (len(x), p.dim, p.dim))

    return DiffusionSpec(p.dim, drift, noise, None, "ou")


def ou_stationary_score(p: OuParams, x):
    return -(p.kappa / p.gamma) * np.asarray(x, dtype=float)


def ou_conditional_score(p: OuParams, x0, xt, t):
    """Gradient in x0 of the Gaussian transition log-density."""
    z = np.exp(-p.kappa * t)
    var = (p.gamma / p.kappa) * (1.0 - z * z)
    return z * (np.asarray(xt, dtype=float) - z * np.asarray(x0, dtype=float)) / var


def _as_matrix(v):
    return np.asarray(v, dtype=float).reshape(2, 2)


@dataclass(frozen=True)
class Affine2dParams:
    omega: float = 1.1
    B0: tuple = ((0.60, 0.10), (0.08, 0.55))
    B1: tuple = ((0.36, 0.12), (0.15, -0.06))
    B2: tuple = ((-0.09, 0.21), (0.18, 0.30))
    # U = c4x x^4/4 + cxy x^2 y^2/2 + c4y y^4/4 + c2x x^2/2 + c2y y^2/2
    potential: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)

    def matrices(self):
        return _as_matrix(self.B0), _as_matrix(self.B1), _as_matrix(self.B2)


def affine2d_grad_potential(p: Affine2dParams, xy: np.ndarray) -> np.ndarray:
    c4x, cxy, c4y, c2x, c2y = p.potential
    x, y = xy[:, 0], xy[:, 1]
    return np.stack([c4x * x**3 + cxy * x * y**2 + c2x * x, c4y * y**3 + cxy * x**2 * y + c2y * y], axis=1)


def affine2d_noise(p: Affine2dParams, xy: np.ndarray) -> np.ndarray:
    B0, B1, B2 = p.matrices()
    return B0[None] + xy[:, 0, None, None] * B1[None] + xy[:, 1, None, None] * B2[None]


def affine2d_spec(p: Affine2dParams) -> DiffusionSpec:
    rot = p.omega * J2

    def drift(xy):
        return -affine2d_grad_potential(p, xy) + xy @ rot.T

    return DiffusionSpec(2, drift, lambda xy: affine2d_noise(p, xy), None, "affine2d")


# --- datasets -----------------------------------------------------------------


@dataclass
class DataConfig:
    n_traj: int = 8
    T: float = 500.0
    dt: float = 1e-3
    save_interval: float = 1e-2
    burn_in: float = 0.10
    seed: int = 0

    @property
    def save_stride(self) -> int:
        stride = int(round(self.save_interval / self.dt))
        if stride < 1 or not np.isclose(stride * self.dt, self.save_interval, rtol=1e-9):
            raise ParameterError("save_interval must be a positive integer multiple of dt")
        return stride

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))


DATA_PRESETS = {
    "paper": DataConfig(n_traj=36, T=3000.0, dt=1e-3, save_interval=1e-2, burn_in=0.10),
    "desk": DataConfig(n_traj=8, T=500.0, dt=1e-3, save_interval=1e-2, burn_in=0.10),
}


def initial_states(kind: str, params, n_traj: int, seed: int) -> np.ndarray:
    """Standard-Gaussian starts (folded around theta for CIR), one per trajectory.

    Drawn from a stream separate from the integration noise.
    """
    dim = {"cir": 1, "affine2d": 2}.get(kind, getattr(params, "dim", 1))
    rows = []
    for i in range(n_traj):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i, 1)))
        rows.append(rng.standard_normal(dim))
    x0 = np.array(rows)
    if kind == "cir":
        sd = np.sqrt(params.theta * params.gamma / params.kappa)
        x0 = np.abs(params.theta + sd * x0) + CIR_FLOOR
    return x0


def system_spec(kind: str, params) -> DiffusionSpec:
    if kind == "cir":
        return cir_spec(params)
    if kind == "affine2d":
        return affine2d_spec(params)
    if kind == "ou":
        return ou_spec(params)
    raise ParameterError(f"unknown system kind {kind!r}")


def generate_reference_dataset(kind: str, params=None, run: DataConfig | str = "desk", threads: int = 1) -> TrajectoryEnsemble:
    if isinstance(run, str):
        run = DATA_PRESETS[run]
    if params is None:
        params = {"cir": CirParams(), "affine2d": Affine2dParams(), "ou": OuParams()}[kind]
    spec = system_spec(kind, params)
    x0 = initial_states(kind, params, run.n_traj, run.seed)
    ens = integrate_ensemble(
        spec, x0, run.n_steps, run.dt, run.save_stride, run.seed, run.burn_in, threads=threads
    )
    ens.meta.update({"system": kind, "T": run.T})
    return ens


# --- file formats -------------------------------------------------------------

_MAGIC = b"LROMTRJ\x00"
_VERSION = 1
_HEADER = struct.Struct("<8sIIIdIdq")


def write_binary(ens: TrajectoryEnsemble, path) -> None:
    """Columnar binary: fixed header, then per trajectory a uint64 row count and float64 rows."""
    seed = -1 if ens.seed is None else int(ens.seed)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, ens.dim, ens.n_traj, ens.dt_integration, ens.save_stride, ens.burn_in_fraction, seed))
        for s in ens.states:
            fh.write(struct.pack("<Q", len(s)))
            fh.write(np.ascontiguousarray(s, dtype="<f8").tobytes())


class TrajectoryFormatError(ValueError):
    pass


def read_binary(path) -> TrajectoryEnsemble:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise TrajectoryFormatError("file too short for header")
    magic, version, dim, n_traj, dt, stride, burn, seed = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC:
        raise TrajectoryFormatError("bad magic")
    if version != _VERSION:
        raise TrajectoryFormatError(f"unsupported version {version}")
    off = _HEADER.size
    states = []
    for _ in range(n_traj):
        (n,) = struct.unpack_from("<Q", data, off)
        off += 8
        nbytes = n * dim * 8
        if off + nbytes > len(data):
            raise TrajectoryFormatError("truncated trajectory block")
        states.append(np.frombuffer(data, dtype="<f8", count=n * dim, offset=off).reshape(n, dim).astype(float))
        off += nbytes
    for i, s in enumerate(states):
        if not np.all(np.isfinite(s)):
            row = int(np.flatnonzero(~np.all(np.isfinite(s), axis=1))[0])
            raise TrajectoryFormatError(f"non-finite state in trajectory {i}, row {row}")
    return TrajectoryEnsemble(states, dt, stride, burn, None if seed < 0 else seed)


def write_csv(ens: TrajectoryEnsemble, path) -> None:
    h = ens.sample_interval
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traj_id", "t"] + [f"x_{i + 1}" for i in range(ens.dim)])
        for tid, s in enumerate(ens.states):
            for k, row in enumerate(s):
                w.writerow([tid, repr(k * h)] + [repr(float(v)) for v in row])


def read_csv(path, sample_interval: float | None = None, rtol: float = 1e-6) -> TrajectoryEnsemble:
    """Read ``traj_id, t, x_1..x_D`` rows; the time grid must be uniform."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) < 3 or header[0] != "traj_id" or header[1] != "t":
            raise TrajectoryFormatError("expected header traj_id,t,x_1,...")
        ids, times, rows = [], [], []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise TrajectoryFormatError(f"line {lineno}: expected {len(header)} fields")
            try:
                vals = [float(v) for v in rec[1:]]
            except ValueError as exc:
                raise TrajectoryFormatError(f"line {lineno}: {exc}") from exc
            if not all(np.isfinite(vals)):
                raise TrajectoryFormatError(f"line {lineno}: non-finite entry")
            ids.append(rec[0])
            times.append(vals[0])
            rows.append(vals[1:])
    order: list[str] = []
    groups: dict[str, list[int]] = {}
    for i, tid in enumerate(ids):
        if tid not in groups:
            order.append(tid)
            groups[tid] = []
        groups[tid].append(i)
    times_arr = np.array(times)
    rows_arr = np.array(rows, dtype=float)
    states = []
    h = sample_interval
    for tid in order:
        g = np.array(groups[tid])
        t = times_arr[g]
        d = np.diff(t)
        if h is None:
            if len(d) == 0:
                raise TrajectoryFormatError(f"trajectory {tid}: need at least 2 samples")
            h = float(d[0])
        if h <= 0 or not np.allclose(d, h, rtol=rtol, atol=rtol * h):
            raise TrajectoryFormatError(f"trajectory {tid}: non-uniform time grid")
        states.append(rows_arr[g])
    return TrajectoryEnsemble(states, h, 1)


def summary_statistics(ens: TrajectoryEnsemble) -> dict:
    x = ens.stacked()
    return {
        "n_traj": ens.n_traj,
        "n_samples": int(len(x)),
        "sample_interval": ens.sample_interval,
        "mean": x.mean(axis=0).tolist(),
        "std": x.std(axis=0).tolist(),
        "min": x.min(axis=0).tolist(),
        "max": x.max(axis=0).tolist(),
    }


def concat_ensembles(parts: Sequence[TrajectoryEnsemble]) -> TrajectoryEnsemble:
    first = parts[0]
    states = [s for p in parts for s in p.states]
    return TrajectoryEnsemble(states, first.dt_integration, first.save_stride, first.burn_in_fraction, first.seed, dict(first.meta))
