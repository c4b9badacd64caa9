"""Denoising score matching for stationary and lag-conditioned joint scores.

States are standardized per coordinate before entering a network; noise is
added in raw units, and raw scores are recovered as ``net_output / std``.
The conditional transition score is the x0 block of the joint score minus
the stationary score at x0.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn import AdamState, Mlp, adam_step, load_checkpoint, save_checkpoint
from .sde import TrajectoryEnsemble

log = logging.getLogger(__name__)


class LagGridError(ValueError):
    pass


class LagRangeError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class Standardizer:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x = np.asarray(x, dtype=float)
        std = x.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(tuple(map(float, x.mean(axis=0))), tuple(map(float, std)))

    @property
    def mu(self) -> np.ndarray:
        return np.asarray(self.mean)

    @property
    def sd(self) -> np.ndarray:
        return np.asarray(self.std)

    def __call__(self, x):
        return (np.asarray(x, dtype=float) - self.mu) / self.sd

    def to_dict(self):
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["mean"]), tuple(d["std"]))


@dataclass(frozen=True)
class NoiseSchedule:
    """Noise levels for DSM: ``law`` in {"log-uniform", "uniform"}, ``weight`` in {"sigma2", "one"}.

    With ``sigma_min == sigma_max`` the schedule is a single fixed level.
    """

    sigma_min: float = 0.05
    sigma_max: float = 0.05
    law: str = "log-uniform"
    weight: str = "sigma2"

    def __post_init__(self):
        if not 0 < self.sigma_min <= self.sigma_max:
            raise ValueError("need 0 < sigma_min <= sigma_max")
        if self.law not in ("log-uniform", "uniform"):
            raise ValueError(f"unknown noise law {self.law!r}")
        if self.weight not in ("sigma2", "one"):
            raise ValueError(f"unknown noise weight {self.weight!r}")

    @property
    def fixed(self) -> bool:
        return self.sigma_min == self.sigma_max

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.fixed:
            return np.full(n, self.sigma_min)
        u = rng.random(n)
        if self.law == "uniform":
            return self.sigma_min + u * (self.sigma_max - self.sigma_min)
        lo, hi = math.log(self.sigma_min), math.log(self.sigma_max)
        return np.exp(lo + u * (hi - lo))

    def sqrt_weight(self, sigma: np.ndarray) -> np.ndarray:
        return sigma if self.weight == "sigma2" else np.ones_like(sigma)

    def feature(self, sigma) -> np.ndarray:
        """Network input encoding of sigma, in [0, 1]."""
        sigma = np.asarray(sigma, dtype=float)
        if self.fixed:
            return np.zeros_like(sigma)
        lo, hi = math.log(self.sigma_min), math.log(self.sigma_max)
        if hi - lo <= 1e-12:
            return np.zeros_like(sigma)
        return np.clip((np.log(sigma) - lo) / (hi - lo), 0.0, 1.0)


@dataclass
class ScoreTrainConfig:
    widths: tuple[int, ...] = (128, 64)
    epochs: int = 250
    batch_size: int = 1024
    lr: float = 3e-4
    lr_schedule: str = "cosine"
    weight_decay: float = 0.0
    antithetic: bool = True
    val_fraction: float = 0.1
    pairs_per_lag: int | None = None
    seed: int = 0
    max_steps: int | None = None


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    steps: int = 0


def _lr_at(cfg: ScoreTrainConfig, step: int, total: int) -> float:
    if cfg.lr_schedule == "cosine" and total > 0:
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))
    return cfg.lr


def _check_finite(loss: float, where: str, step: int):
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite {where} loss at step {step}")


# --- stationary score ------------------------------------------------------------


@dataclass
class StationaryScoreModel:
    net: Mlp
    schedule: NoiseSchedule
    standardizer: Standardizer
    history: TrainHistory = field(default_factory=TrainHistory)

    @property
    def dim(self) -> int:
        return len(self.standardizer.mean)

    def _inputs(self, x, sigma):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        sig = np.broadcast_to(np.asarray(sigma, dtype=float), (len(x),))
        return np.concatenate([self.standardizer(x), self.schedule.feature(sig)[:, None]], axis=1)

    def __call__(self, x, sigma=None):
        """Raw-unit score estimate at noise level ``sigma`` (default sigma_min)."""
        sigma = self.schedule.sigma_min if sigma is None else sigma
        return self.net(self._inputs(x, sigma)) / self.standardizer.sd

    def save(self, path) -> None:
        save_checkpoint(self.net, path, {
            "kind": "stationary_score",
            "schedule": asdict(self.schedule),
            "standardizer": self.standardizer.to_dict(),
            "history": asdict(self.history),
        })

    @classmethod
    def load(cls, path) -> "StationaryScoreModel":
        net, meta = load_checkpoint(path)
        h = meta.get("history", {})
        return cls(net, NoiseSchedule(**meta["schedule"]), Standardizer.from_dict(meta["standardizer"]),
                   TrainHistory(h.get("train_loss", []), h.get("val_loss", []), h.get("steps", 0)))


def _dsm_residual(out, sd, xi, sigma, schedule):
    """Weighted DSM residual sqrt(w) (s + xi / sigma) and its raw-score scaling."""
    sw = schedule.sqrt_weight(sigma)[:, None]
    score = out / sd
    return sw * (score + xi / sigma[:, None]), sw / sd


def _dsm_step_inputs(clean, rng, schedule, antithetic):
    n, d = clean.shape
    sigma = schedule.sample(rng, n)
    xi = rng.standard_normal((n, d))
    if antithetic:
        clean = np.concatenate([clean, clean])
        sigma = np.concatenate([sigma, sigma])
        xi = np.concatenate([xi, -xi])
    return clean + sigma[:, None] * xi, xi, sigma


def train_stationary_score(samples, schedule: NoiseSchedule | None = None, cfg: ScoreTrainConfig | None = None) -> StationaryScoreModel:
    """Minimize E[w(sigma) || s(x + sigma xi, sigma) + xi / sigma ||^2] with Adam.

    ``antithetic`` pairs every noise draw with its negative, which leaves the
    objective unchanged and cancels the leading O(1/sigma) gradient noise.
    """
    schedule = schedule or NoiseSchedule()
    cfg = cfg or ScoreTrainConfig()
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if x.shape[0] == 1 and x.shape[1] > 1:
        x = x.T
    if not np.all(np.isfinite(x)):
        raise ValueError("training samples contain non-finite values")
    if len(x) < 1000:
        log.warning("only %d samples for stationary score training", len(x))
    n, d = x.shape
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    n_val = int(round(cfg.val_fraction * n))
    val, train = x[perm[:n_val]], x[perm[n_val:]]
    stdz = Standardizer.fit(train)
    net = Mlp.init((d + 1, *cfg.widths, d), rng)
    model = StationaryScoreModel(net, schedule, stdz)
    sd = stdz.sd
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = max(1, len(train) // cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    val_rng = np.random.default_rng(cfg.seed + 1)
    val_noisy = val_xi = val_sigma = None
    if n_val:
        val_noisy, val_xi, val_sigma = _dsm_step_inputs(val, val_rng, schedule, cfg.antithetic)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        acc = 0.0
        count = 0
        for b in range(steps_per_epoch):
            if step >= total:
                break
            batch = train[order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            noisy, xi, sigma = _dsm_step_inputs(batch, rng, schedule, cfg.antithetic)
            out, cache = net.forward(model._inputs(noisy, sigma), cache=True)
            r, scale = _dsm_residual(out, sd, xi, sigma, schedule)
            loss = float(np.mean(np.sum(r * r, axis=1)))
            _check_finite(loss, "stationary DSM", step)
            g = 2.0 * r * scale / len(r)
            opt.lr = _lr_at(cfg, step, total)
            adam_step(opt, net.params(), net.backward(cache, g))
            acc += loss
            count += 1
            step += 1
        if count:
            model.history.train_loss.append(acc / count)
        if n_val:
            out = net(model._inputs(val_noisy, val_sigma))
            r, _ = _dsm_residual(out, sd, val_xi, val_sigma, schedule)
            model.history.val_loss.append(float(np.mean(np.sum(r * r, axis=1))))
        if step >= total:
            break
    model.history.steps = step
    return model


# --- lagged pairs ------------------------------------------------------------------


@dataclass
class LaggedPairSet:
    lag: float
    lag_steps: int
    x0: np.ndarray
    xt: np.ndarray
    traj_ids: np.ndarray
    offsets: np.ndarray

    @property
    def n_pairs(self) -> int:
        return len(self.x0)


def lag_to_steps(lag: float, interval: float, rtol: float = 1e-6) -> int:
    k = int(round(lag / interval))
    if k <= 0:
        raise LagGridError(f"lag {lag} must be positive")
    if abs(k * interval - lag) > rtol * max(lag, interval):
        raise LagGridError(f"lag {lag} is not a multiple of the sampling interval {interval}")
    return k


def extract_lagged_pairs(ens: TrajectoryEnsemble, lags: Sequence[float]) -> list[LaggedPairSet]:
    """All within-trajectory pairs ``(x(t_k), x(t_k + lag))`` for each lag."""
    out = []
    h = ens.sample_interval
    for lag in lags:
        k = lag_to_steps(lag, h)
        x0s, xts, ids, offs = [], [], [], []
        for i, s in enumerate(ens.states):
            m = len(s) - k
            if m <= 0:
                continue
            x0s.append(s[:m])
            xts.append(s[k:])
            ids.append(np.full(m, i))
            offs.append(np.arange(m))
        if not x0s:
            raise LagGridError(f"no trajectory is longer than lag {lag}")
        out.append(LaggedPairSet(k * h, k, np.concatenate(x0s), np.concatenate(xts), np.concatenate(ids), np.concatenate(offs)))
    return out


# --- joint score -------------------------------------------------------------------


@dataclass
class JointScoreModel:
    net: Mlp
    schedule: NoiseSchedule
    standardizer: Standardizer
    lags: tuple[float, ...]
    history: TrainHistory = field(default_factory=TrainHistory)

    @property
    def dim(self) -> int:
        return len(self.standardizer.mean)

    @property
    def lag_scale(self) -> float:
        return max(self.lags)

    def _inputs(self, x0, xt, t, sigma):
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        xt = np.atleast_2d(np.asarray(xt, dtype=float))
        n = len(x0)
        tt = np.broadcast_to(np.asarray(t, dtype=float), (n,)) / self.lag_scale
        sig = np.broadcast_to(np.asarray(sigma, dtype=float), (n,))
        return np.concatenate(
            [self.standardizer(x0), self.standardizer(xt), tt[:, None], self.schedule.feature(sig)[:, None]], axis=1
        )

    def __call__(self, x0, xt, t, sigma=None):
        """Joint score blocks ``(q0, qt)`` in raw units."""
        sigma = self.schedule.sigma_min if sigma is None else sigma
        q = self.net(self._inputs(x0, xt, t, sigma)) / np.tile(self.standardizer.sd, 2)
        d = self.dim
        return q[:, :d], q[:, d:]

    def check_lag(self, t, rtol=1e-9):
        lo, hi = min(self.lags), max(self.lags)
        t = np.asarray(t, dtype=float)
        if np.any(t < lo * (1 - rtol)) or np.any(t > hi * (1 + rtol)):
            raise LagRangeError(f"lag outside trained range [{lo}, {hi}]")

    def save(self, path) -> None:
        save_checkpoint(self.net, path, {
            "kind": "joint_score",
            "schedule": asdict(self.schedule),
            "standardizer": self.standardizer.to_dict(),
            "lags": list(self.lags),
            "history": asdict(self.history),
        })

    @classmethod
    def load(cls, path) -> "JointScoreModel":
        net, meta = load_checkpoint(path)
        h = meta.get("history", {})
        return cls(net, NoiseSchedule(**meta["schedule"]), Standardizer.from_dict(meta["standardizer"]),
                   tuple(meta["lags"]), TrainHistory(h.get("train_loss", []), h.get("val_loss", []), h.get("steps", 0)))


def train_joint_score(pairs: Sequence[LaggedPairSet], schedule: NoiseSchedule | None = None,
                      cfg: ScoreTrainConfig | None = None, standardizer: Standardizer | None = None) -> JointScoreModel:
    """Joint DSM on ``z = (x0, xt)`` with the lag as an extra network input.

    Each epoch draws ``pairs_per_lag`` training pairs from every lag (all of
    them when unset), so lags are sampled uniformly.
    """
    schedule = schedule or NoiseSchedule()
    cfg = cfg or ScoreTrainConfig(widths=(256, 128))
    if len(pairs) < 2:
        log.warning("joint score trained on a single lag")
    rng = np.random.default_rng(cfg.seed)
    d = pairs[0].x0.shape[1]
    lags = tuple(float(p.lag) for p in pairs)
    train_idx, val_idx = [], []
    for p in pairs:
        if p.n_pairs < 1000:
            log.warning("lag %g has only %d pairs", p.lag, p.n_pairs)
        perm = rng.permutation(p.n_pairs)
        n_val = int(round(cfg.val_fraction * p.n_pairs))
        val_idx.append(perm[:n_val])
        train_idx.append(perm[n_val:])
    if standardizer is None:
        standardizer = Standardizer.fit(np.concatenate([p.x0[i] for p, i in zip(pairs, train_idx)]))
    net = Mlp.init((2 * d + 2, *cfg.widths, 2 * d), rng)
    model = JointScoreModel(net, schedule, standardizer, lags)
    sd2 = np.tile(standardizer.sd, 2)
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    per_lag = min(len(i) for i in train_idx) if cfg.pairs_per_lag is None else cfg.pairs_per_lag
    steps_per_epoch = max(1, (per_lag * len(pairs)) // cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)

    def gather(idx_lists, take):
        z, t = [], []
        for p, idx, k in zip(pairs, idx_lists, take):
            sel = idx if k is None else idx[:k]
            z.append(np.concatenate([p.x0[sel], p.xt[sel]], axis=1))
            t.append(np.full(len(sel), p.lag))
        return np.concatenate(z), np.concatenate(t)

    val_z, val_t = gather(val_idx, [min(len(v), 20000) for v in val_idx])
    val_rng = np.random.default_rng(cfg.seed + 1)
    val_data = None
    if len(val_z):
        noisy, xi, sigma = _dsm_step_inputs(val_z, val_rng, schedule, cfg.antithetic)
        val_data = (noisy, xi, sigma, np.concatenate([val_t, val_t]) if cfg.antithetic else val_t)

    def inputs(z, t, sigma):
        return model._inputs(z[:, :d], z[:, d:], t, sigma)

    step = 0
    for epoch in range(cfg.epochs):
        take = [rng.permutation(idx)[: min(per_lag, len(idx))] for idx in train_idx]
        z, t = gather(take, [None] * len(take))
        order = rng.permutation(len(z))
        acc, count = 0.0, 0
        for b in range(steps_per_epoch):
            if step >= total:
                break
            sel = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            if len(sel) == 0:
                break
            noisy, xi, sigma = _dsm_step_inputs(z[sel], rng, schedule, cfg.antithetic)
            tb = np.concatenate([t[sel], t[sel]]) if cfg.antithetic else t[sel]
            out, cache = net.forward(inputs(noisy, tb, sigma), cache=True)
            r, scale = _dsm_residual(out, sd2, xi, sigma, schedule)
            loss = float(np.mean(np.sum(r * r, axis=1)))
            _check_finite(loss, "joint DSM", step)
            opt.lr = _lr_at(cfg, step, total)
            adam_step(opt, net.params(), net.backward(cache, 2.0 * r * scale / len(r)))
            acc += loss
            count += 1
            step += 1
        if count:
            model.history.train_loss.append(acc / count)
        if val_data is not None:
            noisy, xi, sigma, tv = val_data
            r, _ = _dsm_residual(net(inputs(noisy, tv, sigma)), sd2, xi, sigma, schedule)
            model.history.val_loss.append(float(np.mean(np.sum(r * r, axis=1))))
        if step >= total:
            break
    model.history.steps = step
    return model


def conditional_score(joint: JointScoreModel, stat: StationaryScoreModel, x0, xt, t, sigma=None) -> np.ndarray:
    """Estimated grad_{x0} log p_t(xt | x0) = q0(x0, xt, t) - s(x0)."""
    joint.check_lag(t)
    sig = joint.schedule.sigma_min if sigma is None else sigma
    q0, _ = joint(x0, xt, t, sig)
    s_sig = stat.schedule.sigma_min if sigma is None else sigma
    return q0 - stat(x0, s_sig)


def save_score_sidecar(path, stat: StationaryScoreModel, joint: JointScoreModel | None) -> None:
    info = {"stationary": {"schedule": asdict(stat.schedule), "standardizer": stat.standardizer.to_dict()}}
    if joint is not None:
        info["joint"] = {"lags": list(joint.lags), "schedule": asdict(joint.schedule)}
    Path(path).write_text(json.dumps(info, indent=2))
