"""Mobility inference from lagged-correlation residuals.

The mobility is split as M(x) = Phi + dM(x). Phi absorbs the mean and is
read off the coordinate correlation at 0+; the correction dM is fitted so
that the conditional-score operator

    A_{m,n}(tau)[dM] = -< phi_m(x_tau) s_{tau|0}^T dM(x_0) grad phi_n(x_0)^T >

reproduces the residual E = Cdot - G left over by the constant closure.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .lagstats import CorrelationCurveSet, MeanMobility, ObservableLibrary, lagged_moments
from .nn import AdamState, Mlp, adam_step, load_checkpoint, save_checkpoint
from .score import LaggedPairSet, Standardizer, TrainingDivergedError, lag_to_steps
from .sde import TrajectoryEnsemble

log = logging.getLogger(__name__)

ScoreFn = Callable[[np.ndarray], np.ndarray]
CondScoreFn = Callable[[np.ndarray, np.ndarray, float], np.ndarray]


class LagMismatchError(ValueError):
    pass


def softplus(a):
    return np.logaddexp(0.0, a)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


# --- conjugate observables and residual targets ---------------------------------


def gamma_baseline(Phi: np.ndarray, lib: ObservableLibrary, score: ScoreFn, x, which: Sequence[int] | None = None) -> dict:
    """gamma_n(x) = div(Phi grad phi_n^T) + grad phi_n Phi^T s(x), per observable index n.

    Component b is sum_ij Phi_ij d_i d_j phi_{n,b} + sum_k d_k phi_{n,b} (Phi^T s)_k.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    Phi = np.atleast_2d(Phi)
    which = sorted({n for _, n in lib.channels}) if which is None else which
    s = np.asarray(score(x), dtype=float).reshape(len(x), -1)
    ps = s @ Phi  # (Phi^T s)_k = sum_i s_i Phi_ik
    out = {}
    for n in which:
        obs = lib.observables[n]
        g = obs.grad(x)
        h = obs.hess(x)
        out[n] = np.einsum("ij,nbij->nb", Phi, h) + np.einsum("nbk,nk->nb", g, ps)
    return out


@dataclass
class ResidualTargetSet:
    """Per channel ``(m, n)``: targets ``E[c]`` of shape ``(L, d_m, d_n)`` on the positive lags."""

    channels: list[tuple[int, int]]
    lags: np.ndarray
    E: list[np.ndarray]
    Cdot: list[np.ndarray]
    G: list[np.ndarray]
    S: np.ndarray
    w: np.ndarray
    n_pairs: np.ndarray
    Phi: np.ndarray

    def subset(self, channels) -> "ResidualTargetSet":
        idx = [self.channels.index(tuple(c)) for c in channels]
        pick = lambda a: [a[i] for i in idx]
        return ResidualTargetSet([self.channels[i] for i in idx], self.lags, pick(self.E), pick(self.Cdot),
                                 pick(self.G), self.S[idx], self.w, self.n_pairs, self.Phi)


def lag_weights(lags, tau_ref: float | None = None) -> np.ndarray:
    """w_tau = 1 / (1 + tau / tau_ref), tau_ref defaulting to the median lag."""
    lags = np.asarray(lags, dtype=float)
    tau_ref = float(np.median(lags)) if tau_ref is None else tau_ref
    return 1.0 / (1.0 + lags / tau_ref)


def residual_targets(curves: CorrelationCurveSet, Phi: np.ndarray, lib: ObservableLibrary, score: ScoreFn,
                     ens: TrajectoryEnsemble, lags: Sequence[float] | None = None, s_floor: float = 1e-8,
                     tau_ref: float | None = None) -> ResidualTargetSet:
    """E = Cdot - G with G_{m,n}(tau) = < phi_m(x_tau) gamma_n(x_0)^T > over all admissible pairs."""
    if curves.Cdot is None:
        raise ValueError("curves need derivative estimates")
    lags = curves.positive_lags if lags is None else np.asarray(lags, dtype=float)
    kidx = []
    for t in lags:
        k = int(np.argmin(np.abs(curves.lags - t)))
        if abs(curves.lags[k] - t) > 1e-9 * max(1.0, t):
            raise LagMismatchError(f"lag {t} not on the correlation grid")
        kidx.append(k)
    ns = sorted({n for _, n in lib.channels})
    feats = [lib.features(s) for s in ens.states]
    gam_parts = [gamma_baseline(Phi, lib, score, s, ns) for s in ens.states]
    goff = np.concatenate([[0], np.cumsum([lib.observables[n].out_dim for n in ns])])
    gams = [np.concatenate([g[n] for n in ns], axis=1) for g in gam_parts]
    steps = [lag_to_steps(t, ens.sample_interval) for t in lags]
    Gfull, counts = lagged_moments(feats, gams, steps)
    off = lib.offsets
    E, Cd, G, S = [], [], [], []
    for m, n in lib.channels:
        j = ns.index(n)
        g = Gfull[:, off[m] : off[m + 1], goff[j] : goff[j + 1]]
        c = curves.dblock(m, n)[kidx]
        e = c - g
        E.append(e)
        Cd.append(c)
        G.append(g)
        S.append(max(float(np.max(np.sqrt(np.sum(e**2, axis=(1, 2))))), s_floor))
    return ResidualTargetSet(list(lib.channels), lags, E, Cd, G, np.array(S), lag_weights(lags, tau_ref), counts,
                             np.atleast_2d(Phi).copy())


# --- the empirical operator ------------------------------------------------------


@dataclass
class OperatorBatch:
    """Fixed pairs at one lag with everything the operator needs precomputed."""

    lag: float
    x0: np.ndarray
    cond: np.ndarray
    feats_t: np.ndarray
    grads0: dict

    @property
    def n(self) -> int:
        return len(self.x0)


def prepare_batch(pairs: LaggedPairSet, cond_score: CondScoreFn, lib: ObservableLibrary,
                  idx: np.ndarray | None = None) -> OperatorBatch:
    x0 = pairs.x0 if idx is None else pairs.x0[idx]
    xt = pairs.xt if idx is None else pairs.xt[idx]
    cs = np.asarray(cond_score(x0, xt, pairs.lag), dtype=float).reshape(len(x0), -1)
    ns = sorted({n for _, n in lib.channels})
    return OperatorBatch(pairs.lag, x0, cs, lib.features(xt), {n: lib.observables[n].grad(x0) for n in ns})


def _operator_from_v(batch: OperatorBatch, v: np.ndarray, lib: ObservableLibrary, channels) -> list[np.ndarray]:
    off = lib.offsets
    w = {n: np.einsum("kj,kbj->kb", v, g) for n, g in batch.grads0.items()}
    out = []
    for m, n in channels:
        f = batch.feats_t[:, off[m] : off[m + 1]]
        out.append(-(f.T @ w[n]) / batch.n)
    return out


def apply_operator(deltaM, batch: OperatorBatch, lib: ObservableLibrary, channels=None) -> list[np.ndarray]:
    """A_{m,n} = -(1/B) sum_k phi_m(x_t^k) s_k^T dM(x_0^k) grad phi_n(x_0^k)^T per channel.

    ``deltaM`` is either a callable ``x -> (N, D, D)`` or the precomputed
    array at ``batch.x0``.
    """
    channels = lib.channels if channels is None else channels
    dm = deltaM(batch.x0) if callable(deltaM) else np.asarray(deltaM)
    v = np.einsum("ki,kij->kj", batch.cond, dm)
    return _operator_from_v(batch, v, lib, channels)


# --- mobility model ----------------------------------------------------------------


def _tri_index(dim):
    lower = [(i, j) for i in range(dim) for j in range(i + 1)]
    upper = [(i, j) for i in range(dim) for j in range(i + 1, dim)]
    return lower, upper


@dataclass
class MobilityModel:
    """M(x) = L(x) L(x)^T + eps I + R(x), with L lower-triangular and R antisymmetric.

    With zero network outputs L equals the Cholesky factor of
    Sym(Phi_proj) - eps I and R equals Anti(Phi_proj), so M = Phi_proj.
    """

    phi: MeanMobility
    net: Mlp
    standardizer: Standardizer
    epsilon: float = 1e-4
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        d = self.dim
        self._lower, self._upper = _tri_index(d)
        P = self.phi.projected()
        sym = 0.5 * (P + P.T)
        w, vecs = np.linalg.eigh(sym - self.epsilon * np.eye(d))
        if w.min() <= 0:
            log.warning("Sym(Phi) has eigenvalues below epsilon; the zero-output model differs from Phi")
            sym = (vecs * np.maximum(w, 1e-12)) @ vecs.T + self.epsilon * np.eye(d)
        self.L0 = np.linalg.cholesky(sym - self.epsilon * np.eye(d))
        self.A0 = 0.5 * (P - P.T)
        self._shift = softplus_inv(np.diag(self.L0))
        if self.net.widths[-1] != self.n_outputs:
            raise ValueError(f"mobility network needs {self.n_outputs} outputs")

    @property
    def dim(self) -> int:
        return self.phi.dim

    @property
    def n_outputs(self) -> int:
        d = self.dim
        return d * (d + 1) // 2 + d * (d - 1) // 2

    @property
    def Phi_proj(self) -> np.ndarray:
        return self.phi.projected()

    @classmethod
    def init(cls, phi: MeanMobility, standardizer: Standardizer, widths=(128, 128), epsilon: float = 1e-4,
             seed: int | np.random.Generator = 0, activation: str = "silu") -> "MobilityModel":
        d = phi.dim
        n_out = d * d
        net = Mlp.init((d, *widths, n_out), seed, activation, zero_last=True)
        return cls(phi, net, standardizer, epsilon)

    def _assemble(self, out):
        n, d = len(out), self.dim
        L = np.zeros((n, d, d))
        L[:] = self.L0
        sig = np.zeros((n, d))
        for k, (i, j) in enumerate(self._lower):
            if i == j:
                a = out[:, k] + self._shift[i]
                L[:, i, i] = softplus(a)
                sig[:, i] = expit(a)
            else:
                L[:, i, j] += out[:, k]
        R = np.zeros((n, d, d))
        R[:] = self.A0
        nl = len(self._lower)
        for k, (i, j) in enumerate(self._upper):
            R[:, i, j] += out[:, nl + k]
            R[:, j, i] -= out[:, nl + k]
        D = L @ L.transpose(0, 2, 1) + self.epsilon * np.eye(d)
        return L, sig, D, R

    def _inputs(self, x):
        return self.standardizer(np.atleast_2d(np.asarray(x, dtype=float)))

    def __call__(self, x) -> np.ndarray:
        L, _, D, R = self._assemble(self.net(self._inputs(x)))
        return D + R

    def delta(self, x) -> np.ndarray:
        return self(x) - self.Phi_proj

    def evaluate(self, x):
        """(M, D_sym, R_anti, div M) at a batch of states; (div M)_i = sum_j d_j M_ij."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out, jac = self.net.forward_and_jacobian(self._inputs(x))
        jac = jac / self.standardizer.sd[None, None, :]
        L, sig, D, R = self._assemble(out)
        n, d = len(x), self.dim
        divM = np.zeros((n, d))
        for j in range(d):
            dL = np.zeros((n, d, d))
            for k, (a, b) in enumerate(self._lower):
                dL[:, a, b] = jac[:, k, j] * (sig[:, a] if a == b else 1.0)
            dD = dL @ L.transpose(0, 2, 1) + L @ dL.transpose(0, 2, 1)
            dR = np.zeros((n, d, d))
            nl = len(self._lower)
            for k, (a, b) in enumerate(self._upper):
                dR[:, a, b] = jac[:, nl + k, j]
                dR[:, b, a] = -jac[:, nl + k, j]
            divM += (dD + dR)[:, :, j]
        return D + R, D, R, divM

    def output_grad(self, out, gM):
        """Back-propagate dLoss/dM ``(N, D, D)`` to the raw network outputs."""
        L, sig, _, _ = self._assemble(out)
        gL = (gM + gM.transpose(0, 2, 1)) @ L
        g = np.zeros_like(out)
        for k, (i, j) in enumerate(self._lower):
            g[:, k] = gL[:, i, j] * (sig[:, i] if i == j else 1.0)
        nl = len(self._lower)
        for k, (i, j) in enumerate(self._upper):
            g[:, nl + k] = gM[:, i, j] - gM[:, j, i]
        return g

    def save(self, path) -> None:
        save_checkpoint(self.net, path, {
            "kind": "mobility",
            "phi": self.phi.to_dict(),
            "epsilon": self.epsilon,
            "standardizer": self.standardizer.to_dict(),
            "history": self.history,
        })

    @classmethod
    def load(cls, path) -> "MobilityModel":
        net, meta = load_checkpoint(path)
        return cls(MeanMobility.from_dict(meta["phi"]), net, Standardizer.from_dict(meta["standardizer"]),
                   meta["epsilon"], meta.get("history", {}))


def evaluate_mobility(model: MobilityModel, x):
    return model.evaluate(x)


# --- training ----------------------------------------------------------------------


@dataclass
class MobilityTrainConfig:
    widths: tuple[int, ...] = (128, 128)
    epsilon: float = 1e-4
    lambda_mean: float = 1.0
    weight_decay: float = 1e-6
    epochs: int = 250
    lr: float = 3e-4
    pairs_per_lag: int = 32768
    lags_per_batch: int = 4
    pair_batch: int | None = None
    n_anchors: int = 32768
    anchors_per_step: int = 8192
    seed: int = 0


def _loss_terms(targets: ResidualTargetSet, A_list_by_lag, lag_ids):
    """Weighted data loss over the given lags and dLoss/dA per (lag, channel)."""
    total = 0.0
    grads = []
    for li, A_list in zip(lag_ids, A_list_by_lag):
        w = targets.w[li]
        g_lag = []
        for c, A in enumerate(A_list):
            r = (targets.E[c][li] - A) / targets.S[c]
            total += w * float(np.sum(r * r))
            g_lag.append(-2.0 * w * r / targets.S[c])
        grads.append(g_lag)
    return total, grads


def operator_values(model_or_dm, batches: Sequence[OperatorBatch], lib, channels):
    """Operator per lag for a mobility model (its correction) or a dM callable."""
    dm = model_or_dm.delta if isinstance(model_or_dm, MobilityModel) else model_or_dm
    return [apply_operator(dm, b, lib, channels) for b in batches]


def objective(targets: ResidualTargetSet, A_by_lag) -> float:
    return _loss_terms(targets, A_by_lag, range(len(targets.lags)))[0]


def channel_metrics(targets: ResidualTargetSet, A_by_lag, lib: ObservableLibrary | None = None) -> list[dict]:
    """Per channel RMSE over lags of E - A (entrywise) and the same divided by S."""
    rows = []
    for c, ch in enumerate(targets.channels):
        diff = np.stack([targets.E[c][k] - A_by_lag[k][c] for k in range(len(targets.lags))])
        rmse = float(np.sqrt(np.mean(diff**2)))
        rows.append({"channel": list(ch), "name": lib.channel_name(ch) if lib else str(ch),
                     "rmse": rmse, "normalized_rmse": rmse / float(targets.S[c]), "scale": float(targets.S[c])})
    return rows


def loss_and_grad(model: MobilityModel, batches: Sequence[OperatorBatch], lag_ids, anchors, targets: ResidualTargetSet,
                  lib: ObservableLibrary, lambda_mean: float, scale: float = 1.0):
    """Minibatch loss ``scale * data + lambda_mean * ||mean dM(anchors)||^2`` and parameter gradients.

    The gradient with respect to dM at pair k is s_k (outer) dLoss/dv_k with
    v_k = s_k^T dM_k, and the chain to the network outputs goes through the
    Cholesky and antisymmetric parts.
    """
    net = model.net
    x_all = np.concatenate([b.x0 for b in batches] + [anchors])
    out, cache = net.forward(model._inputs(x_all), cache=True)
    L, sig, D, R = model._assemble(out)
    dm = D + R - model.Phi_proj
    offs = np.cumsum([0] + [b.n for b in batches])
    channels = targets.channels
    A_grp = []
    for bi, b in enumerate(batches):
        v = np.einsum("ki,kij->kj", b.cond, dm[offs[bi] : offs[bi + 1]])
        A_grp.append(_operator_from_v(b, v, lib, channels))
    data, gA = _loss_terms(targets, A_grp, lag_ids)
    mean_dm = dm[offs[-1] :].mean(axis=0)
    loss = scale * data + lambda_mean * float(np.sum(mean_dm**2))
    gM = np.zeros_like(dm)
    off = lib.offsets
    for bi, b in enumerate(batches):
        gv = np.zeros((b.n, model.dim))
        for c, (m, n) in enumerate(channels):
            coef = b.feats_t[:, off[m] : off[m + 1]] @ gA[bi][c]
            gv -= np.einsum("kb,kbj->kj", coef, b.grads0[n]) / b.n
        gM[offs[bi] : offs[bi + 1]] = scale * b.cond[:, :, None] * gv[:, None, :]
    gM[offs[-1] :] = 2.0 * lambda_mean * mean_dm / len(anchors)
    return loss, net.backward(cache, model.output_grad(out, gM))


def train_mobility(targets: ResidualTargetSet, pairs: Sequence[LaggedPairSet], cond_score: CondScoreFn,
                   lib: ObservableLibrary, phi: MeanMobility, anchors: np.ndarray,
                   cfg: MobilityTrainConfig | None = None, standardizer: Standardizer | None = None) -> MobilityModel:
    """Adam on the normalized residual loss plus the mean penalty.

    Each lag keeps a fixed subset of ``pairs_per_lag`` pairs with conditional
    scores evaluated once. An epoch visits every lag once, in random groups
    of ``lags_per_batch``; the data term of each step is rescaled by
    ``n_lags / group size`` so it estimates the full objective. Anchors are
    redrawn from ``anchors`` every epoch.
    """
    cfg = cfg or MobilityTrainConfig()
    rng = np.random.default_rng(cfg.seed)
    by_lag = {round(p.lag, 12): p for p in pairs}
    batches = []
    for t in targets.lags:
        p = by_lag.get(round(float(t), 12))
        if p is None:
            raise LagMismatchError(f"no lagged pairs at target lag {t}")
        take = min(cfg.pairs_per_lag, p.n_pairs)
        idx = np.sort(rng.choice(p.n_pairs, size=take, replace=False))
        batches.append(prepare_batch(p, cond_score, lib, idx))
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    standardizer = standardizer or Standardizer.fit(anchors)
    model = MobilityModel.init(phi, standardizer, cfg.widths, cfg.epsilon, rng)
    net = model.net
    Phi_proj = model.Phi_proj
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    channels = targets.channels
    n_lags = len(targets.lags)

    def full_eval():
        A = operator_values(model, batches, lib, channels)
        data = objective(targets, A)
        anc = anchors[rng_eval.choice(len(anchors), size=min(cfg.n_anchors, len(anchors)), replace=False)]
        mean_dm = model.delta(anc).mean(axis=0)
        return data, float(np.sum(mean_dm**2)), A

    rng_eval = np.random.default_rng(cfg.seed + 7)
    data0, pen0, A0 = full_eval()
    hist = {"data_loss": [data0], "mean_penalty": [pen0], "initial_metrics": channel_metrics(targets, A0, lib)}
    good = net.copy()
    pb = cfg.pair_batch
    step = 0
    for epoch in range(cfg.epochs):
        anc_epoch = anchors[rng.choice(len(anchors), size=min(cfg.n_anchors, len(anchors)), replace=False)]
        order = rng.permutation(n_lags)
        groups = [order[i : i + cfg.lags_per_batch] for i in range(0, n_lags, cfg.lags_per_batch)]
        for grp in groups:
            sub = []
            for li in grp:
                b = batches[li]
                if pb is not None and pb < b.n:
                    sel = rng.choice(b.n, size=pb, replace=False)
                    b = OperatorBatch(b.lag, b.x0[sel], b.cond[sel], b.feats_t[sel], {k: g[sel] for k, g in b.grads0.items()})
                sub.append(b)
            anc = anc_epoch[rng.choice(len(anc_epoch), size=min(cfg.anchors_per_step, len(anc_epoch)), replace=False)]
            loss, grads = loss_and_grad(model, sub, grp, anc, targets, lib, cfg.lambda_mean, n_lags / len(grp))
            if not np.isfinite(loss):
                model.net = good
                raise TrainingDivergedError(f"non-finite mobility loss at epoch {epoch}, step {step}")
            adam_step(opt, net.params(), grads)
            step += 1
        data_e, pen_e, _ = full_eval()
        if not np.isfinite(data_e):
            model.net = good
            raise TrainingDivergedError(f"non-finite mobility loss after epoch {epoch}")
        good = net.copy()
        hist["data_loss"].append(data_e)
        hist["mean_penalty"].append(pen_e)
    _, _, A_fin = full_eval()
    hist["final_metrics"] = channel_metrics(targets, A_fin, lib)
    hist["steps"] = step
    hist["config"] = asdict(cfg)
    model.history = hist
    return model


def mean_correction(model: MobilityModel, anchors) -> np.ndarray:
    return model.delta(anchors).mean(axis=0)


def write_history_csv(model: MobilityModel, path) -> None:
    h = model.history
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "data_loss", "mean_penalty"])
        for e, (d, p) in enumerate(zip(h.get("data_loss", []), h.get("mean_penalty", []))):
            w.writerow([e, repr(d), repr(p)])


def save_mobility(model: MobilityModel, directory, lib: ObservableLibrary | None = None, lags=None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    model.save(directory / "mobility.bin")
    side = {"channels": [list(c) for c in lib.channels] if lib else None,
            "channel_names": [lib.channel_name(c) for c in lib.channels] if lib else None,
            "lags": None if lags is None else [float(t) for t in lags],
            "normalization": "rmse over lags of (E - A), divided by S = max_tau ||E(tau)||_F"}
    (directory / "mobility_meta.json").write_text(json.dumps(side, indent=2))
    write_history_csv(model, directory / "loss_history.csv")


def central_identity_check(curves: CorrelationCurveSet, pairs: Sequence[LaggedPairSet], cond_score: CondScoreFn,
                           lib: ObservableLibrary, M, channel=None) -> dict:
    """Compare the spline Cdot_{m,n}(tau) with -< phi_m(x_tau) s^T M grad phi_n^T > per lag.

    ``M`` is the full mobility, as an array or a callable. Standard errors
    treat pairs as independent, so they are optimistic for correlated data.
    """
    channel = lib.channels[0] if channel is None else tuple(channel)
    m, n = channel
    out = {"channel": lib.channel_name(channel), "lags": [], "lhs": [], "rhs": [], "se": [], "rel_error": []}
    for p in pairs:
        k = int(np.argmin(np.abs(curves.lags - p.lag)))
        if abs(curves.lags[k] - p.lag) > 1e-9 * max(1.0, p.lag):
            raise LagMismatchError(f"lag {p.lag} not on the correlation grid")
        b = prepare_batch(p, cond_score, lib)
        Mx = M(b.x0) if callable(M) else np.broadcast_to(np.asarray(M, dtype=float), (b.n, p.x0.shape[1], p.x0.shape[1]))
        v = np.einsum("ki,kij->kj", b.cond, Mx)
        g = np.einsum("kj,kbj->kb", v, b.grads0[n])
        f = b.feats_t[:, lib.offsets[m] : lib.offsets[m + 1]]
        terms = -(f[:, :, None] * g[:, None, :]).reshape(b.n, -1)
        rhs = terms.mean(axis=0)
        lhs = curves.dblock(m, n)[k].ravel()
        out["lags"].append(float(p.lag))
        out["lhs"].append(lhs.tolist())
        out["rhs"].append(rhs.tolist())
        out["se"].append((terms.std(axis=0) / math.sqrt(b.n)).tolist())
        out["rel_error"].append(float(np.linalg.norm(rhs - lhs) / np.linalg.norm(lhs)))
    return out
