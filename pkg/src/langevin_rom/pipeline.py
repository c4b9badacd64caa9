"""Staged, resumable pipeline runs with a hashed manifest.

Layout under the output directory::

    data/ scores/ curves/ mobility/ rom/ report/ manifest.json

Each stage is keyed by the config digest and the hashes of its input
artifacts. A stage whose key and output hashes match the manifest is
skipped, so reruns are no-ops and interrupted runs resume.
"""

from __future__ import annotations

import hashlib
import json
import logging
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .cir import CirClosedForms, simulate_exact, solve_affine_inverse, solve_affine_inverse_mc
from .config import RunConfig
from .lagstats import (CorrelationCurveSet, MeanMobility, ObservableLibrary, affine2d_library, cir_library,
                       default_lag_grid, derivative_curves, empirical_correlation, estimate_phi, polynomial_library,
                       write_curves_csv)
from .mobility import (MobilityModel, central_identity_check, mean_correction, residual_targets, save_mobility,
                       train_mobility)
from .rom import (ValidationReport, affine2d_circulation, build_rom, full_delta_relative_rmse, simulate_rom,
                  sym_delta_relative_rmse, validate, write_curves_report_csv, write_marginals_csv)
from .score import (JointScoreModel, StationaryScoreModel, conditional_score, extract_lagged_pairs,
                    save_score_sidecar, train_joint_score, train_stationary_score)
from .sde import (TrajectoryFormatError, generate_reference_dataset, ou_conditional_score, read_binary, read_csv,
                  summary_statistics, write_binary)

log = logging.getLogger(__name__)

SUBDIRS = ("data", "scores", "curves", "mobility", "rom", "report")
STAGES = {
    "cir-analytic": ("cir-analytic",),
    "cir-mc": ("data", "correlations", "cir-inverse"),
    "ou-oracle": ("data", "correlations", "identity"),
    "affine2d": ("data", "scores", "correlations", "mobility", "rom", "validate"),
    "custom-data": ("data", "scores", "correlations", "mobility", "rom", "validate"),
}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _git_revision() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent, capture_output=True,
                             text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def ingest_external(path, format: str = "csv", sample_interval: float | None = None):
    """Load an observed ensemble and return it with per-coordinate summary statistics."""
    if format == "csv":
        ens = read_csv(path, sample_interval)
    elif format in ("columnar-binary", "binary"):
        ens = read_binary(path)
    else:
        raise TrajectoryFormatError(f"unknown trajectory format {format!r}")
    for i, s in enumerate(ens.states):
        bad = np.flatnonzero(~np.all(np.isfinite(s), axis=1))
        if len(bad):
            raise TrajectoryFormatError(f"trajectory {i}: non-finite entry at row {int(bad[0])}")
    return ens, summary_statistics(ens)


def build_library(cfg: RunConfig, dim: int) -> ObservableLibrary:
    lib = cfg.library
    if lib.kind == "affine2d":
        return affine2d_library()
    if lib.kind == "cir":
        return cir_library(lib.alphas)
    if lib.kind == "polynomial":
        return polynomial_library(dim, lib.max_degree)
    raise StageError("correlations", f"unknown library kind {lib.kind!r}")


def save_curves(curves: CorrelationCurveSet, path) -> None:
    np.savez(path, lags=curves.lags, C=curves.C, n_pairs=np.asarray(curves.n_pairs), Cdot=curves.Cdot,
             Cdot0=curves.Cdot0, centered=curves.centered)


def load_curves(path, lib: ObservableLibrary, bc_type: str) -> CorrelationCurveSet:
    z = np.load(path)
    return CorrelationCurveSet(lib, z["lags"], z["C"], z["n_pairs"], z["Cdot"], z["Cdot0"], bc_type, bool(z["centered"]))


@dataclass
class StageRecord:
    status: str
    key: str
    seconds: float
    outputs: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    error: str | None = None


class Pipeline:
    def __init__(self, cfg: RunConfig, out=None, threads: int = 1):
        self.cfg = cfg
        self.out = Path(out if out is not None else cfg.out)
        self.threads = threads
        self.manifest_path = self.out / "manifest.json"
        self._cache: dict = {}
        for d in SUBDIRS:
            (self.out / d).mkdir(parents=True, exist_ok=True)
        self.manifest = self._load_manifest()

    # --- manifest -----------------------------------------------------------------

    def _load_manifest(self) -> dict:
        if self.manifest_path.exists():
            m = json.loads(self.manifest_path.read_text())
            if m.get("config_digest") == self.cfg.digest():
                return m
            log.info("config changed; previous manifest discarded")
        return {"version": __version__, "git": _git_revision(), "config_digest": self.cfg.digest(), "config": self.cfg.to_dict(),
                "seed_lineage": self._seed_lineage(), "stages": {}, "artifacts": {}}

    def _seed_lineage(self) -> dict:
        c = self.cfg
        return {"data": c.data.seed, "stationary_score": c.score.stationary.seed, "joint_score": c.score.joint.seed,
                "mobility": c.mobility.seed, "rom": c.rom_run().seed}

    def _write_manifest(self) -> None:
        self.manifest["updated"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        _dump_json(self.manifest, self.manifest_path)

    def _rel(self, path) -> str:
        return str(Path(path).relative_to(self.out))

    def _stage_key(self, name: str, inputs: list[str]) -> str:
        arts = self.manifest["artifacts"]
        payload = {"stage": name, "config": self.cfg.digest(), "inputs": {p: arts.get(p) for p in sorted(inputs)}}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def _is_current(self, name: str, key: str) -> bool:
        rec = self.manifest["stages"].get(name)
        if not rec or rec.get("status") != "done" or rec.get("key") != key:
            return False
        for rel, digest in rec.get("outputs", {}).items():
            p = self.out / rel
            if not p.exists() or sha256_file(p) != digest:
                return False
        return True

    # --- driver -------------------------------------------------------------------

    def stages(self) -> tuple:
        return STAGES[self.cfg.kind]

    def run(self, only: list[str] | None = None) -> dict:
        """Run (or skip) every stage in order; returns ``{stage: StageRecord}``."""
        records = {}
        for name in self.stages():
            if only is not None and name not in only:
                continue
            records[name] = self.run_stage(name)
        return records

    def run_stage(self, name: str) -> StageRecord:
        if name not in self.stages():
            raise StageError(name, f"stage not part of a {self.cfg.kind} run")
        fn = getattr(self, "_stage_" + name.replace("-", "_"))
        inputs = self._inputs_for(name)
        missing = [p for p in inputs if p not in self.manifest["artifacts"] or not (self.out / p).exists()]
        if missing:
            raise StageError(name, f"missing inputs {missing}; run the earlier stages first")
        key = self._stage_key(name, inputs)
        if self._is_current(name, key):
            log.info("stage %s up to date", name)
            rec = self.manifest["stages"][name]
            return StageRecord(**{**rec, "status": "skipped"})
        t0 = time.perf_counter()
        try:
            outputs, summary = fn()
        except StageError as exc:
            self._record_failure(name, key, t0, str(exc))
            raise
        except Exception as exc:  # noqa: BLE001 - recorded with the stage tag, then re-raised
            self._record_failure(name, key, t0, f"{type(exc).__name__}: {exc}")
            raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
        hashes = {self._rel(p): sha256_file(p) for p in outputs}
        self.manifest["artifacts"].update(hashes)
        rec = StageRecord("done", key, round(time.perf_counter() - t0, 3), hashes, summary)
        self.manifest["stages"][name] = asdict(rec)
        # downstream stages are stale once an upstream stage reruns
        order = self.stages()
        for later in order[order.index(name) + 1 :]:
            if later in self.manifest["stages"]:
                self.manifest["stages"][later]["status"] = "stale"
        self._write_manifest()
        return rec

    def _record_failure(self, name, key, t0, message) -> None:
        tag = f"[{name}] "
        message = message if message.startswith(tag) else tag + message
        self.manifest["stages"][name] = asdict(
            StageRecord("failed", key, round(time.perf_counter() - t0, 3), error=message))
        self._write_manifest()

    def _inputs_for(self, name: str) -> list[str]:
        data = ["data/trajectories.bin"]
        scores = ["scores/stationary.bin", "scores/joint.bin"]
        curves = ["curves/curves.npz", "curves/phi.json"]
        return {
            "data": [],
            "cir-analytic": [],
            "scores": data,
            "correlations": data,
            "mobility": data + scores + curves,
            "rom": data + scores + curves + ["mobility/mobility.bin"],
            "validate": data + curves + ["mobility/mobility.bin", "rom/constant.bin", "rom/learned.bin"],
            "identity": data + curves,
            "cir-inverse": curves,
        }[name]

    # --- loaders ------------------------------------------------------------------

    def _p(self, rel) -> Path:
        return self.out / rel

    def ensemble(self):
        if "ens" not in self._cache:
            self._cache["ens"] = read_binary(self._p("data/trajectories.bin"))
        return self._cache["ens"]

    def lag_grid(self) -> np.ndarray:
        return default_lag_grid(self.cfg.lags.step, self.cfg.lags.n)

    def library(self) -> ObservableLibrary:
        return build_library(self.cfg, self.ensemble().dim)

    def scores(self):
        return (StationaryScoreModel.load(self._p("scores/stationary.bin")),
                JointScoreModel.load(self._p("scores/joint.bin")))

    def curves_and_phi(self):
        lib = self.library()
        curves = load_curves(self._p("curves/curves.npz"), lib, self.cfg.lags.bc_type)
        phi = MeanMobility.from_dict(json.loads(self._p("curves/phi.json").read_text()))
        return lib, curves, phi

    # --- stages -------------------------------------------------------------------

    def _stage_data(self):
        cfg = self.cfg
        if cfg.kind == "custom-data":
            if not cfg.ingest.path:
                raise StageError("data", "custom-data runs need ingest.path")
            ens, stats = ingest_external(cfg.ingest.path, cfg.ingest.format, cfg.ingest.sample_interval)
        else:
            system = {"cir-mc": "cir", "ou-oracle": "ou", "affine2d": "affine2d"}[cfg.kind]
            ens = generate_reference_dataset(system, cfg.system_params(), cfg.data, self.threads)
            stats = summary_statistics(ens)
        path = self._p("data/trajectories.bin")
        write_binary(ens, path)
        self._cache["ens"] = ens
        stats_path = self._p("data/summary.json")
        _dump_json(stats, stats_path)
        return [path, stats_path], {"n_traj": ens.n_traj, "n_samples": ens.n_samples,
                                    "sample_interval": ens.sample_interval}

    def _stage_scores(self):
        ens = self.ensemble()
        sc = self.cfg.score
        sched = sc.schedule()
        stat = train_stationary_score(ens.stacked(), sched, sc.stationary)
        pairs = extract_lagged_pairs(ens, self.lag_grid())
        joint = train_joint_score(pairs, sched, sc.joint)
        p1, p2, p3 = self._p("scores/stationary.bin"), self._p("scores/joint.bin"), self._p("scores/scores.json")
        stat.save(p1)
        joint.save(p2)
        save_score_sidecar(p3, stat, joint)
        return [p1, p1.with_suffix(".json"), p2, p2.with_suffix(".json"), p3], {
            "stationary_val_loss": stat.history.val_loss[-1] if stat.history.val_loss else None,
            "joint_val_loss": joint.history.val_loss[-1] if joint.history.val_loss else None}

    def _stage_correlations(self):
        ens = self.ensemble()
        lib = self.library()
        curves = derivative_curves(empirical_correlation(ens, lib, self.lag_grid(), self.cfg.lags.center),
                                   self.cfg.lags.bc_type)
        phi = estimate_phi(curves)
        p_npz, p_csv, p_phi = self._p("curves/curves.npz"), self._p("curves/curves.csv"), self._p("curves/phi.json")
        save_curves(curves, p_npz)
        write_curves_csv(curves, p_csv)
        _dump_json(phi.to_dict(), p_phi)
        summary = {"Phi": phi.Phi.tolist(), "clipped": phi.clipped}
        if self.cfg.kind == "cir-mc":
            p = self.cfg.system_params()
            summary["Phi_exact"] = p.theta * p.gamma
            summary["Phi_rel_error"] = abs(phi.Phi[0, 0] - p.theta * p.gamma) / (p.theta * p.gamma)
        if self.cfg.kind == "ou-oracle":
            p = self.cfg.system_params()
            summary["Phi_rel_error"] = float(np.linalg.norm(phi.Phi - p.gamma * np.eye(p.dim)) /
                                             np.linalg.norm(p.gamma * np.eye(p.dim)))
        return [p_npz, p_csv, p_phi], summary

    def _stage_mobility(self):
        ens = self.ensemble()
        stat, joint = self.scores()
        lib, curves, phi = self.curves_and_phi()
        targets = residual_targets(curves, phi.Phi, lib, stat, ens)
        pairs = extract_lagged_pairs(ens, targets.lags)

        def cond(x0, xt, t):
            return conditional_score(joint, stat, x0, xt, t)

        anchors = ens.stacked()
        model = train_mobility(targets, pairs, cond, lib, phi, anchors, self.cfg.mobility)
        save_mobility(model, self._p("mobility"), lib, targets.lags)
        _dump_json({"S": targets.S, "w": targets.w, "lags": targets.lags, "channels": [lib.channel_name(c) for c in targets.channels]},
                   self._p("mobility/targets.json"))
        outs = sorted(p for p in self._p("mobility").iterdir() if p.is_file())
        h = model.history
        mc = mean_correction(model, anchors)
        return outs, {"loss_initial": h["data_loss"][0], "loss_final": h["data_loss"][-1],
                      "loss_reduction": h["data_loss"][0] / max(h["data_loss"][-1], 1e-300),
                      "mean_correction_ratio": float(np.linalg.norm(mc) / np.linalg.norm(phi.Phi))}

    def _stage_rom(self):
        ens = self.ensemble()
        stat, _ = self.scores()
        _, _, phi = self.curves_and_phi()
        model = MobilityModel.load(self._p("mobility/mobility.bin"))
        run = self.cfg.rom_run()
        # start from reference states so no burn-in transient is needed for the short ROM runs
        starts = np.array([s[-1] for s in ens.states])
        x0 = starts[np.arange(run.n_traj) % len(starts)]
        outs = []
        for name, mob in (("constant", phi.projected()), ("learned", model)):
            rom = build_rom(stat, mob, dim=ens.dim, name=name)
            sim = simulate_rom(rom, run, x0=x0, threads=self.threads)
            p = self._p(f"rom/{name}.bin")
            write_binary(sim, p)
            outs.append(p)
        return outs, {"n_traj": run.n_traj, "T": run.T}

    def _stage_validate(self):
        ens = self.ensemble()
        lib, _, phi = self.curves_and_phi()
        roms = {name: read_binary(self._p(f"rom/{name}.bin")) for name in ("constant", "learned")}
        rep = validate(ens, roms, lib, self.lag_grid(), baseline="constant")
        model = MobilityModel.load(self._p("mobility/mobility.bin"))
        anchors = ens.stacked()
        mc = mean_correction(model, anchors)
        noncoord = [i for i, (m, n) in enumerate(lib.channels) if not (m == n and m in (1, 2))] \
            if self.cfg.library.kind == "affine2d" else list(range(len(lib.channels)))
        wins = rep.wins.get("learned", [])
        h = model.history
        summary = {
            "mean_correction_ratio": float(np.linalg.norm(mc) / np.linalg.norm(phi.Phi)),
            "loss_reduction": h["data_loss"][0] / max(h["data_loss"][-1], 1e-300),
            "win_fraction_noncoordinate": float(np.mean([wins[i] for i in noncoord])) if wins else None,
            "win_fraction_all": float(np.mean(wins)) if wins else None,
            # worst coordinate of KS(learned) / KS(constant)
            "ks_ratio": float(max(a / max(b, 1e-300) for a, b in zip(rep.marginal_ks["learned"],
                                                                      rep.marginal_ks["constant"]))),
            "marginal_ks": rep.marginal_ks,
            "marginal_l1": rep.marginal_l1,
        }
        if self.cfg.kind == "affine2d":
            params = self.cfg.system_params()
            summary["delta_sym_relative_rmse"] = sym_delta_relative_rmse(model, params, anchors)
            # diagnostic only: r_ref from a grid solve with the learned stationary score
            stat, _ = self.scores()
            circ = affine2d_circulation(params, stat, anchors)
            summary["delta_full_relative_rmse"] = full_delta_relative_rmse(model, params, circ)
            summary["circulation_residual"] = circ.residual
        rep.meta["summary"] = summary
        p_json, p_marg, p_curves = self._p("report/validation.json"), self._p("report/marginals.csv"), self._p("report/correlations.csv")
        rep.to_json(p_json)
        write_marginals_csv(ens, roms, p_marg)
        write_curves_report_csv(rep, p_curves)
        return [p_json, p_marg, p_curves], summary

    def _stage_identity(self):
        ens = self.ensemble()
        lib, curves, phi = self.curves_and_phi()
        p = self.cfg.system_params()
        lags = [t for t in self.lag_grid() if t >= 0.1 - 1e-12]
        pairs = extract_lagged_pairs(ens, lags)

        def cond(x0, xt, t):
            return ou_conditional_score(p, x0, xt, t)

        rep = central_identity_check(curves, pairs, cond, lib, p.gamma * np.eye(p.dim))
        rep["Phi"] = phi.Phi.tolist()
        rep["max_rel_error"] = max(rep["rel_error"])
        path = self._p("report/identity.json")
        _dump_json(rep, path)
        return [path], {"max_rel_error": rep["max_rel_error"]}

    def _stage_cir_inverse(self):
        c = self.cfg.cir
        cf = CirClosedForms(self.cfg.system_params())
        chains = simulate_exact(cf, c.n_chains, c.n_samples, c.h, seed=self.cfg.data.seed)
        t_grid = np.linspace(c.t_min, c.t_max, c.n_lags)
        res = solve_affine_inverse_mc(cf, chains, alphas=c.alphas, t_grid=t_grid, control_variate=c.control_variate)
        path = self._p("report/cir_inverse.json")
        res.to_json(path)
        _, _, phi = self.curves_and_phi()
        return [path], {"a": res.a, "gamma": res.gamma, "rel_error": abs(res.a - res.gamma) / res.gamma,
                        "Phi": phi.Phi.tolist()}

    def _stage_cir_analytic(self):
        c = self.cfg.cir
        cf = CirClosedForms(self.cfg.system_params())
        t0 = time.perf_counter()
        res = solve_affine_inverse(cf, alphas=c.alphas, t_grid=np.linspace(c.t_min, c.t_max, c.n_lags))
        res.meta["seconds"] = time.perf_counter() - t0
        path = self._p("report/cir_analytic.json")
        res.to_json(path)
        return [path], {"a": res.a, "gamma": res.gamma, "abs_error": abs(res.a - res.gamma)}


def run(cfg: RunConfig, out=None, threads: int = 1) -> dict[str, StageRecord]:
    return Pipeline(cfg, out, threads).run()
