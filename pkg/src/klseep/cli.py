"""Command-line harness for the seepage inversion experiments.

Subcommands:
  make-obs CONFIG   generate and persist synthetic observations
  run CONFIG        sample the posterior; write chains, diagnostics, summaries
  bench CONFIG      wall-time scaling of the two field backends
  diag RUNDIR       recompute diagnostics and summaries from saved chains

Configs are versioned JSON files (see configs/); exit codes are 0 success,
2 configuration error, 3 runtime failure.  All artifacts are plain CSV/JSON
for downstream plotting; nothing is rendered in-process.
"""

import argparse
import glob
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import diagnostics
from . import fem, hmc, klbasis, posterior
from .errors import ConfigError, InsufficientSamples, KLSeepError

EXPERIMENT_SCHEMA = "klseep-experiment-v1"
BENCHMARK_SCHEMA = "klseep-benchmark-v1"

_PROBLEMS = ("1d-layers", "2d-cavity")
_MODES = ("spatial-only", "simultaneous-baseline", "simultaneous-proposed")
# CLI mode -> (context mode, field backend)
_MODE_MAP = {
    "spatial-only": ("spatial", "discrete"),
    "simultaneous-baseline": ("simultaneous", "discrete"),
    "simultaneous-proposed": ("simultaneous", "nystrom"),
}


# ----------------------------------------------------------------------------
# config validation


def _check_keys(blob, prefix, required, optional=()):
    if not isinstance(blob, dict):
        raise ConfigError(prefix.rstrip(".") or "config", "must be an object")
    for k in blob:
        if k not in required and k not in optional:
            raise ConfigError(prefix + k, "unknown field")
    for k in required:
        if k not in blob:
            raise ConfigError(prefix + k, "missing required field")


def _number(val, field, positive=False, nonneg=False):
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(field, "must be a number")
    v = float(val)
    if positive and v <= 0:
        raise ConfigError(field, "must be positive")
    if nonneg and v < 0:
        raise ConfigError(field, "must be nonnegative")
    return v


def _integer(val, field, lo=None):
    if isinstance(val, bool) or not isinstance(val, int):
        raise ConfigError(field, "must be an integer")
    if lo is not None and val < lo:
        raise ConfigError(field, f"must be >= {lo}")
    return int(val)


def _vector(val, field, length=None):
    if not isinstance(val, (list, tuple)):
        raise ConfigError(field, "must be a list of numbers")
    out = [_number(v, field) for v in val]
    if length is not None and len(out) != length:
        raise ConfigError(field, f"must have length {length}")
    return out


class ExperimentConfig:
    """Validated experiment settings; `raw` is the normalized JSON tree."""

    def __init__(self, blob):
        _check_keys(
            blob, "",
            ("schema", "problem", "mode", "kernel", "sampler",
             "observations", "output_dir"),
            ("field_mean", "prior", "mesh", "bc_cases", "truncation",
             "n_modes", "ess", "summary"),
        )
        if blob["schema"] != EXPERIMENT_SCHEMA:
            raise ConfigError("schema", f"expected {EXPERIMENT_SCHEMA!r}")
        if blob["problem"] not in _PROBLEMS:
            raise ConfigError("problem", f"must be one of {_PROBLEMS}")
        if blob["mode"] not in _MODES:
            raise ConfigError("mode", f"must be one of {_MODES}")
        self.problem = blob["problem"]
        self.mode = blob["mode"]
        two_d = self.problem == "2d-cavity"
        if two_d and self.mode != "simultaneous-proposed":
            raise ConfigError(
                "mode",
                "2d-cavity supports only simultaneous-proposed (the discrete "
                "baseline and spatial-only variants are 1D studies)",
            )

        _check_keys(blob["kernel"], "kernel.", ("v", "l"))
        self.kernel_v = _number(blob["kernel"]["v"], "kernel.v", positive=True)
        self.kernel_l = _number(blob["kernel"]["l"], "kernel.l", positive=True)
        self.field_mean = _number(blob.get("field_mean", -3.0), "field_mean")

        pr = blob.get("prior", {})
        _check_keys(pr, "prior.", (), ("variance", "geometry_mean"))
        self.variance = _number(pr.get("variance", 1.0), "prior.variance",
                                positive=True)
        self.geometry_mean = None
        if "geometry_mean" in pr:
            if self.mode == "spatial-only":
                raise ConfigError("prior.geometry_mean",
                                  "spatial-only mode estimates no geometry")
            self.geometry_mean = _vector(pr["geometry_mean"],
                                         "prior.geometry_mean",
                                         3 if two_d else 2)

        mesh = blob.get("mesh", {})
        if two_d:
            _check_keys(mesh, "mesh.", (), ("n_rings",))
            self.n_rings = _integer(mesh.get("n_rings", 16), "mesh.n_rings", 2)
            self.n_elems = None
        else:
            _check_keys(mesh, "mesh.", (), ("n_elems",))
            self.n_elems = _integer(mesh.get("n_elems", 40), "mesh.n_elems", 7)
            self.n_rings = None
        self.bc_cases = _integer(blob.get("bc_cases", 31), "bc_cases", 1)

        tr = blob.get("truncation", {})
        _check_keys(tr, "truncation.", (), ("rule", "tol"))
        rule = tr.get("rule", "rel" if two_d else "abs")
        if rule not in ("abs", "rel"):
            raise ConfigError("truncation.rule", "must be 'abs' or 'rel'")
        tol = _number(tr.get("tol", 1e-3), "truncation.tol", positive=True)
        self.truncation = (rule, tol)

        self.n_modes = None
        if "n_modes" in blob:
            if two_d:
                raise ConfigError("n_modes",
                                  "not configurable for 2d-cavity")
            want = 1 if self.mode == "spatial-only" else 2
            self.n_modes = tuple(
                _integer(m, "n_modes", 0) for m in blob["n_modes"]
            )
            if len(self.n_modes) != want:
                raise ConfigError("n_modes", f"must have length {want}")

        sp = blob["sampler"]
        _check_keys(sp, "sampler.", ("chains", "samples", "warmup", "seed"),
                    ("step_size", "target_accept", "max_depth",
                     "max_energy_error", "window_base", "fixed_length"))
        self.chains = _integer(sp["chains"], "sampler.chains", 1)
        self.samples = _integer(sp["samples"], "sampler.samples", 1)
        self.warmup = _integer(sp["warmup"], "sampler.warmup", 0)
        if self.warmup >= self.samples:
            raise ConfigError("sampler.warmup",
                              "need 0 <= warmup < samples (samples is total)")
        self.seed = _integer(sp["seed"], "sampler.seed", 0)
        self.step_size = _number(sp.get("step_size", 0.05),
                                 "sampler.step_size", positive=True)
        self.target_accept = _number(sp.get("target_accept", 0.8),
                                     "sampler.target_accept", positive=True)
        if self.target_accept >= 1.0:
            raise ConfigError("sampler.target_accept", "must be in (0, 1)")
        self.max_depth = _integer(sp.get("max_depth", 10),
                                  "sampler.max_depth", 0)
        self.max_energy_error = _number(sp.get("max_energy_error", 1000.0),
                                        "sampler.max_energy_error",
                                        positive=True)
        self.window_base = _integer(sp.get("window_base", 25),
                                    "sampler.window_base", 1)
        self.fixed_length = None
        if sp.get("fixed_length") is not None:
            self.fixed_length = _integer(sp["fixed_length"],
                                         "sampler.fixed_length", 1)

        ess = blob.get("ess", {})
        _check_keys(ess, "ess.", (), ("alpha", "eps"))
        self.ess_alpha = _number(ess.get("alpha", 0.05), "ess.alpha",
                                 positive=True)
        self.ess_eps = _number(ess.get("eps", 0.10), "ess.eps", positive=True)

        ob = blob["observations"]
        _check_keys(ob, "observations.",
                    ("path", "noise_ratio", "seed", "truth"))
        if not isinstance(ob["path"], str) or not ob["path"]:
            raise ConfigError("observations.path", "must be a file path")
        self.obs_path = ob["path"]
        self.noise_ratio = _number(ob["noise_ratio"],
                                   "observations.noise_ratio", nonneg=True)
        self.obs_seed = _integer(ob["seed"], "observations.seed", 0)
        t = ob["truth"]
        if two_d:
            _check_keys(t, "observations.truth.", (),
                        ("n_rings", "field_seed", "theta2"))
            self.truth = {
                "n_rings": _integer(t.get("n_rings", 24),
                                    "observations.truth.n_rings", 2),
                "field_seed": _integer(t.get("field_seed", 11),
                                       "observations.truth.field_seed", 0),
                "theta2": _vector(t.get("theta2", [1.1, -0.7, 1.1]),
                                  "observations.truth.theta2", 3),
            }
        else:
            _check_keys(t, "observations.truth.", (),
                        ("n_elems", "u_sand", "u_clay", "theta2"))
            self.truth = {
                "n_elems": _integer(t.get("n_elems", 200),
                                    "observations.truth.n_elems", 7),
                "u_sand": _number(t.get("u_sand", -3.0),
                                  "observations.truth.u_sand"),
                "u_clay": _number(t.get("u_clay", -5.0),
                                  "observations.truth.u_clay"),
                "theta2": _vector(t.get("theta2", [3.8, 5.8]),
                                  "observations.truth.theta2", 2),
            }

        sm = blob.get("summary", {})
        _check_keys(sm, "summary.", (),
                    ("raster_n", "max_raster_samples", "max_profile_samples",
                     "levels"))
        self.raster_n = _integer(sm.get("raster_n", 160), "summary.raster_n", 2)
        self.max_raster_samples = _integer(sm.get("max_raster_samples", 200),
                                           "summary.max_raster_samples", 1)
        self.max_profile_samples = _integer(
            sm.get("max_profile_samples", 2000),
            "summary.max_profile_samples", 1)
        self.levels = tuple(
            _number(v, "summary.levels", positive=True)
            for v in sm.get("levels", [5, 50, 95])
        )
        if any(v > 100 for v in self.levels):
            raise ConfigError("summary.levels", "percent levels exceed 100")

        if not isinstance(blob["output_dir"], str) or not blob["output_dir"]:
            raise ConfigError("output_dir", "must be a directory path")
        self.output_dir = blob["output_dir"]
        self.raw = self._normalized(blob)

    def _normalized(self, blob):
        norm = {
            "schema": EXPERIMENT_SCHEMA,
            "problem": self.problem,
            "mode": self.mode,
            "kernel": {"v": self.kernel_v, "l": self.kernel_l},
            "field_mean": self.field_mean,
            "prior": {"variance": self.variance},
            "mesh": ({"n_rings": self.n_rings} if self.n_rings is not None
                     else {"n_elems": self.n_elems}),
            "bc_cases": self.bc_cases,
            "truncation": {"rule": self.truncation[0],
                           "tol": self.truncation[1]},
            "sampler": {
                "chains": self.chains, "samples": self.samples,
                "warmup": self.warmup, "seed": self.seed,
                "step_size": self.step_size,
                "target_accept": self.target_accept,
                "max_depth": self.max_depth,
                "max_energy_error": self.max_energy_error,
                "window_base": self.window_base,
                "fixed_length": self.fixed_length,
            },
            "ess": {"alpha": self.ess_alpha, "eps": self.ess_eps},
            "observations": {
                "path": self.obs_path, "noise_ratio": self.noise_ratio,
                "seed": self.obs_seed, "truth": dict(self.truth),
            },
            "summary": {
                "raster_n": self.raster_n,
                "max_raster_samples": self.max_raster_samples,
                "max_profile_samples": self.max_profile_samples,
                "levels": list(self.levels),
            },
            "output_dir": self.output_dir,
        }
        if self.geometry_mean is not None:
            norm["prior"]["geometry_mean"] = list(self.geometry_mean)
        if self.n_modes is not None:
            norm["n_modes"] = list(self.n_modes)
        return norm


class BenchmarkConfig:
    def __init__(self, blob):
        _check_keys(blob, "", ("schema", "n_e", "output_dir"),
                    ("repetitions", "backends", "baseline_max_n_e", "kernel",
                     "n_modes", "theta2", "noise_ratio", "seed"))
        if blob["schema"] != BENCHMARK_SCHEMA:
            raise ConfigError("schema", f"expected {BENCHMARK_SCHEMA!r}")
        self.n_e = [_integer(n, "n_e", 7) for n in blob["n_e"]]
        if len(self.n_e) < 2 or any(
            b <= a for a, b in zip(self.n_e, self.n_e[1:])
        ):
            raise ConfigError("n_e", "must be strictly increasing, length >= 2")
        self.repetitions = _integer(blob.get("repetitions", 5),
                                    "repetitions", 1)
        self.backends = list(blob.get("backends", ["proposed", "baseline"]))
        if not self.backends or any(
            b not in ("proposed", "baseline") for b in self.backends
        ):
            raise ConfigError("backends",
                              "must be a nonempty subset of proposed/baseline")
        self.baseline_max = _integer(blob.get("baseline_max_n_e", 4000),
                                     "baseline_max_n_e", 7)
        kern = blob.get("kernel", {"v": 1.0, "l": 10.0})
        _check_keys(kern, "kernel.", ("v", "l"))
        self.kernel_v = _number(kern["v"], "kernel.v", positive=True)
        self.kernel_l = _number(kern["l"], "kernel.l", positive=True)
        self.n_modes = tuple(
            _integer(m, "n_modes", 0) for m in blob.get("n_modes", [5, 5])
        )
        if len(self.n_modes) != 2:
            raise ConfigError("n_modes", "must have length 2")
        self.theta2 = _vector(blob.get("theta2", [3.0, 7.0]), "theta2", 2)
        self.noise_ratio = _number(blob.get("noise_ratio", 0.1),
                                   "noise_ratio", nonneg=True)
        self.seed = _integer(blob.get("seed", 0), "seed", 0)
        if not isinstance(blob["output_dir"], str) or not blob["output_dir"]:
            raise ConfigError("output_dir", "must be a directory path")
        self.output_dir = blob["output_dir"]


def validate_experiment(blob):
    return ExperimentConfig(blob)


def validate_benchmark(blob):
    return BenchmarkConfig(blob)


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def load_experiment_config(path):
    return validate_experiment(_load_json(path))


def load_benchmark_config(path):
    return validate_benchmark(_load_json(path))


# ----------------------------------------------------------------------------
# experiment plumbing


def build_context(cfg):
    bc_scales = 0.1 + 0.01 * np.arange(cfg.bc_cases)
    if cfg.problem == "1d-layers":
        mode, backend = _MODE_MAP[cfg.mode]
        ctx = posterior.make_context_1d(
            cfg.kernel_l, mode, backend=backend, n_elems=cfg.n_elems,
            n_modes=cfg.n_modes, bc_scales=bc_scales,
            field_mean=cfg.field_mean, v=cfg.kernel_v,
            truncation=cfg.truncation,
        )
    else:
        ctx = posterior.make_context_2d(
            cfg.kernel_l, n_rings=cfg.n_rings, bc_scales=bc_scales,
            field_mean=cfg.field_mean, v=cfg.kernel_v,
            truncation=cfg.truncation,
        )
    if cfg.variance != 1.0 or cfg.geometry_mean is not None:
        mean = ctx.prior.mean.copy()
        if cfg.geometry_mean is not None:
            mean[ctx.M1:] = cfg.geometry_mean
        ctx.prior = posterior.Prior(mean, cfg.variance,
                                    constraints=ctx.prior.constraints,
                                    n_geometry=ctx.prior.n_geometry)
    return ctx


def _truth_setup(cfg, ctx):
    """Data-generating context (finer mesh, same physics) and true theta."""
    t = cfg.truth
    if cfg.problem == "1d-layers":
        tctx = posterior.make_truth_context_1d(
            n_elems=t["n_elems"], u_sand=t["u_sand"], u_clay=t["u_clay"],
        )
        tctx.bc_scales = ctx.bc_scales.copy()
        theta_star = np.asarray(t["theta2"], dtype=float)
    else:
        tctx = posterior.make_context_2d(
            cfg.kernel_l, n_rings=t["n_rings"], bc_scales=ctx.bc_scales,
            basis=ctx.field.basis, field_mean=cfg.field_mean,
        )
        theta1 = np.random.default_rng(t["field_seed"]).standard_normal(
            tctx.M1
        )
        theta_star = np.concatenate([theta1, t["theta2"]])
    return tctx, theta_star


def make_observations(cfg, ctx):
    tctx, theta_star = _truth_setup(cfg, ctx)
    obs = posterior.generate_observations(tctx, theta_star, cfg.noise_ratio,
                                          cfg.obs_seed)
    parent = os.path.dirname(cfg.obs_path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    fem.save_observations(obs, cfg.obs_path)
    return obs


def load_or_make_observations(cfg, ctx):
    if not os.path.exists(cfg.obs_path):
        return make_observations(cfg, ctx)
    obs = fem.load_observations(cfg.obs_path)
    pred = ctx.predict(ctx.prior.mean)
    if obs.y.shape != (len(ctx.bc_scales), pred.size):
        raise ConfigError(
            "observations.path",
            f"file holds {obs.y.shape} measurements; this problem expects "
            f"({len(ctx.bc_scales)}, {pred.size})",
        )
    return obs


def _thin(arr, max_rows):
    n = arr.shape[0]
    if n <= max_rows:
        return arr
    step = int(np.ceil(n / max_rows))
    return arr[::step]


# ----------------------------------------------------------------------------
# diagnostics and summary artifacts


def compute_diagnostics(cfg, ctx, results):
    threshold = diagnostics.min_ess(ctx.M, cfg.ess_alpha, cfg.ess_eps)
    per_chain = []
    for r in results:
        kept = r.phase == 1
        s = r.theta[kept]
        entry = {"n_samples": int(s.shape[0])}
        try:
            entry["mess"] = diagnostics.multivariate_ess(s)
            entry["mess_error"] = None
        except InsufficientSamples as e:
            entry["mess"] = None
            entry["mess_error"] = str(e)
        div = r.divergent[kept]
        entry["divergences"] = int(div.sum())
        entry["divergence_rate"] = float(div.mean()) if div.size else 0.0
        entry["mean_accept"] = float(r.accept_stat[kept].mean())
        entry["mean_depth"] = float(r.depth[kept].mean())
        entry["step_size"] = (
            float(r.step_size) if np.isfinite(r.step_size) else None
        )
        per_chain.append(entry)
    pooled = np.vstack([r.samples for r in results])
    info = {
        "M": ctx.M,
        "M1": ctx.M1,
        "chains": len(results),
        "samples": cfg.samples,
        "warmup": cfg.warmup,
        "pooled_samples": int(pooled.shape[0]),
        "min_ess_threshold": threshold,
        "ess_alpha": cfg.ess_alpha,
        "ess_eps": cfg.ess_eps,
        "per_chain": per_chain,
        "theta_mean": pooled.mean(axis=0).tolist(),
    }
    if ctx.M2:
        th2 = pooled[:, ctx.M1:]
        info["theta2_mean"] = th2.mean(axis=0).tolist()
        info["theta2_hpd95"] = [
            list(diagnostics.hpd_interval(th2[:, j], 0.95))
            for j in range(ctx.M2)
        ]
    else:
        info["theta2_mean"] = None
        info["theta2_hpd95"] = None
    return info


def write_profile_csv(cfg, ctx, pooled, path):
    """Per-element percentile profile of the log-conductivity field."""
    samples = _thin(pooled, cfg.max_profile_samples)
    U = np.array([ctx.element_log_k(th) for th in samples])
    rows = diagnostics.field_percentiles(U)
    z = ctx.centroids()
    with open(path, "w") as fh:
        fh.write("element,z_center,p2_5,p50,p97_5\n")
        for j in range(z.size):
            fh.write(
                f"{j},{z[j]:.17g},{rows[0, j]:.17g},{rows[1, j]:.17g},"
                f"{rows[2, j]:.17g}\n"
            )


def write_zone_csv(grid, zones, levels, path):
    masks = [zones[lv].astype(int) for lv in levels]
    with open(path, "w") as fh:
        fh.write("x,y," + ",".join(f"s{lv:g}" for lv in levels) + "\n")
        for i, (x, y) in enumerate(grid.centers):
            vals = ",".join(str(m[i]) for m in masks)
            fh.write(f"{x:.10g},{y:.10g},{vals}\n")


def write_field_csv(grid, rows, path):
    with open(path, "w") as fh:
        fh.write("x,y,p2_5,p50,p97_5\n")
        for i, (x, y) in enumerate(grid.centers):
            fh.write(
                f"{x:.10g},{y:.10g},{rows[0, i]:.10g},{rows[1, i]:.10g},"
                f"{rows[2, i]:.10g}\n"
            )


def write_summaries(cfg, ctx, results, out_dir):
    pooled = np.vstack([r.samples for r in results])
    if cfg.problem == "1d-layers":
        write_profile_csv(cfg, ctx, pooled,
                          os.path.join(out_dir, "profile.csv"))
        return
    phi = np.concatenate([r.phi[r.phase == 1] for r in results])
    grid = diagnostics.raster_grid(cfg.raster_n)
    zones = diagnostics.interface_zones(pooled[:, ctx.M1:], phi,
                                        levels=cfg.levels, grid=grid)
    write_zone_csv(grid, zones, cfg.levels,
                   os.path.join(out_dir, "zones.csv"))
    th = _thin(pooled, cfg.max_raster_samples)
    U = klbasis.field_eval(ctx.field.basis, th[:, :ctx.M1].T, grid.centers).T
    c = th[:, ctx.M1:]
    dist = np.linalg.norm(grid.centers[None, :, :] - c[:, None, :2], axis=2)
    inside = dist < c[:, None, 2]
    rows = diagnostics.field_percentiles(U, mask=inside)
    write_field_csv(grid, rows, os.path.join(out_dir, "field.csv"))


# ----------------------------------------------------------------------------
# subcommands


def _run_all(f, starts, config, jobs):
    seeds = np.random.SeedSequence(config.seed).spawn(len(starts))
    if jobs <= 1:
        return [
            hmc.run_chain(f, s, config, rng=np.random.default_rng(child))
            for s, child in zip(starts, seeds)
        ]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [
            pool.submit(hmc.run_chain, f, s, config,
                        np.random.default_rng(child))
            for s, child in zip(starts, seeds)
        ]
        return [fut.result() for fut in futures]


def cmd_make_obs(cfg):
    ctx = build_context(cfg)
    obs = make_observations(cfg, ctx)
    print(f"wrote {cfg.obs_path}: {obs.y.shape[0]} cases x "
          f"{obs.y.shape[1]} measurements, noise ratio {cfg.noise_ratio}")
    return 0


def cmd_run(cfg, jobs=1):
    t_start = time.perf_counter()
    klbasis.reset_ievp_solve_count()
    ctx = build_context(cfg)
    obs = load_or_make_observations(cfg, ctx)

    def f(theta):
        return ctx.value_and_grad(theta, obs)

    start_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    starts = [ctx.prior.sample(start_rng) for _ in range(cfg.chains)]
    hconf = hmc.HMCConfig(
        samples=cfg.samples, warmup=cfg.warmup, step_size=cfg.step_size,
        target_accept=cfg.target_accept, seed=cfg.seed,
        max_depth=cfg.max_depth, max_energy_error=cfg.max_energy_error,
        inv_mass=np.full(ctx.M, cfg.variance), window_base=cfg.window_base,
        fixed_length=cfg.fixed_length,
    )
    print(f"run: {cfg.chains} chains x {cfg.samples} samples "
          f"(warmup {cfg.warmup}), M = {ctx.M} ({ctx.M1} field + "
          f"{ctx.M2} geometry)")
    results = _run_all(f, starts, hconf, jobs)

    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(os.path.join(cfg.output_dir, "config.json"), "w") as fh:
        json.dump(cfg.raw, fh, indent=1)
    for i, r in enumerate(results):
        hmc.save_chain_csv(r, os.path.join(cfg.output_dir,
                                           f"chain_{i:02d}.csv"))
        hmc.save_adaptation_json(
            r, os.path.join(cfg.output_dir, f"adaptation_{i:02d}.json")
        )
        kept = r.phase == 1
        print(f"chain {i:02d}: accept {r.accept_stat[kept].mean():.3f}, "
              f"divergences {int(r.divergent[kept].sum())}, "
              f"step {r.step_size:.4g}")

    info = compute_diagnostics(cfg, ctx, results)
    info["ievp_solves"] = klbasis.ievp_solve_count()
    info["runtime_s"] = time.perf_counter() - t_start
    with open(os.path.join(cfg.output_dir, "diagnostics.json"), "w") as fh:
        json.dump(info, fh, indent=1)
    write_summaries(cfg, ctx, results, cfg.output_dir)
    if info["theta2_mean"] is not None:
        geo = ", ".join(f"{v:.3f}" for v in info["theta2_mean"])
        print(f"geometry posterior mean: [{geo}]")
    print(f"wrote {cfg.output_dir}/diagnostics.json "
          f"(ievp solves: {info['ievp_solves']})")
    return 0


def _load_results(run_dir):
    paths = sorted(glob.glob(os.path.join(run_dir, "chain_*.csv")))
    if not paths:
        raise ConfigError("output_dir", f"no chain files in {run_dir}")
    out = []
    for i, path in enumerate(paths):
        cols = hmc.load_chain_csv(path)
        M = sum(1 for c in cols if c.startswith("theta_"))
        theta = np.column_stack([cols[f"theta_{j}"] for j in range(M)])
        step = float("nan")
        adapt_path = os.path.join(run_dir, f"adaptation_{i:02d}.json")
        if os.path.exists(adapt_path):
            step = json.load(open(adapt_path)).get("step_size", float("nan"))
        out.append(hmc.ChainResult(
            theta, cols["phi"], cols["accept_stat"],
            cols["depth"].astype(int), cols["n_leapfrog"].astype(int),
            cols["divergent"].astype(bool), cols["phase"].astype(int),
            step, None, None,
        ))
    return out


def cmd_diag(run_dir):
    cfg_path = os.path.join(run_dir, "config.json")
    if not os.path.exists(cfg_path):
        raise ConfigError("output_dir", f"no config.json in {run_dir}")
    cfg = load_experiment_config(cfg_path)
    ctx = build_context(cfg)
    results = _load_results(run_dir)
    info = compute_diagnostics(cfg, ctx, results)
    info["ievp_solves"] = None
    info["runtime_s"] = None
    with open(os.path.join(run_dir, "diagnostics.json"), "w") as fh:
        json.dump(info, fh, indent=1)
    write_summaries(cfg, ctx, results, run_dir)
    print(f"recomputed diagnostics for {len(results)} chains in {run_dir}")
    return 0


def _timed(fn, reps):
    """Median per-call seconds; short calls are batched to beat clock noise."""
    fn()
    t0 = time.perf_counter()
    fn()
    t1 = time.perf_counter() - t0
    if t1 >= 0.05:
        times = [t1]
        for _ in range(reps - 1):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
    else:
        inner = min(10_000, max(1, int(np.ceil(0.05 / max(t1, 1e-7)))))
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            for _ in range(inner):
                fn()
            times.append((time.perf_counter() - t0) / inner)
    return float(np.median(times))


def _loglog_slope(sizes, times):
    if len(sizes) < 2:
        return None
    return float(np.polyfit(np.log(sizes), np.log(times), 1)[0])


def cmd_bench(cfg):
    os.makedirs(cfg.output_dir, exist_ok=True)
    theta2 = np.asarray(cfg.theta2, dtype=float)
    obs_cache = {}
    rows = []
    for backend_name in cfg.backends:
        backend = {"proposed": "nystrom", "baseline": "discrete"}[backend_name]
        for n_e in cfg.n_e:
            if backend_name == "baseline" and n_e > cfg.baseline_max:
                continue
            ctx = posterior.make_context_1d(
                cfg.kernel_l, "simultaneous", backend=backend, n_elems=n_e,
                n_modes=cfg.n_modes, v=cfg.kernel_v,
            )
            theta = np.concatenate([np.zeros(ctx.M1), theta2])
            z, dZ = ctx.layer_map.nodes(theta2)
            cent = 0.5 * (z[:-1] + z[1:])[:, None]
            dcent = 0.5 * (dZ[:-1] + dZ[1:])
            theta1 = np.zeros(ctx.M1)
            t_d = _timed(
                lambda: ctx.field.eval_and_grads(cent, dcent, theta1),
                cfg.repetitions,
            )
            rows.append((backend_name, "shape_derivative", n_e, t_d))
            if n_e not in obs_cache:
                obs_cache[n_e] = posterior.generate_observations(
                    ctx, theta, cfg.noise_ratio, cfg.seed
                )
            obs = obs_cache[n_e]

            def f(th):
                return ctx.value_and_grad(th, obs)

            _, grad0 = f(theta)
            p = 0.1 * np.ones(ctx.M)
            inv_mass = np.ones(ctx.M)
            t_l = _timed(
                lambda: hmc.leapfrog(f, theta, p, grad0, 1e-8, inv_mass),
                cfg.repetitions,
            )
            rows.append((backend_name, "leapfrog", n_e, t_l))
            print(f"{backend_name:9s} n_e={n_e:6d}  "
                  f"derivative {t_d:.3e} s  leapfrog {t_l:.3e} s")

    with open(os.path.join(cfg.output_dir, "timings.csv"), "w") as fh:
        fh.write("backend,quantity,n_e,median_s\n")
        for backend_name, quantity, n_e, t in rows:
            fh.write(f"{backend_name},{quantity},{n_e},{t:.10g}\n")

    slopes = {}
    for backend_name, quantity, n_e, t in rows:
        q = slopes.setdefault(backend_name, {}).setdefault(
            quantity, {"n_e": [], "median_s": []}
        )
        q["n_e"].append(n_e)
        q["median_s"].append(t)
    for backend_name, per_q in slopes.items():
        for quantity, q in per_q.items():
            ns, ts = q["n_e"], q["median_s"]
            q["all"] = _loglog_slope(ns, ts)
            q["last4"] = _loglog_slope(ns[-4:], ts[-4:])
            q["last3"] = _loglog_slope(ns[-3:], ts[-3:])
            print(f"{backend_name} {quantity}: slope all {q['all']:.2f}, "
                  f"last3 {q['last3']:.2f}")
    with open(os.path.join(cfg.output_dir, "slopes.json"), "w") as fh:
        json.dump(slopes, fh, indent=1)
    return 0


# ----------------------------------------------------------------------------
# entry point


def _build_parser():
    p = argparse.ArgumentParser(
        prog="klseep",
        description="Seepage inversion experiments: simultaneous estimation "
                    "of a conductivity field and embedded geometry.",
    )
    sub = p.add_subparsers(dest="cmd", required=True)
    for name, helptext in [
        ("make-obs", "generate synthetic observations from the truth model"),
        ("run", "sample the posterior and write the result bundle"),
        ("bench", "time the field backends across mesh sizes"),
    ]:
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("config", help="path to a JSON config")
        sp.add_argument("--output-dir", help="override the config output_dir")
        sp.add_argument("--seed", type=int,
                        help="override the sampler seed (observation seed "
                             "for make-obs)")
        if name == "run":
            sp.add_argument("--jobs", type=int, default=1,
                            help="chains run concurrently (default 1)")
    d = sub.add_parser("diag",
                       help="recompute diagnostics from a run directory")
    d.add_argument("rundir")
    return p


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        if args.cmd == "diag":
            return cmd_diag(args.rundir)
        if args.cmd == "bench":
            cfg = load_benchmark_config(args.config)
            if args.output_dir:
                cfg.output_dir = args.output_dir
            if args.seed is not None:
                cfg.seed = _integer(args.seed, "seed", 0)
            return cmd_bench(cfg)
        cfg = load_experiment_config(args.config)
        if args.output_dir:
            cfg.output_dir = args.output_dir
            cfg.raw["output_dir"] = args.output_dir
        if args.seed is not None:
            seed = _integer(args.seed, "seed", 0)
            if args.cmd == "make-obs":
                cfg.obs_seed = seed
                cfg.raw["observations"]["seed"] = seed
            else:
                cfg.seed = seed
                cfg.raw["sampler"]["seed"] = seed
        if args.cmd == "make-obs":
            return cmd_make_obs(cfg)
        return cmd_run(cfg, jobs=args.jobs)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as e:
        print(f"config error: invalid JSON ({e})", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except KLSeepError as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 3
    except Exception as e:
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
