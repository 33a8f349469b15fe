"""Experiment drivers: convergence study, calibration, sampling study,
reference solution and the three-way method comparison.

Every command takes a validated config (strict: unknown keys are errors,
omitted keys get documented defaults, ``full_scale`` switches to the
heavyweight defaults) and writes CSV records plus a JSON summary into an
output directory.  Each emitted file carries the hash of the resolved
config and the seed, so results are traceable to their exact settings.

Per-sample and per-level CSVs contain only deterministic columns; rerunning
an experiment with identical config and seeds reproduces them byte for
byte.  Wall-clock timings live in run records and summaries only.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .clmc import (
    AdaptivePathSampler,
    ClmcConfig,
    ClmcRateFit,
    estimate_rates_clmc,
    optimal_rate_param,
    run_clmc,
    truncation_bias_bound,
)
from .coefficient import CoefficientSample
from .fem import assemble, h1_norm, solve
from .indicator import adaptive_hierarchy
from .mesh import aligned_structured_mesh, structured_unit_square, uniform_family
from .mlmc import (
    EstimatorRun,
    MlmcConfig,
    MlmcRateFit,
    PairSample,
    PdeLevelModel,
    Welford,
    estimate_rates_mlmc,
    optimal_bias_weight,
    run_mlmc,
)
from .sampling import moment_mse_experiment

__all__ = [
    "ConfigError",
    "NumericalError",
    "ConvergeConfig",
    "RatesConfig",
    "LdsConfig",
    "ReferenceConfig",
    "CompareConfig",
    "cmd_converge",
    "cmd_rates",
    "cmd_lds",
    "cmd_reference",
    "cmd_compare",
    "write_mlmc_levels_csv",
    "write_clmc_samples_csv",
]

# fixed single-sample parameters of the convergence study
CONVERGE_BOX = dict(x=0.4, y=0.6, length=0.3)
CONVERGE_CROSS = dict(x=0.4, y=0.6)

TOLERANCE_BASE = 0.04    # eps_i^2 = 0.04 * 0.8^(2 i)
TOLERANCE_DECAY = 0.8


class ConfigError(ValueError):
    """Bad configuration file or values (CLI exit code 2)."""


class NumericalError(RuntimeError):
    """Experiment failed numerically (CLI exit code 3)."""


def tolerance_ladder(indices) -> list[float]:
    """Squared MSE tolerances eps_i^2 of the comparison ladder."""
    return [TOLERANCE_BASE * TOLERANCE_DECAY ** (2 * i) for i in indices]


# --------------------------------------------------------------------------
# config ingestion


def _parse_config(cls, raw: dict, full_scale: bool):
    """Build a config dataclass from a JSON dict; unknown keys are errors."""
    known = {f.name for f in fields(cls)} - {"full_scale"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(
            f"unknown config keys for {cls.__name__}: {sorted(unknown)}; "
            f"known keys: {sorted(known)}"
        )
    try:
        cfg = cls(full_scale=full_scale, **raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


def _require(condition, message):
    if not condition:
        raise ConfigError(message)


class _ConfigBase:
    full_scale: bool = False

    @classmethod
    def from_dict(cls, raw: dict, full_scale: bool = False):
        return _parse_config(cls, dict(raw), full_scale)

    def asdict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    def hash(self) -> str:
        payload = json.dumps(self.asdict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:12]

    def _common_checks(self):
        kinds = getattr(self, "kinds", None)
        if kinds is not None:
            _require(len(kinds) > 0, "kinds must be nonempty")
            _require(all(k in ("box", "cross") for k in kinds),
                     f"kinds must be 'box'/'cross', got {kinds}")


def _default(desk, full):
    """Sentinel-free dual default: resolved in __post_init__ via None."""
    return field(default=None), desk, full


@dataclass
class ConvergeConfig(_ConfigBase):
    """Single-sample convergence study (uniform vs adaptive refinement)."""

    full_scale: bool = False
    kinds: tuple = ("box", "cross")
    contrast: float = 300.0
    theta: float = 0.5
    base_n: int = 15
    uniform_levels: int | None = None      # desk 6 / full 7
    adaptive_steps: int | None = None      # desk 16 / full 22
    reference_n: int | None = None         # desk 256 / full 640
    fit_window: int = 7                    # trailing levels used for rate fits

    def validate(self):
        self._common_checks()
        if self.uniform_levels is None:
            self.uniform_levels = 7 if self.full_scale else 6
        if self.adaptive_steps is None:
            self.adaptive_steps = 22 if self.full_scale else 16
        if self.reference_n is None:
            self.reference_n = 640 if self.full_scale else 256
        _require(self.contrast > 0, "contrast must be positive")
        _require(0 < self.theta < 1, "theta must lie in (0,1)")
        _require(self.adaptive_steps >= self.fit_window >= 3,
                 "need adaptive_steps >= fit_window >= 3")


@dataclass
class RatesConfig(_ConfigBase):
    """Pilot calibration of the level-telescoped and level-continuous rates."""

    full_scale: bool = False
    kinds: tuple = ("box",)
    contrasts: tuple = (300.0,)
    theta: float = 0.5
    base_n: int = 15
    mlmc_levels: int = 6
    clmc_refinements: int = 12
    pilot_m: int | None = None             # desk 100 / full 1000
    dof_max: int = 400_000
    seed: int = 1000

    def validate(self):
        self._common_checks()
        if self.pilot_m is None:
            self.pilot_m = 1000 if self.full_scale else 100
        _require(all(p > 0 for p in self.contrasts), "contrasts must be positive")
        _require(self.mlmc_levels >= 3, "need at least 3 levels")
        _require(self.clmc_refinements >= 3, "need at least 3 refinements")


@dataclass
class LdsConfig(_ConfigBase):
    """Pseudo- vs quasi-random moment approximation study."""

    full_scale: bool = False
    rate: float = 1.5
    runs: int = 20
    min_exponent: int = 6
    max_exponent: int = 13
    seed: int = 7

    def validate(self):
        _require(self.rate > 0, "rate must be positive")
        _require(self.runs >= 2, "need at least 2 runs")
        _require(self.min_exponent < self.max_exponent, "bad count range")


@dataclass
class ReferenceConfig(_ConfigBase):
    """High-accuracy reference for E[Q - Q_0] via interface-aligned meshes."""

    full_scale: bool = False
    kinds: tuple = ("box", "cross")
    contrasts: tuple = (300.0,)
    theta: float = 0.5
    base_n: int = 15
    component_tol: float | None = None     # desk 0.01 / full 0.0025
    pilot_levels: int = 4
    pilot_m: int = 25
    m_ini: int = 30
    l_max: int = 8
    seed: int = 5000

    def validate(self):
        self._common_checks()
        if self.component_tol is None:
            self.component_tol = 0.0025 if self.full_scale else 0.01
        _require(self.component_tol > 0, "component_tol must be positive")
        _require(all(p > 0 for p in self.contrasts), "contrasts must be positive")


@dataclass
class CompareConfig(_ConfigBase):
    """Three-way method comparison over the tolerance ladder."""

    full_scale: bool = False
    kinds: tuple = ("box", "cross")
    contrasts: tuple = (300.0,)
    methods: tuple = ("mlmc", "clmc", "qclmc")
    tolerance_indices: tuple = (0, 1, 2, 3, 4, 5, 6)
    runs: int | None = None                # desk 20 / full 100
    theta: float = 0.5
    base_n: int = 15
    m_ini_mlmc: int = 20
    m_ini_clmc: int = 20
    l_max: int = 9
    level_cap: int = 8                     # largest computable uniform level
    dof_max: int = 200_000
    seed_base: int = 20_000
    scramble_base: int = 77_000
    rates_file: str = "rates.json"
    reference_file: str = "reference.json"
    emit_samples: bool = False

    def validate(self):
        self._common_checks()
        if self.runs is None:
            self.runs = 100 if self.full_scale else 20
        _require(self.runs >= 2, "need at least 2 runs per cell")
        _require(all(m in ("mlmc", "clmc", "qclmc") for m in self.methods),
                 f"unknown method in {self.methods}")
        _require(len(self.tolerance_indices) > 0, "tolerance ladder must be nonempty")


# --------------------------------------------------------------------------
# file emission


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, columns, rows, config_hash: str, seed) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# config_hash={config_hash} seed={seed}", ",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in columns))
    path.write_text("\n".join(lines) + "\n")


def write_json(path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_mlmc_levels_csv(run: EstimatorRun, path, config_hash="-", seed="-") -> None:
    """Per-level ledger of a level-telescoped run.

    cost_seconds is wall-clock and not reproducible across reruns; all other
    columns are deterministic for fixed config and seeds.
    """
    columns = ["level", "samples", "mean", "variance", "cost_dof", "cost_seconds"]
    write_csv(path, columns, run.diagnostics["per_level"], config_hash, seed)


def write_clmc_samples_csv(run: EstimatorRun, path, config_hash="-", seed="-") -> None:
    """Per-sample ledger of a level-continuous run (deterministic columns only)."""
    columns = ["k", "max_level", "index", "max_dof", "y",
               "cum_estimate", "cum_variance", "truncated"]
    write_csv(path, columns, run.diagnostics["per_sample"], config_hash, seed)


def _fixed_sample(kind: str, contrast: float) -> CoefficientSample:
    if kind == "box":
        return CoefficientSample(kind="box", contrast=contrast, **CONVERGE_BOX)
    return CoefficientSample(kind="cross", contrast=contrast, **CONVERGE_CROSS)


def _loglog_slope(x, y) -> float:
    x = np.log(np.asarray(x, float))
    y = np.log(np.asarray(y, float))
    return float(np.polyfit(x, y, 1)[0])


# --------------------------------------------------------------------------
# converge


def aligned_reference_qoi(sample: CoefficientSample, resolution: int, f=1.0) -> float:
    """QoI on a fine mesh aligned with the sample's discontinuities."""
    bx, by = sample.break_lines()
    mesh = aligned_structured_mesh(bx, by, resolution)
    return h1_norm(solve(assemble(mesh, sample, f)))


def cmd_converge(config: ConvergeConfig, out_dir) -> dict:
    """Uniform vs adaptive single-sample convergence (CSV) with fitted rates."""
    out = Path(out_dir)
    chash = config.hash()
    rows, summary = [], {}
    for kind in config.kinds:
        sample = _fixed_sample(kind, config.contrast)
        q_ref = aligned_reference_qoi(sample, config.reference_n)

        for level in range(config.uniform_levels + 1):
            mesh = uniform_family(level, config.base_n)
            q = h1_norm(solve(assemble(mesh, sample, 1.0)))
            rows.append({
                "kind": kind, "series": "uniform", "level": level,
                "dof": mesh.num_vertices, "weak_h1_error": abs(q_ref - q),
                "estimator": "", "qoi": q,
            })

        hierarchy = adaptive_hierarchy(
            sample, 1.0, config.theta, structured_unit_square(config.base_n),
            max_refinements=config.adaptive_steps,
        )
        for level, step in enumerate(hierarchy.steps):
            rows.append({
                "kind": kind, "series": "adaptive", "level": level,
                "dof": step.dof, "weak_h1_error": abs(q_ref - step.qoi),
                "estimator": step.estimator, "qoi": step.qoi,
            })

        w = config.fit_window
        uni = [r for r in rows if r["kind"] == kind and r["series"] == "uniform"]
        ada = [r for r in rows if r["kind"] == kind and r["series"] == "adaptive"]
        est_rate = -_loglog_slope([r["dof"] for r in ada[-w:]],
                                  [r["estimator"] for r in ada[-w:]])
        ada_rate = -_loglog_slope([r["dof"] for r in ada[-w:]],
                                  [r["weak_h1_error"] for r in ada[-w:]])
        uni_rate = -_loglog_slope([r["dof"] for r in uni],
                                  [r["weak_h1_error"] for r in uni])
        summary[kind] = {
            "reference_qoi": q_ref,
            "estimator_rate": est_rate,
            "adaptive_weak_rate": ada_rate,
            "uniform_weak_rate": uni_rate,
            "rate_gain": ada_rate / uni_rate if uni_rate != 0 else math.inf,
        }

    write_csv(out / "converge.csv",
              ["kind", "series", "level", "dof", "weak_h1_error", "estimator", "qoi"],
              rows, chash, "-")
    write_json(out / "converge_summary.json", {
        "experiment": "converge", "config": config.asdict(),
        "config_hash": chash, "results": summary,
    })
    return summary


# --------------------------------------------------------------------------
# rates


def _fit_dict(fit) -> dict:
    out = {k: getattr(fit, k) for k in ("alpha", "beta", "gamma")}
    for k in ("c1", "c2", "c3", "c4", "c5", "c6", "s"):
        if hasattr(fit, k):
            out[k] = getattr(fit, k)
    out["r_squared"] = fit.r_squared
    out["samples"] = fit.samples
    if hasattr(fit, "levels"):
        out["levels"] = list(fit.levels)
    if hasattr(fit, "level_domain"):
        out["level_domain"] = list(fit.level_domain)
    return out


def cmd_rates(config: RatesConfig, out_dir) -> dict:
    """Pilot rate calibration for both estimator families; persists fits."""
    out = Path(out_dir)
    chash = config.hash()
    results = {}
    for kind in config.kinds:
        for contrast in config.contrasts:
            key = f"{kind}:{contrast:g}"
            model = PdeLevelModel(kind=kind, contrast=contrast,
                                  base_n=config.base_n, seed=config.seed)
            mlmc_fit = estimate_rates_mlmc(model, levels=config.mlmc_levels,
                                           samples=config.pilot_m)
            sampler = AdaptivePathSampler(kind=kind, contrast=contrast,
                                          theta=config.theta, base_n=config.base_n,
                                          seed=config.seed + 1, dof_max=config.dof_max)
            clmc_fit = estimate_rates_clmc(sampler, refinements=config.clmc_refinements,
                                           samples=config.pilot_m)
            entry = {
                "mlmc": _fit_dict(mlmc_fit),
                "clmc": _fit_dict(clmc_fit),
                "mlmc_hypotheses_hold": mlmc_fit.hypotheses_hold(),
                "clmc_hypotheses_hold": clmc_fit.hypotheses_hold(),
            }
            if clmc_fit.hypotheses_hold():
                entry["r_hat"] = optimal_rate_param(clmc_fit, eps=1.0)
                entry["feasible_interval"] = list(clmc_fit.feasible_interval())
            results[key] = entry
    payload = {
        "experiment": "rates", "config": config.asdict(),
        "config_hash": chash, "seed": config.seed, "fits": results,
    }
    write_json(out / "rates.json", payload)
    return payload


# --------------------------------------------------------------------------
# lds


def cmd_lds(config: LdsConfig, out_dir) -> dict:
    """Moment-MSE study of pseudo vs low-discrepancy exponential sampling."""
    out = Path(out_dir)
    chash = config.hash()
    counts = [2**e for e in range(config.min_exponent, config.max_exponent + 1)]
    rows = moment_mse_experiment(config.rate, counts, config.runs, seed=config.seed)
    write_csv(out / "lds.csv", ["kind", "count", "mse_mean", "mse_variance"],
              rows, chash, config.seed)

    slopes = {}
    for kind in ("pseudo", "low-discrepancy"):
        sub = [r for r in rows if r["kind"] == kind]
        slopes[kind] = {
            "mean_mse_slope": _loglog_slope([r["count"] for r in sub],
                                            [r["mse_mean"] for r in sub]),
            "variance_mse_slope": _loglog_slope([r["count"] for r in sub],
                                                [r["mse_variance"] for r in sub]),
            "mean_mse_at_max": sub[-1]["mse_mean"],
        }
    summary = {
        "experiment": "lds", "config": config.asdict(), "config_hash": chash,
        "exact_mean": 1.0 / config.rate, "exact_variance": 1.0 / config.rate**2,
        "slopes": slopes,
    }
    write_json(out / "lds_summary.json", summary)
    return summary


# --------------------------------------------------------------------------
# reference


@dataclass
class AlignedLevelModel:
    """Level pairs on meshes aligned with each sample's discontinuities.

    The coefficient is represented exactly, so the weak error decays at the
    fast (aligned) rate; used only for the reference computation.
    """

    kind: str
    contrast: float
    base_n: int = 15
    seed: int = 0
    f: float = 1.0

    def _resolution(self, level: int) -> int:
        return int(np.floor(self.base_n * 1.5**level + 0.5))

    def _coefficient(self, level: int, k: int):
        from .coefficient import sample_box, sample_cross
        from .sampling import UniformSource

        source = UniformSource("pseudo", seed=self.seed, stream=(level, k))
        draw = sample_box if self.kind == "box" else sample_cross
        return draw(source, self.contrast)

    def _solve(self, coeff, level: int):
        bx, by = coeff.break_lines()
        mesh = aligned_structured_mesh(bx, by, self._resolution(level))
        return h1_norm(solve(assemble(mesh, coeff, self.f))), mesh.num_vertices

    def pair(self, level: int, k: int) -> PairSample:
        coeff = self._coefficient(level, k)
        t0 = time.perf_counter()
        fine, n_fine = self._solve(coeff, level)
        coarse, n_coarse = self._solve(coeff, level - 1)
        return PairSample(fine, coarse, n_fine + n_coarse, time.perf_counter() - t0)

    def single(self, level: int, k: int):
        coeff = self._coefficient(level, k)
        t0 = time.perf_counter()
        q, n = self._solve(coeff, level)
        return q, n, time.perf_counter() - t0


def _mc_to_variance(single, level, target_var, seed_tag, min_samples=50):
    """Plain MC of a level QoI until the estimator variance is below target."""
    acc = Welford()
    cost = 0
    k = 0
    while True:
        q, dof, _ = single(level, k)
        acc.push(q)
        cost += dof
        k += 1
        if k >= min_samples and acc.variance / k <= target_var:
            return acc.mean, acc.variance / k, k, cost


def cmd_reference(config: ReferenceConfig, out_dir) -> dict:
    """Aligned-mesh estimate of E[Q - Q_0] with a three-way MSE budget.

    E[Q] is estimated by a level-telescoped run on aligned meshes plus a
    plain MC estimate of its own coarse level; an independent plain MC
    estimate of E[Q_0] on the standard coarse mesh is subtracted.  Each of
    the three budget components (estimator variance, squared bias, MC
    variance) is held below component_tol^2.
    """
    out = Path(out_dir)
    chash = config.hash()
    t = config.component_tol
    results = {}
    for kind in config.kinds:
        for contrast in config.contrasts:
            key = f"{kind}:{contrast:g}"
            aligned = AlignedLevelModel(kind=kind, contrast=contrast,
                                        base_n=config.base_n, seed=config.seed)
            pilot = estimate_rates_mlmc(aligned, levels=config.pilot_levels,
                                        samples=config.pilot_m)
            # difference part: variance <= t^2/2, squared bias <= t^2
            eps = math.sqrt(1.5) * t
            b_w = 2.0 / 3.0
            diff_run = run_mlmc(
                MlmcConfig(eps=eps, alpha=pilot.alpha, b_w=b_w,
                           m_ini=config.m_ini, l_max=config.l_max),
                AlignedLevelModel(kind=kind, contrast=contrast,
                                  base_n=config.base_n, seed=config.seed + 1),
            )
            # aligned coarse level: variance <= t^2/2
            mc0_aligned = _mc_to_variance(
                AlignedLevelModel(kind=kind, contrast=contrast,
                                  base_n=config.base_n, seed=config.seed + 2).single,
                0, t**2 / 2.0, "aligned0")
            # standard coarse level Q_0: variance <= t^2
            std_model = PdeLevelModel(kind=kind, contrast=contrast,
                                      base_n=config.base_n, seed=config.seed + 3)
            mc0_std = _mc_to_variance(std_model.single, 0, t**2, "std0")

            reference = diff_run.estimate + mc0_aligned[0] - mc0_std[0]
            results[key] = {
                "reference": reference,
                "budget": 3.0 * t**2,
                "components": {
                    "estimator_variance": diff_run.variance_estimate + mc0_aligned[1],
                    "bias_squared": diff_run.bias_proxy**2,
                    "mc_variance": mc0_std[1],
                },
                "detail": {
                    "aligned_difference": diff_run.estimate,
                    "aligned_level0_mean": mc0_aligned[0],
                    "standard_level0_mean": mc0_std[0],
                    "aligned_level0_samples": mc0_aligned[2],
                    "standard_level0_samples": mc0_std[2],
                    "mlmc_flags": diff_run.flags,
                    "pilot_alpha": pilot.alpha,
                },
            }
    payload = {
        "experiment": "reference", "config": config.asdict(),
        "config_hash": chash, "seed": config.seed,
        "component_tol": t, "values": results,
    }
    write_json(out / "reference.json", payload)
    return payload


# --------------------------------------------------------------------------
# compare


def _load_json(path, hint):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{hint} file {path} not found; run `uq {hint}` first")
    return json.loads(path.read_text())


def _mlmc_fit_from_dict(d: dict) -> MlmcRateFit:
    return MlmcRateFit(
        alpha=d["alpha"], beta=d["beta"], gamma=d["gamma"],
        c1=d["c1"], c2=d["c2"], c3=d["c3"], s=d["s"],
        levels=tuple(d.get("levels", (1, 6))), samples=d["samples"],
        r_squared=d["r_squared"],
    )


def cmd_compare(config: CompareConfig, out_dir) -> dict:
    """Timed MSE comparison of the three estimators over the tolerance ladder."""
    out = Path(out_dir)
    chash = config.hash()
    rates = _load_json(config.rates_file, "rates")
    reference = _load_json(config.reference_file, "reference")

    eps_sq = tolerance_ladder(config.tolerance_indices)
    records = []
    for kind in config.kinds:
        for contrast in config.contrasts:
            key = f"{kind}:{contrast:g}"
            if key not in rates["fits"]:
                raise ConfigError(f"no rate fit for {key}; rerun `uq rates`")
            if key not in reference["values"]:
                raise ConfigError(f"no reference value for {key}; rerun `uq reference`")
            fit = _mlmc_fit_from_dict(rates["fits"][key]["mlmc"])
            entry = rates["fits"][key]
            if "r_hat" not in entry:
                raise NumericalError(
                    f"no feasible exponential rate for {key}; the continuous-level "
                    "hypotheses failed in calibration")
            r_hat = entry["r_hat"]
            ref_value = reference["values"][key]["reference"]

            for tol_index, e2 in zip(config.tolerance_indices, eps_sq):
                eps = math.sqrt(e2)
                b_w = optimal_bias_weight(fit, eps, config.level_cap)
                for run_idx in range(config.runs):
                    pde_seed = config.seed_base + run_idx
                    lvl_seed = config.scramble_base + run_idx
                    for method in config.methods:
                        t0 = time.perf_counter()
                        if method == "mlmc":
                            run = run_mlmc(
                                MlmcConfig(eps=eps, alpha=fit.alpha, b_w=b_w,
                                           m_ini=config.m_ini_mlmc, l_max=config.l_max),
                                PdeLevelModel(kind=kind, contrast=contrast,
                                              base_n=config.base_n, seed=pde_seed),
                            )
                        else:
                            run = run_clmc(
                                ClmcConfig(
                                    eps=eps, rate=r_hat, m_ini=config.m_ini_clmc,
                                    dof_max=config.dof_max,
                                    sampler_kind="low-discrepancy" if method == "qclmc" else "pseudo",
                                    theta=config.theta, seed=pde_seed,
                                    level_seed=lvl_seed,
                                ),
                                kind=kind, contrast=contrast, base_n=config.base_n,
                            )
                        seconds = time.perf_counter() - t0
                        records.append({
                            "method": method, "kind": kind, "contrast": contrast,
                            "tol_index": tol_index, "eps_sq": e2, "run": run_idx,
                            "estimate": run.estimate,
                            "sq_error": (run.estimate - ref_value) ** 2,
                            "seconds": seconds,
                            "cost_dof": run.cost_dof,
                            "samples": run.samples,
                            "flags": ";".join(run.flags),
                        })
                        if config.emit_samples and method != "mlmc":
                            write_clmc_samples_csv(
                                run,
                                out / "samples" / f"{method}_{kind}_{contrast:g}_t{tol_index}_r{run_idx}.csv",
                                chash, pde_seed)
                        elif config.emit_samples:
                            write_mlmc_levels_csv(
                                run,
                                out / "samples" / f"{method}_{kind}_{contrast:g}_t{tol_index}_r{run_idx}.csv",
                                chash, pde_seed)

    write_csv(out / "records.csv",
              ["method", "kind", "contrast", "tol_index", "eps_sq", "run",
               "estimate", "sq_error", "seconds", "cost_dof", "samples", "flags"],
              records, chash, config.seed_base)

    summary = _summarize_compare(records, config)
    write_json(out / "compare_summary.json", {
        "experiment": "compare", "config": config.asdict(), "config_hash": chash,
        "summary": summary,
    })
    return summary


def _summarize_compare(records, config: CompareConfig) -> dict:
    cells = {}
    for rec in records:
        cell_key = (rec["method"], rec["kind"], rec["contrast"], rec["tol_index"])
        cells.setdefault(cell_key, []).append(rec)

    out = {"cells": [], "methods": {}}
    for (method, kind, contrast, tol_index), recs in sorted(cells.items()):
        errors = np.array([r["sq_error"] for r in recs])
        secs = np.array([r["seconds"] for r in recs])
        n = len(errors)
        mean_mse = float(errors.mean())
        half = 1.96 * float(errors.std(ddof=1)) / math.sqrt(n)
        out["cells"].append({
            "method": method, "kind": kind, "contrast": contrast,
            "tol_index": tol_index, "eps_sq": tolerance_ladder([tol_index])[0],
            "runs": n, "mean_mse": mean_mse,
            "ci_low": mean_mse - half, "ci_high": mean_mse + half,
            "mean_seconds": float(secs.mean()),
            "mean_cost_dof": float(np.mean([r["cost_dof"] for r in recs])),
        })

    for method in config.methods:
        per_kind = {}
        for kind in config.kinds:
            for contrast in config.contrasts:
                cells_m = [c for c in out["cells"]
                           if c["method"] == method and c["kind"] == kind
                           and c["contrast"] == contrast]
                if len(cells_m) >= 2:
                    slope = _loglog_slope([c["mean_seconds"] for c in cells_m],
                                          [c["mean_mse"] for c in cells_m])
                else:
                    slope = math.nan
                per_kind[f"{kind}:{contrast:g}"] = {
                    "time_mse_slope": slope,
                    "mse_within_budget": all(
                        c["mean_mse"] <= 1.5 * c["eps_sq"] for c in cells_m),
                }
        out["methods"][method] = per_kind

    if "clmc" in config.methods and "qclmc" in config.methods:
        orderings = {}
        for kind in config.kinds:
            for contrast in config.contrasts:
                wins = total = 0
                for tol_index in config.tolerance_indices:
                    c = {m: next((x for x in out["cells"]
                                  if x["method"] == m and x["kind"] == kind
                                  and x["contrast"] == contrast
                                  and x["tol_index"] == tol_index), None)
                         for m in ("clmc", "qclmc")}
                    if c["clmc"] and c["qclmc"]:
                        total += 1
                        wins += c["qclmc"]["mean_mse"] <= c["clmc"]["mean_mse"]
                orderings[f"{kind}:{contrast:g}"] = {"qclmc_wins": wins, "cells": total}
        out["qclmc_vs_clmc"] = orderings
    return out
