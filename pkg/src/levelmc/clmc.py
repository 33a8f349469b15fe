"""Continuous-level Monte Carlo and its quasi-random variant.

Each sample draws a maximal refinement level L ~ Exp(r), refines its own
adaptive mesh hierarchy until the samplewise continuous level

    l_j = -log(e_j / e_0)

(built from the relative a-posteriori estimators) reaches L, and
contributes

    Y = sum_{j=1..J} w_j (Q_j - Q_{j-1}),
    w_j = (exp(r min(l_j, L)) - exp(r l_{j-1})) / (r (l_j - l_{j-1})),

the discretized form of weighting each level increment by the reciprocal
survival probability of L.  The estimator is the plain average of the Y
values; its variance is estimated on the fly and stops the sampling loop
at the target tolerance.  Feeding the maximal levels from a scrambled
low-discrepancy stream instead of a pseudo-random one gives the quasi
variant; nothing else changes.

Paths that would exceed the machine's DOF budget are cut; the level
process is frozen beyond the cap (zero further increments), which biases
the estimate by at most M exp(-r L_cap).
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .coefficient import sample_box, sample_cross
from .indicator import adaptive_hierarchy
from .mesh import structured_unit_square
from .mlmc import EstimatorRun, _log_fit
from .sampling import ExponentialLevelSampler, UniformSource

__all__ = [
    "ClmcRateFit",
    "ClmcConfig",
    "SamplePath",
    "AdaptivePathSampler",
    "continuous_level",
    "continuous_levels",
    "clip_and_index",
    "weights",
    "path_contribution",
    "path_contribution_curve",
    "variance_estimate",
    "estimate_rates_clmc",
    "clmc_cost",
    "optimal_rate_param",
    "theoretical_sample_size",
    "truncation_bias_bound",
    "run_clmc",
]

log = logging.getLogger(__name__)

MONOTONE_GAP = 1e-6  # enforced minimal level increment for non-decaying estimators


def continuous_level(e_j: float, e_0: float) -> float:
    """Samplewise continuous level -log(e_j / e_0) of a relative estimator."""
    if e_j <= 0 or e_0 <= 0:
        raise ValueError("estimator values must be positive")
    return -math.log(e_j / e_0)


def continuous_levels(estimators) -> tuple[np.ndarray, int]:
    """Continuous levels of an estimator sequence, forced strictly increasing.

    A non-decaying estimator (e_j >= e_{j-1}) would break the weight
    formula; such levels are nudged to the previous level plus a tiny gap.
    Returns (levels, number of nudged entries).
    """
    e = np.asarray(estimators, dtype=np.float64)
    if np.any(e <= 0):
        raise ValueError("estimator values must be positive")
    levels = -np.log(e / e[0])
    fixes = 0
    for j in range(1, len(levels)):
        floor = levels[j - 1] + MONOTONE_GAP
        if levels[j] < floor:
            levels[j] = floor
            fixes += 1
    if fixes:
        log.debug("nudged %d non-monotone level(s)", fixes)
    return levels, fixes


def clip_and_index(levels, max_level: float):
    """Maximal level index J and clipped levels min(l_j, L) for j = 1..J.

    J is the first index whose level reaches the drawn maximal level; if
    the recorded path ends before that (machine truncation), J is the last
    index and the path is flagged truncated.
    """
    lv = np.asarray(levels, dtype=np.float64)
    if len(lv) < 2:
        raise ValueError("a path needs at least levels l_0 and l_1")
    if max_level < 0:
        raise ValueError("maximal level must be nonnegative")
    reached = np.nonzero(lv[1:] >= max_level)[0]
    if reached.size:
        J = int(reached[0]) + 1
        truncated = False
    else:
        J = len(lv) - 1
        truncated = True
    return J, np.minimum(lv[1 : J + 1], max_level), truncated


@dataclass
class SamplePath:
    """One sample's adaptive hierarchy summary for the level-continuous estimator."""

    max_level: float
    levels: np.ndarray       # l_0 = 0 < l_1 < ... < l_J
    qois: np.ndarray         # Q_0 .. Q_J
    estimators: np.ndarray   # e_0 .. e_J
    clipped: np.ndarray      # min(l_j, L) for j = 1..J
    index: int               # J
    truncated: bool
    dofs: np.ndarray
    cost_seconds: float = 0.0
    level_fixes: int = 0

    @property
    def cost_dof(self) -> int:
        return int(self.dofs.sum())


def weights(path: SamplePath, rate: float) -> np.ndarray:
    """Reciprocal-survival weights w_1..w_J of a sample path."""
    if rate <= 0:
        raise ValueError("rate must be positive")
    lv = path.levels[: path.index + 1]
    gaps = np.diff(lv)
    if np.any(gaps <= 0):
        raise ValueError("degenerate path: levels must be strictly increasing")
    return (np.exp(rate * path.clipped) - np.exp(rate * lv[:-1])) / (rate * gaps)


def path_contribution(path: SamplePath, rate: float) -> float:
    """Y = sum_j w_j (Q_j - Q_{j-1}).

    On truncated paths all recorded levels lie below the drawn maximal
    level, so the weights are the full (unclipped) ones; the frozen tail
    of the level process contributes nothing.
    """
    dq = np.diff(path.qois[: path.index + 1])
    return float((weights(path, rate) * dq).sum())


def path_contribution_curve(levels, qois, rate: float, max_levels) -> np.ndarray:
    """Vectorized Y(L) of a fixed path over many maximal-level draws L.

    Draws beyond the last recorded level are treated as truncated paths
    (full weights, zero extension), matching the runtime estimator.
    """
    lv = np.asarray(levels, dtype=np.float64)
    dq = np.diff(np.asarray(qois, dtype=np.float64))
    L = np.asarray(max_levels, dtype=np.float64)[:, None]
    lo, hi = lv[None, :-1], lv[None, 1:]
    w = (np.exp(rate * np.minimum(hi, np.maximum(L, lo))) - np.exp(rate * lo)) / (rate * (hi - lo))
    return (w * dq).sum(axis=1)


def variance_estimate(ys) -> float:
    """Estimator-variance estimate (1/(M-1)) (mean(Y^2) - mean(Y)^2).

    This is the variance of the *estimator*, carrying the extra 1/M
    relative to the sample variance of Y.
    """
    arr = np.asarray(ys, dtype=np.float64)
    if arr.size < 2:
        raise ValueError("need at least 2 samples for a variance estimate")
    m = arr.size
    return float(((arr**2).mean() - arr.mean() ** 2) / (m - 1))


def _variance_from_sums(count: int, sum_y: float, sum_y2: float) -> float:
    return (sum_y2 / count - (sum_y / count) ** 2) / (count - 1)


@dataclass
class AdaptivePathSampler:
    """Adaptive PDE sample paths: coefficient draw k -> refinement hierarchy.

    Coefficient randomness lives on pseudo-random substreams keyed by
    (seed, k), independent of whatever stream produces maximal levels.
    """

    kind: str
    contrast: float
    f: float = 1.0
    theta: float = 0.5
    base_n: int = 15
    seed: int = 0
    dof_max: int = 200_000
    _mesh0: object = field(default=None, repr=False)

    def initial_mesh(self):
        if self._mesh0 is None:
            self._mesh0 = structured_unit_square(self.base_n)
        return self._mesh0

    def coefficient(self, k: int):
        source = UniformSource("pseudo", seed=self.seed, stream=k)
        draw = sample_box if self.kind == "box" else sample_cross
        return draw(source, self.contrast)

    def path(self, k: int, max_level: float | None = None,
             max_refinements: int | None = None) -> SamplePath:
        """Refine sample k until its continuous level reaches max_level
        (or for a fixed number of refinements), bounded by the DOF cap."""
        coeff = self.coefficient(k)
        state = {"fixes": 0}

        def levels_of(steps):
            lv, fixes = continuous_levels([s.estimator for s in steps])
            state["fixes"] = fixes
            return lv

        stop_when = None
        if max_level is not None:
            def stop_when(steps):
                if len(steps) < 2:
                    return False
                return levels_of(steps)[-1] >= max_level

        t0 = time.perf_counter()
        hierarchy = adaptive_hierarchy(
            coeff, self.f, self.theta, self.initial_mesh(),
            max_refinements=max_refinements, max_dof=self.dof_max,
            stop_when=stop_when,
        )
        seconds = time.perf_counter() - t0

        levels = levels_of(hierarchy.steps)
        if max_level is not None:
            index, clipped, truncated = clip_and_index(levels, max_level)
            truncated = truncated or hierarchy.truncated
        else:
            index = len(levels) - 1
            clipped = levels[1:].copy()
            truncated = hierarchy.truncated
        return SamplePath(
            max_level=math.inf if max_level is None else max_level,
            levels=levels,
            qois=hierarchy.qois,
            estimators=hierarchy.estimators,
            clipped=clipped,
            index=index,
            truncated=truncated,
            dofs=hierarchy.dofs,
            cost_seconds=seconds,
            level_fixes=state["fixes"],
        )


@dataclass
class ClmcRateFit:
    """Calibrated continuous-level decay/growth:
    |E dQ/dl| ~ c4 e^(-alpha l), V[dQ/dl] ~ c5 e^(-beta l), cost ~ c6 e^(gamma l)."""

    alpha: float
    beta: float
    gamma: float
    c4: float
    c5: float
    c6: float
    level_domain: tuple
    samples: int
    r_squared: dict

    def __post_init__(self):
        lo, hi = self.level_domain
        if not lo < hi:
            raise ValueError("level domain must be nondegenerate")

    def hypotheses_hold(self) -> bool:
        return min(self.beta, 2.0 * self.alpha) > self.gamma

    def feasible_interval(self) -> tuple:
        return self.gamma, min(self.beta, 2.0 * self.alpha)


def estimate_rates_clmc(sampler: AdaptivePathSampler, refinements: int = 12,
                        samples: int = 100, grid_points: int = 50) -> ClmcRateFit:
    """Calibrate continuous-level rates from fixed-depth pilot paths.

    Per sample the piecewise-constant level derivative
    (Q_j - Q_{j-1}) / (l_j - l_{j-1}) and the cumulative solve cost are
    interpolated onto a uniform grid over the common level domain
    [max_k l_1, min_k l_last]; mean, variance and cost per grid point are
    then fit log-linearly against the level.
    """
    if samples < 2 or refinements < 3:
        raise ValueError("need at least 2 samples and 3 refinements")
    paths = [sampler.path(k, max_refinements=refinements) for k in range(samples)]

    lo = max(p.levels[1] for p in paths)
    hi = min(p.levels[-1] for p in paths)
    if lo >= hi:
        raise ValueError(
            "empty common level domain; increase the number of refinements"
        )
    grid = np.linspace(lo, hi, grid_points)

    derivs = np.empty((samples, grid_points))
    costs = np.empty((samples, grid_points))
    for i, p in enumerate(paths):
        j = np.searchsorted(p.levels, grid, side="left")  # l_{j-1} < g <= l_j
        gaps = np.diff(p.levels)
        derivs[i] = np.diff(p.qois)[j - 1] / gaps[j - 1]
        costs[i] = np.cumsum(p.dofs)[j]

    mean = derivs.mean(axis=0)
    var = derivs.var(axis=0, ddof=1)
    cost = costs.mean(axis=0)

    def masked_fit(values, name):
        values = np.asarray(values, float)
        usable = values > 0
        if not usable.all():
            warnings.warn(f"excluding {int((~usable).sum())} grid points from the {name} fit")
        if usable.sum() < 3:
            raise ValueError(f"fewer than 3 usable grid points for the {name} fit")
        slope, intercept, r2 = _log_fit(grid[usable], np.log(values[usable]))
        return slope, math.exp(intercept), r2

    mean_slope, c4, r2_mean = masked_fit(np.abs(mean), "mean")
    var_slope, c5, r2_var = masked_fit(var, "variance")
    cost_slope, c6, r2_cost = masked_fit(cost, "cost")
    return ClmcRateFit(
        alpha=-mean_slope, beta=-var_slope, gamma=cost_slope,
        c4=c4, c5=c5, c6=c6, level_domain=(float(lo), float(hi)),
        samples=samples,
        r_squared={"mean": r2_mean, "variance": r2_var, "cost": r2_cost},
    )


def clmc_cost(fit: ClmcRateFit, eps: float, rate: float) -> float:
    """Cost bound of the level-continuous estimator at tolerance eps and rate r."""
    a, b, g = fit.alpha, fit.beta, fit.gamma
    var_part = 4.0 * fit.c5 / ((b - rate) * b) + fit.c4**2 * rate / ((2.0 * a - rate) * a**2)
    return fit.c6 / (eps**2 * (rate - g)) * var_part


def optimal_rate_param(fit: ClmcRateFit, eps: float, grid: int = 1000) -> float:
    """Cost-minimizing exponential rate on the open feasibility interval.

    Searches a midpoint grid of (gamma, min(beta, 2 alpha)); endpoints are
    excluded by half a grid step (the objective has poles there).
    """
    lo, hi = fit.feasible_interval()
    if not lo < hi:
        raise ValueError(
            f"infeasible rate interval: need gamma < min(beta, 2 alpha), got "
            f"gamma={fit.gamma:.3g}, beta={fit.beta:.3g}, alpha={fit.alpha:.3g}"
        )
    rates = lo + (np.arange(grid) + 0.5) * (hi - lo) / grid
    costs = np.array([clmc_cost(fit, eps, r) for r in rates])
    return float(rates[np.argmin(costs)])


def theoretical_sample_size(fit: ClmcRateFit, eps: float, rate: float) -> int:
    """Closed-form sample count meeting the tolerance at the given rate."""
    lo, hi = fit.feasible_interval()
    if not lo < rate < hi:
        raise ValueError("rate outside the feasible interval")
    a, b = fit.alpha, fit.beta
    var_part = 4.0 * fit.c5 / ((b - rate) * b) + fit.c4**2 * rate / ((2.0 * a - rate) * a**2)
    return int(math.ceil(var_part / eps**2))


def truncation_bias_bound(samples: int, rate: float, level_cap: float) -> float:
    """Expected number of maximal-level draws beyond the machine level cap."""
    if samples <= 0 or rate <= 0 or level_cap <= 0:
        raise ValueError("all arguments must be positive")
    return samples * math.exp(-rate * level_cap)


@dataclass
class ClmcConfig:
    eps: float
    rate: float
    m_ini: int = 20
    dof_max: int = 200_000
    sampler_kind: str = "pseudo"   # "pseudo" -> CLMC, "low-discrepancy" -> quasi variant
    theta: float = 0.5
    seed: int = 0
    level_seed: int | None = None  # defaults to an independent stream off `seed`
    m_max: int = 2_000_000

    def __post_init__(self):
        if self.eps <= 0 or self.rate <= 0:
            raise ValueError("eps and rate must be positive")
        if self.m_ini < 1:
            raise ValueError("m_ini must be >= 1")
        if self.sampler_kind not in ("pseudo", "low-discrepancy"):
            raise ValueError(f"unknown sampler kind {self.sampler_kind!r}")
        if self.level_seed is None:
            self.level_seed = self.seed + 1_000_003

    def asdict(self) -> dict:
        return {
            "eps": self.eps, "rate": self.rate, "m_ini": self.m_ini,
            "dof_max": self.dof_max, "sampler_kind": self.sampler_kind,
            "theta": self.theta, "seed": self.seed, "level_seed": self.level_seed,
            "m_max": self.m_max,
        }


def run_clmc(config: ClmcConfig, kind: str = "box", contrast: float = 300.0,
             f: float = 1.0, base_n: int = 15) -> EstimatorRun:
    """Sequential sampling loop: draw a maximal level, refine, accumulate Y,
    stop once the on-the-fly variance estimate reaches eps^2.

    The variance is pinned to 1 for the first m_ini samples, so at least
    m_ini + 1 samples are always computed.
    """
    sampler = AdaptivePathSampler(
        kind=kind, contrast=contrast, f=f, theta=config.theta,
        base_n=base_n, seed=config.seed, dof_max=config.dof_max,
    )
    level_source = UniformSource(config.sampler_kind, seed=config.level_seed)
    level_sampler = ExponentialLevelSampler(config.rate, level_source)

    flags = []
    rows = []
    sum_y = sum_y2 = 0.0
    cost_dof = 0
    cost_seconds = 0.0
    truncated_paths = 0
    level_fixes = 0
    truncation_levels = []
    count = 0
    while True:
        count += 1
        max_level = level_sampler.draw_max_level()
        path = sampler.path(count, max_level=max_level)
        y = path_contribution(path, config.rate)
        sum_y += y
        sum_y2 += y * y
        cost_dof += path.cost_dof
        cost_seconds += path.cost_seconds
        level_fixes += path.level_fixes
        if path.truncated:
            truncated_paths += 1
            truncation_levels.append(path.levels[-1])
        variance = 1.0 if count <= config.m_ini else _variance_from_sums(count, sum_y, sum_y2)
        rows.append(
            {
                "k": count,
                "max_level": max_level,
                "index": path.index,
                "max_dof": int(path.dofs.max()),
                "y": y,
                "cum_estimate": sum_y / count,
                "cum_variance": variance,
                "truncated": int(path.truncated),
            }
        )
        if count > config.m_ini and variance <= config.eps**2:
            break
        if count >= config.m_max:
            flags.append("variance-unconverged")
            break

    level_cap = min(truncation_levels) if truncation_levels else math.inf
    bias_bound = count * math.exp(-config.rate * level_cap) if truncated_paths else 0.0
    return EstimatorRun(
        method="qclmc" if config.sampler_kind == "low-discrepancy" else "clmc",
        estimate=sum_y / count,
        variance_estimate=_variance_from_sums(count, sum_y, sum_y2),
        bias_proxy=bias_bound,
        cost_dof=float(cost_dof),
        cost_seconds=cost_seconds,
        samples=count,
        diagnostics={
            "per_sample": rows,
            "truncated_paths": truncated_paths,
            "level_fixes": level_fixes,
        },
        flags=flags,
        config=config.asdict(),
    )
