"""Multilevel Monte Carlo: calibration, cost optimization and the driver loop.

Levels live on the uniform mesh family whose vertex count grows by the
factor s ~ 2.25 per level.  Each level-l sample couples the fine and
coarse solve through a common coefficient draw; the estimator telescopes
the per-level difference means,

    estimate = sum_l mean(Q_l - Q_{l-1}),    l = 1..L,

targeting E[Q - Q_0].  The driver adds levels until a rate-corrected bias
proxy built from the last three difference means falls below the bias
share of the tolerance, and extends per-level sample counts to the
variance-optimal allocation (never discarding computed samples).
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .coefficient import sample_box, sample_cross
from .fem import assemble, h1_norm, solve
from .mesh import uniform_family
from .sampling import UniformSource

__all__ = [
    "EstimatorRun",
    "MlmcRateFit",
    "MlmcConfig",
    "PairSample",
    "PdeLevelModel",
    "Welford",
    "mc_estimate",
    "estimate_rates_mlmc",
    "bias_level",
    "computable_mlmc_cost",
    "optimal_bias_weight",
    "optimal_samples",
    "bias_stop",
    "theoretical_samples",
    "run_mlmc",
]

DEFAULT_S = 1.5**2  # DOF growth factor of the uniform family


@dataclass
class EstimatorRun:
    """Outcome of one estimator run with its cost ledger and diagnostics."""

    method: str
    estimate: float
    variance_estimate: float
    bias_proxy: float
    cost_dof: float
    cost_seconds: float
    samples: int
    diagnostics: dict
    flags: list
    config: dict


class Welford:
    """Single-pass mean/variance accumulator."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self._m2 = 0.0

    def push(self, value: float):
        self.count += 1
        delta = value - self.mean
        self.mean += delta / self.count
        self._m2 += delta * (value - self.mean)

    @property
    def variance(self) -> float:
        """Unbiased sample variance; requires at least two values."""
        if self.count < 2:
            return math.nan
        return self._m2 / (self.count - 1)


def mc_estimate(samples) -> float:
    """Plain Monte Carlo mean of a nonempty sample list."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot average an empty sample list")
    return float(arr.mean())


@dataclass
class PairSample:
    fine: float
    coarse: float
    cost_dof: int
    seconds: float

    @property
    def difference(self) -> float:
        return self.fine - self.coarse


@dataclass
class PdeLevelModel:
    """Coupled level pairs of the H1-norm QoI on the uniform mesh family.

    Each (level, k) pair owns an independent substream of the coefficient
    seed, so extending sample counts never re-draws earlier samples and
    results do not depend on evaluation order.
    """

    kind: str                  # "box" | "cross"
    contrast: float
    f: float = 1.0
    base_n: int = 15
    seed: int = 0
    source_kind: str = "pseudo"
    _meshes: dict = field(default_factory=dict, repr=False)

    def mesh(self, level: int):
        if level not in self._meshes:
            self._meshes[level] = uniform_family(level, self.base_n)
        return self._meshes[level]

    def _draw_coefficient(self, level: int, k: int):
        source = UniformSource(self.source_kind, seed=self.seed, stream=(level, k))
        draw = sample_box if self.kind == "box" else sample_cross
        return draw(source, self.contrast)

    def _qoi(self, mesh, coeff) -> float:
        return h1_norm(solve(assemble(mesh, coeff, self.f)))

    def pair(self, level: int, k: int) -> PairSample:
        """Solve one coefficient draw on levels (level, level-1)."""
        if level < 1:
            raise ValueError("coupled pairs need level >= 1")
        coeff = self._draw_coefficient(level, k)
        fine_mesh, coarse_mesh = self.mesh(level), self.mesh(level - 1)
        t0 = time.perf_counter()
        fine = self._qoi(fine_mesh, coeff)
        coarse = self._qoi(coarse_mesh, coeff)
        seconds = time.perf_counter() - t0
        return PairSample(fine, coarse,
                          fine_mesh.num_vertices + coarse_mesh.num_vertices, seconds)

    def single(self, level: int, k: int):
        """One plain QoI sample at a level; returns (qoi, cost_dof, seconds)."""
        coeff = self._draw_coefficient(level, k)
        mesh = self.mesh(level)
        t0 = time.perf_counter()
        q = self._qoi(mesh, coeff)
        return q, mesh.num_vertices, time.perf_counter() - t0


@dataclass
class MlmcRateFit:
    """Log-linear decay/growth calibration: |mean| ~ c1 s^(-alpha l),
    variance ~ c2 s^(-beta l), cost ~ c3 s^(gamma l)."""

    alpha: float
    beta: float
    gamma: float
    c1: float
    c2: float
    c3: float
    s: float
    levels: tuple
    samples: int
    r_squared: dict

    def hypotheses_hold(self) -> bool:
        return min(self.beta, 2.0 * self.alpha) > self.gamma


def _log_fit(x, y):
    """Least-squares line through (x, y); returns slope, intercept, R^2."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    total = y - y.mean()
    r2 = 1.0 - (resid @ resid) / (total @ total) if (total @ total) > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def estimate_rates_mlmc(model, levels: int = 6, samples: int = 100, s: float = DEFAULT_S) -> MlmcRateFit:
    """Calibrate (alpha, beta, gamma) and constants from per-level pilot runs.

    Fits straight lines to the base-s logarithms of |difference mean|,
    difference variance and pair cost over levels 1..levels.  Levels with
    a nonpositive mean or variance estimate are excluded from the affected
    fit with a warning; fewer than 3 usable levels is an error.
    """
    if levels < 3:
        raise ValueError("need at least 3 levels for a rate fit")
    if samples < 2:
        raise ValueError("need at least 2 samples per level")
    means, variances, costs = [], [], []
    for level in range(1, levels + 1):
        pairs = [model.pair(level, k) for k in range(samples)]
        diffs = np.array([p.difference for p in pairs])
        means.append(diffs.mean())
        variances.append(diffs.var(ddof=1))
        costs.append(np.mean([p.cost_dof for p in pairs]))

    lvl = np.arange(1, levels + 1, dtype=float)
    log_s = math.log(s)

    def masked_fit(values, name):
        values = np.asarray(values, float)
        usable = values > 0
        if not usable.all():
            warnings.warn(
                f"excluding levels {list(lvl[~usable].astype(int))} from the "
                f"{name} fit (nonpositive estimates)"
            )
        if usable.sum() < 3:
            raise ValueError(f"fewer than 3 usable levels for the {name} fit")
        slope, intercept, r2 = _log_fit(lvl[usable], np.log(values[usable]) / log_s)
        return slope, s**intercept, r2

    mean_slope, c1, r2_mean = masked_fit(np.abs(means), "mean")
    var_slope, c2, r2_var = masked_fit(variances, "variance")
    cost_slope, c3, r2_cost = masked_fit(costs, "cost")
    return MlmcRateFit(
        alpha=-mean_slope, beta=-var_slope, gamma=cost_slope,
        c1=c1, c2=c2, c3=c3, s=s, levels=(1, levels), samples=samples,
        r_squared={"mean": r2_mean, "variance": r2_var, "cost": r2_cost},
    )


def bias_level(fit: MlmcRateFit, eps: float, b_w: float) -> float:
    """Continuous level L(b_w) at which the geometric bias tail meets sqrt(b_w) eps."""
    return math.log(fit.c1 / (math.sqrt(b_w) * eps * (fit.s**fit.alpha - 1.0))) \
        / (fit.alpha * math.log(fit.s))


def computable_mlmc_cost(fit: MlmcRateFit, eps: float, b_w: float, level=None) -> float:
    """Computable cost bound of the level-telescoped estimator at weight b_w.

    ``level`` defaults to the continuous bias level L(b_w).
    """
    if level is None:
        level = bias_level(fit, eps, b_w)
    s, beta, gamma = fit.s, fit.beta, fit.gamma
    geo = fit.c3 * s**gamma * (s ** (gamma * level) - 1.0) / (s**gamma - 1.0)
    q = s ** ((gamma - beta) / 2.0)
    var_term = (
        fit.c2 * fit.c3 / ((1.0 - b_w) * eps**2)
        * s ** (gamma - beta)
        * ((1.0 - q**level) / (1.0 - q)) ** 2
    )
    return max(2.0 * geo, var_term) + geo


def optimal_bias_weight(fit: MlmcRateFit, eps: float, level_cap: int, grid: int = 10_000) -> float:
    """Cost-minimizing MSE weight over (b_low, 1).

    b_low makes the continuous bias level meet the largest computable level;
    the argmin is taken on a mid-point grid of the open interval.  An empty
    feasible interval falls back to 0.5 with a warning.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    root = fit.c1 / (eps * (fit.s**fit.alpha - 1.0) * fit.s ** (fit.alpha * level_cap))
    b_low = min(max(root**2, 1e-6), 1.0 - 1e-6)
    if b_low >= 1.0 - 1e-6:
        warnings.warn("empty feasible interval for the MSE weight; using 0.5")
        return 0.5
    bs = b_low + (np.arange(grid) + 0.5) * (1.0 - b_low) / grid
    costs = np.array([computable_mlmc_cost(fit, eps, b) for b in bs])
    return float(bs[np.argmin(costs)])


def optimal_samples(variances, costs, eps: float, b_w: float) -> np.ndarray:
    """Variance-optimal per-level sample counts with the minimum-2 floor.

    Given per-level variances V_l and per-sample costs C_l (fine+coarse DOF),
    returns ceil(S * sqrt(V_l / C_l) / ((1-b_w) eps^2)) with
    S = sum_m sqrt(V_m C_m), floored at 2.  The result satisfies
    sum V_l / M_l <= (1 - b_w) eps^2.
    """
    if not 0.0 < b_w < 1.0:
        raise ValueError("bias weight must lie in (0, 1)")
    v = np.asarray(variances, float)
    c = np.asarray(costs, float)
    if np.any(v < 0) or np.any(c <= 0):
        raise ValueError("variances must be >= 0 and costs > 0")
    budget = (1.0 - b_w) * eps**2
    total = np.sqrt(v * c).sum()
    raw = np.ceil(np.sqrt(v / c) * total / budget)
    return np.maximum(2, raw.astype(np.int64))


def bias_stop(level_means, s: float, alpha: float, b_w: float, eps: float) -> bool:
    """Rate-corrected three-term bias criterion on the last level means."""
    tail = [abs(float(b)) for b in level_means][-3:]
    while len(tail) < 3:
        tail.insert(0, math.inf)
    corrected = max(tail[0] * s ** (-2.0 * alpha), tail[1] * s**-alpha, tail[2])
    return corrected <= math.sqrt(b_w) * eps * abs(1.0 - s**alpha)


def theoretical_samples(fit: MlmcRateFit, eps: float, b_w: float, levels: int) -> np.ndarray:
    """Closed-form per-level sample sizes of the complexity analysis."""
    if fit.beta <= fit.gamma:
        raise ValueError("closed-form sample sizes require beta > gamma")
    s = fit.s
    q = s ** ((fit.gamma - fit.beta) / 2.0)
    prefactor = fit.c2 / ((1.0 - b_w) * eps**2) * q * (1.0 - q**levels) / (1.0 - q)
    lvl = np.arange(1, levels + 1, dtype=float)
    return np.ceil(prefactor * s ** (-(fit.beta + fit.gamma) / 2.0 * lvl)).astype(np.int64)


@dataclass
class MlmcConfig:
    eps: float
    alpha: float
    b_w: float
    s: float = DEFAULT_S
    m_ini: int = 50
    l_max: int = 10

    def __post_init__(self):
        if self.eps <= 0 or self.alpha <= 0 or self.s <= 1:
            raise ValueError("eps and alpha must be positive and s > 1")
        if not 0.0 < self.b_w < 1.0:
            raise ValueError("bias weight must lie in (0, 1)")
        if self.m_ini < 2:
            raise ValueError("need at least 2 initial samples per level")

    def asdict(self) -> dict:
        return {
            "eps": self.eps, "alpha": self.alpha, "b_w": self.b_w,
            "s": self.s, "m_ini": self.m_ini, "l_max": self.l_max,
        }


class _LevelState:
    def __init__(self):
        self.stats = Welford()
        self.cost_dof = 0
        self.cost_seconds = 0.0

    def extend(self, model, level, target):
        while self.stats.count < target:
            pair = model.pair(level, self.stats.count)
            self.stats.push(pair.difference)
            self.cost_dof += pair.cost_dof
            self.cost_seconds += pair.seconds


def run_mlmc(config: MlmcConfig, model) -> EstimatorRun:
    """On-the-fly driver: warm-up on levels 1..3, then add levels until the
    bias criterion holds, re-optimizing sample counts as variances update."""
    states: dict[int, _LevelState] = {}

    def ensure(level, target):
        state = states.setdefault(level, _LevelState())
        state.extend(model, level, target)

    flags = []
    for level in (1, 2, 3):
        ensure(level, config.m_ini)
    top = 3

    def stop() -> bool:
        means = [states[l].stats.mean for l in range(1, top + 1)]
        return bias_stop(means, config.s, config.alpha, config.b_w, config.eps)

    while not stop():
        if top >= config.l_max:
            flags.append("bias-unconverged")
            break
        top += 1
        ensure(top, config.m_ini)
        levels = list(range(1, top + 1))
        variances = np.array([states[l].stats.variance for l in levels])
        costs = np.array(
            [states[l].cost_dof / states[l].stats.count for l in levels]
        )
        counts = optimal_samples(variances, costs, config.eps, config.b_w)
        for l, m in zip(levels, counts):
            ensure(l, max(int(m), states[l].stats.count))  # never discard samples

    levels = list(range(1, top + 1))
    estimate = float(sum(states[l].stats.mean for l in levels))
    variance_sum = float(
        sum(states[l].stats.variance / states[l].stats.count for l in levels)
    )
    bias_proxy = abs(states[top].stats.mean) / abs(1.0 - config.s**config.alpha)
    per_level = [
        {
            "level": l,
            "samples": states[l].stats.count,
            "mean": states[l].stats.mean,
            "variance": states[l].stats.variance,
            "cost_dof": states[l].cost_dof,
            "cost_seconds": states[l].cost_seconds,
        }
        for l in levels
    ]
    return EstimatorRun(
        method="mlmc",
        estimate=estimate,
        variance_estimate=variance_sum,
        bias_proxy=bias_proxy,
        cost_dof=float(sum(states[l].cost_dof for l in levels)),
        cost_seconds=float(sum(states[l].cost_seconds for l in levels)),
        samples=int(sum(states[l].stats.count for l in levels)),
        diagnostics={"per_level": per_level, "max_level": top},
        flags=flags,
        config=config.asdict(),
    )
