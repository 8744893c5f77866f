"""
Synthetic Two-Level Data Generator

Draws y_ij = x_ijᵀγ + z_ijᵀu_j + r_ij with u_j ~ N(0, tau), r_ij ~ N(0, sigma2)
from a seeded PCG64 generator, plus the closed-form one-way ANOVA oracle used
to check the estimator on balanced designs.

Draw order is fixed (predictors in declaration order, then u, then r, then
plausible-value noise) so one seed always produces the same dataset.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from common.errors import SimConfigError, UnbalancedDesignError
from parsers.csv_processor import Dataset, build_group_index

logger = logging.getLogger(__name__)

DISTRIBUTIONS = ('gaussian', 'categorical', 'binomial')
INTERCEPT = 'intercept'


def make_rng(seed: int) -> np.random.Generator:
    """The pinned generator: PCG64 seeded with the integer seed."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class PredictorGenerator:
    name: str
    level: int = 1
    distribution: str = 'gaussian'
    mean: float = 0.0
    sd: float = 1.0
    values: Tuple[float, ...] = (-1.0, 0.0, 1.0)
    probs: Optional[Tuple[float, ...]] = None
    n: int = 1
    p: float = 0.5

    def __post_init__(self):
        if self.level not in (1, 2):
            raise SimConfigError(f"predictor '{self.name}': level must be 1 or 2")
        if self.distribution not in DISTRIBUTIONS:
            raise SimConfigError(f"predictor '{self.name}': distribution must be one of {DISTRIBUTIONS}")
        if self.sd < 0:
            raise SimConfigError(f"predictor '{self.name}': sd must be ≥ 0")
        if self.distribution == 'categorical':
            if not self.values:
                raise SimConfigError(f"predictor '{self.name}': categorical needs values")
            if self.probs is not None:
                if len(self.probs) != len(self.values):
                    raise SimConfigError(f"predictor '{self.name}': values and probs differ in length")
                if min(self.probs) < 0 or abs(sum(self.probs) - 1.0) > 1e-9:
                    raise SimConfigError(f"predictor '{self.name}': probs must be ≥ 0 and sum to 1")
        if self.distribution == 'binomial' and (self.n < 1 or not 0 <= self.p <= 1):
            raise SimConfigError(f"predictor '{self.name}': binomial needs n ≥ 1 and 0 ≤ p ≤ 1")

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.distribution == 'gaussian':
            return rng.normal(self.mean, self.sd, size)
        if self.distribution == 'categorical':
            return rng.choice(np.asarray(self.values, dtype=float), size=size, p=self.probs)
        return rng.binomial(self.n, self.p, size).astype(float)

    @classmethod
    def from_dict(cls, entry: dict) -> "PredictorGenerator":
        entry = dict(entry)
        for key in ('values', 'probs'):
            if entry.get(key) is not None:
                entry[key] = tuple(float(v) for v in entry[key])
        try:
            return cls(**entry)
        except TypeError as e:
            raise SimConfigError(f"bad predictor entry {entry}: {e}")


@dataclass(frozen=True)
class SimConfig:
    J: int
    group_sizes: Tuple[int, ...]
    gamma: Tuple[Tuple[str, float], ...]
    tau: np.ndarray
    sigma2: float
    predictors: Tuple[PredictorGenerator, ...] = ()
    random_slopes: Tuple[str, ...] = ()
    seed: int = 0
    outcome: str = 'y'
    cluster_column: str = 'school'
    plausible_values: int = 0
    pv_sd: float = 0.0

    def __post_init__(self):
        if self.J < 1:
            raise SimConfigError("groups must be ≥ 1")
        if len(self.group_sizes) not in (1, self.J):
            raise SimConfigError(f"sizes must give one size or {self.J} sizes")
        if min(self.group_sizes) < 1:
            raise SimConfigError("group sizes must be ≥ 1")
        if self.sigma2 < 0:
            raise SimConfigError("sigma2 must be ≥ 0")
        if self.plausible_values < 0 or self.pv_sd < 0:
            raise SimConfigError("plausible count and sd must be ≥ 0")

        # undeclared predictors named in gamma default to standard Gaussians
        declared = {g.name for g in self.predictors}
        extra = tuple(PredictorGenerator(name) for name, _ in self.gamma
                      if name != INTERCEPT and name not in declared)
        object.__setattr__(self, 'predictors', tuple(self.predictors) + extra)

        names = [g.name for g in self.predictors]
        if len(set(names)) != len(names):
            raise SimConfigError("predictor names must be unique")
        if self.outcome in names or self.cluster_column in names + [self.outcome]:
            raise SimConfigError("outcome, cluster and predictor names must differ")
        levels = {g.name: g.level for g in self.predictors}
        for name in self.random_slopes:
            if levels.get(name) != 1:
                raise SimConfigError(f"random slope '{name}' must be a level-1 predictor")

        q = 1 + len(self.random_slopes)
        tau = np.atleast_2d(np.asarray(self.tau, dtype=float))
        if tau.shape != (q, q):
            raise SimConfigError(f"tau must be {q}×{q} for {len(self.random_slopes)} random slopes")
        if not np.allclose(tau, tau.T):
            raise SimConfigError("tau must be symmetric")
        scale = max(1.0, float(np.abs(tau).max()))
        if np.linalg.eigvalsh(tau).min() < -1e-10 * scale:
            raise SimConfigError("tau is not positive semi-definite")
        object.__setattr__(self, 'tau', tau)

    @property
    def sizes(self) -> np.ndarray:
        if len(self.group_sizes) == 1:
            return np.full(self.J, self.group_sizes[0], dtype=int)
        return np.asarray(self.group_sizes, dtype=int)

    @property
    def gamma_map(self) -> Dict[str, float]:
        return dict(self.gamma)

    def pv_columns(self):
        return [f"{self.outcome}_pv{m}" for m in range(1, self.plausible_values + 1)]

    @classmethod
    def from_dict(cls, entry: dict, seed: Optional[int] = None,
                  cluster_column: Optional[str] = None) -> "SimConfig":
        """Build from a settings preset (nested YAML mapping)."""
        try:
            sizes = entry.get('sizes') or [entry['size']]
            plausible = entry.get('plausible') or {}
            return cls(
                J=int(entry['groups']),
                group_sizes=tuple(int(s) for s in sizes),
                gamma=tuple((str(k), float(v)) for k, v in entry.get('gamma', {INTERCEPT: 0.0}).items()),
                tau=np.asarray(entry.get('tau', [[0.0]]), dtype=float),
                sigma2=float(entry['sigma2']),
                predictors=tuple(PredictorGenerator.from_dict(p) for p in entry.get('predictors', [])),
                random_slopes=tuple(entry.get('random', [])),
                seed=int(seed if seed is not None else entry.get('seed', 0)),
                outcome=entry.get('outcome', 'y'),
                cluster_column=cluster_column or entry.get('cluster', 'school'),
                plausible_values=int(plausible.get('count', 0)),
                pv_sd=float(plausible.get('sd', 0.0)),
            )
        except KeyError as e:
            raise SimConfigError(f"preset is missing required key {e}")


def load_preset(name: str, settings: dict, seed: Optional[int] = None) -> SimConfig:
    simulation = settings.get('simulation', {})
    presets = simulation.get('presets', {})
    if name not in presets:
        raise SimConfigError(f"unknown preset '{name}' (available: {sorted(presets)})")
    return SimConfig.from_dict(presets[name], seed=seed,
                               cluster_column=presets[name].get('cluster')
                               or simulation.get('default_cluster_column'))


def _random_effects(rng: np.random.Generator, tau: np.ndarray, J: int) -> np.ndarray:
    w, v = np.linalg.eigh(tau)
    factor = v * np.sqrt(np.clip(w, 0.0, None))
    return rng.standard_normal((J, tau.shape[0])) @ factor.T


def simulate(cfg: SimConfig) -> Dataset:
    """Draw one synthetic dataset; the same cfg (seed included) gives identical output."""
    rng = make_rng(cfg.seed)
    sizes = cfg.sizes
    N = int(sizes.sum())
    group_of_row = np.repeat(np.arange(cfg.J), sizes)
    width = max(4, len(str(cfg.J)))

    columns = {cfg.cluster_column: [f"s{j + 1:0{width}d}" for j in group_of_row]}
    for gen in cfg.predictors:
        if gen.level == 2:
            columns[gen.name] = gen.draw(rng, cfg.J)[group_of_row]
        else:
            columns[gen.name] = gen.draw(rng, N)

    gamma = cfg.gamma_map
    y = np.full(N, gamma.get(INTERCEPT, 0.0))
    for gen in cfg.predictors:
        y = y + gamma.get(gen.name, 0.0) * columns[gen.name]

    u = _random_effects(rng, cfg.tau, cfg.J)
    y = y + u[group_of_row, 0]
    for k, name in enumerate(cfg.random_slopes, start=1):
        y = y + u[group_of_row, k] * columns[name]

    y = y + np.sqrt(cfg.sigma2) * rng.standard_normal(N)
    columns[cfg.outcome] = y
    for name in cfg.pv_columns():
        columns[name] = y + cfg.pv_sd * rng.standard_normal(N)

    ds = Dataset(pd.DataFrame(columns), cfg.cluster_column)
    logger.info(f"✓ Simulated {N} rows in {cfg.J} groups (seed {cfg.seed})")
    return ds


def _one_way_anova(ds: Dataset, outcome: str):
    index = build_group_index(ds)
    y = ds.values(outcome)
    if np.isnan(y).any():
        raise SimConfigError(f"'{outcome}' has missing cells")
    means = np.array([y[rows].mean() for _, rows in index.groups])
    sizes = index.sizes
    grand = y.mean()
    ss_within = sum(float(((y[rows] - m) ** 2).sum()) for (_, rows), m in zip(index.groups, means))
    ss_between = float((sizes * (means - grand) ** 2).sum())
    ms_within = ss_within / (index.N - index.J)
    ms_between = ss_between / (index.J - 1)
    return index, ms_between, ms_within


def anova_oracle(ds: Dataset, outcome: str) -> Tuple[float, float]:
    """
    Closed-form one-way random-effects estimates for a balanced design:
    sigma2 = within mean square, tau00 = max(0, (between MS - within MS) / n).
    """
    index = build_group_index(ds)
    sizes = index.sizes
    if index.J < 2 or sizes.min() != sizes.max() or sizes[0] < 2:
        raise UnbalancedDesignError(
            f"anova_oracle needs J ≥ 2 equal groups of n ≥ 2 (sizes {sizes.min()}-{sizes.max()})")
    _, ms_between, ms_within = _one_way_anova(ds, outcome)
    n = int(sizes[0])
    return ms_within, max(0.0, (ms_between - ms_within) / n)


def empirical_icc(ds: Dataset, outcome: str) -> float:
    """One-way ANOVA intraclass correlation, with the adjusted mean size for unequal groups."""
    index, ms_between, ms_within = _one_way_anova(ds, outcome)
    sizes = index.sizes
    n0 = (index.N - float((sizes ** 2).sum()) / index.N) / (index.J - 1)
    tau = max(0.0, (ms_between - ms_within) / n0)
    total = tau + ms_within
    return tau / total if total > 0 else 0.0
