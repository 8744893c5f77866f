"""
Plausible-Value Pooling

One fit per plausible-value outcome column, fixed effects combined with
Rubin's rules:

    estimate = mean, U = mean within variance, B = between variance,
    T = U + (1 + 1/M)·B, df = (M − 1)·(1 + U / ((1 + 1/M)·B))²

Pooled fits carry the complete-data df of each fixed effect into the
Barnard-Rubin small-sample df, so identical plausible values give back the
single-fit df and p-value.

Variance components are averaged across fits for reporting only. The
average-PV mode (one fit on the mean of the PV columns) is a sensitivity
check, not the canonical analysis.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from common.errors import HLMWorkflowError, MissingColumnError, PoolingError
from estimators.hlm_estimator import EstimationOptions, FitResult, ModelSpec, fit, prepare_analysis_data
from parsers.csv_processor import Dataset, DeletionReport

logger = logging.getLogger(__name__)

MODES = ('rubin', 'average-pv')
AVERAGE_COLUMN = 'pv_mean'


@dataclass(frozen=True)
class PlausibleValueSet:
    columns: Tuple[str, ...]

    def __post_init__(self):
        if len(self.columns) < 2:
            raise PoolingError("M ≥ 2 required")
        if len(set(self.columns)) != len(self.columns):
            raise PoolingError("plausible-value columns must be distinct")

    @property
    def M(self) -> int:
        return len(self.columns)

    def validate(self, ds: Dataset) -> None:
        for name in self.columns:
            if not ds.has(name):
                raise MissingColumnError(name, "dataset (plausible value)")


@dataclass(frozen=True)
class PooledEstimate:
    name: str
    estimate: float
    within: float
    between: float
    total: float
    se: float
    df: float
    p: float


@dataclass(frozen=True)
class PooledResult:
    pvs: PlausibleValueSet
    mode: str
    fixed: Tuple[PooledEstimate, ...]
    fits: Tuple[FitResult, ...]
    tau_mean: np.ndarray
    sigma2_mean: float
    reliability_mean: float
    deletion: DeletionReport

    @property
    def M(self) -> int:
        return self.pvs.M

    def effect(self, name: str) -> PooledEstimate:
        for pooled in self.fixed:
            if pooled.name == name:
                return pooled
        raise KeyError(name)


def _shifted_mean(values: np.ndarray) -> float:
    # exact when all values are equal
    return float(values[0] + np.mean(values - values[0]))


def _barnard_rubin_df(M: int, between: float, total: float, complete_df: float) -> float:
    """Small-sample df, never above the complete-data df; equals it when B = 0."""
    if between == 0 or total == 0:
        return float(complete_df)
    lam = (1 + 1 / M) * between / total
    df_old = (M - 1) / lam ** 2
    if np.isinf(complete_df):
        return float(df_old)
    df_obs = (complete_df + 1) / (complete_df + 3) * complete_df * (1 - lam)
    return float(1 / (1 / df_old + 1 / df_obs))


def rubin_pool(estimates: Sequence[float], variances: Sequence[float],
               name: str = '', complete_df: Optional[float] = None) -> PooledEstimate:
    """
    Combine M per-imputation estimates and their sampling variances.

    Without complete_df the large-sample df applies (infinite when B = 0, normal
    reference). With the complete-data df of the per-imputation fits, the
    Barnard-Rubin adjustment applies and B = 0 gives back the single-fit df.
    """
    estimates = np.asarray(estimates, dtype=float)
    variances = np.asarray(variances, dtype=float)
    M = len(estimates)
    if M < 2:
        raise PoolingError("M ≥ 2 required")
    if len(variances) != M:
        raise ValueError("estimates and variances differ in length")
    if np.any(variances < 0):
        raise ValueError("variances must be ≥ 0")
    if complete_df is not None and not complete_df > 0:
        raise ValueError("complete_df must be > 0")

    estimate = _shifted_mean(estimates)
    within = _shifted_mean(variances)
    between = float(np.var(estimates, ddof=1))
    inflation = (1 + 1 / M) * between
    total = within + inflation
    se = float(np.sqrt(total))

    if complete_df is not None:
        df = _barnard_rubin_df(M, between, total, complete_df)
    elif between == 0:
        df = np.inf
    else:
        df = (M - 1) * (1 + within / inflation) ** 2

    if se > 0:
        t = estimate / se
        p = float(2 * (stats.norm.sf(abs(t)) if np.isinf(df) else stats.t.sf(abs(t), df)))
    else:
        p = np.nan
    return PooledEstimate(name=name, estimate=estimate, within=within, between=between,
                          total=total, se=se, df=float(df), p=p)


def _fit_one(index: int, spec: ModelSpec, ds: Dataset,
             options: Optional[EstimationOptions]) -> FitResult:
    try:
        return fit(spec, ds, options)
    except HLMWorkflowError as e:
        raise PoolingError(f"fit for plausible value {index} ('{spec.outcome}') failed: {e}",
                           pv_index=index, cause=e)


def _complete_df(fits: Sequence[FitResult], k: int) -> Optional[float]:
    """Complete-data df of fixed effect k; all fits share one design."""
    df = fits[0].fixed[k].df
    return float(df) if df > 0 else None


def fit_pooled(spec: ModelSpec, ds: Dataset, pvs: PlausibleValueSet,
               options: Optional[EstimationOptions] = None, workers: int = 1,
               mode: str = 'rubin') -> PooledResult:
    """Fit every plausible value on one shared set of complete rows and pool the results."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    pvs.validate(ds)
    base = replace(spec, outcome=pvs.columns[0], plausible_values=pvs.columns)
    analysis, deletion = prepare_analysis_data(base, ds, extra_vars=pvs.columns)

    if mode == 'average-pv':
        return _fit_average(base, analysis, pvs, options, deletion)

    specs = [replace(base, outcome=column) for column in pvs.columns]
    logger.info(f"Fitting {pvs.M} plausible values on {analysis.n_rows} rows "
                f"({max(1, workers)} workers)...")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [pool.submit(_fit_one, m, s, analysis, options)
                   for m, s in enumerate(specs, start=1)]
        fits = tuple(future.result() for future in futures)

    pooled = []
    for k, fe in enumerate(fits[0].fixed):
        pooled.append(rubin_pool([f.fixed[k].gamma_hat for f in fits],
                                 [f.fixed[k].se ** 2 for f in fits], name=fe.name,
                                 complete_df=_complete_df(fits, k)))

    tau_mean = fits[0].vc.tau + np.mean([f.vc.tau - fits[0].vc.tau for f in fits], axis=0)
    result = PooledResult(
        pvs=pvs, mode=mode, fixed=tuple(pooled), fits=fits, tau_mean=tau_mean,
        sigma2_mean=_shifted_mean(np.array([f.vc.sigma2 for f in fits])),
        reliability_mean=_shifted_mean(np.array([f.reliability_mean for f in fits])),
        deletion=deletion)
    logger.info(f"✓ Pooled {len(pooled)} fixed effects over {pvs.M} plausible values")
    return result


def _fit_average(spec: ModelSpec, ds: Dataset, pvs: PlausibleValueSet,
                 options: Optional[EstimationOptions], deletion: DeletionReport) -> PooledResult:
    logger.warning("average-PV mode fits the mean of the plausible values; "
                   "standard errors ignore imputation variance")
    outcome = np.mean(np.column_stack([ds.values(c) for c in pvs.columns]), axis=1)
    averaged = ds.with_column(AVERAGE_COLUMN, outcome)
    result = fit(replace(spec, outcome=AVERAGE_COLUMN), averaged, options)
    fixed = tuple(PooledEstimate(name=fe.name, estimate=fe.gamma_hat, within=fe.se ** 2,
                                 between=0.0, total=fe.se ** 2, se=fe.se, df=fe.df, p=fe.p)
                  for fe in result.fixed)
    return PooledResult(pvs=pvs, mode='average-pv', fixed=fixed, fits=(result,),
                        tau_mean=result.vc.tau, sigma2_mean=result.vc.sigma2,
                        reliability_mean=result.reliability_mean, deletion=deletion)
