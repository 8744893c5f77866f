"""
Multilevel Diagnostics

Scalar summaries of a two-level analysis:
- descriptives and pairwise correlations of the analysis variables
- ICC, design effect and effective sample size from the unconditional fit
- proportional reduction in variance of a conditional fit against the null fit
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from parsers.csv_processor import Dataset

logger = logging.getLogger(__name__)

DEFAULT_ICC_BANDS = {'negligible': 0.05, 'small': 0.10, 'moderate': 0.25}


def icc(tau00: float, sigma2: float) -> float:
    """Share of outcome variance lying between groups."""
    if tau00 < 0 or sigma2 < 0:
        raise ValueError("variance components must be ≥ 0")
    if tau00 + sigma2 <= 0:
        raise ValueError("icc undefined: both variance components are zero")
    return tau00 / (tau00 + sigma2)


def design_effect(n_bar: float, icc_value: float) -> float:
    if n_bar < 1:
        raise ValueError("mean cluster size must be ≥ 1")
    if not 0 <= icc_value <= 1:
        raise ValueError("icc must lie in [0, 1]")
    return 1 + (n_bar - 1) * icc_value


@dataclass(frozen=True)
class EffectiveSampleSize:
    value: float
    rounded: int


def effective_sample_size(n_total: float, deff: float) -> EffectiveSampleSize:
    if n_total < 1:
        raise ValueError("N must be ≥ 1")
    if deff < 1:
        raise ValueError("design effect must be ≥ 1")
    value = n_total / deff
    return EffectiveSampleSize(value=value, rounded=int(round(value)))


def interpret_icc(icc_value: float, bands: Optional[Dict[str, float]] = None) -> str:
    bands = bands or DEFAULT_ICC_BANDS
    for label, upper in sorted(bands.items(), key=lambda kv: kv[1]):
        if icc_value < upper:
            return label
    return 'large'


@dataclass(frozen=True)
class VarianceExplained:
    r2_level1: float
    r2_level2: float
    r2_total: float

    @property
    def negative(self) -> Dict[str, bool]:
        """Components the conditional model estimated larger than the null model did."""
        return {'r2_level1': self.r2_level1 < 0, 'r2_level2': self.r2_level2 < 0,
                'r2_total': self.r2_total < 0}


def proportion_reduction(null_tau00: float, null_sigma2: float,
                         model_tau00: float, model_sigma2: float) -> VarianceExplained:
    if null_tau00 <= 0 or null_sigma2 <= 0:
        raise ValueError("null variance components zero; proportional reduction undefined")
    null_total = null_tau00 + null_sigma2
    result = VarianceExplained(
        r2_level1=(null_sigma2 - model_sigma2) / null_sigma2,
        r2_level2=(null_tau00 - model_tau00) / null_tau00,
        r2_total=(null_total - (model_tau00 + model_sigma2)) / null_total,
    )
    flagged = [k for k, v in result.negative.items() if v]
    if flagged:
        logger.warning(f"Negative variance explained for {flagged}: "
                       f"the conditional model increased an estimated component")
    return result


def variance_explained(null, model) -> VarianceExplained:
    """Level-1, level-2 and total proportional reduction of `model` against the unconditional `null` fit."""
    if null.spec.outcome != model.spec.outcome or null.N != model.N:
        raise ValueError("null and model fits must share the outcome and the rows")
    if null.spec.predictors:
        logger.warning("Null fit has predictors; it is not the unconditional model")
    return proportion_reduction(null.vc.tau00, null.vc.sigma2, model.vc.tau00, model.vc.sigma2)


def descriptives(ds: Dataset, variables: Sequence[str]) -> pd.DataFrame:
    """Mean, sample sd, min, max and non-missing n per variable."""
    if not variables:
        raise ValueError("no variables given")
    ds.require(variables)
    rows = []
    for name in variables:
        x = ds.values(name)
        x = x[~np.isnan(x)]
        n = len(x)
        rows.append({
            'variable': name,
            'n': n,
            'mean': float(x.mean()) if n else np.nan,
            'sd': float(x.std(ddof=1)) if n > 1 else np.nan,
            'min': float(x.min()) if n else np.nan,
            'max': float(x.max()) if n else np.nan,
        })
    return pd.DataFrame(rows).set_index('variable')


@dataclass(frozen=True)
class CorrelationTable:
    r: pd.DataFrame
    p: pd.DataFrame
    n: pd.DataFrame


def _pearson(x: np.ndarray, y: np.ndarray):
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        return np.nan, np.nan
    r = float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))
    df = len(x) - 2
    if df < 1:
        return r, np.nan
    if abs(r) == 1.0:
        return r, 0.0
    t = r * np.sqrt(df / (1 - r * r))
    return r, float(2 * stats.t.sf(abs(t), df))


def correlations(ds: Dataset, variables: Sequence[str]) -> CorrelationTable:
    """Pairwise-complete Pearson r with two-sided t-test p-values (n−2 df)."""
    if len(variables) < 2:
        raise ValueError("correlations need at least two variables")
    ds.require(variables)
    k = len(variables)
    r = np.full((k, k), np.nan)
    p = np.full((k, k), np.nan)
    n = np.zeros((k, k), dtype=int)
    data = {name: ds.values(name) for name in variables}

    for i, a in enumerate(variables):
        xa = data[a]
        ok = ~np.isnan(xa)
        n[i, i] = int(ok.sum())
        if ok.sum() > 1 and np.ptp(xa[ok]) > 0:
            r[i, i], p[i, i] = 1.0, 0.0
        for j in range(i + 1, k):
            xb = data[variables[j]]
            both = ok & ~np.isnan(xb)
            n[i, j] = n[j, i] = int(both.sum())
            if both.sum() >= 2:
                r[i, j], p[i, j] = _pearson(xa[both], xb[both])
            r[j, i], p[j, i] = r[i, j], p[i, j]

    labels = list(variables)
    return CorrelationTable(r=pd.DataFrame(r, index=labels, columns=labels),
                            p=pd.DataFrame(p, index=labels, columns=labels),
                            n=pd.DataFrame(n, index=labels, columns=labels))


@dataclass
class DiagnosticsReport:
    N: Optional[int] = None
    J: Optional[int] = None
    n_bar: Optional[float] = None
    tau00: Optional[float] = None
    sigma2: Optional[float] = None
    icc: Optional[float] = None
    icc_band: Optional[str] = None
    design_effect: Optional[float] = None
    effective_sample_size: Optional[float] = None
    effective_sample_size_rounded: Optional[int] = None
    # hand-calculation chain: ICC rounded to 3 d.p., design effect rounded to 2 d.p.
    design_effect_stepwise: Optional[float] = None
    effective_sample_size_stepwise: Optional[float] = None
    r2_level1: Optional[float] = None
    r2_level2: Optional[float] = None
    r2_total: Optional[float] = None
    negative_variance_explained: Dict[str, bool] = field(default_factory=dict)
    descriptives: Optional[pd.DataFrame] = None
    correlations: Optional[CorrelationTable] = None

    @property
    def has_icc(self) -> bool:
        return self.icc is not None


def build_report(ds: Optional[Dataset] = None, variables: Sequence[str] = (),
                 null_fit=None, model_fit=None, tau00: Optional[float] = None,
                 sigma2: Optional[float] = None, n_bar: Optional[float] = None,
                 n_total: Optional[float] = None,
                 icc_bands: Optional[Dict[str, float]] = None) -> DiagnosticsReport:
    """
    Assemble the diagnostics block. Variance components come from null_fit when
    given, otherwise from the explicit tau00/sigma2/n_bar/n_total values; with
    neither, only descriptives and correlations are produced.
    """
    report = DiagnosticsReport()

    if ds is not None and variables:
        report.descriptives = descriptives(ds, variables)
        if len(variables) > 1:
            report.correlations = correlations(ds, variables)

    if null_fit is not None:
        tau00, sigma2 = null_fit.vc.tau00, null_fit.vc.sigma2
        n_total, report.J = null_fit.N, null_fit.J
        n_bar = null_fit.N / null_fit.J

    if tau00 is not None and sigma2 is not None:
        report.tau00, report.sigma2 = float(tau00), float(sigma2)
        report.icc = icc(tau00, sigma2)
        report.icc_band = interpret_icc(report.icc, icc_bands)
        if n_bar is not None:
            report.n_bar = float(n_bar)
            report.design_effect = design_effect(n_bar, report.icc)
            report.design_effect_stepwise = design_effect(n_bar, round(report.icc, 3))
            if n_total is not None:
                report.N = int(n_total)
                ess = effective_sample_size(n_total, report.design_effect)
                report.effective_sample_size = ess.value
                report.effective_sample_size_rounded = ess.rounded
                report.effective_sample_size_stepwise = effective_sample_size(
                    n_total, round(report.design_effect_stepwise, 2)).value

    if model_fit is not None and null_fit is not None:
        explained = variance_explained(null_fit, model_fit)
        report.r2_level1 = explained.r2_level1
        report.r2_level2 = explained.r2_level2
        report.r2_total = explained.r2_total
        report.negative_variance_explained = explained.negative

    if report.has_icc:
        logger.info(f"✓ ICC {report.icc:.3f} ({report.icc_band})")
    return report
