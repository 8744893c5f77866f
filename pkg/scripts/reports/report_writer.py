"""
Report Writer

Renders fit, diagnostics, pooling, recode and simulation results in one of
two formats:
- text: aligned plain text for reading
- structured: YAML with a leading `schema: hlm-report/<version>` key, keys in
  insertion order so byte comparison of two runs is meaningful

Reports are rendered completely in memory before anything is written.
"""

import logging
import math
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import yaml

logger = logging.getLogger(__name__)

FORMATS = ('text', 'structured')
RULE = "=" * 80
THIN = "-" * 80


def to_builtin(value):
    """Convert numpy/pandas scalars and containers to plain Python for YAML."""
    if isinstance(value, dict):
        return {str(k): to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_builtin(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_builtin(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        return float(value)
    return value


# ---------------------------------------------------------------------------
# Sections as nested dicts
# ---------------------------------------------------------------------------

def fit_section(result) -> dict:
    spec = result.spec
    conv = result.convergence
    return {
        'model': spec.label,
        'outcome': spec.outcome,
        'method': spec.method,
        'N': result.N,
        'J': result.J,
        'fixed_effects': [
            {'name': fe.name, 'estimate': fe.gamma_hat, 'se': fe.se, 't': fe.t,
             'df': fe.df, 'p': fe.p}
            for fe in result.fixed
        ],
        'variance_components': {
            'random_effects': list(result.vc.names),
            'tau': result.vc.tau,
            'sigma2': result.vc.sigma2,
        },
        'variance_tests': [
            {'effect': t.effect, 'chi_square': t.statistic, 'df': t.df, 'p': t.p,
             'groups_used': t.groups_used, 'groups_excluded': t.groups_excluded}
            for t in result.vc_tests
        ],
        'likelihood': {
            'loglik': result.loglik,
            'deviance': result.deviance,
            'n_params': result.n_params,
            'aic': result.aic,
            'bic': result.bic,
        },
        'reliability': {
            'mean': result.reliability_mean,
            'per_group': result.reliability_per_group.to_dict(),
        },
        'grand_means': dict(result.grand_means),
        'convergence': {
            'converged': conv.converged,
            'iterations': conv.iterations,
            'em_iterations': conv.em_iterations,
            'optimizer_iterations': conv.optimizer_iterations,
            'relative_change': conv.relative_change,
            'gradient_norm': conv.gradient_norm,
            'boundary': conv.boundary,
        },
    }


def diagnostics_section(report) -> dict:
    section = {}
    if report.has_icc:
        section['icc'] = {
            'tau00': report.tau00,
            'sigma2': report.sigma2,
            'icc': report.icc,
            'band': report.icc_band,
            'n_bar': report.n_bar,
            'N': report.N,
            'J': report.J,
            'design_effect': report.design_effect,
            'effective_sample_size': report.effective_sample_size,
            'effective_sample_size_rounded': report.effective_sample_size_rounded,
            'design_effect_stepwise': report.design_effect_stepwise,
            'effective_sample_size_stepwise': report.effective_sample_size_stepwise,
        }
    if report.r2_total is not None:
        section['variance_explained'] = {
            'r2_level1': report.r2_level1,
            'r2_level2': report.r2_level2,
            'r2_total': report.r2_total,
            'negative': report.negative_variance_explained,
        }
    if report.descriptives is not None:
        section['descriptives'] = {
            name: row.to_dict() for name, row in report.descriptives.iterrows()
        }
    if report.correlations is not None:
        section['correlations'] = {
            'r': report.correlations.r.to_dict(orient='index'),
            'p': report.correlations.p.to_dict(orient='index'),
            'n': report.correlations.n.to_dict(orient='index'),
        }
    return section


def pooled_section(pooled) -> dict:
    return {
        'mode': pooled.mode,
        'M': pooled.M,
        'plausible_values': list(pooled.pvs.columns),
        'fixed_effects': [
            {'name': pe.name, 'estimate': pe.estimate, 'within': pe.within,
             'between': pe.between, 'total': pe.total, 'se': pe.se, 'df': pe.df, 'p': pe.p}
            for pe in pooled.fixed
        ],
        'variance_components_mean': {
            'tau': pooled.tau_mean,
            'sigma2': pooled.sigma2_mean,
            'reliability': pooled.reliability_mean,
        },
        'deletion': pooled.deletion.to_dict(),
        'fits': [fit_section(f) for f in pooled.fits],
    }


def audit_section(audit: pd.DataFrame) -> list:
    return audit.to_dict(orient='records')


# ---------------------------------------------------------------------------
# Text rendering
# ---------------------------------------------------------------------------

def _num(value, decimals: int) -> str:
    if value is None:
        return "-"
    value = float(value)
    if math.isnan(value):
        return "NA"
    if math.isinf(value):
        return "inf"
    return f"{value:.{decimals}f}"


def _p(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "NA"
    return "<0.001" if value < 0.001 else f"{value:.3f}"


def _table(frame: pd.DataFrame, decimals: int) -> List[str]:
    text = frame.to_string(float_format=lambda v: _num(v, decimals), na_rep="NA")
    return ["  " + line for line in text.splitlines()]


def fit_text(result, decimals: int = 3) -> List[str]:
    conv = result.convergence
    lines = [RULE, f"{result.spec.label.upper()} ({result.method})", RULE,
             f"  Outcome: {result.spec.outcome}    N = {result.N}    J = {result.J}", ""]

    lines += ["FIXED EFFECTS", THIN]
    fixed = pd.DataFrame([{'effect': fe.name, 'coefficient': fe.gamma_hat, 'se': fe.se,
                           't': fe.t, 'df': fe.df, 'p': _p(fe.p)} for fe in result.fixed])
    lines += _table(fixed.set_index('effect'), decimals)
    lines.append("")

    lines += ["VARIANCE COMPONENTS", THIN]
    for k, name in enumerate(result.vc.names):
        label = 'tau00 (intercept)' if k == 0 else f"tau{k}{k} ({name})"
        lines.append(f"  {label:<28}{_num(result.vc.tau[k, k], 2):>14}")
    for i in range(result.vc.q):
        for j in range(i):
            lines.append(f"  {'tau' + str(i) + str(j):<28}{_num(result.vc.tau[i, j], 2):>14}")
    lines.append(f"  {'sigma2 (level-1)':<28}{_num(result.vc.sigma2, 2):>14}")
    for test in result.vc_tests:
        lines.append(f"  chi-square {test.effect:<17}{_num(test.statistic, 2):>14}"
                     f"  df = {test.df}  p = {_p(test.p)}"
                     + (f"  ({test.groups_excluded} groups excluded)" if test.groups_excluded else ""))
    lines.append("")

    lines += ["MODEL FIT", THIN,
              f"  Reliability (intercept)     {_num(result.reliability_mean, 3):>14}",
              f"  Log-likelihood              {_num(result.loglik, 2):>14}",
              f"  Deviance                    {_num(result.deviance, 2):>14}",
              f"  Parameters                  {result.n_params:>14}",
              f"  AIC / BIC                   {_num(result.aic, 2):>14} / {_num(result.bic, 2)}",
              f"  Converged                   {str(conv.converged):>14}"
              f"  ({conv.iterations} iterations, gradient {conv.gradient_norm:.1e})"]
    if conv.boundary:
        lines.append("  Note: variance estimate on the boundary (zero variance)")
    lines.append("")
    return lines


def diagnostics_text(report, decimals: int = 3) -> List[str]:
    lines = []
    if report.descriptives is not None:
        lines += ["DESCRIPTIVE STATISTICS", THIN]
        lines += _table(report.descriptives[['n', 'mean', 'sd', 'min', 'max']], 2)
        lines.append("")
    if report.correlations is not None:
        lines += ["CORRELATIONS (pairwise complete, p in parentheses)", THIN]
        r, p = report.correlations.r, report.correlations.p
        cells = r.copy().astype(object)
        for a in r.index:
            for b in r.columns:
                cells.loc[a, b] = f"{_num(r.loc[a, b], 2)} ({_p(p.loc[a, b])})" if a != b else _num(r.loc[a, a], 2)
        lines += ["  " + line for line in cells.to_string().splitlines()]
        lines.append("")
    if report.has_icc:
        lines += ["INTRACLASS CORRELATION", THIN,
                  f"  tau00 = {_num(report.tau00, 2)}    sigma2 = {_num(report.sigma2, 2)}",
                  f"  ICC                         {_num(report.icc, 3):>10}  ({report.icc_band})"]
        if report.design_effect is not None:
            lines.append(f"  Design effect               {_num(report.design_effect_stepwise, 2):>10}"
                         f"  (ICC rounded to 3 d.p., n_bar = {_num(report.n_bar, 2)};"
                         f" {_num(report.design_effect, 3)} unrounded)")
        if report.effective_sample_size is not None:
            lines.append(f"  Effective sample size       {_num(report.effective_sample_size_stepwise, 1):>10}"
                         f"  (design effect rounded to 2 d.p.;"
                         f" {_num(report.effective_sample_size, 1)} unrounded, rounds to"
                         f" {report.effective_sample_size_rounded})")
        lines.append("")
    if report.r2_total is not None:
        lines += ["VARIANCE EXPLAINED (against the unconditional model)", THIN]
        for key, label in (('r2_level1', 'Level 1'), ('r2_level2', 'Level 2'), ('r2_total', 'Total')):
            flag = "  *negative*" if report.negative_variance_explained.get(key) else ""
            lines.append(f"  {label:<28}{_num(100 * getattr(report, key), 1):>9}%{flag}")
        lines.append("")
    return lines


def pooled_text(pooled, decimals: int = 3) -> List[str]:
    title = "RUBIN'S RULES" if pooled.mode == 'rubin' else "AVERAGE-PV MODE (non-canonical)"
    lines = [RULE, f"PLAUSIBLE VALUES: {title}, M = {pooled.M}", RULE]
    table = pd.DataFrame([{'effect': pe.name, 'estimate': pe.estimate, 'se': pe.se,
                           'within': pe.within, 'between': pe.between, 'total': pe.total,
                           'df': pe.df, 'p': _p(pe.p)} for pe in pooled.fixed])
    lines += _table(table.set_index('effect'), decimals)
    lines += ["", "  Mean variance components across fits:"]
    for k in range(pooled.tau_mean.shape[0]):
        lines.append(f"    tau{k}{k:<24}{_num(pooled.tau_mean[k, k], 2):>14}")
    lines.append(f"    {'sigma2':<27}{_num(pooled.sigma2_mean, 2):>14}")
    lines.append(f"    {'reliability':<27}{_num(pooled.reliability_mean, 3):>14}")
    lines.append("")
    for m, result in enumerate(pooled.fits, start=1):
        lines += [f"Fit {m} of {len(pooled.fits)}"] + fit_text(result, decimals)
    return lines


def deletion_text(report) -> List[str]:
    return [f"  Listwise deletion: {report.rows_before} → {report.rows_after} rows, "
            f"{report.groups_before} → {report.groups_after} groups", ""]


class ReportWriter:
    """Collects sections for one command, renders them, then writes once."""

    def __init__(self, fmt: str = 'text', schema_version: int = 1, decimals: int = 3):
        if fmt not in FORMATS:
            raise ValueError(f"format must be one of {FORMATS}")
        self.fmt = fmt
        self.schema_version = schema_version
        self.decimals = decimals
        self.sections: Dict[str, object] = {}
        self.text: List[str] = []

    def add(self, key: str, structured, text_lines: Optional[List[str]] = None) -> None:
        self.sections[key] = structured
        if text_lines:
            self.text.extend(text_lines)

    def render(self, command: str) -> str:
        if self.fmt == 'structured':
            document = {'schema': f"hlm-report/{self.schema_version}", 'command': command}
            document.update(self.sections)
            return yaml.safe_dump(to_builtin(document), sort_keys=False, allow_unicode=True,
                                  default_flow_style=False)
        return "\n".join(self.text).rstrip() + "\n"

    def write(self, command: str, out: Optional[str] = None) -> str:
        rendered = self.render(command)
        if out:
            path = Path(out)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(rendered)
            logger.info(f"✓ Report written to {path}")
        else:
            sys.stdout.write(rendered)
        return rendered
