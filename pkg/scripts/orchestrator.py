"""
Main Orchestrator for the Two-Level HLM Workflow

Command-line front end over the pipeline:
1. recode    - apply a codebook to a raw survey extract
2. fit       - listwise deletion, centering, mixed-model fit, variance tests, reliability
3. diagnose  - descriptives, correlations, ICC / design effect / effective N
4. simulate  - synthetic two-level data from a preset or sim config
5. pool      - one fit per plausible value, combined with Rubin's rules
6. tutorial  - the Model 0 → Model 5 sequence on simulated data

Exit codes: 0 success, 2 codebook parse error, 3 unmapped category,
4 non-convergence, 5 spec/data mismatch or missing input.
"""

import argparse
import io
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional

# Add scripts directory to path
sys.path.append(str(Path(__file__).parent))

from classifiers.recoder import apply_codebook
from common.errors import ConvergenceError, DataLoadError, HLMWorkflowError, ModelSpecError
from common.settings import configure_logging, load_settings
from estimators.diagnostics import build_report
from estimators.hlm_estimator import (EstimationOptions, drop_invariant_slopes, fit,
                                      fit_random_slopes, prepare_analysis_data)
from estimators.plausible_values import PlausibleValueSet, fit_pooled
from parsers.codebook_parser import parse_codebook
from parsers.csv_processor import load_csv
from parsers.spec_parser import parse_model_spec, parse_sim_config
from reports.report_writer import (FORMATS, ReportWriter, audit_section, deletion_text,
                                   diagnostics_section, diagnostics_text, fit_section, fit_text,
                                   pooled_section, pooled_text)
from simulators.simulator import load_preset, simulate

logger = logging.getLogger(__name__)

MODELS_DIR = Path(__file__).resolve().parents[1] / "config" / "models"
MISMATCH_EXIT = 5


@dataclass(frozen=True)
class RunManifest:
    """Everything one invocation reads and writes."""
    subcommand: str
    data: Optional[str] = None
    codebook: Optional[str] = None
    model: Optional[str] = None
    null_model: Optional[str] = None
    sim_config: Optional[str] = None
    output_format: str = 'text'
    out: Optional[str] = None
    report: Optional[str] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if self.output_format not in FORMATS:
            raise ModelSpecError(f"format must be one of {FORMATS}")
        for label in ('data', 'codebook', 'model', 'null_model', 'sim_config'):
            path = getattr(self, label)
            if path is not None and not Path(path).exists():
                raise DataLoadError(f"--{label.replace('_', '-')} path does not exist: {path}")

    @classmethod
    def from_args(cls, args: argparse.Namespace, default_format: str) -> "RunManifest":
        return cls(
            subcommand=args.command,
            data=getattr(args, 'data', None),
            codebook=getattr(args, 'codebook', None),
            model=getattr(args, 'model', None),
            null_model=getattr(args, 'null_model', None),
            sim_config=getattr(args, 'sim_config', None),
            output_format=getattr(args, 'format', None) or default_format,
            out=getattr(args, 'out', None),
            report=getattr(args, 'report', None),
            seed=getattr(args, 'seed', None),
        )


class HLMWorkflowOrchestrator:
    def __init__(self, config_path: Optional[str] = None):
        """Initialize orchestrator."""
        self.config = load_settings(config_path)
        self.options = EstimationOptions.from_settings(self.config)
        output = self.config.get('output', {})
        self.default_format = output.get('format', 'text')
        self.schema_version = output.get('schema_version', 1)
        self.decimals = output.get('decimals', 3)

    # -- helpers ------------------------------------------------------------

    def _writer(self, manifest: RunManifest) -> ReportWriter:
        return ReportWriter(manifest.output_format, self.schema_version, self.decimals)

    def _cluster(self, args) -> str:
        return getattr(args, 'cluster', None) or self.config['data']['cluster_column']

    def _load(self, path: str, args, numeric: bool = True):
        return load_csv(path, cluster_column=self._cluster(args),
                        sentinels=self.config['data'].get('missing_sentinels', ["", "NA"]),
                        numeric=numeric)

    def _spec(self, path):
        return parse_model_spec(path, defaults=self.config.get('estimation', {}))

    # -- subcommands --------------------------------------------------------

    def cmd_recode(self, args) -> int:
        manifest = RunManifest.from_args(args, self.default_format)
        if manifest.data is None or manifest.codebook is None or manifest.out is None:
            raise ModelSpecError("recode needs --data, --codebook and --out")

        rules = parse_codebook(manifest.codebook)
        ds = self._load(manifest.data, args, numeric=False)
        recoded, audit = apply_codebook(ds, rules)

        buffer = io.StringIO()
        recoded.frame.to_csv(buffer, index=False)
        writer = self._writer(manifest)
        writer.add('recode', {'rows': recoded.n_rows, 'rules': audit_section(audit)},
                   ["RECODE AUDIT", "-" * 80] + ["  " + line for line in audit.to_string(index=False).splitlines()])

        Path(manifest.out).parent.mkdir(parents=True, exist_ok=True)
        Path(manifest.out).write_text(buffer.getvalue())
        logger.info(f"✓ Recoded data written to {manifest.out}")
        writer.write('recode', manifest.report)
        return 0

    def cmd_fit(self, args) -> int:
        manifest = RunManifest.from_args(args, self.default_format)
        if manifest.data is None or manifest.model is None:
            raise ModelSpecError("fit needs --data and --model")

        spec = self._spec(manifest.model)
        null_spec = self._spec(manifest.null_model) if manifest.null_model else None
        ds = self._load(manifest.data, args)
        extra = null_spec.model_variables if null_spec else ()
        analysis, deletion = prepare_analysis_data(spec, ds, extra_vars=extra)

        result = fit_random_slopes(spec, analysis, self.options)
        null_result = fit(null_spec, analysis, self.options) if null_spec else None
        icc_source = null_result or (result if not spec.predictors else None)
        report = build_report(null_fit=icc_source,
                              model_fit=result if null_result is not None else None,
                              icc_bands=self.config.get('diagnostics', {}).get('icc_bands'))

        writer = self._writer(manifest)
        writer.add('deletion', deletion.to_dict(), deletion_text(deletion))
        writer.add('fit', fit_section(result), fit_text(result, self.decimals))
        if null_result is not None:
            writer.add('null_fit', fit_section(null_result), fit_text(null_result, self.decimals))
        writer.add('diagnostics', diagnostics_section(report), diagnostics_text(report, self.decimals))
        writer.write('fit', manifest.out)
        return 0

    def cmd_diagnose(self, args) -> int:
        manifest = RunManifest.from_args(args, self.default_format)
        ds, variables, null_result = None, [], None

        if manifest.data is not None:
            ds = self._load(manifest.data, args)
            if args.vars is None:
                variables = [v for v in ds.variables if v != ds.cluster_column]
            else:
                variables = [v.strip() for v in args.vars.split(',') if v.strip()]
            if not variables:
                raise ModelSpecError("empty variable list")
            if manifest.model is not None:
                spec = self._spec(manifest.model)
                analysis, _ = prepare_analysis_data(spec, ds)
                null_result = fit(spec, analysis, self.options)

        explicit = (args.tau00, args.sigma2)
        if ds is None and None in explicit:
            raise ModelSpecError("diagnose needs --data or both --tau00 and --sigma2")

        report = build_report(ds=ds, variables=variables, null_fit=null_result,
                              tau00=args.tau00, sigma2=args.sigma2, n_bar=args.n_bar,
                              n_total=args.n_total,
                              icc_bands=self.config.get('diagnostics', {}).get('icc_bands'))
        writer = self._writer(manifest)
        writer.add('diagnostics', diagnostics_section(report),
                   ["=" * 80, "DIAGNOSTICS", "=" * 80] + diagnostics_text(report, self.decimals))
        writer.write('diagnose', manifest.out)
        return 0

    def cmd_simulate(self, args) -> int:
        manifest = RunManifest.from_args(args, self.default_format)
        if manifest.sim_config:
            cfg = parse_sim_config(manifest.sim_config, seed=manifest.seed,
                                   cluster_column=self.config['simulation']['default_cluster_column'])
        else:
            cfg = load_preset(args.preset or 'paper-model0', self.config, seed=manifest.seed)

        ds = simulate(cfg)
        buffer = io.StringIO()
        ds.frame.to_csv(buffer, index=False)
        if manifest.out:
            Path(manifest.out).parent.mkdir(parents=True, exist_ok=True)
            Path(manifest.out).write_text(buffer.getvalue())
            logger.info(f"✓ Simulated data written to {manifest.out}")
        else:
            sys.stdout.write(buffer.getvalue())
        return 0

    def cmd_pool(self, args) -> int:
        manifest = RunManifest.from_args(args, self.default_format)
        if manifest.data is None or manifest.model is None:
            raise ModelSpecError("pool needs --data and --model")

        spec = self._spec(manifest.model)
        columns = [c.strip() for c in args.pv.split(',') if c.strip()] if args.pv else list(spec.plausible_values)
        pvs = PlausibleValueSet(tuple(columns))
        ds = self._load(manifest.data, args)
        pooled = fit_pooled(spec, ds, pvs, self.options,
                            workers=self.config.get('plausible_values', {}).get('workers', 1),
                            mode='average-pv' if args.average_pv else 'rubin')

        writer = self._writer(manifest)
        writer.add('deletion', pooled.deletion.to_dict(), deletion_text(pooled.deletion))
        writer.add('pooled', pooled_section(pooled), pooled_text(pooled, self.decimals))
        writer.write('pool', manifest.out)
        return 0

    def cmd_tutorial(self, args) -> int:
        manifest = RunManifest.from_args(args, self.default_format)
        text, structured = run_tutorial(self, seed=manifest.seed)
        writer = self._writer(manifest)
        writer.add('tutorial', structured, text)
        writer.write('tutorial', manifest.out)
        return 0


def run_tutorial(orchestrator: HLMWorkflowOrchestrator, seed: Optional[int] = None):
    """Replay the unconditional → final-model sequence on the paper-model5 preset."""
    config, options = orchestrator.config, orchestrator.options
    ds = simulate(load_preset('paper-model5', config, seed=seed))
    specs = {n: orchestrator._spec(MODELS_DIR / f"model{n}.txt") for n in range(6)}

    lines = ["=" * 80, "TUTORIAL: UNCONDITIONAL MODEL TO MEANS-AS-OUTCOMES MODEL", "=" * 80,
             f"  Simulated preset paper-model5: N = {ds.n_rows} students, seed "
             f"{seed if seed is not None else config['simulation']['presets']['paper-model5']['seed']}",
             "  Numbers below come from simulated data and will not match the published table.", ""]
    structured = {'N': ds.n_rows, 'models': {}}
    fits = {}

    fits[0] = fit(specs[0], ds, options)
    null = fits[0]
    report = build_report(null_fit=null)
    lines += [f"Model 0 (unconditional): intercept {null.fixed[0].gamma_hat:.2f}, "
              f"tau00 {null.vc.tau00:.2f}, sigma2 {null.vc.sigma2:.2f}",
              f"  ICC {report.icc:.3f}: {100 * report.icc:.1f}% of the variance lies between schools",
              f"  Design effect {report.design_effect:.2f}, effective sample size "
              f"{report.effective_sample_size:.1f}",
              f"  Intercept reliability {null.reliability_mean:.3f}", ""]

    for n in (1, 2):
        fits[n] = fit(specs[n], ds, options)
        explained = build_report(null_fit=null, model_fit=fits[n])
        slopes = ", ".join(f"{fe.name} {fe.gamma_hat:.2f} (SE {fe.se:.2f}, p {fe.p:.3f})"
                           for fe in fits[n].fixed[1:])
        lines += [f"Model {n}: {slopes}",
                  f"  Reliability {fits[n].reliability_mean:.3f}; level-1 variance explained "
                  f"{100 * explained.r2_level1:.1f}%, total {100 * explained.r2_total:.1f}%", ""]

    try:
        fits[3] = fit_random_slopes(specs[3], ds, options)
        tests = ", ".join(f"{t.effect} p {t.p:.3f}" for t in fits[3].vc_tests[1:])
        lines.append(f"Model 3 (random slopes): slope-variance tests {tests}")
        spec4 = drop_invariant_slopes(specs[3], fits[3], config['diagnostics']['significance_level'])
        spec4 = replace(spec4, name=specs[4].name)
    except ConvergenceError as e:
        lines.append(f"Model 3 (random slopes) did not converge ({e}); slopes fixed")
        spec4 = specs[4]
    random_left = spec4.random_slopes
    lines += [f"  Slopes kept random: {', '.join(random_left) if random_left else 'none'}", ""]

    fits[4] = fit(spec4, ds, options)
    lines += [f"Model 4 (finalized level-1 model): intercept {fits[4].fixed[0].gamma_hat:.2f}", ""]

    fits[5] = fit(specs[5], ds, options)
    explained = build_report(null_fit=null, model_fit=fits[5])
    lines += [f"Model 5 (level-2 predictors of the intercept): intercept {fits[5].fixed[0].gamma_hat:.2f}",
              "  " + ", ".join(f"{fe.name} {fe.gamma_hat:.2f}" for fe in fits[5].fixed[1:]),
              f"  Reliability {fits[5].reliability_mean:.3f}; variance explained: level 1 "
              f"{100 * explained.r2_level1:.1f}%, level 2 {100 * explained.r2_level2:.1f}%, "
              f"total {100 * explained.r2_total:.1f}%", ""]

    pvs = PlausibleValueSet(tuple(c for c in ds.variables if c.startswith('math_pv')))
    pooled = fit_pooled(specs[5], ds, pvs, options,
                        workers=config.get('plausible_values', {}).get('workers', 1))
    lines += [f"Model 5 pooled over {pvs.M} plausible values (Rubin's rules): intercept "
              f"{pooled.fixed[0].estimate:.2f} (SE {pooled.fixed[0].se:.2f})",
              "  The averaged-PV alternative (pool --average-pv) is a sensitivity check only.", ""]

    for n, result in fits.items():
        structured['models'][f"model{n}"] = fit_section(result)
    structured['pooled_model5'] = pooled_section(pooled)
    return lines, structured


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Two-level HLM workflow')
    parser.add_argument('--config', help='Settings YAML (default config/settings.yaml)')
    parser.add_argument('--quiet', action='store_true', help='Only log warnings and errors')
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p, data=True):
        if data:
            p.add_argument('--data', help='Survey CSV or .xlsx extract')
            p.add_argument('--cluster', help='Cluster-id column (default from settings)')
        p.add_argument('--format', choices=FORMATS, help='Report format')
        p.add_argument('--out', help='Output path (default stdout)')

    p = sub.add_parser('recode', help='Apply a codebook to raw data')
    common(p)
    p.add_argument('--codebook', help='Codebook file')
    p.add_argument('--report', help='Audit report path (default stdout)')

    p = sub.add_parser('fit', help='Fit a two-level model')
    common(p)
    p.add_argument('--model', help='Model-spec file')
    p.add_argument('--null-model', help='Unconditional model spec for variance explained')

    p = sub.add_parser('diagnose', help='Descriptives, correlations and ICC block')
    common(p)
    p.add_argument('--vars', help='Comma-separated variables (default all)')
    p.add_argument('--model', help='Unconditional model spec supplying tau00/sigma2')
    p.add_argument('--tau00', type=float)
    p.add_argument('--sigma2', type=float)
    p.add_argument('--n-bar', type=float)
    p.add_argument('--n-total', type=float)

    p = sub.add_parser('simulate', help='Generate synthetic two-level data')
    common(p, data=False)
    p.add_argument('--preset', help='Preset name from settings (default paper-model0)')
    p.add_argument('--sim-config', help='Sim-config file (overrides --preset)')
    p.add_argument('--seed', type=int)

    p = sub.add_parser('pool', help="Fit per plausible value and pool with Rubin's rules")
    common(p)
    p.add_argument('--model', help='Model-spec file')
    p.add_argument('--pv', help='Comma-separated plausible-value columns (default from spec)')
    p.add_argument('--average-pv', action='store_true',
                   help='Fit the mean of the PVs instead (non-canonical)')

    p = sub.add_parser('tutorial', help='Model 0 to Model 5 walkthrough on simulated data')
    common(p, data=False)
    p.add_argument('--seed', type=int)
    return parser


COMMANDS = {
    'recode': HLMWorkflowOrchestrator.cmd_recode,
    'fit': HLMWorkflowOrchestrator.cmd_fit,
    'diagnose': HLMWorkflowOrchestrator.cmd_diagnose,
    'simulate': HLMWorkflowOrchestrator.cmd_simulate,
    'pool': HLMWorkflowOrchestrator.cmd_pool,
    'tutorial': HLMWorkflowOrchestrator.cmd_tutorial,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        orchestrator = HLMWorkflowOrchestrator(args.config)
        configure_logging(orchestrator.config, verbose=False if args.quiet else None)
        return COMMANDS[args.command](orchestrator, args)
    except HLMWorkflowError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    except (ValueError, KeyError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return MISMATCH_EXIT


if __name__ == '__main__':
    sys.exit(main())
