"""
Data Validation Script

Run this BEFORE fitting to check a survey extract against a model spec.

Usage:
    python scripts/validate_data.py --data data/processed/timss_recoded.csv --model config/models/model5.txt
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

sys.path.append(str(Path(__file__).parent))

from common.errors import HLMWorkflowError
from common.settings import load_settings
from parsers.csv_processor import Dataset, build_group_index, listwise_delete, load_csv
from parsers.spec_parser import parse_model_spec


class DataValidator:
    def __init__(self, data_path: str, model_path: str, config_path: Optional[str] = None,
                 cluster_column: Optional[str] = None):
        self.config = load_settings(config_path)
        self.data_path = Path(data_path)
        self.model_path = Path(model_path)
        self.cluster_column = cluster_column or self.config['data']['cluster_column']
        self.errors: List[str] = []
        self.warnings: List[str] = []
        self.info: List[str] = []

    def validate_all(self) -> bool:
        """Run every check. Returns True if the model can be fitted."""
        print("=" * 80)
        print("DATA VALIDATION CHECK")
        print("=" * 80)
        print()

        try:
            spec = parse_model_spec(self.model_path, self.config.get('estimation', {}))
            self.info.append(f"✅ {self.model_path.name} parsed: {spec.label}")
            raw = load_csv(self.data_path, cluster_column=self.cluster_column,
                           sentinels=self.config['data'].get('missing_sentinels', ["", "NA"]),
                           numeric=False)
        except HLMWorkflowError as e:
            self.errors.append(f"❌ {e}")
            self.print_results()
            return False

        index = build_group_index(raw)
        self.info.append(f"✅ {self.data_path.name} - {raw.n_rows} rows in {index.J} groups "
                         f"(mean size {index.n_bar:.2f})")

        variables = list(dict.fromkeys(list(spec.model_variables) + list(spec.plausible_values)))
        missing_cols = [v for v in variables if not raw.has(v)]
        if missing_cols:
            self.errors.append(f"❌ Model variables absent from data: {missing_cols}")
            self.print_results()
            return False

        numeric = self.coerce_numeric(raw, variables)
        self.validate_missing(numeric, variables)
        analysis = self.validate_deletion(numeric, variables, len(spec.predictors) + 1)
        if analysis is not None:
            self.validate_level2(analysis, spec.level2_intercept_predictors)
            self.validate_variation(analysis, spec.predictors)
            self.validate_group_sizes(analysis, 1 + len(spec.random_slopes))

        self.print_results()
        return len(self.errors) == 0

    def coerce_numeric(self, raw: Dataset, variables: List[str]) -> Dataset:
        """Parse model variables as reals; warn about text cells that become missing."""
        frame = raw.frame.copy()
        for name in variables:
            parsed = pd.to_numeric(frame[name].str.strip(), errors='coerce')
            unparsed = int((frame[name].notna() & parsed.isna()).sum())
            if unparsed:
                self.warnings.append(f"⚠️  '{name}': {unparsed} non-numeric cells will be treated as missing")
            frame[name] = parsed
        return Dataset(frame, raw.cluster_column)

    def validate_missing(self, ds: Dataset, variables: List[str]):
        for name in variables:
            count = int(ds.missing_mask(name).sum())
            if count:
                self.warnings.append(f"⚠️  '{name}': {count} missing cells ({100 * count / ds.n_rows:.1f}%)")

    def validate_deletion(self, ds: Dataset, variables: List[str], p: int) -> Optional[Dataset]:
        try:
            kept, report = listwise_delete(ds, variables)
        except HLMWorkflowError as e:
            self.errors.append(f"❌ {e}")
            return None
        self.info.append(f"✅ Listwise deletion keeps {report.rows_after} of {report.rows_before} rows, "
                         f"{report.groups_after} of {report.groups_before} groups")
        if report.groups_after < 2:
            self.errors.append("❌ J ≥ 2 required after deletion")
        if report.rows_after <= p + 2:
            self.errors.append(f"❌ N = {report.rows_after} must exceed the number of fixed effects + 2")
        return kept

    def validate_level2(self, ds: Dataset, level2: List[str]):
        index = build_group_index(ds)
        for name in level2:
            x = ds.values(name)
            varying = [label for label, rows in index.groups if np.ptp(x[rows]) > 0]
            if varying:
                self.errors.append(f"❌ Level-2 predictor '{name}' varies within {len(varying)} groups "
                                   f"(first: {varying[0]})")
            else:
                self.info.append(f"✅ '{name}' is constant within groups")

    def validate_variation(self, ds: Dataset, predictors: List[str]):
        for name in predictors:
            if np.ptp(ds.values(name)) == 0:
                self.errors.append(f"❌ Predictor '{name}' is constant; the design would be singular")

    def validate_group_sizes(self, ds: Dataset, q: int):
        sizes = build_group_index(ds).sizes
        small = int((sizes <= q).sum())
        if small:
            self.warnings.append(f"⚠️  {small} groups have ≤ {q} rows and are excluded from the "
                                 f"variance chi-square tests")

    def print_results(self):
        """Print validation results."""
        print()
        print("=" * 80)
        print("VALIDATION RESULTS")
        print("=" * 80)
        print()

        if self.errors:
            print("🔴 ERRORS (Must fix before fitting):")
            print("-" * 80)
            for error in self.errors:
                print(f"  {error}")
            print()

        if self.warnings:
            print("🟡 WARNINGS (Listwise deletion will handle these):")
            print("-" * 80)
            for warning in self.warnings:
                print(f"  {warning}")
            print()

        if self.info:
            print("🟢 INFO:")
            print("-" * 80)
            for info in self.info:
                print(f"  {info}")
            print()

        print("=" * 80)
        print("SUMMARY")
        print("=" * 80)
        print(f"Errors:   {len(self.errors)}")
        print(f"Warnings: {len(self.warnings)}")
        print()

        if len(self.errors) == 0:
            print("✅ VALIDATION PASSED - Ready to fit!")
            print()
            print("Next step:")
            print(f"  python scripts/orchestrator.py fit --data {self.data_path} --model {self.model_path}")
        else:
            print("❌ VALIDATION FAILED - Fix errors before fitting")
            print()
            print("Tips:")
            print("  1. Check docs/schema.md for the CSV and model-spec formats")
            print("  2. Run the recode step first if the extract still holds raw labels")
            print("  3. Ensure column names match the model spec exactly")

        print("=" * 80)


def main(argv: Optional[List[str]] = None) -> int:
    """Main execution."""
    parser = argparse.ArgumentParser(description='Check a survey extract against a model spec')
    parser.add_argument('--data', required=True, help='Survey CSV or .xlsx extract')
    parser.add_argument('--model', required=True, help='Model-spec file')
    parser.add_argument('--cluster', help='Cluster-id column (default from settings)')
    parser.add_argument('--config', help='Settings YAML')
    args = parser.parse_args(argv)

    validator = DataValidator(args.data, args.model, args.config, args.cluster)
    return 0 if validator.validate_all() else 1


if __name__ == "__main__":
    sys.exit(main())
