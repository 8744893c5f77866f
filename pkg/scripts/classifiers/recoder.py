"""
Questionnaire Recoding Engine

Turns raw questionnaire responses into analysis variables:
- Categorical maps (parent education → 0-5 points, school location → 1/0/-1)
- Composite sums of yes/no items (home possessions)
- Ordinal comparisons of two percentage bands (student economic background)

Rules are data, parsed from a codebook file (see parsers/codebook_parser.py).
Every transform is row-local and returns a new Dataset.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from common.errors import MissingColumnError, UnmappedCategoryError
from parsers.csv_processor import Dataset

logger = logging.getLogger(__name__)

UNMAPPED_POLICIES = ('error', 'missing')
LOCATION_SCORES = (1.0, 0.0, -1.0)


def normalize_code(value) -> str:
    """Canonical string form of a category code: '1', '1.0' and 1 all become '1'."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    text = str(value).strip()
    try:
        number = float(text)
    except ValueError:
        return text
    if math.isfinite(number) and number == int(number):
        return str(int(number))
    return text


@dataclass(frozen=True)
class CategoricalMap:
    variable: str
    mapping: Tuple[Tuple[str, float], ...]
    unmapped_policy: str = 'error'
    output: str = None

    def __post_init__(self):
        codes = [normalize_code(code) for code, _ in self.mapping]
        if len(set(codes)) != len(codes):
            raise ValueError(f"duplicate source codes in map for '{self.variable}'")
        if not all(math.isfinite(score) for _, score in self.mapping):
            raise ValueError(f"non-finite target score in map for '{self.variable}'")
        if self.unmapped_policy not in UNMAPPED_POLICIES:
            raise ValueError(f"unmapped policy must be one of {UNMAPPED_POLICIES}")

    @property
    def target(self) -> str:
        return self.output or self.variable

    def lookup(self) -> dict:
        return {normalize_code(code): float(score) for code, score in self.mapping}


@dataclass(frozen=True)
class CompositeSumRule:
    output: str
    items: Tuple[str, ...]
    yes_code: str
    no_code: str


@dataclass(frozen=True)
class OrdinalCompareRule:
    output: str
    left: str
    right: str


@dataclass(frozen=True)
class SchoolLocationMap:
    """A categorical map whose scores are restricted to {1, 0, -1}."""
    rule: CategoricalMap


CodebookRule = Union[CategoricalMap, CompositeSumRule, OrdinalCompareRule, SchoolLocationMap]


def apply_categorical_map(ds: Dataset, rule: CategoricalMap) -> Dataset:
    """Append (or replace) rule.target with mapped scores; missing stays missing."""
    if not ds.has(rule.variable):
        raise MissingColumnError(rule.variable)

    keys = ds.frame[rule.variable].map(normalize_code)
    scores = keys.map(rule.lookup()).astype(float)

    unmapped = keys.notna() & scores.isna()
    if unmapped.any():
        if rule.unmapped_policy == 'error':
            row = int(np.flatnonzero(unmapped.to_numpy())[0])
            raise UnmappedCategoryError(rule.variable, str(ds.frame[rule.variable].iloc[row]), row)
        logger.warning(f"{int(unmapped.sum())} unmapped '{rule.variable}' cells set to missing")

    return ds.with_column(rule.target, scores.to_numpy())


def apply_school_location_map(ds: Dataset, rule: CategoricalMap) -> Dataset:
    bad = [score for _, score in rule.mapping if float(score) not in LOCATION_SCORES]
    if bad:
        raise ValueError(f"school location scores must be 1, 0 or -1, got {bad}")
    return apply_categorical_map(ds, rule)


def _binary_item(ds: Dataset, item: str, yes_code: str, no_code: str) -> np.ndarray:
    keys = ds.frame[item].map(normalize_code)
    scored = np.full(ds.n_rows, np.nan)
    scored[(keys == normalize_code(yes_code)).to_numpy()] = 1.0
    scored[(keys == normalize_code(no_code)).to_numpy()] = 0.0
    return scored


def apply_composite_sum(ds: Dataset, rule: CompositeSumRule) -> Dataset:
    """Sum of yes(1)/no(0) items; any missing or off-code item makes the row missing."""
    for item in rule.items:
        if not ds.has(item):
            raise MissingColumnError(item)

    scored = np.column_stack([_binary_item(ds, item, rule.yes_code, rule.no_code)
                              for item in rule.items])
    # NaN propagates through the row sum
    return ds.with_column(rule.output, scored.sum(axis=1))


def apply_ordinal_compare(ds: Dataset, rule: OrdinalCompareRule) -> Dataset:
    """1 if left band > right band, -1 if lower, 0 if tied; missing if either is missing."""
    ds.require([rule.left, rule.right])
    left = ds.values(rule.left)
    right = ds.values(rule.right)
    return ds.with_column(rule.output, np.sign(left - right))


def apply_rule(ds: Dataset, rule: CodebookRule) -> Dataset:
    if isinstance(rule, SchoolLocationMap):
        return apply_school_location_map(ds, rule.rule)
    if isinstance(rule, CategoricalMap):
        return apply_categorical_map(ds, rule)
    if isinstance(rule, CompositeSumRule):
        return apply_composite_sum(ds, rule)
    if isinstance(rule, OrdinalCompareRule):
        return apply_ordinal_compare(ds, rule)
    raise TypeError(f"unknown rule type {type(rule).__name__}")


def rule_output(rule: CodebookRule) -> str:
    if isinstance(rule, SchoolLocationMap):
        return rule.rule.target
    if isinstance(rule, CategoricalMap):
        return rule.target
    return rule.output


RULE_KINDS = {
    CategoricalMap: 'map',
    SchoolLocationMap: 'location',
    CompositeSumRule: 'sum',
    OrdinalCompareRule: 'compare',
}


def apply_codebook(ds: Dataset, rules: Sequence[CodebookRule]) -> Tuple[Dataset, pd.DataFrame]:
    """Apply rules in codebook order; returns the recoded dataset and an audit table."""
    audit: List[dict] = []

    for number, rule in enumerate(rules, start=1):
        ds = apply_rule(ds, rule)
        output = rule_output(rule)
        scored = int(ds.frame[output].notna().sum())
        audit.append({
            'rule': number,
            'kind': RULE_KINDS[type(rule)],
            'output': output,
            'rows_scored': scored,
            'rows_missing': ds.n_rows - scored,
        })
        logger.info(f"✓ Rule {number} ({RULE_KINDS[type(rule)]}) → {output}: {scored} rows scored")

    return ds, pd.DataFrame(audit, columns=['rule', 'kind', 'output', 'rows_scored', 'rows_missing'])
