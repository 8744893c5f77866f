"""
Survey CSV Processor for the two-level HLM workflow

Owns the columnar dataset and its two-level nesting:
- Loading CSV (or .xlsx) extracts with configurable missing sentinels
- Building the cluster index (groups in first-appearance order)
- Listwise deletion on the model variables
- Grand-mean centering of predictors
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from common.errors import (CenteringError, DataLoadError, EmptyDatasetError,
                           MissingColumnError, RaggedRowError)

logger = logging.getLogger(__name__)

DEFAULT_SENTINELS = ("", "NA")


@dataclass(frozen=True)
class Dataset:
    """Columnar table; NaN marks a missing cell. Never mutated after construction."""
    frame: pd.DataFrame
    cluster_column: str

    def __post_init__(self):
        if self.cluster_column not in self.frame.columns:
            raise MissingColumnError(self.cluster_column, "dataset (cluster column absent)")
        if self.frame.columns.duplicated().any():
            dupes = list(self.frame.columns[self.frame.columns.duplicated()])
            raise DataLoadError(f"duplicate variable names: {dupes}")
        if self.frame[self.cluster_column].isna().any():
            row = int(np.flatnonzero(self.frame[self.cluster_column].isna().to_numpy())[0])
            raise DataLoadError(f"cluster column '{self.cluster_column}' is missing at row {row}")

    @property
    def n_rows(self) -> int:
        return len(self.frame)

    @property
    def variables(self) -> List[str]:
        return list(self.frame.columns)

    def has(self, name: str) -> bool:
        return name in self.frame.columns

    def require(self, names: Iterable[str]) -> None:
        for name in names:
            if name not in self.frame.columns:
                raise MissingColumnError(name)

    def values(self, name: str) -> np.ndarray:
        """Numeric view of a column (NaN for missing)."""
        self.require([name])
        return pd.to_numeric(self.frame[name], errors='coerce').to_numpy(dtype=float)

    def missing_mask(self, name: str) -> np.ndarray:
        self.require([name])
        return self.frame[name].isna().to_numpy()

    def cluster_ids(self) -> np.ndarray:
        return self.frame[self.cluster_column].astype(str).to_numpy()

    def with_column(self, name: str, values) -> "Dataset":
        frame = self.frame.copy()
        frame[name] = values
        return Dataset(frame, self.cluster_column)

    def select_rows(self, mask: np.ndarray) -> "Dataset":
        frame = self.frame.loc[np.asarray(mask, dtype=bool)].reset_index(drop=True)
        return Dataset(frame, self.cluster_column)

    def to_csv(self, path) -> None:
        self.frame.to_csv(path, index=False)


@dataclass(frozen=True)
class GroupIndex:
    """Level-2 units in first-appearance order with their row positions."""
    groups: Tuple[Tuple[str, np.ndarray], ...]

    @property
    def J(self) -> int:
        return len(self.groups)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(rows) for _, rows in self.groups], dtype=int)

    @property
    def N(self) -> int:
        return int(self.sizes.sum())

    @property
    def n_bar(self) -> float:
        return self.N / self.J

    @property
    def labels(self) -> List[str]:
        return [label for label, _ in self.groups]


@dataclass(frozen=True)
class CenteredVariable:
    name: str
    values: np.ndarray
    grand_mean: float


@dataclass(frozen=True)
class DeletionReport:
    variables: Tuple[str, ...]
    rows_before: int
    rows_after: int
    groups_before: int
    groups_after: int
    missing_by_variable: dict = field(default_factory=dict)

    @property
    def rows_deleted(self) -> int:
        return self.rows_before - self.rows_after

    @property
    def groups_deleted(self) -> int:
        return self.groups_before - self.groups_after

    def to_dict(self) -> dict:
        return {
            'variables': list(self.variables),
            'rows_before': self.rows_before,
            'rows_after': self.rows_after,
            'rows_deleted': self.rows_deleted,
            'groups_before': self.groups_before,
            'groups_after': self.groups_after,
            'groups_deleted': self.groups_deleted,
            'missing_by_variable': {k: int(v) for k, v in self.missing_by_variable.items()},
        }


def _check_field_counts(path: Path) -> None:
    """Reject rows whose field count differs from the header's."""
    with open(path, 'r', newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise DataLoadError(f"{path}: no header row")
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise RaggedRowError(row_no, len(header), len(row))


def load_csv(path, schema: Optional[Sequence[str]] = None, cluster_column: str = None,
             sentinels: Sequence[str] = DEFAULT_SENTINELS, numeric: bool = True) -> Dataset:
    """
    Load a survey extract into a Dataset.

    Cells equal to a sentinel become missing. With numeric=True every column
    except the cluster column is parsed as decimal reals and unparseable cells
    become missing; numeric=False keeps raw text codes for recoding.
    """
    path = Path(path)
    if not path.exists():
        raise DataLoadError(f"data file not found: {path}")

    logger.info(f"Loading survey extract {path}...")

    if path.suffix.lower() in ('.xlsx', '.xlsm'):
        frame = pd.read_excel(path, dtype=str, engine='openpyxl')
        frame = frame.where(~frame.isin(list(sentinels)), np.nan)
    else:
        _check_field_counts(path)
        frame = pd.read_csv(path, dtype=str, keep_default_na=False,
                            na_values=list(sentinels))

    frame.columns = [str(c).strip() for c in frame.columns]

    if cluster_column is None or cluster_column not in frame.columns:
        raise MissingColumnError(cluster_column, f"{path.name} (cluster column absent)")
    for name in schema or []:
        if name not in frame.columns:
            raise MissingColumnError(name, path.name)

    frame[cluster_column] = frame[cluster_column].str.strip()
    if numeric:
        for col in frame.columns:
            if col != cluster_column:
                frame[col] = pd.to_numeric(frame[col].str.strip(), errors='coerce')

    ds = Dataset(frame, cluster_column)
    logger.info(f"✓ Loaded {ds.n_rows} rows, {len(ds.variables)} columns")
    return ds


def build_group_index(ds: Dataset) -> GroupIndex:
    """Group rows by cluster id, groups ordered by first appearance."""
    codes, uniques = pd.factorize(ds.frame[ds.cluster_column].astype(str), sort=False)
    order = np.argsort(codes, kind='stable')
    bounds = np.cumsum(np.bincount(codes, minlength=len(uniques)))[:-1]
    rows = np.split(order, bounds)
    return GroupIndex(tuple((str(label), r) for label, r in zip(uniques, rows)))


def listwise_delete(ds: Dataset, model_vars: Sequence[str]) -> Tuple[Dataset, DeletionReport]:
    """Keep exactly the rows complete on model_vars, preserving row order."""
    ds.require(model_vars)
    model_vars = list(dict.fromkeys(model_vars))

    missing = ds.frame[model_vars].isna()
    keep = ~missing.any(axis=1).to_numpy()

    groups_before = build_group_index(ds).J
    if not keep.any():
        raise EmptyDatasetError()

    kept = ds.select_rows(keep)
    report = DeletionReport(
        variables=tuple(model_vars),
        rows_before=ds.n_rows,
        rows_after=kept.n_rows,
        groups_before=groups_before,
        groups_after=build_group_index(kept).J,
        missing_by_variable=missing.sum().to_dict(),
    )

    if report.rows_deleted:
        logger.info(f"Listwise deletion: {report.rows_before} → {report.rows_after} rows, "
                    f"{report.groups_before} → {report.groups_after} groups")
    return kept, report


def grand_mean_center(ds: Dataset, var: str) -> CenteredVariable:
    """Subtract the mean over all retained rows (not group means)."""
    if not ds.has(var):
        raise MissingColumnError(var)
    x = ds.values(var)
    if np.isnan(x).any():
        raise CenteringError(f"'{var}' has missing cells; run listwise deletion first")
    grand_mean = float(np.mean(x))
    return CenteredVariable(name=var, values=x - grand_mean, grand_mean=grand_mean)
