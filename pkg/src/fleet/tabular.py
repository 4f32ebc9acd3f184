"""Local tabular data: CSV ingestion, project extraction, train/test split."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .errors import EmptyTable, LabelMissing, NoLocalData, SchemaMismatch
from .model import DataSource, FederatedSplitter
from .rng import SplitMix64


@dataclass(frozen=True)
class Table:
    """Rectangular data: numeric feature cells plus one string label column."""

    columns: tuple[str, ...]
    rows: tuple[tuple, ...]
    label: str | None = None

    def __post_init__(self):
        for row in self.rows:
            if len(row) != len(self.columns):
                raise SchemaMismatch("row width does not match the header")

    @property
    def n(self) -> int:
        return len(self.rows)

    @property
    def feature_columns(self) -> tuple[str, ...]:
        return tuple(c for c in self.columns if c != self.label)

    def labels(self) -> tuple[str, ...]:
        idx = self._label_index()
        return tuple(row[idx] for row in self.rows)

    def feature_rows(self) -> list[tuple[float, ...]]:
        keep = [i for i, c in enumerate(self.columns) if c != self.label]
        return [tuple(row[i] for i in keep) for row in self.rows]

    def _label_index(self) -> int:
        if self.label is None or self.label not in self.columns:
            raise LabelMissing(f"label column '{self.label}' not present")
        return self.columns.index(self.label)


def _parse_rows(header: Sequence[str], records: list[list[str]], label: str | None,
                origin: str) -> list[tuple]:
    label_idx = header.index(label) if label in header else -1
    rows = []
    for lineno, record in enumerate(records, start=2):
        if len(record) != len(header):
            raise SchemaMismatch(f"{origin}:{lineno} has {len(record)} cells, expected {len(header)}")
        cells = []
        for i, raw in enumerate(record):
            if i == label_idx:
                cells.append(raw)
                continue
            try:
                cells.append(float(raw))
            except ValueError:
                raise SchemaMismatch(
                    f"{origin}:{lineno} column '{header[i]}' holds non-numeric value {raw!r}") from None
        rows.append(tuple(cells))
    return rows


def read_csv_header(path: str) -> tuple[str, ...]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            return tuple(next(reader))
        except StopIteration:
            raise SchemaMismatch(f"{path} has no header row") from None


def load_csv(path: str, label: str | None = None) -> Table:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = tuple(next(reader))
        except StopIteration:
            raise SchemaMismatch(f"{path} has no header row") from None
        records = [record for record in reader if record]
    return Table(columns=header, rows=tuple(_parse_rows(header, records, label, path)),
                 label=label)


def extract(project_code: str, datasources: Sequence[DataSource],
            label: str | None = None) -> Table:
    """Row-wise concatenation of every local source tagged with the project
    code, in data_source_id lexicographic order. All tagged sources must share
    an identical column list."""
    tagged = sorted((ds for ds in datasources if project_code in ds.project_codes),
                    key=lambda ds: ds.data_source_id)
    if not tagged:
        raise NoLocalData(f"no local data source is tagged with project '{project_code}'")
    columns = tagged[0].columns
    for ds in tagged[1:]:
        if ds.columns != columns:
            raise SchemaMismatch(
                f"data source '{ds.data_source_id}' columns differ from '{tagged[0].data_source_id}'")
    rows: list[tuple] = []
    for ds in tagged:
        part = load_csv(ds.path, label)
        if part.columns != columns:
            raise SchemaMismatch(f"file header of '{ds.data_source_id}' differs from its declaration")
        rows.extend(part.rows)
    return Table(columns=columns, rows=tuple(rows), label=label)


def holdout_size(n: int, test_percentage: float) -> int:
    """ceil(n * pct) computed over the exact decimal value of pct, so integer
    boundaries are immune to binary float rounding."""
    return math.ceil(Fraction(repr(test_percentage)) * n)


def split(table: Table, splitter: FederatedSplitter) -> tuple[Table, Table]:
    """Deterministic shuffle-then-cut: Fisher-Yates over row indices seeded
    with the splitter's random_state; the first ceil(n * test_percentage)
    shuffled rows become the test set."""
    if table.n == 0:
        raise EmptyTable("cannot split an empty table")
    labeled = Table(table.columns, table.rows, splitter.label)
    labeled._label_index()  # raises LabelMissing early
    order = list(range(table.n))
    SplitMix64(splitter.random_state).shuffle(order)
    n_test = holdout_size(table.n, splitter.test_percentage)
    test_rows = tuple(table.rows[i] for i in order[:n_test])
    train_rows = tuple(table.rows[i] for i in order[n_test:])
    return (Table(table.columns, train_rows, splitter.label),
            Table(table.columns, test_rows, splitter.label))
