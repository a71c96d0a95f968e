"""Loading, validating, grouping and splitting training-run observations."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from moescale.errors import RunLoadError

logger = logging.getLogger(__name__)

COLUMNS = ("run_id", "n_total", "n_active", "sparsity", "tokens", "compute", "loss")
NUMERIC_COLUMNS = COLUMNS[1:]
DEFAULT_BUDGETS = (3e19, 6e19, 1e20, 3e20, 1e21)
COMPUTE_REL_TOL = 0.25


@dataclass(frozen=True)
class RunRecord:
    run_id: str
    n_total: float
    n_active: float
    sparsity: float
    tokens: float
    compute: float
    loss: float
    extras: dict = field(default_factory=dict)
    compute_synthetic: bool = False

    def problems(self) -> list[tuple[str, str]]:
        """Hard invariant violations as (column, message) pairs."""
        out = []
        if not 0.0 <= self.sparsity < 1.0:
            out.append(("sparsity", f"must lie in [0, 1), got {self.sparsity!r}"))
        if not self.n_active > 0:
            out.append(("n_active", f"must be > 0, got {self.n_active!r}"))
        if self.n_active > self.n_total:
            out.append(("n_active", f"{self.n_active!r} exceeds n_total {self.n_total!r}"))
        for name in ("loss", "tokens", "compute"):
            if not getattr(self, name) > 0:
                out.append((name, f"must be > 0, got {getattr(self, name)!r}"))
        return out

    def compute_deviation(self) -> float:
        return abs(self.compute - 6.0 * self.n_active * self.tokens) / self.compute

    def to_row(self) -> dict:
        row = {name: getattr(self, name) for name in COLUMNS}
        row.update(self.extras)
        return row


@dataclass(frozen=True)
class RunTable:
    records: tuple[RunRecord, ...]
    source: str | None = None
    loaded_at: str | None = None
    warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        seen: set[str] = set()
        for rec in self.records:
            if rec.run_id in seen:
                raise RunLoadError(f"duplicate run_id {rec.run_id!r}")
            seen.add(rec.run_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def subset(self, records: Iterable[RunRecord]) -> "RunTable":
        return RunTable(tuple(records), source=self.source, loaded_at=self.loaded_at)

    def run_ids(self) -> list[str]:
        return [r.run_id for r in self.records]


def _parse_float(value, row: int, column: str) -> float:
    if isinstance(value, bool):
        raise RunLoadError(f"row {row}, column {column!r}: non-numeric value {value!r}")
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise RunLoadError(f"row {row}, column {column!r}: non-numeric value {value!r}") from None
    if not math.isfinite(x):
        raise RunLoadError(f"row {row}, column {column!r}: non-finite value {value!r}")
    return x


def _parse_extra(value):
    if isinstance(value, str):
        try:
            return float(value) if value.strip() else value
        except ValueError:
            return value
    return value


def records_from_rows(rows: Sequence[dict], header: Sequence[str]) -> tuple[list[RunRecord], list[str]]:
    """Validate raw rows (1-based data row numbers in messages)."""
    missing = [c for c in COLUMNS if c not in header and c != "compute"]
    if missing:
        raise RunLoadError(f"missing required column(s): {', '.join(missing)}")
    has_compute = "compute" in header
    records: list[RunRecord] = []
    warnings: list[str] = []
    seen: dict[str, int] = {}
    for i, raw in enumerate(rows, start=1):
        run_id = raw.get("run_id")
        if run_id is None or str(run_id).strip() == "":
            raise RunLoadError(f"row {i}, column 'run_id': empty run_id")
        run_id = str(run_id)
        if run_id in seen:
            raise RunLoadError(f"row {i}, column 'run_id': duplicate run_id {run_id!r} (first at row {seen[run_id]})")
        seen[run_id] = i
        values = {}
        for col in NUMERIC_COLUMNS:
            if col == "compute" and not has_compute:
                continue
            values[col] = _parse_float(raw.get(col), i, col)
        synthetic = not has_compute
        if synthetic:
            values["compute"] = 6.0 * values["n_active"] * values["tokens"]
        extras = {k: _parse_extra(v) for k, v in raw.items() if k not in COLUMNS}
        rec = RunRecord(run_id=run_id, extras=extras, compute_synthetic=synthetic, **values)
        problems = rec.problems()
        if problems:
            col, msg = problems[0]
            raise RunLoadError(f"row {i}, column {col!r}: {msg}")
        dev = rec.compute_deviation()
        if dev > COMPUTE_REL_TOL:
            msg = f"row {i} ({run_id}): compute deviates {dev:.1%} from 6*n_active*tokens"
            warnings.append(msg)
            logger.warning(msg)
        records.append(rec)
    return records, warnings


def load_runs(path: str | Path) -> RunTable:
    """Read a run table from CSV, or from JSON when the suffix is ``.json``."""
    path = Path(path)
    if not path.exists():
        raise RunLoadError(f"run file not found: {path}")
    if path.suffix.lower() == ".json":
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise RunLoadError(f"{path}: invalid JSON ({exc})") from None
        if isinstance(data, dict):
            data = data.get("records")
        if not isinstance(data, list) or not all(isinstance(r, dict) for r in data):
            raise RunLoadError(f"{path}: expected a list of run objects")
        header: list[str] = []
        for row in data:
            header.extend(k for k in row if k not in header)
        rows = data
    else:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise RunLoadError(f"{path}: empty file, header row required")
            header = [h.strip() for h in reader.fieldnames]
            reader.fieldnames = header
            rows = list(reader)
    records, warnings = records_from_rows(rows, header)
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return RunTable(tuple(records), source=str(path), loaded_at=stamp, warnings=tuple(warnings))


def format_float(x: float) -> str:
    """Shortest decimal string that round-trips to the same double."""
    return repr(float(x))


def runs_csv_text(table: RunTable | Sequence[RunRecord]) -> str:
    records = list(table)
    extra_cols: list[str] = []
    for r in records:
        extra_cols.extend(k for k in r.extras if k not in extra_cols)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(COLUMNS) + extra_cols)
    for r in records:
        row = [r.run_id] + [format_float(getattr(r, c)) for c in NUMERIC_COLUMNS]
        for k in extra_cols:
            v = r.extras.get(k, "")
            row.append(format_float(v) if isinstance(v, float) else v)
        writer.writerow(row)
    return buf.getvalue()


def write_runs_csv(table: RunTable | Sequence[RunRecord], path: str | Path) -> None:
    """Write runs as CSV, atomically, with round-trip float formatting."""
    from moescale.artifacts import atomic_write_text

    atomic_write_text(path, runs_csv_text(table))


@dataclass(frozen=True)
class BudgetGroups:
    groups: list[tuple[float, RunTable]]
    unassigned: RunTable


def group_by_budget(
    table: RunTable,
    rel_tol: float = 0.05,
    centers: Sequence[float] = DEFAULT_BUDGETS,
) -> BudgetGroups:
    """Assign each run to the nearest budget center within ``rel_tol``."""
    if not 0.0 < rel_tol < 0.5:
        raise ValueError(f"rel_tol must lie in (0, 0.5), got {rel_tol}")
    centers = sorted(float(c) for c in centers)
    buckets: dict[float, list[RunRecord]] = {c: [] for c in centers}
    unassigned = []
    for rec in table:
        best = None
        for c in centers:
            dev = abs(rec.compute - c) / c
            if dev <= rel_tol and (best is None or dev < best[0]):
                best = (dev, c)
        if best is None:
            unassigned.append(rec)
        else:
            buckets[best[1]].append(rec)
    groups = [(c, table.subset(recs)) for c, recs in buckets.items() if recs]
    return BudgetGroups(groups=groups, unassigned=table.subset(unassigned))


def split_holdout_by_sparsity(table: RunTable, holdout_sparsity: float) -> tuple[RunTable, RunTable]:
    if not 0.0 <= holdout_sparsity < 1.0:
        raise ValueError(f"holdout_sparsity must lie in [0, 1), got {holdout_sparsity}")
    fit, hold = [], []
    for rec in table:
        (hold if abs(rec.sparsity - holdout_sparsity) <= 1e-9 else fit).append(rec)
    return table.subset(fit), table.subset(hold)
