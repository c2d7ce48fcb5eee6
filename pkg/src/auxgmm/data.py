"""Dataset container, CSV ingestion, and primary/auxiliary sample handling.

An observation is (x, y, d) where the outcome y is recorded only for rows
with d = 0 (the auxiliary sample).  Rows with d = 1 form the primary sample
in which y is missing.  The same file layout serves both study designs; the
``case`` label records whether the auxiliary sample is an independent survey
(``VERIFY_OUT``) or a validated subset of one sample (``VERIFY_IN``).
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import MalformedRow, ParseError


class Case(enum.Enum):
    """Relationship between the primary and the auxiliary sample."""

    VERIFY_OUT = "verify-out"
    VERIFY_IN = "verify-in"

    @classmethod
    def parse(cls, text: str) -> "Case":
        for c in cls:
            if text in (c.value, c.name, c.name.lower()):
                return c
        raise ValueError(f"unknown case {text!r}; expected 'verify-out' or 'verify-in'")


@dataclass(frozen=True)
class ObservationRecord:
    """One row: proxy vector x, optional outcome y, missingness flag d."""

    x: np.ndarray
    y: np.ndarray | None
    d: int


@dataclass(frozen=True)
class SampleView:
    """Read-only view of the rows with a common d value."""

    x: np.ndarray
    y: np.ndarray
    indices: np.ndarray
    d_value: int

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class Dataset:
    """Immutable array-backed dataset.

    ``y`` always has shape (n, d_y) with NaN in rows where d = 1.  Invariants
    are enforced at construction; the object is safe to share across workers.
    """

    x: np.ndarray
    y: np.ndarray
    d: np.ndarray
    case: Case
    y_names: tuple[str, ...] = field(default=("y",))
    x_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.atleast_2d(np.asarray(self.y, dtype=float))
        d = np.asarray(self.d, dtype=np.int8).reshape(-1)
        if y.shape[0] != x.shape[0] or d.shape[0] != x.shape[0]:
            raise MalformedRow("x, y, d must have one entry per row")
        if not np.isfinite(x).all():
            raise MalformedRow("every x must be finite")
        if not np.isin(d, (0, 1)).all():
            raise MalformedRow("d must be 0 or 1")
        aux = d == 0
        if not np.isfinite(y[aux]).all():
            raise MalformedRow("y is required on every row with d = 0")
        if aux.all() or not aux.any():
            raise MalformedRow("need at least one primary (d=1) and one auxiliary (d=0) row")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "d", d)
        if not self.x_names:
            object.__setattr__(self, "x_names", tuple(f"x{j + 1}" for j in range(x.shape[1])))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def n_primary(self) -> int:
        return int((self.d == 1).sum())

    @property
    def n_auxiliary(self) -> int:
        return int((self.d == 0).sum())

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @property
    def d_y(self) -> int:
        return self.y.shape[1]

    @property
    def rows(self) -> list[ObservationRecord]:
        out = []
        for i in range(self.n):
            yi = None if self.d[i] == 1 else self.y[i].copy()
            out.append(ObservationRecord(x=self.x[i].copy(), y=yi, d=int(self.d[i])))
        return out

    def permuted(self, order: np.ndarray) -> "Dataset":
        return Dataset(self.x[order], self.y[order], self.d[order], self.case,
                       self.y_names, self.x_names)


@dataclass(frozen=True)
class ColumnSpec:
    """Column naming for CSV ingestion.

    With the defaults, columns are discovered from the header: a ``d`` column,
    either ``y`` or ``y1..yk``, and ``x1..xk``.
    """

    d_col: str = "d"
    y_cols: tuple[str, ...] | None = None
    x_cols: tuple[str, ...] | None = None


def _discover_columns(header: list[str], schema: ColumnSpec):
    if schema.d_col not in header:
        raise ParseError(f"missing required column {schema.d_col!r}")
    if schema.y_cols is not None:
        y_cols = list(schema.y_cols)
    elif "y" in header:
        y_cols = ["y"]
    else:
        y_cols = sorted((c for c in header if c.startswith("y") and c[1:].isdigit()),
                        key=lambda c: int(c[1:]))
    if schema.x_cols is not None:
        x_cols = list(schema.x_cols)
    else:
        x_cols = sorted((c for c in header if c.startswith("x") and c[1:].isdigit()),
                        key=lambda c: int(c[1:]))
    if not y_cols:
        raise ParseError("no outcome column found (expected 'y' or 'y1..yk')")
    if not x_cols:
        raise ParseError("no proxy columns found (expected 'x1..xk')")
    missing = [c for c in y_cols + x_cols if c not in header]
    if missing:
        raise ParseError(f"columns named in schema are absent from the header: {missing}")
    return y_cols, x_cols


def load_dataset(source, schema: ColumnSpec | None = None, case: Case = Case.VERIFY_OUT) -> Dataset:
    """Read a CSV stream (bytes, text, or file object) into a Dataset.

    Empty y cells are allowed only on rows with d = 1; order is preserved.
    """
    schema = schema or ColumnSpec()
    if isinstance(source, (bytes, bytearray)):
        stream = io.StringIO(source.decode("utf-8"))
    elif isinstance(source, str):
        stream = io.StringIO(source)
    else:
        stream = source
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty CSV input") from None
    header = [h.strip() for h in header]
    y_cols, x_cols = _discover_columns(header, schema)
    idx = {c: header.index(c) for c in [schema.d_col] + y_cols + x_cols}

    d_list, y_list, x_list = [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        cell_d = row[idx[schema.d_col]].strip()
        if cell_d not in ("0", "1"):
            raise MalformedRow(f"line {lineno}: d must be 0 or 1, got {cell_d!r}")
        d = int(cell_d)
        y_cells = [row[idx[c]].strip() for c in y_cols]
        if d == 0:
            if any(c == "" for c in y_cells):
                raise MalformedRow(f"line {lineno}: auxiliary row (d=0) lacks y")
            try:
                y = [float(c) for c in y_cells]
            except ValueError as exc:
                raise ParseError(f"line {lineno}: non-numeric y cell") from exc
        else:
            if any(c != "" for c in y_cells):
                try:
                    y = [float(c) for c in y_cells]
                except ValueError as exc:
                    raise ParseError(f"line {lineno}: non-numeric y cell") from exc
            else:
                y = [float("nan")] * len(y_cols)
        try:
            x = [float(row[idx[c]]) for c in x_cols]
        except ValueError as exc:
            raise ParseError(f"line {lineno}: non-numeric x cell") from exc
        if not all(np.isfinite(x)):
            raise ParseError(f"line {lineno}: non-finite x value")
        d_list.append(d)
        y_list.append(y)
        x_list.append(x)

    if not d_list:
        raise ParseError("CSV contains a header but no data rows")
    return Dataset(
        x=np.asarray(x_list, dtype=float),
        y=np.asarray(y_list, dtype=float),
        d=np.asarray(d_list, dtype=np.int8),
        case=case,
        y_names=tuple(y_cols),
        x_names=tuple(x_cols),
    )


def write_dataset(ds: Dataset, stream) -> None:
    """Serialize a Dataset back to CSV (inverse of :func:`load_dataset`)."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["d", *ds.y_names, *ds.x_names])
    for i in range(ds.n):
        y_cells = ["" if ds.d[i] == 1 else repr(float(v)) for v in ds.y[i]]
        writer.writerow([int(ds.d[i]), *y_cells, *(repr(float(v)) for v in ds.x[i])])


def dataset_to_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    write_dataset(ds, buf)
    return buf.getvalue()


def split_samples(ds: Dataset) -> tuple[SampleView, SampleView]:
    """Partition into (primary, auxiliary) row views; never empty by invariant."""
    prim = np.flatnonzero(ds.d == 1)
    aux = np.flatnonzero(ds.d == 0)
    primary = SampleView(x=ds.x[prim], y=ds.y[prim], indices=prim, d_value=1)
    auxiliary = SampleView(x=ds.x[aux], y=ds.y[aux], indices=aux, d_value=0)
    return primary, auxiliary


def marginal_p(ds: Dataset) -> float:
    """Share of primary (d = 1) rows; always strictly inside (0, 1)."""
    return ds.n_primary / ds.n
