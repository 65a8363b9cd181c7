"""Observation container, CSV ingestion and discrete-covariate cells."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import DataError


@dataclass(frozen=True)
class Schema:
    """Column roles for CSV ingestion."""

    response: str
    treatment: str
    instrument: str
    continuous: tuple[str, ...] = ()
    discrete: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "continuous", tuple(self.continuous))
        object.__setattr__(self, "discrete", tuple(self.discrete))
        names = [self.response, self.treatment, self.instrument, *self.continuous, *self.discrete]
        dup = {c for c in names if names.count(c) > 1}
        if dup:
            raise DataError(f"column assigned to more than one role: {sorted(dup)[0]}", column=sorted(dup)[0])

    @property
    def columns(self) -> tuple[str, ...]:
        return (self.response, self.treatment, self.instrument, *self.continuous, *self.discrete)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ObservationFrame:
    """The sample ``{Y_i, D_i, V_i, X_i}``.

    Continuous and discrete covariates are kept apart because the weight
    estimator smooths over the former and stratifies on the latter. The design
    row is ``Z_i = (D_i, 1, x_cont_i, x_disc_i)``; the constant is added here,
    never by the caller.

    ``x_disc`` holds the numeric value entering the design (the label itself
    when it parses as a number, otherwise an integer code). ``disc_levels``
    keeps the original labels so a frame can be written back unchanged.
    """

    y: np.ndarray
    d: np.ndarray
    v: np.ndarray
    x_cont: np.ndarray | None = None
    x_disc: np.ndarray | None = None
    cont_names: tuple[str, ...] = ()
    disc_names: tuple[str, ...] = ()
    disc_levels: tuple[tuple[str, ...], ...] | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        n = y.shape[0]
        if n < 1:
            raise DataError("empty sample")
        d = np.asarray(self.d, dtype=float).reshape(-1)
        v = np.asarray(self.v, dtype=float).reshape(-1)
        xc = np.zeros((n, 0)) if self.x_cont is None else np.asarray(self.x_cont, dtype=float)
        xd = np.zeros((n, 0)) if self.x_disc is None else np.asarray(self.x_disc, dtype=float)
        if xc.ndim == 1:
            xc = xc[:, None]
        if xd.ndim == 1:
            xd = xd[:, None]
        for name, arr in (("treatment", d), ("instrument", v), ("x_cont", xc), ("x_disc", xd)):
            if arr.shape[0] != n:
                raise DataError(f"{name} has {arr.shape[0]} rows, response has {n}")
        if not np.all(np.isfinite(y)):
            row = int(np.flatnonzero(~np.isfinite(y))[0])
            raise DataError(f"non-finite response at row {row + 1}", row=row + 1)
        for name, arr in (("treatment", d), ("instrument", v)):
            bad = np.flatnonzero((arr != 0) & (arr != 1))
            if bad.size:
                raise DataError(f"non-binary {name} at row {bad[0] + 1}", row=int(bad[0]) + 1)
        for name, arr in (("continuous covariate", xc), ("discrete covariate", xd)):
            if arr.size and not np.all(np.isfinite(arr)):
                row = int(np.flatnonzero(~np.all(np.isfinite(arr), axis=1))[0])
                raise DataError(f"non-finite {name} at row {row + 1}", row=row + 1)

        cont_names = tuple(self.cont_names) or tuple(f"xc{j + 1}" for j in range(xc.shape[1]))
        disc_names = tuple(self.disc_names) or tuple(f"xd{j + 1}" for j in range(xd.shape[1]))
        if len(cont_names) != xc.shape[1] or len(disc_names) != xd.shape[1]:
            raise DataError("covariate names do not match covariate columns")
        levels = self.disc_levels
        if levels is None:
            levels = tuple(tuple(_fmt(u) for u in np.unique(xd[:, j])) for j in range(xd.shape[1]))

        for attr, value in (
            ("y", y), ("d", d), ("v", v), ("x_cont", xc), ("x_disc", xd),
        ):
            object.__setattr__(self, attr, _readonly(value))
        object.__setattr__(self, "cont_names", cont_names)
        object.__setattr__(self, "disc_names", disc_names)
        object.__setattr__(self, "disc_levels", tuple(tuple(lv) for lv in levels))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p_cont(self) -> int:
        return self.x_cont.shape[1]

    @property
    def p_disc(self) -> int:
        return self.x_disc.shape[1]

    @property
    def design_names(self) -> tuple[str, ...]:
        return ("treatment", "intercept", *self.cont_names, *self.disc_names)

    def design(self) -> np.ndarray:
        """Design matrix with rows ``(D_i, 1, x_cont_i, x_disc_i)``."""
        return np.column_stack([self.d, np.ones(self.n), self.x_cont, self.x_disc])

    def take(self, idx) -> "ObservationFrame":
        idx = np.asarray(idx)
        return ObservationFrame(
            y=self.y[idx], d=self.d[idx], v=self.v[idx],
            x_cont=self.x_cont[idx], x_disc=self.x_disc[idx],
            cont_names=self.cont_names, disc_names=self.disc_names,
            disc_levels=self.disc_levels,
        )

    def with_response(self, y) -> "ObservationFrame":
        return ObservationFrame(
            y=y, d=self.d, v=self.v, x_cont=self.x_cont, x_disc=self.x_disc,
            cont_names=self.cont_names, disc_names=self.disc_names,
            disc_levels=self.disc_levels,
        )


@dataclass(frozen=True, eq=False)
class CellPartition:
    """Partition of observation indices by their discrete-covariate values."""

    cell_ids: np.ndarray
    cells: list = field(default_factory=list)
    keys: list = field(default_factory=list)

    def __len__(self):
        return len(self.cells)


def stratify(frame: ObservationFrame) -> CellPartition:
    """Group observations sharing every discrete covariate value.

    Cells are ordered by their key tuple, and indices inside a cell ascend, so
    the result depends only on the data, never on incidental ordering.
    """
    n = frame.n
    if frame.p_disc == 0:
        return CellPartition(np.zeros(n, dtype=np.intp), [np.arange(n)], [()])
    keys, inverse = np.unique(frame.x_disc, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.cumsum(np.bincount(inverse, minlength=len(keys)))[:-1]
    cells = np.split(order, bounds)
    return CellPartition(inverse.astype(np.intp), cells, [tuple(k) for k in keys])


def _fmt(value: float) -> str:
    if float(value).is_integer():
        return str(int(value))
    return repr(float(value))


def _parse_float(text: str) -> float | None:
    try:
        x = float(text)
    except ValueError:
        return None
    return x


def _level_sort_key(labels: Sequence[str]):
    nums = [_parse_float(s) for s in labels]
    if all(x is not None and math.isfinite(x) for x in nums):
        return sorted(labels, key=lambda s: float(s)), True
    return sorted(labels), False


def load_csv(path, schema: Schema) -> ObservationFrame:
    """Read a comma-separated file with a header row into a validated frame.

    Raises
    ------
    DataError
        For a missing file or column, an empty file, a non-numeric field, a
        missing value, or a treatment/instrument entry outside {0, 1}. The
        message carries the 1-based data row and the column name.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("empty file: no header row") from None
        rows = [r for r in reader if any(cell.strip() for cell in r)]
    if not rows:
        raise DataError("empty file: no data rows")
    pos = {}
    for col in schema.columns:
        if col not in header:
            raise DataError(f"missing column '{col}'", column=col)
        pos[col] = header.index(col)
    for i, r in enumerate(rows, start=1):
        if len(r) != len(header):
            raise DataError(f"row {i} has {len(r)} fields, header has {len(header)}", row=i)

    def numeric(col: str, role: str) -> np.ndarray:
        out = np.empty(len(rows))
        j = pos[col]
        for i, r in enumerate(rows, start=1):
            cell = r[j].strip()
            if cell == "":
                raise DataError(f"missing value in column '{col}' at row {i}", row=i, column=col)
            x = _parse_float(cell)
            if x is None or not math.isfinite(x):
                raise DataError(f"non-numeric {role} '{cell}' in column '{col}' at row {i}", row=i, column=col)
            out[i - 1] = x
        return out

    y = numeric(schema.response, "response")
    d = numeric(schema.treatment, "treatment")
    v = numeric(schema.instrument, "instrument")
    for arr, role, col in ((d, "treatment", schema.treatment), (v, "instrument", schema.instrument)):
        bad = np.flatnonzero((arr != 0) & (arr != 1))
        if bad.size:
            raise DataError(f"non-binary {role} at row {bad[0] + 1}", row=int(bad[0]) + 1, column=col)
    xc = np.column_stack([numeric(c, "covariate") for c in schema.continuous]) if schema.continuous else None

    xd_cols, levels = [], []
    for col in schema.discrete:
        j = pos[col]
        labels = []
        for i, r in enumerate(rows, start=1):
            cell = r[j].strip()
            if cell == "":
                raise DataError(f"missing value in column '{col}' at row {i}", row=i, column=col)
            labels.append(cell)
        uniq, numeric_labels = _level_sort_key(sorted(set(labels)))
        if numeric_labels:
            xd_cols.append(np.array([float(s) for s in labels]))
        else:
            code = {s: k for k, s in enumerate(uniq)}
            xd_cols.append(np.array([code[s] for s in labels], dtype=float))
        levels.append(tuple(uniq))
    xd = np.column_stack(xd_cols) if xd_cols else None

    return ObservationFrame(
        y=y, d=d, v=v, x_cont=xc, x_disc=xd,
        cont_names=schema.continuous, disc_names=schema.discrete,
        disc_levels=tuple(levels),
    )


def _disc_label(frame: ObservationFrame, j: int, value: float) -> str:
    levels = frame.disc_levels[j]
    if levels and all(_parse_float(s) is not None for s in levels):
        for s in levels:
            if float(s) == value:
                return s
        return _fmt(value)
    return levels[int(value)]


def write_csv(frame: ObservationFrame, path, schema: Schema | None = None) -> None:
    """Write a frame back to CSV; reals use the shortest round-trip repr."""
    if schema is None:
        schema = Schema("y", "d", "v", frame.cont_names, frame.disc_names)

    def real(x: float) -> str:
        return _fmt(x) if float(x).is_integer() else repr(float(x))

    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(schema.columns)
        for i in range(frame.n):
            w.writerow(
                [real(frame.y[i]), _fmt(frame.d[i]), _fmt(frame.v[i])]
                + [real(x) for x in frame.x_cont[i]]
                + [_disc_label(frame, j, frame.x_disc[i, j]) for j in range(frame.p_disc)]
            )
