"""Panel ingestion and preprocessing.

A :class:`Panel` is an immutable ``T x n`` block of observations together with
variable names, optional period labels, optional FRED transformation codes
and the standardization applied so far.

CSV layout (read and written)::

    date,GDPC1,UNRATE          <- names; first cell labels the dates column
    tcode,5,2                  <- optional, detected by the "tcode" label
    1959-Q1,3121.9,5.8         <- body
    ...

Leading empty cells (series that start later) are read as NaN and flagged in
``Panel.missing_leading``; anything else non-numeric is a parse error.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, UsageError

logger = logging.getLogger(__name__)

TCODES = (1, 2, 3, 4, 5, 6, 7)
# observations lost at the start of the series by each code
TCODE_LOSS = {1: 0, 2: 1, 3: 2, 4: 0, 5: 1, 6: 2, 7: 2}

_DATE_LABELS = {"", "date", "dates", "sasdate", "period", "time", "quarter"}


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Panel:
    """T x n observation matrix with per-variable metadata.

    ``standardization`` holds one ``(mean, scale)`` pair per column such that
    ``original = standardized * scale + mean``.
    """

    data: np.ndarray
    names: tuple
    dates: Optional[tuple] = None
    tcodes: Optional[tuple] = None
    standardization: Optional[tuple] = None
    missing_leading: tuple = field(default=())

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2:
            raise UsageError("panel data must be a 2-D array")
        T, n = data.shape
        if T < 2 or n < 1:
            raise UsageError(f"panel needs T >= 2 and n >= 1, got T={T}, n={n}")
        object.__setattr__(self, "data", _readonly(data))
        names = tuple(str(s) for s in self.names)
        if len(names) != n:
            raise UsageError(f"{len(names)} names for {n} columns")
        object.__setattr__(self, "names", names)
        if self.dates is not None:
            dates = tuple(str(d) for d in self.dates)
            if len(dates) != T:
                raise UsageError(f"{len(dates)} dates for {T} rows")
            object.__setattr__(self, "dates", dates)
        if self.tcodes is not None:
            tcodes = tuple(int(c) for c in self.tcodes)
            if len(tcodes) != n:
                raise UsageError(f"{len(tcodes)} tcodes for {n} columns")
            bad = [c for c in tcodes if c not in TCODES]
            if bad:
                raise UsageError(f"tcodes must be in 1..7, got {bad[0]}")
            object.__setattr__(self, "tcodes", tcodes)
        if self.standardization is not None:
            std = tuple((float(m), float(s)) for m, s in self.standardization)
            if len(std) != n:
                raise UsageError("standardization must have one (mean, scale) pair per column")
            object.__setattr__(self, "standardization", std)
        missing = tuple(int(k) for k in self.missing_leading) or (0,) * n
        if len(missing) != n:
            raise UsageError("missing_leading must have one count per column")
        object.__setattr__(self, "missing_leading", missing)
        for j, k in enumerate(missing):
            if not np.all(np.isfinite(data[k:, j])):
                raise DataError(f"column {names[j]!r} has non-finite values after row {k}")

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def n(self) -> int:
        return self.data.shape[1]

    @property
    def flagged(self) -> list:
        """Names of columns with missing leading observations."""
        return [nm for nm, k in zip(self.names, self.missing_leading) if k > 0]

    def with_data(self, data, **changes) -> "Panel":
        return replace(self, data=data, **changes)

    def drop_flagged(self) -> "Panel":
        keep = [j for j, k in enumerate(self.missing_leading) if k == 0]
        if not keep:
            raise DataError("every column has missing leading observations")
        return self.select_columns(keep)

    def select_columns(self, idx: Sequence[int]) -> "Panel":
        idx = list(idx)
        return Panel(
            data=self.data[:, idx],
            names=[self.names[j] for j in idx],
            dates=self.dates,
            tcodes=None if self.tcodes is None else [self.tcodes[j] for j in idx],
            standardization=None
            if self.standardization is None
            else [self.standardization[j] for j in idx],
            missing_leading=[self.missing_leading[j] for j in idx],
        )

    def destandardize(self, values: np.ndarray) -> np.ndarray:
        """Map rows expressed in standardized units back to original units."""
        values = np.asarray(values, dtype=float)
        if self.standardization is None:
            return values.copy()
        mean, scale = np.array(self.standardization).T
        return values * scale + mean


@dataclass
class CleaningReport:
    """Replacements made by :func:`clean_outliers`.

    ``entries`` maps a variable name to ``(row, original, replacement)``
    triples; ``warnings`` holds one message per column needing attention.
    """

    entries: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def series_touched(self) -> int:
        return sum(1 for v in self.entries.values() if v)

    @property
    def points_replaced(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def rows(self):
        for name, items in self.entries.items():
            for row, orig, new in items:
                yield name, row, orig, new


# ----------------------------------------------------------------------------
# CSV input / output


def _parse_float(cell: str, row: int, col: int) -> float:
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"non-numeric cell {cell!r} at row {row}, column {col}") from None


def load_panel(path, dates_col: Optional[bool] = None, tcode_row: Optional[bool] = None) -> Panel:
    """Read a panel CSV.

    Parameters
    ----------
    path : path-like
    dates_col : bool, optional
        Whether the first column holds period labels. Detected from the first
        header cell when None.
    tcode_row : bool, optional
        Whether row 2 holds transformation codes. Detected from a ``tcode``
        label in column 1 when None.

    Row and column numbers in error messages are 1-based, as in a spreadsheet.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"empty file: {path}")

    header = [c.strip() for c in rows[0]]
    width = len(header)
    for i, r in enumerate(rows[1:], start=2):
        if len(r) != width:
            raise DataError(f"ragged row {i}: {len(r)} cells, header has {width}")

    if tcode_row is None:
        tcode_row = len(rows) > 1 and rows[1][0].strip().lower() in ("tcode", "tcodes", "transform")
    if dates_col is None:
        dates_col = header[0].lower() in _DATE_LABELS or bool(tcode_row)
    c0 = 1 if dates_col else 0
    names = header[c0:]
    if not names:
        raise DataError("no variable columns found")

    body_start = 1
    tcodes = None
    if tcode_row:
        tcodes = []
        for j, cell in enumerate(rows[1][c0:], start=c0 + 1):
            v = _parse_float(cell.strip(), 2, j)
            if v != int(v) or int(v) not in TCODES:
                raise DataError(f"tcode {cell!r} at row 2, column {j} is not an integer in 1..7")
            tcodes.append(int(v))
        body_start = 2

    body = rows[body_start:]
    if len(body) < 2:
        raise DataError("panel body needs at least two rows")
    T, n = len(body), len(names)
    data = np.empty((T, n))
    dates = []
    for i, r in enumerate(body):
        lineno = i + body_start + 1
        if dates_col:
            dates.append(r[0].strip())
        for j, cell in enumerate(r[c0:]):
            cell = cell.strip()
            if cell == "" or cell.lower() in ("nan", "na"):
                data[i, j] = np.nan
            else:
                data[i, j] = _parse_float(cell, lineno, j + c0 + 1)

    missing = []
    for j in range(n):
        finite = np.isfinite(data[:, j])
        if not finite.any():
            raise DataError(f"column {names[j]!r} has no observations")
        k = int(np.argmax(finite))
        if not finite[k:].all():
            bad = k + int(np.argmin(finite[k:]))
            raise DataError(
                f"missing value inside column {names[j]!r} at row {bad + body_start + 1}, "
                f"column {j + c0 + 1}"
            )
        missing.append(k)
    if any(missing):
        logger.info("%d series start late and are flagged", sum(1 for k in missing if k))

    if dates_col and all(d == "" for d in dates):
        dates = None
    return Panel(
        data=data,
        names=names,
        dates=dates if dates_col else None,
        tcodes=tcodes,
        missing_leading=missing,
    )


def write_panel(panel: Panel, path) -> None:
    """Write ``panel`` in the layout read by :func:`load_panel`.

    Floats are written with ``repr`` so a write/load round trip is exact.
    """
    label_col = panel.dates is not None or panel.tcodes is not None
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["date"] if label_col else []) + list(panel.names))
        if panel.tcodes is not None:
            w.writerow(["tcode"] + [str(c) for c in panel.tcodes])
        for i in range(panel.T):
            row = [("" if math.isnan(v) else repr(float(v))) for v in panel.data[i]]
            if label_col:
                row = [panel.dates[i] if panel.dates is not None else ""] + row
            w.writerow(row)


# ----------------------------------------------------------------------------
# transformations


def apply_tcode(series, code: int) -> np.ndarray:
    """Apply a FRED transformation code.

    ======  ===========================
    code    transformation
    ======  ===========================
    1       x
    2       (1-L) x
    3       (1-L)^2 x
    4       log x
    5       (1-L) log x
    6       (1-L)^2 log x
    7       (1-L) (x_t / x_{t-1} - 1)
    ======  ===========================

    The result is shorter than the input by the differencing order.
    """
    if code not in TCODES:
        raise UsageError(f"transformation code must be in 1..7, got {code!r}")
    x = np.asarray(series, dtype=float)
    if x.ndim != 1:
        raise UsageError("apply_tcode expects a 1-D series")
    if code in (4, 5, 6):
        bad = np.flatnonzero(~(x > 0))
        if bad.size:
            raise DataError(
                f"log transformation (code {code}) needs positive values; "
                f"got {x[bad[0]]!r} at index {bad[0]}"
            )
        x = np.log(x)
    if code in (1, 4):
        return x.copy()
    if code in (2, 5):
        return np.diff(x)
    if code in (3, 6):
        return np.diff(x, n=2)
    # code 7
    if np.any(x[:-1] == 0):
        i = int(np.flatnonzero(x[:-1] == 0)[0])
        raise DataError(f"growth rate (code 7) undefined: zero at index {i}")
    return np.diff(x[1:] / x[:-1] - 1.0)


def transform_panel(panel: Panel) -> Panel:
    """Apply each column's tcode and trim all columns to a common start.

    Flagged (late-starting) columns must be dropped first.
    """
    if panel.tcodes is None:
        raise UsageError("panel carries no transformation codes")
    if panel.flagged:
        raise DataError(
            f"{len(panel.flagged)} columns start late (first: {panel.flagged[0]!r}); drop them first"
        )
    loss = max(TCODE_LOSS[c] for c in panel.tcodes)
    if panel.T - loss < 2:
        raise DataError("too few observations left after differencing")
    cols = []
    for j, code in enumerate(panel.tcodes):
        try:
            y = apply_tcode(panel.data[:, j], code)
        except DataError as exc:
            raise DataError(f"column {panel.names[j]!r}: {exc}") from None
        cols.append(y[len(y) - (panel.T - loss):])
    return Panel(
        data=np.column_stack(cols),
        names=panel.names,
        dates=None if panel.dates is None else panel.dates[loss:],
    )


def clean_outliers(panel: Panel, k: float = 10.0):
    """Replace points farther than ``k`` interquartile ranges from the median.

    Outliers are replaced by linear interpolation between the nearest
    non-outlying neighbours; an outlier at either end takes the nearest
    non-outlying value. Returns the cleaned panel and a
    :class:`CleaningReport`.
    """
    if not k > 0:
        raise UsageError(f"k must be positive, got {k}")
    data = np.array(panel.data, dtype=float)
    report = CleaningReport()
    idx = np.arange(panel.T)
    for j, name in enumerate(panel.names):
        x = data[:, j]
        med = np.median(x)
        q25, q75 = np.percentile(x, [25, 75])
        iqr = q75 - q25
        out = np.abs(x - med) > k * iqr
        if not out.any():
            continue
        if out.all():
            report.warnings.append(f"{name}: every point deviates from the median; column skipped")
            continue
        if iqr == 0:
            report.warnings.append(
                f"{name}: zero interquartile range; {int(out.sum())} point(s) off the median replaced"
            )
        good = ~out
        new = np.interp(idx[out], idx[good], x[good])
        report.entries[name] = [
            (int(i), float(x[i]), float(v)) for i, v in zip(idx[out], new)
        ]
        x[out] = new
    return panel.with_data(data), report


def standardize(panel: Panel) -> Panel:
    """Demean each column and scale it to unit variance (divisor T).

    The applied ``(mean, scale)`` pairs are composed with any existing
    standardization so :meth:`Panel.destandardize` always maps back to the
    original units.
    """
    x = panel.data
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    const = np.flatnonzero(~(scale > 0))
    if const.size:
        raise DataError(f"variable {panel.names[const[0]]!r} is constant; cannot standardize")
    z = (x - mean) / scale
    if panel.standardization is not None:
        m0, s0 = np.array(panel.standardization).T
        mean, scale = m0 + s0 * mean, s0 * scale
    return panel.with_data(z, standardization=list(zip(mean, scale)))


def from_array(data, names=None, **kw) -> Panel:
    """Convenience constructor with default ``y1..yn`` names."""
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    if names is None:
        names = [f"y{j + 1}" for j in range(data.shape[1])]
    return Panel(data=data, names=names, **kw)
