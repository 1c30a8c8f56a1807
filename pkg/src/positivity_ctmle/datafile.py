"""Dataset CSV format: header ``y,a,w1,...,wp``, one observation per row."""

from __future__ import annotations

import csv
import os
import re

import numpy as np

from .estimators import Dataset


class DataFormatError(ValueError):
    """Malformed dataset file; ``line`` is the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class SchemaError(DataFormatError):
    """Well-formed CSV whose contents violate the dataset schema."""


_W_COL = re.compile(r"^w(\d+)$")


def read_dataset(path: str | os.PathLike) -> tuple[Dataset, list[str]]:
    """Parse a dataset CSV. Returns the dataset and its covariate column names."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip().lower() for h in next(reader)]
        except StopIteration:
            raise DataFormatError("file is empty", 1) from None
        if len(header) < 3 or header[0] != "y" or header[1] != "a":
            raise SchemaError("header must be y,a,w1,...,wp", 1)
        for j, name in enumerate(header[2:], start=1):
            if name != f"w{j}":
                raise SchemaError(f"expected column w{j}, found {name!r}", 1)
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(f"expected {len(header)} fields, found {len(row)}", line)
            try:
                values = [float(c) for c in row]
            except ValueError as exc:
                raise DataFormatError(f"cannot parse number ({exc})", line) from None
            if not all(np.isfinite(values)):
                raise DataFormatError("non-finite value", line)
            if values[1] not in (0.0, 1.0):
                raise SchemaError(f"treatment must be 0 or 1, found {row[1]!r}", line)
            rows.append(values)
    if not rows:
        raise DataFormatError("no data rows")
    arr = np.asarray(rows, dtype=float)
    return Dataset(arr[:, 0], arr[:, 1], arr[:, 2:]), header[2:]


def write_dataset(data: Dataset, path: str | os.PathLike) -> None:
    """Write ``data`` so that :func:`read_dataset` restores it bit for bit."""
    p = data.W.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["y", "a"] + [f"w{j}" for j in range(1, p + 1)])
        for y, a, w in zip(data.Y, data.A, data.W):
            writer.writerow([repr(float(y)), int(a)] + [repr(float(v)) for v in w])
