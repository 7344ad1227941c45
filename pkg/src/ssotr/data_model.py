"""Observation records, labeled/unlabeled containers and CSV ingestion.

A :class:`Dataset` holds the labeled sample ``(X, A, Y)`` and the
covariate-only unlabeled sample as dense numpy arrays.  Arrays are frozen
(non-writeable) once the dataset is built, so a dataset can be shared
between workers without copying.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class Observation:
    """One subject.  ``a`` and ``y`` are both set (labeled) or both None."""

    x: tuple[float, ...]
    a: Optional[int] = None
    y: Optional[float] = None

    def __post_init__(self):
        if (self.a is None) != (self.y is None):
            raise DataError("treatment and outcome must be both present or both absent")
        if not all(math.isfinite(v) for v in self.x):
            raise DataError("covariates must be finite")
        if self.a is not None and self.a not in (0, 1):
            raise DataError("treatment must be binary")

    @property
    def labeled(self) -> bool:
        return self.a is not None


def _frozen(arr, dtype=float) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Dataset:
    """Labeled sample of size n and unlabeled sample of size N.

    ``center`` and ``scale`` record the per-coordinate affine map that
    produced the stored covariates from raw inputs:
    ``x_stored = (x_raw - center) / scale``.  For unstandardized data they
    are zeros and ones.
    """

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    x_unlabeled: np.ndarray
    center: np.ndarray = field(default=None)
    scale: np.ndarray = field(default=None)
    columns: tuple[str, ...] = field(default=None)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise DataError("labeled covariates must be a 2-d array")
        n, p = x.shape
        if n == 0:
            raise DataError("labeled data is empty")
        xu = np.asarray(self.x_unlabeled, dtype=float)
        if xu.size == 0:
            xu = np.empty((0, p))
        elif xu.ndim == 1:
            xu = xu[:, None] if p == 1 else xu[None, :]
        if xu.ndim != 2 or xu.shape[1] != p:
            raise DataError(
                f"dimension mismatch: labeled data has p={p}, unlabeled has {xu.shape[-1]} columns"
            )
        a = np.asarray(self.a)
        y = np.asarray(self.y, dtype=float)
        if a.shape != (n,) or y.shape != (n,):
            raise DataError("treatment and outcome must have one entry per labeled row")
        if not np.all((a == 0) | (a == 1)):
            raise DataError("treatment must be binary")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(xu)) and np.all(np.isfinite(y))):
            raise DataError("all covariates and outcomes must be finite")
        n_treated = int(a.sum())
        if n_treated == 0 or n_treated == n:
            raise DataError("both treatment arms must be present in the labeled data")

        center = np.zeros(p) if self.center is None else np.asarray(self.center, dtype=float)
        scale = np.ones(p) if self.scale is None else np.asarray(self.scale, dtype=float)
        if center.shape != (p,) or scale.shape != (p,):
            raise DataError("standardization metadata must have length p")
        columns = self.columns or tuple(f"x{k + 1}" for k in range(p))
        if len(columns) != p:
            raise DataError("one column name per covariate required")

        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "a", _frozen(a, dtype=np.int8))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "x_unlabeled", _frozen(xu))
        object.__setattr__(self, "center", _frozen(center))
        object.__setattr__(self, "scale", _frozen(scale))
        object.__setattr__(self, "columns", tuple(columns))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def N(self) -> int:
        return self.x_unlabeled.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def x_pooled(self) -> np.ndarray:
        return np.vstack([self.x, self.x_unlabeled])

    @property
    def is_standardized(self) -> bool:
        return bool(np.any(self.center != 0) or np.any(self.scale != 1))

    def observations(self) -> Iterator[Observation]:
        for xi, ai, yi in zip(self.x, self.a, self.y):
            yield Observation(tuple(float(v) for v in xi), int(ai), float(yi))
        for xj in self.x_unlabeled:
            yield Observation(tuple(float(v) for v in xj))

    def with_treatment(self, a: np.ndarray) -> "Dataset":
        """Copy of the dataset with the labeled treatments replaced."""
        return Dataset(self.x, a, self.y, self.x_unlabeled, self.center, self.scale, self.columns)

    def to_standard_scale(self, x_raw: np.ndarray) -> np.ndarray:
        """Apply the recorded standardization to raw covariates."""
        x_raw = np.asarray(x_raw, dtype=float)
        return (x_raw - self.center) / self.scale


def from_observations(obs: Sequence[Observation]) -> Dataset:
    labeled = [o for o in obs if o.labeled]
    unlabeled = [o for o in obs if not o.labeled]
    if not labeled:
        raise DataError("labeled data is empty")
    p = len(labeled[0].x)
    if any(len(o.x) != p for o in obs):
        raise DataError("all observations must share the covariate dimension")
    return Dataset(
        x=np.array([o.x for o in labeled], dtype=float).reshape(len(labeled), p),
        a=np.array([o.a for o in labeled]),
        y=np.array([o.y for o in labeled], dtype=float),
        x_unlabeled=np.array([o.x for o in unlabeled], dtype=float).reshape(len(unlabeled), p),
    )


def augment(x) -> np.ndarray:
    """Prepend the intercept: ``x -> (1, x)``.  Works row-wise on 2-d input."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return np.concatenate(([1.0], x))
    return np.hstack([np.ones((x.shape[0], 1)), x])


def standardize(ds: Dataset) -> Dataset:
    """Center and scale every covariate by its pooled (labeled + unlabeled)
    mean and population standard deviation.

    The returned dataset's ``center``/``scale`` compose with any earlier
    standardization, so they always map *raw* inputs to the stored scale.
    """
    pooled = ds.x_pooled
    mean = pooled.mean(axis=0)
    sd = pooled.std(axis=0)
    for k in range(ds.p):
        # relative test so a constant column with rounding noise is still caught
        if not sd[k] > 1e-12 * max(1.0, abs(mean[k])):
            raise DataError(f"column {ds.columns[k]} has zero variance")
    return Dataset(
        x=(ds.x - mean) / sd,
        a=ds.a,
        y=ds.y,
        x_unlabeled=(ds.x_unlabeled - mean) / sd,
        center=ds.center + ds.scale * mean,
        scale=ds.scale * sd,
        columns=ds.columns,
    )


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------


def _read_rows(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    return header, rows


def _covariate_names(header: list[str], path: Path) -> list[str]:
    names = []
    for k, h in enumerate(header, start=1):
        if h != f"x{k}":
            break
        names.append(h)
    if not names:
        raise DataError(f"{path}: header must start with x1,...,xp")
    return names


def _parse(rows, width: int, path: Path) -> np.ndarray:
    out = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        if len(row) != width:
            raise DataError(f"{path}: row {i + 2} has {len(row)} cells, expected {width}")
        for j, cell in enumerate(row):
            try:
                out[i, j] = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {i + 2}, column {j + 1}: non-numeric or missing cell {cell!r}") from None
    return out


def load_csv(labeled_path, unlabeled_path=None) -> Dataset:
    """Read ``x1..xp,a,y`` (labeled) and optionally ``x1..xp`` (unlabeled).

    Covariates are returned on the raw scale; call :func:`standardize`
    before fitting.
    """
    labeled_path = Path(labeled_path)
    header, rows = _read_rows(labeled_path)
    names = _covariate_names(header, labeled_path)
    p = len(names)
    if header[p:] != ["a", "y"]:
        raise DataError(f"{labeled_path}: labeled header must be x1,...,xp,a,y")
    if not rows:
        raise DataError(f"{labeled_path}: labeled file has no data rows")
    values = _parse(rows, p + 2, labeled_path)
    a = values[:, p]
    if not np.all((a == 0) | (a == 1)):
        raise DataError("treatment must be binary")

    xu = np.empty((0, p))
    if unlabeled_path is not None:
        unlabeled_path = Path(unlabeled_path)
        uheader, urows = _read_rows(unlabeled_path)
        unames = _covariate_names(uheader, unlabeled_path)
        if len(unames) != len(uheader):
            raise DataError(f"{unlabeled_path}: unlabeled header must be x1,...,xp")
        if len(unames) != p:
            raise DataError(
                f"dimension mismatch: labeled data has p={p}, unlabeled file has {len(unames)} covariates"
            )
        xu = _parse(urows, p, unlabeled_path).reshape(len(urows), p)

    return Dataset(x=values[:, :p], a=a.astype(np.int8), y=values[:, p + 1], x_unlabeled=xu, columns=tuple(names))


def _atomic_write_rows(path: Path, header: list[str], rows) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_csv(ds: Dataset, labeled_path, unlabeled_path=None) -> None:
    """Write the dataset in the :func:`load_csv` schema at full precision."""
    names = [f"x{k + 1}" for k in range(ds.p)]
    _atomic_write_rows(
        labeled_path,
        names + ["a", "y"],
        ([*map(repr, map(float, xi)), str(int(ai)), repr(float(yi))] for xi, ai, yi in zip(ds.x, ds.a, ds.y)),
    )
    if unlabeled_path is not None:
        _atomic_write_rows(unlabeled_path, names, ([repr(float(v)) for v in xj] for xj in ds.x_unlabeled))


def read_covariates(path, p: Optional[int] = None) -> np.ndarray:
    """Read a covariate-only CSV (``x1..xp``; extra trailing columns ignored)."""
    path = Path(path)
    header, rows = _read_rows(path)
    names = _covariate_names(header, path)
    if p is not None and len(names) != p:
        raise DataError(f"dimension mismatch: expected p={p} covariates, {path} has {len(names)}")
    values = _parse([row[: len(names)] for row in rows], len(names), path)
    return values.reshape(len(rows), len(names))
