"""Observation data model, CSV ingestion and design matrices."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from .exceptions import DataError, IdentificationError

__all__ = [
    "Observation",
    "Dataset",
    "Schema",
    "load_csv",
    "write_csv",
    "design_matrix",
]


class Observation(NamedTuple):
    y: float
    d: int
    z: int
    x: tuple[float, ...]


@dataclass(frozen=True)
class Schema:
    """Column names of the logical fields. ``x=None`` means all remaining columns."""

    y: str = "y"
    d: str = "d"
    z: str = "z"
    x: tuple[str, ...] | None = None

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, object] | None) -> "Schema":
        if mapping is None:
            return cls()
        if isinstance(mapping, Schema):
            return mapping
        x = mapping.get("x")
        if isinstance(x, str):
            x = tuple(c.strip() for c in x.split(",") if c.strip())
        elif x is not None:
            x = tuple(x)
        return cls(
            y=str(mapping.get("y", "y")),
            d=str(mapping.get("d", "d")),
            z=str(mapping.get("z", "z")),
            x=x,
        )


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Validated estimation sample.

    Arrays are copied and marked read-only, so a Dataset can be shared freely
    between worker processes and threads.

    Parameters
    ----------
    y : (n,) outcome
    d : (n,) treatment status in {0, 1}
    z : (n,) binary instrument in {0, 1}
    x : (n, p) exogenous covariates, without an intercept column
    covariate_names : optional names of the ``x`` columns
    """

    y: np.ndarray
    d: np.ndarray
    z: np.ndarray
    x: np.ndarray
    covariate_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        n = y.shape[0]
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(n, -1) if x.size else np.empty((n, 0))
        if x.shape[0] != n:
            raise DataError(f"x has {x.shape[0]} rows but y has {n}")
        d = _binary(self.d, "d", n)
        z = _binary(self.z, "z", n)
        if n < 1:
            raise DataError("dataset is empty")
        if not np.all(np.isfinite(y)):
            raise DataError("non-finite outcome", row=int(np.argmin(np.isfinite(y))) + 1, column="y")
        bad = ~np.isfinite(x)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise DataError("non-finite covariate", row=int(r) + 1, column=f"x{c + 1}")
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise DataError("covariate_names length does not match x")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "d", _frozen(d))
        object.__setattr__(self, "z", _frozen(z))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def __len__(self) -> int:
        return self.n

    def observation(self, i: int) -> Observation:
        return Observation(float(self.y[i]), int(self.d[i]), int(self.z[i]), tuple(self.x[i].tolist()))

    def __iter__(self) -> Iterator[Observation]:
        for i in range(self.n):
            yield self.observation(i)

    def check_identified(self) -> "Dataset":
        """Raise if treatment or instrument lacks variation."""
        if np.all(self.z == self.z[0]):
            raise IdentificationError("instrument has no variation", column="z")
        if np.all(self.d == self.d[0]):
            raise IdentificationError("treatment has no variation", column="d")
        return self

    def take(self, idx: np.ndarray) -> "Dataset":
        """Row subset (used for resampling)."""
        idx = np.asarray(idx)
        return Dataset(self.y[idx], self.d[idx], self.z[idx], self.x[idx], self.covariate_names)


def _binary(v, name: str, n: int) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(-1)
    if a.shape[0] != n:
        raise DataError(f"{name} has {a.shape[0]} entries but y has {n}")
    bad = ~((a == 0) | (a == 1))
    if bad.any():
        raise DataError(f"{name} must be 0 or 1", row=int(np.argmax(bad)) + 1, column=name)
    return a.astype(np.int8)


def _parse_float(cell: str, row: int, column: str) -> float:
    s = cell.strip()
    if s == "" or s.lower() in {"na", "nan", "null", "none"}:
        raise DataError("missing value", row=row, column=column)
    try:
        v = float(s)
    except ValueError:
        raise DataError(f"non-numeric value {cell!r}", row=row, column=column) from None
    if not math.isfinite(v):
        raise DataError("non-finite value", row=row, column=column)
    return v


def load_csv(path: str | Path, schema: Mapping[str, object] | Schema | None = None) -> Dataset:
    """Read a comma-separated file with one header row into a validated Dataset.

    Lines starting with ``#`` are ignored. Covariates default to every column
    other than the outcome, treatment and instrument columns. Row numbers in
    error messages count data rows from 1.
    """
    schema = Schema.from_mapping(schema)
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        lines = (ln for ln in fh if not ln.lstrip().startswith("#"))
        reader = csv.reader(lines)
        header = next(reader, None)
        if header is None or not any(h.strip() for h in header):
            raise DataError(f"empty file: {path}")
        header = [h.strip() for h in header]
        index = {h: j for j, h in enumerate(header)}
        for role in ("y", "d", "z"):
            col = getattr(schema, role)
            if col not in index:
                raise DataError(f"missing required column for {role}", column=col)
        if schema.x is None:
            xcols = [h for h in header if h not in {schema.y, schema.d, schema.z}]
        else:
            xcols = list(schema.x)
            for c in xcols:
                if c not in index:
                    raise DataError("missing covariate column", column=c)
        ys, ds, zs, xs = [], [], [], []
        for r, rec in enumerate(reader, start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise DataError(f"expected {len(header)} fields, found {len(rec)}", row=r)
            ys.append(_parse_float(rec[index[schema.y]], r, schema.y))
            for col, out in ((schema.d, ds), (schema.z, zs)):
                v = _parse_float(rec[index[col]], r, col)
                if v not in (0.0, 1.0):
                    raise DataError(f"value {rec[index[col]].strip()!r} is not binary", row=r, column=col)
                out.append(v)
            xs.append([_parse_float(rec[index[c]], r, c) for c in xcols])
    if not ys:
        raise DataError(f"empty file: {path}")
    x = np.array(xs, dtype=float).reshape(len(ys), len(xcols))
    ds_ = Dataset(np.array(ys), np.array(ds), np.array(zs), x, tuple(xcols))
    return ds_.check_identified()


def write_csv(ds: Dataset, path: str | Path, extra: Mapping[str, np.ndarray] | None = None,
              comments: Sequence[str] = ()) -> Path:
    """Write ``ds`` with columns y, d, z, covariates; floats use shortest round-trip repr."""
    path = Path(path)
    extra = dict(extra or {})
    with path.open("w", newline="", encoding="utf-8") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh)
        w.writerow(["y", "d", "z", *ds.covariate_names, *extra])
        cols = [ds.y, ds.d, ds.z, *ds.x.T, *extra.values()]
        for row in zip(*cols):
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else int(v) for v in row])
    return path


def design_matrix(ds: Dataset, include_treatment: bool = True) -> np.ndarray:
    """Regressor matrix ``[D, 1, x1..xp]`` (or ``[1, x1..xp]``).

    Column 0 is the treatment dummy so that coefficient 0 is always the
    treatment effect.
    """
    cols = [np.ones(ds.n), *ds.x.T]
    if include_treatment:
        cols.insert(0, ds.d.astype(float))
    return np.column_stack(cols)
