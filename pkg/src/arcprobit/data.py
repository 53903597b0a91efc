"""Sparse crossed binary-response data.

Observations live on cells (i, j) of an R x C grid with at most one
observation per cell. Cells are stored in canonical row-major (row, col)
order no matter how the input was ordered, and cluster labels are mapped to
dense indices by sorted label order. Both choices make every downstream
floating-point reduction independent of input permutation: the same data in
any order produces bitwise-identical results.
"""

from __future__ import annotations

import io
import json
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .errors import ParseError, SchemaError

INTERCEPT_NAME = "(intercept)"

_CACHE_MAGIC = b"ARCPROBIT\x00"
_CACHE_VERSION = 1


@dataclass
class SparseBinaryDataset:
    """Canonically ordered cells of a sparse two-way binary layout."""

    x: np.ndarray                    # (N, p) float64, canonical cell order
    y: np.ndarray                    # (N,) float64, values 0.0 or 1.0
    rows: np.ndarray                 # (N,) int64, dense row index per cell
    cols: np.ndarray                 # (N,) int64, dense col index per cell
    n_rows: int
    n_cols: int
    feature_names: list
    row_labels: np.ndarray           # original labels in dense-index order
    col_labels: np.ndarray
    has_intercept: bool = False
    n_duplicates_dropped: int = 0
    row_start: Optional[np.ndarray] = field(default=None, repr=False)
    col_start: Optional[np.ndarray] = field(default=None, repr=False)
    col_order: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_cells(self) -> int:
        return self.y.shape[0]

    @property
    def n_features(self) -> int:
        return self.x.shape[1]

    def row_view(self, i: int) -> np.ndarray:
        """Cell indices of row i (contiguous in canonical storage)."""
        return np.arange(self.row_start[i], self.row_start[i + 1])

    def col_view(self, j: int) -> np.ndarray:
        """Cell indices of column j, ascending in row index."""
        return self.col_order[self.col_start[j]:self.col_start[j + 1]]

    @property
    def row_counts(self) -> np.ndarray:
        return np.diff(self.row_start)

    @property
    def col_counts(self) -> np.ndarray:
        return np.diff(self.col_start)

    def with_response(self, y_new: np.ndarray) -> "SparseBinaryDataset":
        """Same design, new response; views are shared, not rebuilt."""
        y_new = np.asarray(y_new, dtype=float)
        if y_new.shape != self.y.shape:
            raise ValueError("response shape mismatch")
        return replace(self, y=y_new)


def from_cells(x, y, rows, cols, *, n_rows=None, n_cols=None,
               feature_names=None, row_labels=None, col_labels=None,
               has_intercept=False) -> SparseBinaryDataset:
    """Build a dataset from per-cell arrays with dense integer indices.

    Duplicate (row, col) keys keep the last occurrence in input order and a
    warning records how many were dropped. Cells are then sorted row-major.
    """
    x = np.ascontiguousarray(np.asarray(x, dtype=float))
    if x.ndim != 2:
        raise ValueError("x must be 2-d")
    y = np.asarray(y, dtype=float).ravel()
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    n = y.shape[0]
    if not (x.shape[0] == rows.shape[0] == cols.shape[0] == n):
        raise ValueError("cell arrays must share their first dimension")
    if n == 0:
        raise SchemaError("no observations")
    bad = ~((y == 0.0) | (y == 1.0))
    if np.any(bad):
        raise ParseError(f"response must be 0 or 1; offending cell index {int(np.argmax(bad))}")
    if rows.min() < 0 or cols.min() < 0:
        raise ValueError("negative cluster index")

    n_rows = int(rows.max()) + 1 if n_rows is None else int(n_rows)
    n_cols = int(cols.max()) + 1 if n_cols is None else int(n_cols)

    # sort by (row, col, input position); last occurrence of a key survives
    order = np.lexsort((np.arange(n), cols, rows))
    r_s, c_s = rows[order], cols[order]
    same_key = np.zeros(n, dtype=bool)
    same_key[:-1] = (r_s[:-1] == r_s[1:]) & (c_s[:-1] == c_s[1:])
    keep = order[~same_key]
    n_dropped = n - keep.shape[0]
    if n_dropped:
        warnings.warn(f"dropped {n_dropped} duplicate cell(s), keeping last occurrence")

    if row_labels is None:
        row_labels = np.arange(n_rows)
    if col_labels is None:
        col_labels = np.arange(n_cols)
    if feature_names is None:
        feature_names = [f"x{k + 1}" for k in range(x.shape[1])]

    ds = SparseBinaryDataset(
        x=np.ascontiguousarray(x[keep]),
        y=y[keep],
        rows=rows[keep],
        cols=cols[keep],
        n_rows=n_rows,
        n_cols=n_cols,
        feature_names=list(feature_names),
        row_labels=np.asarray(row_labels),
        col_labels=np.asarray(col_labels),
        has_intercept=has_intercept,
        n_duplicates_dropped=n_dropped,
    )
    return build_views(ds)


def build_views(ds: SparseBinaryDataset) -> SparseBinaryDataset:
    """Attach row/col cluster views to canonically ordered storage.

    Rows are contiguous already, so the row view is offsets only. The column
    view is a stable grouping permutation; within a column, cells stay in
    ascending row order.
    """
    row_counts = np.bincount(ds.rows, minlength=ds.n_rows)
    ds.row_start = np.concatenate(([0], np.cumsum(row_counts)))
    col_counts = np.bincount(ds.cols, minlength=ds.n_cols)
    ds.col_start = np.concatenate(([0], np.cumsum(col_counts)))
    ds.col_order = np.argsort(ds.cols, kind="stable")
    return ds


@dataclass
class DatasetStats:
    n_cells: int
    n_rows: int
    n_cols: int
    fill_rate: float
    max_row_share: float
    max_col_share: float
    n_singleton_rows: int
    n_singleton_cols: int


def compute_stats(ds: SparseBinaryDataset) -> DatasetStats:
    rc, cc = ds.row_counts, ds.col_counts
    n = ds.n_cells
    return DatasetStats(
        n_cells=n,
        n_rows=ds.n_rows,
        n_cols=ds.n_cols,
        fill_rate=n / (ds.n_rows * ds.n_cols),
        max_row_share=float(rc.max()) / n,
        max_col_share=float(cc.max()) / n,
        n_singleton_rows=int(np.sum(rc == 1)),
        n_singleton_cols=int(np.sum(cc == 1)),
    )


def _first_bad_line(mask: np.ndarray, df_index: pd.Index) -> int:
    """1-based file line of the first offending record (header is line 1)."""
    pos = int(np.argmax(np.asarray(mask)))
    return int(df_index[pos]) + 2


def from_frame(df: pd.DataFrame, *, response: str, row: str, col: str,
               features: Sequence[str], add_intercept: bool = True) -> SparseBinaryDataset:
    """Validate and convert a parsed table into a dataset."""
    for name in [response, row, col, *features]:
        if name not in df.columns:
            raise SchemaError(f"missing required column {name!r}")
    if len(df) == 0:
        raise SchemaError("no observations")

    yv = pd.to_numeric(df[response], errors="coerce").to_numpy(dtype=float)
    bad = ~((yv == 0.0) | (yv == 1.0))
    if np.any(bad):
        raise ParseError(
            f"column {response!r} must be 0 or 1; first offending value on "
            f"line {_first_bad_line(bad, df.index)}"
        )

    feats = []
    for name in features:
        v = pd.to_numeric(df[name], errors="coerce").to_numpy(dtype=float)
        bad = ~np.isfinite(v)
        if np.any(bad):
            raise ParseError(
                f"column {name!r} has a non-numeric or missing value on "
                f"line {_first_bad_line(bad, df.index)}"
            )
        feats.append(v)
    x = np.column_stack(feats) if feats else np.empty((len(df), 0))
    names = list(features)
    if add_intercept:
        x = np.column_stack([np.ones(len(df)), x])
        names = [INTERCEPT_NAME] + names

    # labels as strings, dense ids by sorted label order: permutation-stable
    row_lab = df[row].astype(str).to_numpy()
    col_lab = df[col].astype(str).to_numpy()
    row_labels, rows = np.unique(row_lab, return_inverse=True)
    col_labels, cols = np.unique(col_lab, return_inverse=True)

    return from_cells(
        x, yv, rows, cols,
        n_rows=row_labels.shape[0], n_cols=col_labels.shape[0],
        feature_names=names, row_labels=row_labels, col_labels=col_labels,
        has_intercept=add_intercept,
    )


def load_csv(path, *, response: str, row: str, col: str,
             features: Sequence[str], add_intercept: bool = True) -> SparseBinaryDataset:
    """Read a (optionally gzipped) CSV into a canonical dataset."""
    try:
        df = pd.read_csv(path, dtype=str)
    except pd.errors.EmptyDataError:
        raise SchemaError("no observations") from None
    return from_frame(df, response=response, row=row, col=col,
                      features=features, add_intercept=add_intercept)


def save_csv(ds: SparseBinaryDataset, path, *, response: str = "y",
             row: str = "row", col: str = "col") -> None:
    """Write the dataset back out; the intercept column is not materialized."""
    cols = {
        row: ds.row_labels[ds.rows],
        col: ds.col_labels[ds.cols],
        response: ds.y.astype(np.int64),
    }
    x = ds.x[:, 1:] if ds.has_intercept else ds.x
    names = ds.feature_names[1:] if ds.has_intercept else ds.feature_names
    for k, name in enumerate(names):
        cols[name] = x[:, k]
    pd.DataFrame(cols).to_csv(path, index=False)


def save_cache(ds: SparseBinaryDataset, path) -> None:
    """Binary cache: magic + version + JSON header + little-endian arrays."""
    header = {
        "n_rows": ds.n_rows,
        "n_cols": ds.n_cols,
        "n_cells": ds.n_cells,
        "n_features": ds.n_features,
        "feature_names": list(map(str, ds.feature_names)),
        "row_labels": [str(v) for v in ds.row_labels],
        "col_labels": [str(v) for v in ds.col_labels],
        "has_intercept": bool(ds.has_intercept),
        "n_duplicates_dropped": int(ds.n_duplicates_dropped),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(np.array(_CACHE_VERSION, dtype="<u4").tobytes())
        fh.write(np.array(len(hb), dtype="<u8").tobytes())
        fh.write(hb)
        fh.write(ds.rows.astype("<i8").tobytes())
        fh.write(ds.cols.astype("<i8").tobytes())
        fh.write(ds.y.astype("<u1").tobytes())
        fh.write(np.ascontiguousarray(ds.x, dtype="<f8").tobytes())


def load_cache(path) -> SparseBinaryDataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    f = io.BytesIO(buf)
    if f.read(len(_CACHE_MAGIC)) != _CACHE_MAGIC:
        raise SchemaError("not a dataset cache file (bad magic)")
    version = int(np.frombuffer(f.read(4), dtype="<u4")[0])
    if version != _CACHE_VERSION:
        raise SchemaError(f"unsupported cache version {version}")
    hlen = int(np.frombuffer(f.read(8), dtype="<u8")[0])
    header = json.loads(f.read(hlen).decode())
    n, p = header["n_cells"], header["n_features"]
    rows = np.frombuffer(f.read(8 * n), dtype="<i8").astype(np.int64)
    cols = np.frombuffer(f.read(8 * n), dtype="<i8").astype(np.int64)
    y = np.frombuffer(f.read(n), dtype="<u1").astype(float)
    x = np.frombuffer(f.read(8 * n * p), dtype="<f8").astype(float).reshape(n, p)
    return from_cells(
        x, y, rows, cols,
        n_rows=header["n_rows"], n_cols=header["n_cols"],
        feature_names=header["feature_names"],
        row_labels=np.asarray(header["row_labels"]),
        col_labels=np.asarray(header["col_labels"]),
        has_intercept=header["has_intercept"],
    )
