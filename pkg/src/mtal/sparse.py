"""Row-major sparse matrices shared by the model and loss code.

A ``SparseRows`` is a CSR triple (indptr, cols, vals) with column indices
strictly ascending inside each row.  It doubles as the network's input batch
type and, with a shape attached, as the masked target matrices the losses
operate on: the stored cells *are* the observation mask.
"""
from __future__ import annotations

import numpy as np


class SparseRows:
    """CSR matrix; the nonzero pattern is meaningful (it is the mask)."""

    __slots__ = ("shape", "indptr", "cols", "vals")

    def __init__(self, shape, indptr, cols, vals):
        self.shape = (int(shape[0]), int(shape[1]))
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.cols = np.asarray(cols, dtype=np.int32)
        self.vals = np.asarray(vals, dtype=np.float64)
        if self.indptr.shape != (self.shape[0] + 1,):
            raise ValueError("indptr length must be rows + 1")
        if self.indptr[-1] != len(self.cols) or len(self.cols) != len(self.vals):
            raise ValueError("cols/vals length mismatch with indptr")

    @classmethod
    def from_coo(cls, shape, rows, cols, vals, *, check_duplicates=False):
        """Build from triplets; sorts by (row, col). Duplicates optionally rejected."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if check_duplicates and len(rows) > 1:
            same = (np.diff(rows) == 0) & (np.diff(cols) == 0)
            if same.any():
                i = int(np.argmax(same))
                raise ValueError(f"duplicate cell ({rows[i]}, {cols[i]})")
        indptr = np.zeros(shape[0] + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        np.cumsum(indptr, out=indptr)
        return cls(shape, indptr, cols, vals)

    @classmethod
    def dense_mask(cls, values):
        """Wrap a dense matrix as a fully-observed SparseRows (every cell masked in)."""
        values = np.asarray(values, dtype=np.float64)
        n_rows, n_cols = values.shape
        indptr = np.arange(n_rows + 1, dtype=np.int64) * n_cols
        cols = np.tile(np.arange(n_cols, dtype=np.int32), n_rows)
        return cls(values.shape, indptr, cols, values.ravel().copy())

    @property
    def nnz(self):
        return int(self.indptr[-1])

    def row_coo(self):
        """Row index of every stored cell, aligned with cols/vals."""
        counts = np.diff(self.indptr)
        return np.repeat(np.arange(self.shape[0], dtype=np.int64), counts)

    def row_slice(self, i):
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return self.cols[lo:hi], self.vals[lo:hi]

    def take_rows(self, row_indices):
        """New SparseRows containing the given rows, in the given order."""
        row_indices = np.asarray(row_indices, dtype=np.int64)
        counts = np.diff(self.indptr)[row_indices]
        indptr = np.zeros(len(row_indices) + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        gather = _ranges(self.indptr[row_indices], counts)
        return SparseRows((len(row_indices), self.shape[1]),
                          indptr, self.cols[gather], self.vals[gather])

    def to_dense(self):
        out = np.zeros(self.shape, dtype=np.float64)
        out[self.row_coo(), self.cols] = self.vals
        return out

    def mask_dense(self):
        out = np.zeros(self.shape, dtype=bool)
        out[self.row_coo(), self.cols] = True
        return out

    def scatter_batch(self, row_indices, width=None):
        """Dense (values, mask) pair for a batch of rows."""
        width = self.shape[1] if width is None else width
        sub = self.take_rows(row_indices)
        values = np.zeros((len(row_indices), width), dtype=np.float64)
        mask = np.zeros((len(row_indices), width), dtype=bool)
        r = sub.row_coo()
        values[r, sub.cols] = sub.vals
        mask[r, sub.cols] = True
        return values, mask

    def transposed(self):
        rows = self.row_coo()
        return SparseRows.from_coo((self.shape[1], self.shape[0]),
                                   self.cols.astype(np.int64), rows, self.vals)

    def with_vals(self, vals):
        """Same pattern, different values."""
        vals = np.asarray(vals, dtype=np.float64)
        if vals.shape != self.vals.shape:
            raise ValueError("value vector must match nnz")
        return SparseRows(self.shape, self.indptr, self.cols, vals)

    def check_ascending(self):
        """Verify columns are strictly ascending inside every row."""
        for i in range(self.shape[0]):
            lo, hi = self.indptr[i], self.indptr[i + 1]
            if hi - lo > 1 and not (np.diff(self.cols[lo:hi]) > 0).all():
                raise ValueError(f"row {i} has non-ascending columns")


def _ranges(starts, counts):
    """Concatenate arange(start, start+count) for each pair; vectorized."""
    starts = np.asarray(starts, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    base = np.repeat(starts, counts)
    offsets = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
    return base + offsets
