"""
Dense and sparse matrix kernels for the GCN pipeline.

All training math runs in float64. Sparse matrices are scipy CSR matrices
kept in canonical form (sorted column indices, no duplicates), so products
accumulate each output element in ascending column order.
"""

from typing import Union

import numpy as np
import scipy.sparse as sp

DenseMatrix = np.ndarray
SparseMatrix = sp.csr_matrix


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible."""


class ZeroNormError(ValueError):
    """A vector with zero norm was passed where a direction is required."""


def as_dense(a) -> DenseMatrix:
    """Return a C-contiguous float64 2-D array, rejecting non-finite entries."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix contains non-finite entries")
    return arr


def csr_from_coo(rows, cols, values, shape) -> SparseMatrix:
    """Build a canonical CSR matrix; duplicate (row, col) entries are summed."""
    m = sp.coo_matrix(
        (np.asarray(values, dtype=np.float64),
         (np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64))),
        shape=shape,
    ).tocsr()
    m.sum_duplicates()
    m.sort_indices()
    return m


def canonical(a: Union[SparseMatrix, np.ndarray]) -> SparseMatrix:
    m = sp.csr_matrix(a, dtype=np.float64)
    m.sum_duplicates()
    m.sort_indices()
    return m


def identity(n: int) -> SparseMatrix:
    return canonical(sp.identity(n, dtype=np.float64, format="csr"))


def densify(a: SparseMatrix) -> DenseMatrix:
    return np.asarray(a.toarray(), dtype=np.float64)


def spmm(a: SparseMatrix, b: DenseMatrix) -> DenseMatrix:
    """Sparse-dense product ``a @ b``.

    Row ``i`` of the result is accumulated over the stored entries of row ``i``
    of ``a`` in ascending column order.
    """
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"spmm: a is {a.shape}, b is {b.shape}")
    if not a.has_sorted_indices:
        a = canonical(a)
    return np.ascontiguousarray(a @ np.asarray(b, dtype=np.float64))


def matmul(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: a is {a.shape}, b is {b.shape}")
    return np.ascontiguousarray(np.matmul(a, b))


def relu(a: DenseMatrix) -> DenseMatrix:
    return np.maximum(a, 0.0)


def relu_mask(pre_activation: DenseMatrix) -> DenseMatrix:
    """Derivative of relu evaluated at ``pre_activation`` (0 at the kink)."""
    return (pre_activation > 0.0).astype(np.float64)


def row_norms(a: DenseMatrix) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", a, a))


def row_normalize(a: DenseMatrix, names=None) -> DenseMatrix:
    """Scale every row to unit L2 norm; zero rows raise ``ZeroNormError``."""
    norms = row_norms(a)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        row = int(zero[0])
        label = names[row] if names is not None else row
        raise ZeroNormError(f"row {label!r} has zero norm")
    return a / norms[:, None]


def cosine(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeMismatchError(f"cosine: {x.shape} vs {y.shape}")
    nx = float(np.sqrt(np.dot(x, x)))
    ny = float(np.sqrt(np.dot(y, y)))
    if nx == 0.0 or ny == 0.0:
        raise ZeroNormError("cosine similarity of a zero vector is undefined")
    value = float(np.dot(x, y)) / (nx * ny)
    return min(1.0, max(-1.0, value))


def cosine_matrix(a: DenseMatrix, b: DenseMatrix, a_names=None, b_names=None) -> DenseMatrix:
    """Pairwise cosine similarity between the rows of ``a`` and ``b``."""
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatchError(f"cosine_matrix: {a.shape} vs {b.shape}")
    sims = row_normalize(a, a_names) @ row_normalize(b, b_names).T
    return np.clip(sims, -1.0, 1.0)
