"""Hot kernels for graph propagation over stacked interval-graphs.

Activations for a batch of ``B`` graphs sharing one ``V``-node operator are kept
node-major: row ``v * B + b`` holds node ``v`` of graph ``b``.  Viewed as a
``(V, B * H)`` array, propagating every graph at once is a single product with
the ``V x V`` operator.  The numba path walks the operator in CSR form; the
numpy path multiplies by the dense matrix.
"""

import numpy as np

from ._accel import HAVE_NUMBA, njit


@njit(cache=True)
def _csr_spmm(indptr, indices, data, x, out):
    n_rows = indptr.shape[0] - 1
    width = x.shape[1]
    for i in range(n_rows):
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            a = data[p]
            for c in range(width):
                out[i, c] += a * x[j, c]
    return out


def _to_csr(dense):
    rows, cols = np.nonzero(dense)
    indptr = np.zeros(dense.shape[0] + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    indptr = np.cumsum(indptr)
    return indptr, cols.astype(np.int64), dense[rows, cols].astype(np.float64)


class Propagator:
    """A fixed ``V x V`` propagation operator with forward and transpose products.

    ``backend`` is ``"auto"`` (numba when available), ``"numba"`` or ``"numpy"``.
    """

    def __init__(self, matrix, backend="auto"):
        matrix = np.ascontiguousarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError(f"propagation operator must be square, got {matrix.shape}")
        if backend not in ("auto", "numba", "numpy"):
            raise ValueError(f"unknown backend {backend!r}")
        self.matrix = matrix
        self.n = matrix.shape[0]
        self.use_numba = HAVE_NUMBA and backend in ("auto", "numba")
        self.symmetric = bool(np.array_equal(matrix, matrix.T))
        self._csr = _to_csr(matrix)
        self._csr_t = self._csr if self.symmetric else _to_csr(np.ascontiguousarray(matrix.T))

    @property
    def backend(self):
        return "numba" if self.use_numba else "numpy"

    @property
    def nnz(self):
        return int(self._csr[1].shape[0])

    def _apply(self, x, transpose):
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.shape[0] != self.n:
            raise ValueError(f"operator has {self.n} nodes but input has {x.shape[0]} rows")
        if self.use_numba:
            indptr, indices, data = self._csr_t if transpose else self._csr
            return _csr_spmm(indptr, indices, data, x, np.zeros_like(x))
        mat = self.matrix.T if transpose else self.matrix
        return mat @ x

    def apply(self, x):
        """``A @ x`` for ``x`` of shape ``(V, K)``."""
        return self._apply(x, False)

    def apply_t(self, x):
        """``A.T @ x`` for ``x`` of shape ``(V, K)``."""
        return self._apply(x, True)
