"""Sparse SPD Cholesky factorization backed by CHOLMOD (via cvxopt)."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from cvxopt import cholmod, matrix, spmatrix


def _to_cvxopt(q: sp.spmatrix) -> spmatrix:
    coo = sp.coo_matrix(q)
    return spmatrix(
        coo.data.astype(np.float64),
        coo.row.astype(np.int64),
        coo.col.astype(np.int64),
        coo.shape,
    )


class SparseFactor:
    """Cholesky factorization P Q P' = L L' of a sparse SPD matrix.

    Raises numpy.linalg.LinAlgError if Q is not positive definite.
    """

    def __init__(self, q: sp.spmatrix):
        self.shape = q.shape
        qc = _to_cvxopt(q)
        self._factor = cholmod.symbolic(qc)
        try:
            cholmod.numeric(qc, self._factor)
        except ArithmeticError as exc:
            raise np.linalg.LinAlgError(
                "sparse Cholesky failed: matrix is not positive definite"
            ) from exc

    def solve(self, b) -> np.ndarray:
        """Solve Q x = b for a vector or a stack of column vectors."""
        b = np.asarray(b, dtype=np.float64)
        vec = b.ndim == 1
        bm = matrix(b if not vec else b[:, None])
        cholmod.solve(self._factor, bm, sys=0)
        out = np.array(bm).reshape(b.shape[0], -1)
        return out[:, 0] if vec else out

    def backsolve_white(self, z) -> np.ndarray:
        """Map iid standard normals z to draws with covariance Q^{-1}.

        Computes x = P' L^{-T} z so that cov(x) = Q^{-1}.
        """
        z = np.asarray(z, dtype=np.float64)
        vec = z.ndim == 1
        zm = matrix(z if not vec else z[:, None])
        cholmod.solve(self._factor, zm, sys=5)  # L' y = z
        cholmod.solve(self._factor, zm, sys=8)  # x = P' y
        out = np.array(zm).reshape(z.shape[0], -1)
        return out[:, 0] if vec else out

    def logdet(self) -> float:
        """log det Q."""
        d = np.array(cholmod.diag(self._factor)).ravel()
        return float(2.0 * np.sum(np.log(d)))
