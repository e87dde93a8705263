"""Dense and sparse linear-algebra backend.

Symmetric positive definite systems are factorized once and solved many
times.  Matrices with a narrow band (the lexicographically ordered
stiffness and mass matrices of the uniform mesh) go through LAPACK's banded
Cholesky; everything else goes through SuperLU in symmetric mode with a
fill-reducing ordering and no pivoting, whose diagonal pivots are then
checked for positivity.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import lapack

__all__ = [
    "NotSPDError",
    "SpdFactorization",
    "spd_factorize",
    "lower_banded",
    "band_fits",
    "spd_solve",
    "sym_eig_desc",
    "numerical_rank",
    "parallel_map",
    "EIG_DIM_CAP",
    "RANK_TOL",
]

EIG_DIM_CAP = 2048
RANK_TOL = 1e-10

# banded Cholesky costs ~ n * bandwidth**2; above this SuperLU wins
_BANDED_WORK_LIMIT = 2e8


class NotSPDError(np.linalg.LinAlgError):
    """Raised when a factorization meets a non-positive pivot."""

    def __init__(self, pivot):
        self.pivot = int(pivot)
        super().__init__(f"matrix not SPD: non-positive pivot at index {self.pivot}")


def _bandwidth(A):
    A = A.tocoo()
    if A.nnz == 0:
        return 0
    return int(np.max(np.abs(A.row - A.col)))


def lower_banded(A):
    """Lower band storage ``ab[i - j, j] = A[i, j]`` of a sparse symmetric matrix."""
    coo = sp.tril(sp.csr_matrix(A, dtype=float)).tocoo()
    bw = int(np.max(coo.row - coo.col)) if coo.nnz else 0
    ab = np.zeros((bw + 1, A.shape[0]))
    np.add.at(ab, (coo.row - coo.col, coo.col), coo.data)
    return ab


def band_fits(A):
    """Whether banded Cholesky is the cheaper backend for ``A``."""
    return A.shape[0] * (_bandwidth(A) + 1) ** 2 <= _BANDED_WORK_LIMIT


class SpdFactorization:
    """Reusable factorization of a symmetric positive definite matrix.

    Parameters
    ----------
    A : sparse matrix or ndarray, shape (n, n)
        Symmetric positive definite matrix.
    method : {"auto", "banded", "splu", "dense"}
        Backend selection.  ``"auto"`` picks banded Cholesky when the
        bandwidth is small enough, SuperLU otherwise, and dense Cholesky for
        ndarrays.
    """

    def __init__(self, A, method="auto"):
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"expected a square matrix, got shape {A.shape}")
        self.n = n
        dense = isinstance(A, np.ndarray)
        if method == "auto":
            if dense:
                method = "dense"
            else:
                method = "banded" if band_fits(A) else "splu"
        self.method = method
        if method == "dense":
            self._factor_dense(np.asarray(A.toarray() if sp.issparse(A) else A, dtype=float))
        elif method == "banded":
            self._factor_banded(sp.csr_matrix(A, dtype=float))
        elif method == "splu":
            self._factor_splu(sp.csc_matrix(A, dtype=float))
        else:
            raise ValueError(f"unknown factorization method {method!r}")

    def _factor_dense(self, A):
        c, info = lapack.dpotrf(A, lower=0, clean=1)
        if info > 0:
            raise NotSPDError(info - 1)
        if info < 0:
            raise ValueError(f"dpotrf: illegal argument {-info}")
        self._c = c

    @classmethod
    def from_banded(cls, ab):
        """Factorize a matrix given in lower band storage (see :func:`lower_banded`)."""
        self = cls.__new__(cls)
        self.n = ab.shape[1]
        self.method = "banded"
        self._factor_ab(np.asarray(ab, dtype=float))
        return self

    def _factor_banded(self, A):
        self._factor_ab(lower_banded(A))

    def _factor_ab(self, ab):
        c, info = lapack.dpbtrf(ab, lower=1)
        if info > 0:
            raise NotSPDError(info - 1)
        if info < 0:
            raise ValueError(f"dpbtrf: illegal argument {-info}")
        self._c = c

    def _factor_splu(self, A):
        try:
            lu = spla.splu(
                A,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
        except RuntimeError as exc:  # exactly singular
            raise NotSPDError(-1) from exc
        pivots = lu.U.diagonal()
        bad = np.flatnonzero(~(pivots > 0))
        if bad.size or not np.array_equal(lu.perm_r, lu.perm_c):
            pos = int(bad[0]) if bad.size else 0
            raise NotSPDError(int(np.argsort(lu.perm_c)[pos]))
        self._lu = lu

    def solve(self, b):
        """Solve ``A x = b`` for a vector or a matrix of right-hand sides."""
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError(
                f"dimension mismatch: matrix has size {self.n}, right-hand side {b.shape[0]}"
            )
        if b.size == 0:
            return np.zeros_like(b)
        if self.method == "dense":
            x, info = lapack.dpotrs(self._c, b, lower=0)
        elif self.method == "banded":
            x, info = lapack.dpbtrs(self._c, b, lower=1)
        else:
            return self._lu.solve(b)
        if info != 0:
            raise ValueError(f"triangular solve failed (info={info})")
        return x


def spd_factorize(A, method="auto"):
    """Factorize a symmetric positive definite matrix for repeated solves."""
    return SpdFactorization(A, method=method)


def spd_solve(factorization, b):
    """Solve with a factorization returned by :func:`spd_factorize`."""
    return factorization.solve(b)


def sym_eig_desc(G, max_dim=EIG_DIM_CAP):
    """Eigen-decomposition of a dense symmetric matrix, eigenvalues descending.

    Returns
    -------
    values : ndarray, shape (n,)
    vectors : ndarray, shape (n, n)
        Orthonormal eigenvectors stored column-wise, matching ``values``.
    """
    G = np.asarray(G, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {G.shape}")
    if G.shape[0] > max_dim:
        raise ValueError(f"dimension {G.shape[0]} exceeds eigensolver cap {max_dim}")
    values, vectors = la.eigh(0.5 * (G + G.T))
    return values[::-1], vectors[:, ::-1]


def numerical_rank(values, rel_tol=RANK_TOL, reference=None):
    """Count entries of a descending nonnegative sequence above ``rel_tol * max``.

    ``reference`` replaces ``max(values)`` as the scale when given, e.g. the
    norm of data before a deflation step.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return 0
    scale = float(values.max()) if reference is None else float(reference)
    if scale <= 0.0:
        return 0
    return int(np.count_nonzero(values > rel_tol * scale))


def parallel_map(fn, items, n_jobs=1):
    """Ordered map, threaded when ``n_jobs > 1`` (LAPACK releases the GIL)."""
    items = list(items)
    if n_jobs is None or n_jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=int(n_jobs)) as pool:
        return list(pool.map(fn, items))
