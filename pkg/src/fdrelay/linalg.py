"""Dense complex linear-algebra helpers.

All matrices are plain ``numpy`` arrays. ``vec`` stacks columns, so that
``vec(A1 @ A2 @ A3) == kron(A3.T, A1) @ vec(A2)``.
"""

import numpy as np
from scipy import linalg as sla

from .errors import DimensionError, DomainError, NearSingularError

# relative Hermitian tolerance: ||X - X^H||_F <= TOL_HERM * (1 + ||X||_F)
TOL_HERM = 1e-10
# PSD tolerance: eigenvalues >= -TOL_PSD * (1 + lambda_max)
TOL_PSD = 1e-9
# condition number above which solve_linear refuses
MAX_COND = 1e12
# residual bound of solve_linear relative to (1 + ||b||)
TOL_SOLVE = 1e-9


def vec(X):
    """Column-stacking vectorization (supports leading batch axes)."""
    X = np.asarray(X)
    return np.swapaxes(X, -1, -2).reshape(X.shape[:-2] + (-1,))


def unvec(x, rows, cols=None):
    """Inverse of :func:`vec`."""
    cols = rows if cols is None else cols
    x = np.asarray(x)
    return np.swapaxes(x.reshape(x.shape[:-1] + (cols, rows)), -1, -2)


def kron(A, B):
    """Kronecker product ``A (x) B``."""
    return np.kron(np.asarray(A), np.asarray(B))


def herm(X):
    """Conjugate transpose over the last two axes."""
    return np.conj(np.swapaxes(X, -1, -2))


def hermitize(X):
    """Project onto the Hermitian matrices, ``(X + X^H) / 2``."""
    return 0.5 * (X + herm(X))


def diag_part(X):
    """Zero the off-diagonal entries of ``X`` (the ``diag(.)`` operator)."""
    X = np.asarray(X)
    d = np.einsum("...ii->...i", X)
    return d[..., :, None] * np.eye(X.shape[-1])


def trace(X):
    return np.einsum("...ii->...", X)


def is_hermitian(X, tol=TOL_HERM):
    X = np.asarray(X)
    return np.linalg.norm(X - herm(X)) <= tol * (1.0 + np.linalg.norm(X))


def is_psd(X, tol=TOL_PSD):
    if not is_hermitian(X):
        return False
    w = np.linalg.eigvalsh(hermitize(X))
    return bool(w.min() >= -tol * (1.0 + max(w.max(), 0.0)))


class SelectionMatrix:
    """Diagonal-selection matrix ``D_M`` with ``D_M vec(X) = vec(diag(X))``.

    Stored as the list of the ``M`` selected indices ``i*M + i``; the dense
    ``M^2 x M^2`` form is only built by :meth:`dense`.
    """

    def __init__(self, M):
        if M < 1:
            raise DimensionError(f"selection matrix needs M >= 1, got {M}")
        self.M = int(M)
        self.indices = np.arange(self.M) * (self.M + 1)

    @property
    def shape(self):
        return (self.M ** 2, self.M ** 2)

    def apply(self, v):
        """``D_M @ v`` for a vector (or stack of column vectors) ``v``."""
        v = np.asarray(v)
        out = np.zeros_like(v)
        out[self.indices, ...] = v[self.indices, ...]
        return out

    def __matmul__(self, other):
        return self.apply(other)

    def rmul(self, A):
        """``A @ D_M``: keep only the selected columns of ``A``."""
        A = np.asarray(A)
        out = np.zeros_like(A)
        out[:, self.indices] = A[:, self.indices]
        return out

    def dense(self):
        D = np.zeros(self.shape)
        D[self.indices, self.indices] = 1.0
        return D

    def __repr__(self):
        return f"SelectionMatrix(M={self.M})"


def selection_matrix(M):
    return SelectionMatrix(M)


def herm_sqrt(X, tol=TOL_PSD):
    """Principal square root of a Hermitian PSD matrix.

    Raises
    ------
    DomainError
        If ``X`` has an eigenvalue below ``-tol * (1 + lambda_max)``.
    """
    X = hermitize(np.asarray(X, dtype=complex))
    w, V = np.linalg.eigh(X)
    if w.min() < -tol * (1.0 + max(w.max(), 0.0)):
        raise DomainError(f"matrix is not PSD (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return hermitize((V * np.sqrt(w)) @ herm(V))


def condition_estimate(A):
    return float(np.linalg.cond(A))


def solve_linear(A, b, max_cond=MAX_COND):
    """Solve ``A x = b`` for square ``A``.

    Returns
    -------
    x : ndarray
    cond : float
        2-norm condition number of ``A``.

    Raises
    ------
    NearSingularError
        When ``A`` is singular or its condition number exceeds ``max_cond``.
    """
    A = np.asarray(A)
    b = np.asarray(b)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"solve_linear needs a square matrix, got {A.shape}")
    cond = condition_estimate(A)
    if not np.isfinite(cond) or cond > max_cond:
        raise NearSingularError(cond)
    x = sla.solve(A, b)
    return x, cond


def chol_factor(X, jitter=1e-12):
    """Lower Cholesky factor of a Hermitian PD matrix with relative jitter."""
    X = hermitize(np.asarray(X, dtype=complex))
    n = X.shape[0]
    scale = max(np.real(np.trace(X)) / n, 1e-300)
    return np.linalg.cholesky(X + jitter * scale * np.eye(n))


def crandn(rng, *shape):
    """Standard circularly-symmetric complex Gaussian samples, CN(0, 1)."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
