"""Dense complex linear algebra for the 4-level Hilbert space and its
16-dimensional Liouville space.

Vectorization convention (used everywhere in the package): ``vec`` stacks
*columns*, i.e. ``vec(m)[i + n*j] = m[i, j]``.  With this convention

    vec(A @ B @ C) == kron(C.T, A) @ vec(B)

and a superoperator acting as ``rho -> A rho B`` is ``kron(B.T, A)``.
"""

import warnings

import numpy as np
import scipy.linalg

HILBERT_DIM = 4
LIOUVILLE_DIM = HILBERT_DIM * HILBERT_DIM


class LinAlgError(ValueError):
    """Raised for dimension mismatches, singular systems or bad inputs."""


class SingularMatrixError(LinAlgError):
    pass


def _as_square(m, name="matrix"):
    m = np.asarray(m, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise LinAlgError(f"{name} must be square, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise LinAlgError(f"{name} has non-finite entries")
    return m


def vec(m):
    """Column-stack a square matrix (works on stacks ``(..., n, n)`` too)."""
    m = np.asarray(m)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise LinAlgError(f"vec expects square matrices, got shape {m.shape}")
    n = m.shape[-1]
    return np.swapaxes(m, -1, -2).reshape(m.shape[:-2] + (n * n,))


def devec(v):
    """Inverse of :func:`vec`."""
    v = np.asarray(v)
    n = int(round(np.sqrt(v.shape[-1])))
    if n * n != v.shape[-1]:
        raise LinAlgError(f"length {v.shape[-1]} is not a perfect square")
    return np.swapaxes(v.reshape(v.shape[:-1] + (n, n)), -1, -2)


def spre(a):
    """Superoperator of ``rho -> a @ rho``."""
    a = np.asarray(a)
    return np.kron(np.eye(a.shape[-1]), a)


def spost(b):
    """Superoperator of ``rho -> rho @ b``."""
    b = np.asarray(b)
    return np.kron(b.T, np.eye(b.shape[-1]))


def sprepost(a, b):
    """Superoperator of ``rho -> a @ rho @ b``."""
    return np.kron(np.asarray(b).T, np.asarray(a))


def trace_row(n=HILBERT_DIM):
    """Row vector ``t`` with ``t @ vec(m) == trace(m)``."""
    return vec(np.eye(n)).astype(complex)


def solve_linear(a, b):
    """Solve ``a @ x = b`` by LU factorization with partial pivoting.

    Raises :class:`SingularMatrixError` when the smallest pivot is below
    ``1e-13 * ||a||``.
    """
    a = _as_square(a, "a")
    b = np.asarray(b, dtype=complex)
    if b.shape[0] != a.shape[0]:
        raise LinAlgError(f"rhs length {b.shape[0]} does not match {a.shape[0]}")
    norm = np.linalg.norm(a, ord=np.inf)
    if norm == 0.0:
        raise SingularMatrixError("zero matrix")
    with warnings.catch_warnings():
        # exact zero pivots are reported below as SingularMatrixError
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(a, check_finite=False)
    pivot = np.min(np.abs(np.diag(lu)))
    if pivot < 1e-13 * norm:
        raise SingularMatrixError(
            f"matrix is numerically singular (pivot {pivot:.3e}, norm {norm:.3e})"
        )
    return scipy.linalg.lu_solve((lu, piv), b, check_finite=False)


def is_hermitian(m, atol=1e-8):
    m = np.asarray(m)
    return bool(np.max(np.abs(m - m.conj().T), initial=0.0) <= atol)


def hermitian_eigenvalues(m, atol=1e-8):
    """Ascending real eigenvalues of a Hermitian matrix."""
    m = _as_square(m)
    if not is_hermitian(m, atol):
        raise LinAlgError("matrix is not Hermitian")
    return np.linalg.eigvalsh(0.5 * (m + m.conj().T))


def check_density_matrix(rho, herm_tol=1e-10, trace_tol=1e-9, eig_tol=1e-8):
    """Return a list of violated density-matrix invariants (empty if valid)."""
    rho = np.asarray(rho)
    problems = []
    herm = np.max(np.abs(rho - rho.conj().T))
    if herm > herm_tol:
        problems.append(f"hermiticity {herm:.3e}")
    tr = abs(np.trace(rho) - 1.0)
    if tr > trace_tol:
        problems.append(f"trace drift {tr:.3e}")
    lam = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0]
    if lam < -eig_tol:
        problems.append(f"min eigenvalue {lam:.3e}")
    return problems
