"""Sparse/dense linear-algebra kernels shared by all solver components.

CSR matrices (scipy), Gauss-Seidel sweeps (pyamg pointwise kernel), a PCG
driver with iteration reporting, dense symmetric and diagonally weighted
eigensolvers, and a cached dense Cholesky solver for coarse systems.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
from pyamg.relaxation.relaxation import gauss_seidel as _gs_kernel


class LinalgError(Exception):
    """Numerical breakdown (non-SPD input, zero diagonal, NaN, ...)."""


@dataclass
class SolveReport:
    """Outcome of one iterative solve."""

    iterations: int
    final_relative_residual: float
    converged: bool
    # Ritz estimates for the preconditioned operator, filled when the
    # solver is asked to track its Lanczos coefficients.
    ritz_min: float | None = None
    ritz_max: float | None = None


def as_csr(A) -> sp.csr_matrix:
    """Return A as CSR with sorted, deduplicated indices."""
    A = sp.csr_matrix(A)
    A.sum_duplicates()
    A.sort_indices()
    return A


def is_symmetric(A: sp.spmatrix, tol: float = 1e-10) -> bool:
    """Relative symmetry check: max|A - A^T| <= tol * max|A|."""
    d = abs(A - A.T)
    scale = abs(A).max() if A.nnz else 0.0
    if scale == 0.0:
        return True
    return d.max() <= tol * scale


def _check_diagonal(A: sp.csr_matrix) -> np.ndarray:
    d = A.diagonal()
    bad = np.flatnonzero(d == 0.0)
    if bad.size:
        raise LinalgError(f"zero diagonal entry in row {bad[0]}")
    return d


def gauss_seidel_sweep(A: sp.csr_matrix, b: np.ndarray, x: np.ndarray,
                       direction: str = "forward") -> np.ndarray:
    """One lexicographic (forward) or reverse (backward) Gauss-Seidel sweep.

    Returns an updated copy of x; the forward sweep is the exact action of
    x + M^-1 (b - A x) with M the lower triangle of A including the diagonal.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"unknown sweep direction {direction!r}")
    A = as_csr(A)
    if A.shape[0] != A.shape[1]:
        raise LinalgError("Gauss-Seidel needs a square matrix")
    _check_diagonal(A)
    out = np.array(x, dtype=float, copy=True)
    _gs_kernel(A, out, np.asarray(b, dtype=float), iterations=1, sweep=direction)
    return out


def pcg_solve(A, b: np.ndarray, precond=None, tol: float = 1e-9,
              max_iter: int = 1000, x0: np.ndarray | None = None,
              track_spectrum: bool = False) -> tuple[np.ndarray, SolveReport]:
    """Preconditioned conjugate gradients on SPD A.

    Convergence criterion is the relative Euclidean residual
    ||b - A x|| / ||b|| <= tol.  `precond` maps a residual vector to a
    correction vector and must be SPD; identity when omitted.

    With track_spectrum=True the CG coefficients are accumulated into the
    Lanczos tridiagonal matrix and its extreme eigenvalues are reported as
    Ritz estimates for the spectrum of the preconditioned operator.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float, copy=True)
    apply_b = (lambda r: r) if precond is None else precond

    norm_b = np.linalg.norm(b)
    if norm_b == 0.0:
        return np.zeros(n), SolveReport(0, 0.0, True)

    r = b - A @ x
    rel = np.linalg.norm(r) / norm_b
    if rel <= tol:
        return x, SolveReport(0, rel, True)

    z = apply_b(r)
    p = z.copy()
    rz = float(r @ z)
    if not np.isfinite(rz) or rz <= 0.0:
        raise LinalgError("preconditioner is not SPD: <r, B^-1 r> <= 0")

    alphas: list[float] = []
    betas: list[float] = []
    iterations = 0
    converged = False
    for _ in range(max_iter):
        Ap = A @ p
        pAp = float(p @ Ap)
        if not np.isfinite(pAp):
            raise LinalgError("NaN/Inf encountered in PCG")
        if pAp <= 0.0:
            raise LinalgError("matrix is not SPD: <p, A p> <= 0")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        iterations += 1
        rel = np.linalg.norm(r) / norm_b
        if not np.isfinite(rel):
            raise LinalgError("NaN/Inf encountered in PCG")
        alphas.append(alpha)
        if rel <= tol:
            converged = True
            break
        z = apply_b(r)
        rz_new = float(r @ z)
        if not np.isfinite(rz_new) or rz_new <= 0.0:
            raise LinalgError("preconditioner is not SPD: <r, B^-1 r> <= 0")
        beta = rz_new / rz
        betas.append(beta)
        p = z + beta * p
        rz = rz_new

    report = SolveReport(iterations, rel, converged)
    if track_spectrum and alphas:
        report.ritz_min, report.ritz_max = _lanczos_extremes(alphas, betas)
    return x, report


def _lanczos_extremes(alphas, betas) -> tuple[float, float]:
    # CG coefficients determine the Lanczos tridiagonal of B^-1 A.
    k = len(alphas)
    diag = np.empty(k)
    diag[0] = 1.0 / alphas[0]
    for j in range(1, k):
        diag[j] = 1.0 / alphas[j] + betas[j - 1] / alphas[j - 1]
    off = np.array([np.sqrt(betas[j]) / alphas[j] for j in range(k - 1)])
    if k == 1:
        return diag[0], diag[0]
    ev = scipy.linalg.eigvalsh_tridiagonal(diag, off)
    return float(ev[0]), float(ev[-1])


def sym_eig(M: np.ndarray, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Dense symmetric eigendecomposition, eigenvalues ascending.

    Rejects matrices that are not symmetric to the given relative tolerance.
    """
    M = np.asarray(M, dtype=float)
    scale = np.abs(M).max() if M.size else 0.0
    if scale > 0.0 and np.abs(M - M.T).max() > tol * scale:
        raise LinalgError("matrix is not symmetric within tolerance")
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return w, V


def generalized_eig_diag(A: np.ndarray, Ddiag: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solve A psi = lambda diag(Ddiag) psi for symmetric A, Ddiag > 0.

    Substituting psi = D^-1/2 y turns this into a standard symmetric
    eigenproblem for D^-1/2 A D^-1/2.  Eigenvalues come back ascending and
    eigenvectors D-orthonormal (psi_i^T D psi_j = delta_ij).
    """
    Ddiag = np.asarray(Ddiag, dtype=float)
    bad = np.flatnonzero(Ddiag <= 0.0)
    if bad.size:
        raise LinalgError(f"nonpositive diagonal weight at index {bad[0]}")
    s = 1.0 / np.sqrt(Ddiag)
    B = s[:, None] * np.asarray(A, dtype=float) * s[None, :]
    w, Y = sym_eig(B)
    return w, s[:, None] * Y


class CholeskySolver:
    """Dense SPD solve with a cached Cholesky factorization."""

    def __init__(self, A: np.ndarray):
        A = np.asarray(A, dtype=float)
        try:
            self._factor = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise LinalgError(f"coarse matrix is not SPD (rank deficient coarse space?): {exc}")
        except scipy.linalg.LinAlgError as exc:  # scipy raises its own subclass
            raise LinalgError(f"coarse matrix is not SPD (rank deficient coarse space?): {exc}")
        self.n = A.shape[0]

    def solve(self, r: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve(self._factor, r, check_finite=False)


def save_matrix_market(path, A) -> None:
    """Write a sparse matrix in Matrix Market coordinate format."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(A))


def load_matrix_market(path) -> sp.csr_matrix:
    """Read a Matrix Market file as CSR."""
    return as_csr(scipy.io.mmread(str(path)))
