"""Adaptive spectral two-grid preconditioner.

For every coarse node neighborhood the diffusion operator is restricted to
the local elements (natural boundary closure) and the generalized
eigenproblem against its diagonal is solved.  Eigenvectors below an
eigenvalue threshold, multiplied by the partition of unity, become the
columns of the prolongation P; the Galerkin coarse matrix P^T A P is
factorized once.  The preconditioner application is the symmetric cycle

    forward Gauss-Seidel sweeps -> coarse correction -> backward sweeps,

which keeps B^{-1} symmetric positive definite for use inside PCG.  High
permeability contrast shows up as near-null local eigenvalues (one per
connected fracture piece in the neighborhood, counting the constant), so
the threshold rule places extra coarse basis functions exactly where the
fracture network demands them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from pyamg.relaxation.relaxation import gauss_seidel as _gs_kernel

from fracgas import linalg
from fracgas.assembly import (MASS_EDGE, MASS_TRI, STIFF_EDGE, Assembler,
                              Wells, bound_coefficient_arrays)
from fracgas.linalg import CholeskySolver, generalized_eig_diag
from fracgas.mesh import CoarseCover
from fracgas.physics import CoefficientField, PhysicalConstants


class PrecondError(Exception):
    pass


# number of preconditioner constructions, for the once-per-scenario property
build_counts = {"two_grid": 0}


def reset_build_counts() -> None:
    build_counts["two_grid"] = 0


# ---------------------------------------------------------------------------
# local spectral problems


@dataclass
class LocalSpectralProblem:
    """Restricted operator and eigenpairs on one coarse neighborhood."""

    index: int
    dofs: np.ndarray              # global DOF ids, ascending (matrix, fracture)
    A_local: np.ndarray           # dense symmetric restricted operator
    diag: np.ndarray
    eigenvalues: np.ndarray = field(default=None)
    eigenvectors: np.ndarray = field(default=None)  # D-orthonormal columns

    @property
    def size(self) -> int:
        return len(self.dofs)


def _accumulate(A: np.ndarray, lidx: np.ndarray, blocks: np.ndarray) -> None:
    # lidx: (ne, k) local indices, blocks: (ne, k, k)
    k = lidx.shape[1]
    rows = np.repeat(lidx, k, axis=1).ravel()
    cols = np.tile(lidx, (1, k)).ravel()
    np.add.at(A, (rows, cols), blocks.ravel())


def assemble_local_operator(assembler: Assembler, phys: PhysicalConstants,
                            fields: CoefficientField, wells: Wells,
                            cover: CoarseCover, i: int,
                            operator: str = "diffusion_only",
                            tau: float = 1.0) -> LocalSpectralProblem:
    """Restrict the bilinear forms to neighborhood i with natural closure.

    Integrating only over the cells and fracture edges of the neighborhood
    equals taking the principal submatrix of the global operator with the
    diagonal corrected for zero-flux local boundaries.  "diffusion_only"
    keeps the diffusion+transfer form D_lin, whose near-nullspace carries
    the fracture structure; "full" restricts the whole time-step operator
    S_lin + tau D_lin instead (eigenvalues then depend on tau).
    """
    if operator not in ("diffusion_only", "full"):
        raise PrecondError(f"unknown local operator choice {operator!r}")
    mesh = assembler.mesh
    tris = cover.local_triangles(i)
    edges = cover.local_edges(i)
    if len(tris) == 0:
        raise PrecondError(f"neighborhood {i} contains no elements")
    dofs = cover.local_dofs[i]
    A = np.zeros((len(dofs), len(dofs)))
    star = bound_coefficient_arrays(assembler, phys, fields)
    scale = tau if operator == "full" else 1.0

    tri_lidx = np.searchsorted(dofs, mesh.triangles[tris])
    areas = assembler.areas[tris]
    grads = assembler.grads[tris]
    w = scale * star["b_m"][tris] * areas
    _accumulate(A, tri_lidx, w[:, None, None] * np.einsum("tid,tjd->tij", grads, grads))
    if operator == "full":
        _accumulate(A, tri_lidx, (star["a_m"][tris] * areas)[:, None, None] * MASS_TRI[None])

    if len(edges):
        nm = mesh.n_matrix_dofs
        lens = assembler.edge_lengths[edges]
        m_lidx = np.searchsorted(dofs, mesh.fracture_edges[edges])
        f_lidx = np.searchsorted(dofs, nm + mesh.edge_frac_dofs[edges])
        _accumulate(A, f_lidx, (scale * star["b_f"][edges] / lens)[:, None, None] * STIFF_EDGE[None])
        m2 = (scale * star["sigma"][edges] * lens)[:, None, None] * MASS_EDGE[None]
        _accumulate(A, m_lidx, m2)
        _accumulate(A, f_lidx, m2)
        cross_rows = np.repeat(m_lidx, 2, axis=1).ravel()
        cross_cols = np.tile(f_lidx, (1, 2)).ravel()
        np.add.at(A, (cross_rows, cross_cols), -m2.ravel())
        np.add.at(A, (cross_cols, cross_rows), -m2.ravel())
        if operator == "full":
            _accumulate(A, f_lidx, (phys.phi_f * lens)[:, None, None] * MASS_EDGE[None])
        if wells.implicit and wells.edges.size:
            local_well = np.intersect1d(wells.edges, edges)
            if local_well.size:
                wl = assembler.edge_lengths[local_well]
                wf_lidx = np.searchsorted(dofs, nm + mesh.edge_frac_dofs[local_well])
                _accumulate(A, wf_lidx,
                            (scale * wells.g1 * wl)[:, None, None] * MASS_EDGE[None])

    diag = A.diagonal().copy()
    bad = np.flatnonzero(diag <= 0.0)
    if bad.size:
        raise PrecondError(f"neighborhood {i}: nonpositive diagonal at local DOF "
                           f"{bad[0]} (global {dofs[bad[0]]})")
    return LocalSpectralProblem(index=i, dofs=dofs, A_local=A, diag=diag)


def solve_local_eigenproblem(problem: LocalSpectralProblem,
                             k_max: int | None = None) -> LocalSpectralProblem:
    """First k_max eigenpairs of A psi = lambda diag(A) psi, ascending."""
    w, V = generalized_eig_diag(problem.A_local, problem.diag)
    if k_max is not None:
        w, V = w[:k_max], V[:, :k_max]
    problem.eigenvalues = w
    problem.eigenvectors = V
    return problem


def local_project(problem: LocalSpectralProblem, n_modes: int,
                  v: np.ndarray) -> np.ndarray:
    """D-orthogonal projection of a local vector onto the kept eigenvectors."""
    if len(v) != problem.size:
        raise PrecondError(f"local vector has length {len(v)}, expected {problem.size}")
    psi = problem.eigenvectors[:, :n_modes]
    coeffs = psi.T @ (problem.diag * v)
    return psi @ coeffs


# ---------------------------------------------------------------------------
# mode selection and prolongation


@dataclass
class ModeSelection:
    """Kept mode counts per neighborhood and the coarse dimension."""

    variant: str                  # "fixed" | "adaptive" | "adaptive+1"
    threshold: float | None
    fixed_m: int | None
    counts: np.ndarray

    @property
    def n_coarse(self) -> int:
        return int(self.counts.sum())


def select_modes(problems: list[LocalSpectralProblem], variant: str = "adaptive",
                 threshold: float = 1e-3, fixed_m: int = 1) -> ModeSelection:
    """Apply the threshold rule (or a fixed count) to every local spectrum.

    Adaptive keeps every eigenvalue strictly below the threshold, at least
    one mode per neighborhood; "adaptive+1" keeps one extra.  Requests
    beyond the computed spectrum are clamped with a warning.
    """
    counts = np.empty(len(problems), dtype=int)
    for k, p in enumerate(problems):
        if p.eigenvalues is None:
            raise PrecondError(f"neighborhood {p.index} has no eigenpairs yet")
        available = p.eigenvectors.shape[1]
        if variant == "fixed":
            m = fixed_m
        elif variant == "adaptive":
            m = max(1, int(np.count_nonzero(p.eigenvalues < threshold)))
        elif variant == "adaptive+1":
            m = max(1, int(np.count_nonzero(p.eigenvalues < threshold))) + 1
        else:
            raise PrecondError(f"unknown selection variant {variant!r}")
        if m > available:
            warnings.warn(f"neighborhood {p.index}: requested {m} modes, "
                          f"only {available} available")
            m = available
        counts[k] = m
    return ModeSelection(variant=variant,
                         threshold=None if variant == "fixed" else threshold,
                         fixed_m=fixed_m if variant == "fixed" else None,
                         counts=counts)


def build_prolongation(cover: CoarseCover, problems: list[LocalSpectralProblem],
                       selection: ModeSelection, n_dofs: int) -> sp.csr_matrix:
    """P = [chi_1 psi_1, chi_1 psi_2, ..., chi_N psi_mN] in global numbering."""
    rows, cols, vals = [], [], []
    col = 0
    for p, m in zip(problems, selection.counts):
        chi = cover.chi[p.index]
        for k in range(m):
            entries = chi * p.eigenvectors[:, k]
            if np.max(np.abs(entries)) == 0.0:
                raise PrecondError(f"zero prolongation column for neighborhood "
                                   f"{p.index}, mode {k}")
            rows.append(p.dofs)
            cols.append(np.full(p.size, col))
            vals.append(entries)
            col += 1
    P = sp.coo_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n_dofs, col)).tocsr()
    P.sort_indices()
    return P


# ---------------------------------------------------------------------------
# the two-grid operator


@dataclass
class TwoGridPreconditioner:
    """Smoother + spectral coarse correction wrapped as an SPD operator."""

    A: sp.csr_matrix
    P: sp.csr_matrix
    R: sp.csr_matrix
    coarse: CholeskySolver
    smoothing_steps: int
    selection: ModeSelection
    problems: list

    @property
    def n_coarse(self) -> int:
        return self.P.shape[1]

    def apply(self, r: np.ndarray) -> np.ndarray:
        """B^-1 r: forward sweeps, exact coarse solve, backward sweeps."""
        y = np.zeros_like(r)
        if self.smoothing_steps:
            _gs_kernel(self.A, y, r, iterations=self.smoothing_steps, sweep="forward")
        resid = r - self.A @ y
        y = y + self.P @ self.coarse.solve(self.R @ resid)
        if self.smoothing_steps:
            _gs_kernel(self.A, y, r, iterations=self.smoothing_steps, sweep="backward")
        return y

    __call__ = apply


def build_two_grid(assembler: Assembler, phys: PhysicalConstants,
                   fields: CoefficientField, wells: Wells,
                   cover: CoarseCover, A: sp.csr_matrix,
                   variant: str = "adaptive", threshold: float = 1e-3,
                   fixed_m: int = 1, smoothing_steps: int = 5,
                   local_operator: str = "diffusion_only",
                   tau: float = 1.0, k_max: int | None = 32) -> TwoGridPreconditioner:
    """Assemble local spectra, select modes, and set up the two-grid cycle."""
    A = linalg.as_csr(A)
    if np.any(A.diagonal() <= 0.0):
        raise PrecondError("operator has a nonpositive diagonal entry")
    problems = []
    for i in range(cover.n_nodes):
        p = assemble_local_operator(assembler, phys, fields, wells, cover, i,
                                    operator=local_operator, tau=tau)
        budget = p.size if k_max is None else min(p.size, max(k_max, 1))
        problems.append(solve_local_eigenproblem(p, budget))
    selection = select_modes(problems, variant=variant, threshold=threshold,
                             fixed_m=fixed_m)
    P = build_prolongation(cover, problems, selection, assembler.n_dofs)
    A_H = (P.T @ A @ P).toarray()
    coarse = CholeskySolver(0.5 * (A_H + A_H.T))
    build_counts["two_grid"] += 1
    return TwoGridPreconditioner(A=A, P=P, R=linalg.as_csr(P.T), coarse=coarse,
                                 smoothing_steps=smoothing_steps,
                                 selection=selection, problems=problems)


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class ConditionEstimate:
    K_TG: float
    rho_TG: float
    mu_min: float                 # extremes of B relative to A: v'Bv / v'Av
    mu_max: float


def estimate_two_grid_condition(pre: TwoGridPreconditioner,
                                dense_limit: int = 2000) -> ConditionEstimate:
    """Dense spectrum of the preconditioned operator on small systems.

    Applies the cycle to unit vectors to materialize B^-1, checks it is SPD,
    and returns the condition number of B^-1 A together with the convergence
    factor rho = 1 - 1/K.  The spectrum of B relative to A must sit in
    [1, K] up to round-off (the cycle never underestimates the operator).
    """
    n = pre.A.shape[0]
    if n > dense_limit:
        raise PrecondError(f"dense condition estimate limited to {dense_limit} DOFs")
    Binv = np.empty((n, n))
    e = np.zeros(n)
    for j in range(n):
        e[j] = 1.0
        Binv[:, j] = pre.apply(e)
        e[j] = 0.0
    Binv = 0.5 * (Binv + Binv.T)
    s, U = np.linalg.eigh(Binv)
    if s[0] <= 0.0:
        raise PrecondError(f"preconditioner is not SPD (eigenvalue {s[0]:.3e})")
    # theta = eigs(B^-1 A) via the similar symmetric matrix s^1/2 U' A U s^1/2
    W = U * np.sqrt(s)[None, :]
    C = W.T @ pre.A.toarray() @ W
    theta = np.linalg.eigvalsh(0.5 * (C + C.T))
    if theta[0] <= 0.0:
        raise PrecondError(f"preconditioned operator has nonpositive eigenvalue "
                           f"{theta[0]:.3e}")
    mu_min, mu_max = 1.0 / theta[-1], 1.0 / theta[0]
    K = mu_max / mu_min
    return ConditionEstimate(K_TG=K, rho_TG=1.0 - 1.0 / K,
                             mu_min=mu_min, mu_max=mu_max)


def smoother_spectral_equivalence(A, dense_limit: int = 2000) -> tuple[float, float]:
    """Equivalence constants of the symmetrized Gauss-Seidel operator vs diag(A).

    Returns (c1, c2) with c1 x'Dx <= x' M~ x <= c2 x'Dx where
    M~ = (D - N') D^-1 (D - N) and M = D - N is the lower triangle of A.
    """
    A = linalg.as_csr(A)
    if A.shape[0] > dense_limit:
        raise PrecondError(f"dense equivalence check limited to {dense_limit} DOFs")
    Ad = A.toarray()
    M = np.tril(Ad)
    d = np.diag(Ad)
    if np.any(d <= 0.0):
        raise PrecondError("matrix has a nonpositive diagonal entry")
    Mtilde = M @ np.diag(1.0 / d) @ M.T
    w, _ = generalized_eig_diag(Mtilde, d)
    return float(w[0]), float(w[-1])


def dump_preconditioner(pre: TwoGridPreconditioner, directory) -> None:
    """Matrix Market dump of the prolongation and the coarse operator."""
    from pathlib import Path
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    linalg.save_matrix_market(d / "P.mtx", pre.P)
    A_H = (pre.R @ pre.A @ pre.P).tocoo()
    linalg.save_matrix_market(d / "A_H.mtx", A_H)


def spectra_table(problems: list[LocalSpectralProblem],
                  selection: ModeSelection, n_eigen: int = 8) -> list[dict]:
    """Per-neighborhood leading eigenvalues and kept counts, for CSV export."""
    out = []
    for p, m in zip(problems, selection.counts):
        row = {"neighborhood": p.index, "size": p.size, "kept": int(m)}
        for k in range(min(n_eigen, len(p.eigenvalues))):
            row[f"lambda{k + 1}"] = float(p.eigenvalues[k])
        out.append(row)
    return out
