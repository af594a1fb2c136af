"""Finite-element assembly for the coupled matrix/fracture system.

All operators live on the global DOF vector (matrix block first, fracture
block second) as scipy CSR matrices:

    S(c) = [[S_m(c), 0], [0, S_f]]                       mass
    D(c) = [[L_m(c) + Q(c), -Q(c)], [-Q(c)^T, L_f(c) + Q(c)]] + wells

with Q the transfer mass matrix on the fracture network.  Coefficients are
piecewise constant per element, evaluated at the nodal average of the state,
so element integrals are closed-form.  The fixed operator uses the upper
bound coefficients and A = S_lin + tau * D_lin is the SPD matrix solved at
every time step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from fracgas import linalg
from fracgas.mesh import FineMesh
from fracgas.physics import CoefficientField, PhysicalConstants


class AssemblyError(Exception):
    pass


# number of fixed-operator constructions, for the once-per-scenario property
build_counts = {"linear_operator": 0}


def reset_build_counts() -> None:
    build_counts["linear_operator"] = 0


MASS_TRI = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
MASS_EDGE = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
STIFF_EDGE = np.array([[1.0, -1.0], [-1.0, 1.0]])


class Assembler:
    """Precomputed element geometry and index maps for one mesh."""

    def __init__(self, mesh: FineMesh):
        self.mesh = mesh
        self.n_dofs = mesh.n_dofs
        nm = mesh.n_matrix_dofs

        self.areas = mesh.triangle_areas()
        if np.any(self.areas <= 0.0):
            bad = int(np.argmin(self.areas))
            raise AssemblyError(f"degenerate or misoriented triangle {bad}")
        p = mesh.vertices[mesh.triangles]                 # (Nt, 3, 2)
        nxt, prv = [1, 2, 0], [2, 0, 1]
        gx = p[:, nxt, 1] - p[:, prv, 1]
        gy = p[:, prv, 0] - p[:, nxt, 0]
        self.grads = np.stack([gx, gy], axis=2) / (2.0 * self.areas)[:, None, None]
        self._grad_prod = np.einsum("tid,tjd->tij", self.grads, self.grads)

        tris = mesh.triangles
        self._tri_rows = np.repeat(tris, 3, axis=1).ravel()
        self._tri_cols = np.tile(tris, (1, 3)).ravel()

        self.edge_lengths = mesh.fracture_lengths()
        if np.any(self.edge_lengths <= 0.0):
            bad = int(np.argmin(self.edge_lengths))
            raise AssemblyError(f"zero-length fracture edge {bad}")
        fdofs = nm + mesh.edge_frac_dofs                  # global fracture DOF ids
        self._edge_rows = np.repeat(fdofs, 2, axis=1).ravel()
        self._edge_cols = np.tile(fdofs, (1, 2)).ravel()

        # transfer block: the 2x2 edge mass replicated over the four blocks
        # [[+Q_mm, -Q_mf], [-Q_fm, +Q_ff]] in global numbering
        mdofs = mesh.fracture_edges
        rows, cols, signs = [], [], []
        for rdofs, rs in ((mdofs, +1), (fdofs, -1)):
            for cdofs, cs in ((mdofs, +1), (fdofs, -1)):
                rows.append(np.repeat(rdofs, 2, axis=1))
                cols.append(np.tile(cdofs, (1, 2)))
                signs.append(rs * cs)
        self._tr_rows = np.concatenate(rows, axis=1).ravel() if len(mdofs) else np.zeros(0, int)
        self._tr_cols = np.concatenate(cols, axis=1).ravel() if len(mdofs) else np.zeros(0, int)
        self._tr_signs = np.array(signs, dtype=float)

    def _to_csr(self, rows, cols, data) -> sp.csr_matrix:
        A = sp.coo_matrix((data, (rows, cols)), shape=(self.n_dofs, self.n_dofs)).tocsr()
        A.sort_indices()
        return A

    def matrix_mass(self, coef_tri) -> sp.csr_matrix:
        """P1 mass matrix with piecewise-constant coefficient (matrix block)."""
        w = np.asarray(coef_tri, dtype=float) * self.areas
        data = (w[:, None, None] * MASS_TRI[None]).ravel()
        return self._to_csr(self._tri_rows, self._tri_cols, data)

    def matrix_stiffness(self, coef_tri) -> sp.csr_matrix:
        """P1 stiffness matrix with piecewise-constant coefficient."""
        w = np.asarray(coef_tri, dtype=float) * self.areas
        data = (w[:, None, None] * self._grad_prod).ravel()
        return self._to_csr(self._tri_rows, self._tri_cols, data)

    def fracture_mass(self, coef_edge) -> sp.csr_matrix:
        """1D linear-element mass matrix over fracture edges (fracture block)."""
        w = np.asarray(coef_edge, dtype=float) * self.edge_lengths
        data = (w[:, None, None] * MASS_EDGE[None]).ravel()
        return self._to_csr(self._edge_rows, self._edge_cols, data)

    def fracture_stiffness(self, coef_edge) -> sp.csr_matrix:
        """1D linear-element stiffness matrix over fracture edges."""
        w = np.asarray(coef_edge, dtype=float) / self.edge_lengths
        data = (w[:, None, None] * STIFF_EDGE[None]).ravel()
        return self._to_csr(self._edge_rows, self._edge_cols, data)

    def transfer(self, sigma_edge) -> sp.csr_matrix:
        """Matrix-fracture exchange operator for edgewise transfer coefficients.

        Assembles the sigma-weighted 1D mass matrix into all four blocks at
        once; rows sum to zero, so constants with equal matrix and fracture
        values are annihilated.
        """
        sigma_edge = np.asarray(sigma_edge, dtype=float)
        if np.any(sigma_edge < 0.0):
            raise AssemblyError("transfer coefficient must be nonnegative")
        if len(self.mesh.fracture_edges) == 0:
            return sp.csr_matrix((self.n_dofs, self.n_dofs))
        w = sigma_edge * self.edge_lengths
        block = w[:, None, None] * MASS_EDGE[None]        # (Ne, 2, 2)
        data = np.concatenate([s * block for s in self._tr_signs], axis=1).ravel()
        return self._to_csr(self._tr_rows, self._tr_cols, data)


# ---------------------------------------------------------------------------
# wells


class Wells:
    """Production wells: an affine source g0 - g1 c_f on boxed fracture DOFs.

    The g1 part enters the operator (implicitly by default), the g0 part is
    the constant load.  `boxes` are (x0, x1, y0, y1) rectangles; every box
    must contain at least one fracture edge midpoint.
    """

    def __init__(self, assembler: Assembler, phys: PhysicalConstants,
                 boxes, implicit: bool = True):
        self.boxes = [tuple(map(float, b)) for b in boxes]
        self.implicit = implicit
        mesh = assembler.mesh
        g0, g1 = phys.well_source_coefficients()
        self.g0, self.g1 = g0, g1
        if not self.boxes:
            self.mass = sp.csr_matrix((mesh.n_dofs, mesh.n_dofs))
            self.load = np.zeros(mesh.n_dofs)
            self.edges = np.zeros(0, dtype=np.int64)
            return
        if len(mesh.fracture_edges) == 0:
            raise AssemblyError(f"no fracture DOF inside well box {self.boxes[0]}")
        mid = 0.5 * (mesh.vertices[mesh.fracture_edges[:, 0]]
                     + mesh.vertices[mesh.fracture_edges[:, 1]])
        indicator = np.zeros(len(mesh.fracture_edges))
        for box in self.boxes:
            x0, x1, y0, y1 = box
            inside = ((mid[:, 0] >= x0) & (mid[:, 0] <= x1)
                      & (mid[:, 1] >= y0) & (mid[:, 1] <= y1))
            if not inside.any():
                raise AssemblyError(f"no fracture DOF inside well box {box}")
            indicator[inside] = 1.0
        self.edges = np.flatnonzero(indicator)
        self.mass = assembler.fracture_mass(indicator)
        self.load = g0 * (self.mass @ np.ones(mesh.n_dofs))

    @classmethod
    def none(cls, assembler: Assembler, phys: PhysicalConstants) -> "Wells":
        return cls(assembler, phys, boxes=[])

    def operator_term(self) -> sp.csr_matrix:
        """g1-weighted well mass added to D when the sink is implicit."""
        if self.implicit:
            return self.g1 * self.mass
        return sp.csr_matrix(self.mass.shape)

    def explicit_rhs(self, c: np.ndarray) -> np.ndarray:
        """Full source at a frozen state, for the explicit-well variant."""
        if self.implicit:
            return self.load
        return self.load - self.g1 * (self.mass @ c)


# ---------------------------------------------------------------------------
# operator evaluation


@dataclass
class NonlinearEvaluation:
    """Mass and diffusion operators with coefficients frozen at one state."""

    S: sp.csr_matrix
    D: sp.csr_matrix


@dataclass
class BlockSystem:
    """The fixed linear operator of the linearly implicit scheme."""

    S_lin: sp.csr_matrix
    D_lin: sp.csr_matrix
    A: sp.csr_matrix              # S_lin + tau * D_lin, SPD
    F: np.ndarray                 # constant load (well g0 part)
    tau: float
    n_matrix_dofs: int
    n_fracture_dofs: int

    @property
    def n_dofs(self) -> int:
        return self.n_matrix_dofs + self.n_fracture_dofs


def _state_views(assembler: Assembler, c: np.ndarray):
    mesh = assembler.mesh
    nm = mesh.n_matrix_dofs
    c_m, c_f = c[:nm], c[nm:]
    c_tri = c_m[mesh.triangles].mean(axis=1)
    if len(mesh.fracture_edges):
        cm_edge = 0.5 * (c_m[mesh.fracture_edges[:, 0]] + c_m[mesh.fracture_edges[:, 1]])
        cf_edge = 0.5 * (c_f[mesh.edge_frac_dofs[:, 0]] + c_f[mesh.edge_frac_dofs[:, 1]])
    else:
        cm_edge = cf_edge = np.zeros(0)
    return c_tri, cm_edge, cf_edge


def _edge_kappa_f(phys: PhysicalConstants, fields: CoefficientField, n_edges: int):
    if fields.edge_kappa_f is not None:
        return fields.edge_kappa_f
    return np.full(n_edges, phys.kappa_f)


def evaluate_operators(assembler: Assembler, phys: PhysicalConstants,
                       fields: CoefficientField, wells: Wells,
                       c: np.ndarray) -> NonlinearEvaluation:
    """Assemble S(c), D(c) with coefficients at the nodal averages of c."""
    mesh = assembler.mesh
    c_tri, cm_edge, cf_edge = _state_views(assembler, c)
    n_edges = len(mesh.fracture_edges)

    S = (assembler.matrix_mass(phys.storage_m(c_tri, fields.tri_phi_mult))
         + assembler.fracture_mass(np.full(n_edges, phys.phi_f)))
    kf = _edge_kappa_f(phys, fields, n_edges)
    D = (assembler.matrix_stiffness(phys.mobility_m(c_tri, fields.tri_phi_mult,
                                                    fields.tri_k_mult))
         + assembler.fracture_stiffness(phys.mobility_f(cf_edge, kf))
         + assembler.transfer(phys.transfer(cm_edge, fields.edge_phi_mult,
                                            fields.edge_k_mult))
         + wells.operator_term())
    return NonlinearEvaluation(S=S, D=D)


def bound_coefficient_arrays(assembler: Assembler, phys: PhysicalConstants,
                             fields: CoefficientField) -> dict:
    """Per-element upper-bound coefficients of the fixed operator."""
    n_edges = len(assembler.mesh.fracture_edges)
    kf = _edge_kappa_f(phys, fields, n_edges)
    a_star = phys.storage_m(phys.c_min, fields.tri_phi_mult)
    b_star = (phys.mobility_m_diffusive(phys.c_min, fields.tri_phi_mult)
              + phys.mobility_m_pressure(phys.c_max, fields.tri_k_mult))
    b_edge_star = (phys.mobility_m_diffusive(phys.c_min, fields.edge_phi_mult)
                   + phys.mobility_m_pressure(phys.c_max, fields.edge_k_mult))
    return {
        "a_m": np.broadcast_to(a_star, (len(assembler.areas),)),
        "b_m": np.broadcast_to(b_star, (len(assembler.areas),)),
        "b_f": phys.mobility_f(phys.c_max, kf),
        "sigma": b_edge_star * phys.zeta_mf,
    }


def starred_operators(assembler: Assembler, phys: PhysicalConstants,
                      fields: CoefficientField, wells: Wells):
    """S_lin, D_lin assembled from the upper-bound coefficients."""
    n_edges = len(assembler.mesh.fracture_edges)
    star = bound_coefficient_arrays(assembler, phys, fields)
    S_lin = (assembler.matrix_mass(star["a_m"])
             + assembler.fracture_mass(np.full(n_edges, phys.phi_f)))
    D_lin = (assembler.matrix_stiffness(star["b_m"])
             + assembler.fracture_stiffness(star["b_f"])
             + assembler.transfer(star["sigma"])
             + wells.operator_term())
    return S_lin.tocsr(), D_lin.tocsr()


def build_linear_operator(assembler: Assembler, phys: PhysicalConstants,
                          fields: CoefficientField, wells: Wells,
                          tau: float) -> BlockSystem:
    """Assemble the fixed operator A = S_lin + tau D_lin from the bounds."""
    if tau <= 0.0:
        raise AssemblyError(f"time step must be positive, got {tau}")
    mesh = assembler.mesh
    S_lin, D_lin = starred_operators(assembler, phys, fields, wells)
    A = (S_lin + tau * D_lin).tocsr()
    A.sort_indices()
    if not linalg.is_symmetric(A, 1e-12):
        raise AssemblyError("assembled operator is not symmetric")
    if np.any(A.diagonal() <= 0.0):
        raise AssemblyError("assembled operator has a nonpositive diagonal entry")
    build_counts["linear_operator"] += 1
    return BlockSystem(S_lin=S_lin, D_lin=D_lin, A=A, F=wells.load.copy(),
                       tau=tau, n_matrix_dofs=mesh.n_matrix_dofs,
                       n_fracture_dofs=mesh.n_fracture_dofs)


def build_rhs(sys: BlockSystem, evaluation: NonlinearEvaluation,
              c_n: np.ndarray, c_nm1: np.ndarray,
              explicit_well: np.ndarray | None = None) -> np.ndarray:
    """Right-hand side of the linearly implicit step.

    b = S_lin c^n + tau F - (S(c^n) - S_lin)(c^n - c^(n-1))
        - tau (D(c^n) - D_lin) c^n
    """
    if np.any(np.asarray(c_n) < 0.0):
        raise AssemblyError("state has negative concentration entries")
    F = sys.F if explicit_well is None else explicit_well
    S_nl = evaluation.S - sys.S_lin
    D_nl = evaluation.D - sys.D_lin
    return (sys.S_lin @ c_n + sys.tau * F
            - S_nl @ (c_n - c_nm1) - sys.tau * (D_nl @ c_n))


def dump_system(sys: BlockSystem, directory) -> None:
    """Matrix Market dump of A, S_lin, D_lin for external study."""
    from pathlib import Path
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    linalg.save_matrix_market(d / "A.mtx", sys.A)
    linalg.save_matrix_market(d / "S_lin.mtx", sys.S_lin)
    linalg.save_matrix_market(d / "D_lin.mtx", sys.D_lin)
