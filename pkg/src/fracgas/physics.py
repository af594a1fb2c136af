"""Physical constants and the nonlinear transport coefficients.

The matrix continuum stores free and adsorbed gas (Langmuir equilibrium);
fractures carry pressure-driven flow only.  All coefficient functions accept
scalars or arrays, and each has a constant-in-time upper bound over the
concentration range [c_min, c_max] used by the linearly implicit scheme:
the storage and sorption terms peak at c_min, the pressure-mobility terms
at c_max.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from fracgas.mesh import FineMesh


class PhysicsError(Exception):
    pass


@dataclass(frozen=True)
class PhysicalConstants:
    """Reservoir and fluid constants (SI units; see the shipped scenarios)."""

    R: float = 8.31            # gas constant [J/(K mol)]
    T: float = 323.0           # temperature [K]
    Z: float = 1.0             # gas compressibility [-]
    p_init: float = 20.0e6     # initial reservoir pressure [Pa]
    p_well: float = 5.0e6      # production well pressure [Pa]
    p_lang: float = 1.0e6      # Langmuir pressure [Pa]
    c_mu_max: float = 0.25e5   # monolayer adsorption capacity
    phi: float = 0.02          # matrix porosity [-]
    phi_f: float = 0.2         # fracture porosity [-]
    eps_ks: float = 0.5        # organic grain fraction [-]
    eps_kp: float = 0.5        # kerogen pore fraction [-]
    diff_free: float = 1.0e-8  # free-gas diffusivity [m^2/s]
    diff_ads: float = 1.0e-8   # adsorbed-gas surface diffusivity [m^2/s]
    kappa_m: float = 1.0e-20   # matrix permeability [m^2]
    kappa_f: float = 1.0e-11   # fracture permeability [m^2] (contrast 1e9)
    kappa_w: float = 1.0e-15   # well index permeability [m^2]
    mu: float = 1.0e-5         # gas viscosity [Pa s]
    zeta_mf: float = 1.0e3     # matrix-fracture geometric transfer scaling

    @property
    def ZRT(self) -> float:
        return self.Z * self.R * self.T

    @property
    def K(self) -> float:
        """Langmuir equilibrium coefficient ZRT/p_lang [m^3/mol]."""
        return self.ZRT / self.p_lang

    @property
    def c_init(self) -> float:
        return self.p_init / self.ZRT

    @property
    def c_well(self) -> float:
        return self.p_well / self.ZRT

    @property
    def c_min(self) -> float:
        return self.c_well

    @property
    def c_max(self) -> float:
        return self.c_init

    def with_contrast(self, k_f: float) -> "PhysicalConstants":
        """Same constants with fracture permeability k_f * 1e-20 m^2."""
        return replace(self, kappa_f=k_f * 1.0e-20)

    def __post_init__(self):
        for name in ("R", "T", "Z", "p_init", "p_well", "p_lang", "c_mu_max",
                     "phi", "phi_f", "eps_ks", "eps_kp", "diff_free",
                     "diff_ads", "kappa_m", "kappa_f", "kappa_w", "mu",
                     "zeta_mf"):
            if getattr(self, name) <= 0.0:
                raise PhysicsError(f"constant {name} must be positive")
        if self.p_well >= self.p_init:
            raise PhysicsError("well pressure must be below initial pressure")

    # -- Langmuir isotherm ---------------------------------------------------

    def langmuir(self, c):
        """Adsorbed amount c_mu_max * K c / (1 + K c); saturates at c_mu_max."""
        c = _nonnegative(c)
        kc = self.K * c
        return self.c_mu_max * kc / (1.0 + kc)

    def langmuir_slope(self, c):
        """d(adsorbed)/dc = c_mu_max * K / (1 + K c)^2; positive, decreasing."""
        c = _nonnegative(c)
        return self.c_mu_max * self.K / (1.0 + self.K * c) ** 2

    # -- coefficient functions of the coupled model ---------------------------

    def storage_m(self, c, phi_mult=1.0):
        """Matrix storage a_m = phi + (1 - phi) eps_ks F'(c)."""
        phi = self.phi * np.asarray(phi_mult, dtype=float)
        return phi + (1.0 - phi) * self.eps_ks * self.langmuir_slope(c)

    def mobility_m_diffusive(self, c, phi_mult=1.0):
        """Diffusive part of b_m: phi D + (1 - phi) eps_ks F'(c) D_s."""
        phi = self.phi * np.asarray(phi_mult, dtype=float)
        # kerogen and inorganic free-gas diffusivities coincide, so their
        # eps_kp-weighted combination is just diff_free
        return phi * self.diff_free + (1.0 - phi) * self.eps_ks * self.langmuir_slope(c) * self.diff_ads

    def mobility_m_pressure(self, c, k_mult=1.0):
        """Pressure-driven part of b_m: c ZRT kappa_m / mu."""
        c = _nonnegative(c)
        return c * self.ZRT * (self.kappa_m * np.asarray(k_mult, dtype=float)) / self.mu

    def mobility_m(self, c, phi_mult=1.0, k_mult=1.0):
        return self.mobility_m_diffusive(c, phi_mult) + self.mobility_m_pressure(c, k_mult)

    def mobility_f(self, c, kappa_f=None):
        """Fracture mobility b_f = c ZRT kappa_f / mu; linear in c."""
        c = _nonnegative(c)
        kf = self.kappa_f if kappa_f is None else np.asarray(kappa_f, dtype=float)
        return c * self.ZRT * kf / self.mu

    def transfer(self, c_m, phi_mult=1.0, k_mult=1.0):
        """Matrix-fracture exchange sigma = b_m(c_m) zeta_mf (symmetric)."""
        return self.mobility_m(c_m, phi_mult, k_mult) * self.zeta_mf

    # -- upper bounds for the fixed linear operator ---------------------------

    def bounds(self, phi_mult=1.0, k_mult=1.0, kappa_f=None) -> dict:
        """Constant-in-time coefficients dominating the nonlinear ones.

        a_m and the sorption part of b_m peak at c_min, the pressure parts
        at c_max; sigma* follows b_m*.  These are the coefficients of the
        implicit operator, and their dominance over the instantaneous
        coefficients is the hypothesis of the stability result.
        """
        a_star = self.storage_m(self.c_min, phi_mult)
        b_m_star = (self.mobility_m_diffusive(self.c_min, phi_mult)
                    + self.mobility_m_pressure(self.c_max, k_mult))
        b_f_star = self.mobility_f(self.c_max, kappa_f)
        return {"a_m": a_star, "b_m": b_m_star, "b_f": b_f_star,
                "sigma": b_m_star * self.zeta_mf}

    # -- production wells ------------------------------------------------------

    def well_source_coefficients(self) -> tuple[float, float]:
        """Affine well source f_f(c_f) = g0 - g1 c_f on well-box fractures.

        g1 = c_well ZRT kappa_w / mu = p_well kappa_w / mu and g0 = g1 c_well,
        so the source vanishes at well pressure and drains above it.
        """
        g1 = self.c_well * self.ZRT * self.kappa_w / self.mu
        return g1 * self.c_well, g1


def _nonnegative(c):
    c = np.asarray(c, dtype=float)
    if np.any(c < 0.0):
        raise PhysicsError("negative concentration passed to a coefficient function")
    return c


# ---------------------------------------------------------------------------
# heterogeneous multiplier fields


class CoefficientField:
    """Per-element porosity/permeability multipliers and fracture permeability.

    Multipliers are sampled at triangle centroids (matrix terms) and fracture
    edge midpoints (transfer terms).  The homogeneous case is all ones.
    """

    def __init__(self, mesh: FineMesh, tri_phi_mult, tri_k_mult,
                 edge_phi_mult, edge_k_mult, edge_kappa_f=None):
        self.tri_phi_mult = np.asarray(tri_phi_mult, dtype=float)
        self.tri_k_mult = np.asarray(tri_k_mult, dtype=float)
        self.edge_phi_mult = np.asarray(edge_phi_mult, dtype=float)
        self.edge_k_mult = np.asarray(edge_k_mult, dtype=float)
        # None means every fracture edge uses the global kappa_f constant
        self.edge_kappa_f = None if edge_kappa_f is None else np.asarray(edge_kappa_f, dtype=float)
        for name in ("tri_phi_mult", "tri_k_mult", "edge_phi_mult", "edge_k_mult"):
            if np.any(getattr(self, name) <= 0.0):
                raise PhysicsError(f"{name} must be strictly positive")
        n_tri, n_edge = len(mesh.triangles), len(mesh.fracture_edges)
        if len(self.tri_phi_mult) != n_tri or len(self.tri_k_mult) != n_tri:
            raise PhysicsError("triangle multiplier length mismatch")
        if len(self.edge_phi_mult) != n_edge or len(self.edge_k_mult) != n_edge:
            raise PhysicsError("fracture edge multiplier length mismatch")
        if self.edge_kappa_f is not None and len(self.edge_kappa_f) != n_edge:
            raise PhysicsError("fracture permeability length mismatch")

    @classmethod
    def homogeneous(cls, mesh: FineMesh) -> "CoefficientField":
        nt, ne = len(mesh.triangles), len(mesh.fracture_edges)
        return cls(mesh, np.ones(nt), np.ones(nt), np.ones(ne), np.ones(ne))

    @classmethod
    def from_rasters(cls, mesh: FineMesh, phi_raster: np.ndarray,
                     k_raster: np.ndarray) -> "CoefficientField":
        """Bilinear lookup of cell-centered raster values over [0,1]^2."""
        centroid = mesh.vertices[mesh.triangles].mean(axis=1)
        if len(mesh.fracture_edges):
            mid = 0.5 * (mesh.vertices[mesh.fracture_edges[:, 0]]
                         + mesh.vertices[mesh.fracture_edges[:, 1]])
        else:
            mid = np.zeros((0, 2))
        return cls(mesh,
                   _bilinear_sample(phi_raster, centroid),
                   _bilinear_sample(k_raster, centroid),
                   _bilinear_sample(phi_raster, mid),
                   _bilinear_sample(k_raster, mid))


def load_raster(path) -> np.ndarray:
    """Whitespace-separated text grid; row 0 is the bottom of the domain."""
    grid = np.loadtxt(path, dtype=float, ndmin=2)
    if np.any(grid <= 0.0):
        raise PhysicsError(f"raster {path} contains nonpositive values")
    return grid


def _bilinear_sample(grid: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Interpolate cell-centered values of a (ny, nx) grid at unit-square points."""
    grid = np.asarray(grid, dtype=float)
    if points.size == 0:
        return np.zeros(0) + 1.0
    ny, nx = grid.shape
    # cell centers at ((i+0.5)/nx, (j+0.5)/ny), clamped at the borders
    fx = np.clip(points[:, 0] * nx - 0.5, 0.0, nx - 1.0)
    fy = np.clip(points[:, 1] * ny - 0.5, 0.0, ny - 1.0)
    ix = np.minimum(fx.astype(int), nx - 2) if nx > 1 else np.zeros(len(points), dtype=int)
    iy = np.minimum(fy.astype(int), ny - 2) if ny > 1 else np.zeros(len(points), dtype=int)
    tx = fx - ix if nx > 1 else np.zeros(len(points))
    ty = fy - iy if ny > 1 else np.zeros(len(points))
    jx = np.minimum(ix + 1, nx - 1)
    jy = np.minimum(iy + 1, ny - 1)
    return ((1 - tx) * (1 - ty) * grid[iy, ix] + tx * (1 - ty) * grid[iy, jx]
            + (1 - tx) * ty * grid[jy, ix] + tx * ty * grid[jy, jx])
