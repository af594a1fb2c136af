"""Nonlinear gas transport in fractured porous media.

Mixed-dimensional P1 finite elements on fracture-conforming triangulations,
a linearly implicit time scheme with a fixed linear operator, and a PCG
solver preconditioned by an adaptive spectral two-grid method.
"""

from fracgas.linalg import SolveReport, pcg_solve
from fracgas.mesh import FineMesh, FractureSpec, CoarseCover, build_structured_mesh, embed_fractures, build_coarse_cover
from fracgas.physics import PhysicalConstants, CoefficientField
from fracgas.assembly import BlockSystem, build_linear_operator, build_rhs
from fracgas.timestep import TimeLoopState, relative_error
from fracgas.scenario import Scenario, RunReport, run_scenario
from fracgas.precond import TwoGridPreconditioner, build_two_grid

__version__ = "0.1.0"
__all__ = [
    "SolveReport",
    "pcg_solve",
    "FineMesh",
    "FractureSpec",
    "CoarseCover",
    "build_structured_mesh",
    "embed_fractures",
    "build_coarse_cover",
    "PhysicalConstants",
    "CoefficientField",
    "BlockSystem",
    "build_linear_operator",
    "build_rhs",
    "TimeLoopState",
    "relative_error",
    "TwoGridPreconditioner",
    "build_two_grid",
    "Scenario",
    "RunReport",
    "run_scenario",
]
