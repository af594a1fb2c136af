"""Time integration: linearly implicit scheme and the Picard reference.

The linearly implicit step solves the fixed SPD system A c^{n+1} = b^n, with
all nonlinearity moved to the right-hand side at known states; the operator
and its preconditioner are therefore built once per scenario.  The Picard
path is the fully implicit scheme iterated to a relative-change tolerance
and serves as the reference oracle.

The energy diagnostic evaluates the three-level form of the scheme: with
matrices frozen at the step's state and zero forcing, the recorded energy is
non-increasing, which is the discrete stability statement checked at runtime.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from fracgas import linalg
from fracgas.assembly import (Assembler, BlockSystem, NonlinearEvaluation,
                              Wells, build_rhs, evaluate_operators,
                              starred_operators)
from fracgas.linalg import SolveReport
from fracgas.physics import CoefficientField, PhysicalConstants


class TimestepError(Exception):
    pass


class SolverFailure(TimestepError):
    """Inner linear solver did not converge; carries the solve report."""

    def __init__(self, message: str, report: SolveReport):
        super().__init__(message)
        self.report = report


@dataclass
class TimeLoopState:
    """Current and previous solution with step bookkeeping.

    The startup convention is c^{-1} = c^0, which makes the explicit
    difference quotient vanish on the first step.
    """

    c: np.ndarray
    c_prev: np.ndarray
    tau: float
    step: int = 0

    @classmethod
    def start(cls, c0: np.ndarray, tau: float) -> "TimeLoopState":
        c0 = np.asarray(c0, dtype=float)
        return cls(c=c0.copy(), c_prev=c0.copy(), tau=tau)

    def advance(self, c_next: np.ndarray) -> None:
        self.c_prev = self.c
        self.c = c_next
        self.step += 1


def time_step_size(t_max: float, n_steps: int, convention: str = "steps") -> float:
    """tau from the horizon: T/N by default, T/(N-1) under 'intervals'."""
    if convention == "steps":
        return t_max / n_steps
    if convention == "intervals":
        if n_steps < 2:
            raise TimestepError("intervals convention needs at least 2 steps")
        return t_max / (n_steps - 1)
    raise TimestepError(f"unknown tau convention {convention!r}")


def relative_error(c_ref: np.ndarray, c: np.ndarray) -> float:
    """Euclidean relative difference in percent, 100 ||ref - c|| / ||ref||."""
    nref = np.linalg.norm(c_ref)
    if nref == 0.0:
        raise TimestepError("relative error against a zero reference")
    return 100.0 * np.linalg.norm(np.asarray(c_ref) - np.asarray(c)) / nref


# ---------------------------------------------------------------------------
# linear solvers used inside the steps


def make_pcg_solver(precond=None, tol: float = 1e-9, max_iter: int = 100,
                    track_spectrum: bool = False):
    """Solver callable (A, b) -> (x, report) backed by PCG."""
    def solve(A, b):
        return linalg.pcg_solve(A, b, precond=precond, tol=tol,
                                max_iter=max_iter, track_spectrum=track_spectrum)
    return solve


def make_jacobi_pcg_solver(tol: float = 1e-9, max_iter: int = 10000):
    """PCG with diagonal scaling, rebuilt for whatever matrix it is handed."""
    def solve(A, b):
        d = A.diagonal()
        if np.any(d <= 0.0):
            raise linalg.LinalgError("Jacobi preconditioner needs a positive diagonal")
        return linalg.pcg_solve(A, b, precond=lambda r: r / d, tol=tol,
                                max_iter=max_iter)
    return solve


class DirectSolver:
    """Sparse LU solve with the factorization cached per operator object.

    One step of iterative refinement keeps the relative residual at
    machine level even when the operator spans many orders of magnitude,
    so the convergence check never sits on the tolerance edge.
    """

    def __init__(self, tol: float = 1e-9):
        self.tol = tol
        self._key = None
        self._lu = None

    def __call__(self, A, b):
        key = id(A)
        if key != self._key:
            self._lu = spla.splu(A.tocsc())
            self._key = key
        x = self._lu.solve(b)
        nb = np.linalg.norm(b)
        if nb == 0.0:
            return x, SolveReport(1, 0.0, True)
        r = b - A @ x
        rel = np.linalg.norm(r) / nb
        if rel > 0.01 * self.tol:
            x = x + self._lu.solve(r)
            rel = np.linalg.norm(b - A @ x) / nb
        return x, SolveReport(1, rel, rel <= self.tol)


# ---------------------------------------------------------------------------
# the two schemes


def make_evaluator(assembler: Assembler, phys: PhysicalConstants,
                   fields: CoefficientField, wells: Wells,
                   frozen_system: BlockSystem | None = None):
    """State -> NonlinearEvaluation; frozen variant returns the fixed operators."""
    if frozen_system is not None:
        frozen = NonlinearEvaluation(S=frozen_system.S_lin, D=frozen_system.D_lin)
        return lambda c: frozen
    return lambda c: evaluate_operators(assembler, phys, fields, wells, c)


def step_linearly_implicit(sys: BlockSystem, evaluator, state: TimeLoopState,
                           solver, wells: Wells | None = None,
                           evaluation: NonlinearEvaluation | None = None
                           ) -> tuple[SolveReport, NonlinearEvaluation]:
    """One step of the fixed-operator scheme; advances the state in place.

    Pass `evaluation` when the operators at the current state were already
    assembled (e.g. for the energy diagnostic) to avoid doing it twice.
    """
    if evaluation is None:
        evaluation = evaluator(state.c)
    explicit = None
    if wells is not None and not wells.implicit:
        explicit = wells.explicit_rhs(state.c)
    b = build_rhs(sys, evaluation, state.c, state.c_prev, explicit_well=explicit)
    c_next, report = solver(sys.A, b)
    if not report.converged:
        raise SolverFailure(
            f"PCG did not converge at step {state.step} "
            f"(relative residual {report.final_relative_residual:.3e} "
            f"after {report.iterations} iterations)", report)
    state.advance(c_next)
    return report, evaluation


def _same_operators(a: NonlinearEvaluation, b: NonlinearEvaluation) -> bool:
    if a is b:
        return True
    return (np.array_equal(a.S.data, b.S.data) and np.array_equal(a.D.data, b.D.data)
            and np.array_equal(a.S.indices, b.S.indices)
            and np.array_equal(a.D.indices, b.D.indices))


def step_picard_implicit(evaluator, load: np.ndarray, state: TimeLoopState,
                         solver, inner_tol_pct: float = 0.1,
                         max_inner: int = 10) -> tuple[int, bool]:
    """One fully implicit step, Picard-iterated on the frozen-coefficient solve.

    Iterates [S(c^m) + tau D(c^m)] c^{m+1} = S(c^m) c^n + tau F until the
    relative change drops below inner_tol_pct percent, at most max_inner
    times; the last iterate is accepted either way.  An operator identical
    to the previous iteration's is a fixed point (the next solve would
    reproduce the iterate), so linear problems finish after one solve.
    Returns the inner iteration count and a convergence flag.
    """
    tau = state.tau
    c_n = state.c
    c_it = c_n.copy()
    iterations = 0
    converged = False
    prev_ev = None
    for _ in range(max_inner):
        ev = evaluator(c_it)
        if prev_ev is not None and _same_operators(ev, prev_ev):
            converged = True
            break
        A_it = (ev.S + tau * ev.D).tocsr()
        b_it = ev.S @ c_n + tau * load
        c_new, report = solver(A_it, b_it)
        if not report.converged:
            raise SolverFailure(
                f"inner solve failed in Picard iteration {iterations + 1} "
                f"at step {state.step}", report)
        iterations += 1
        change = relative_error(c_new, c_it)
        c_it = c_new
        if change <= inner_tol_pct:
            converged = True
            break
        prev_ev = ev
    state.advance(c_it)
    return iterations, converged


# ---------------------------------------------------------------------------
# energy diagnostic


@dataclass
class EnergyDiagnostic:
    """Three-level energy at one state pair, with matrices frozen at c^n.

    value = difference_part + sum_part with
    difference_part = ||c^n - c^{n-1}||^2 over the operator R^n - D^n / 4,
    sum_part        = ||c^n + c^{n-1}||^2 over D^n.
    A negative difference part flags a violated dominance hypothesis.
    """

    value: float
    difference_part: float
    sum_part: float
    hypothesis_violated: bool


def energy_functional(sys: BlockSystem, evaluation: NonlinearEvaluation,
                      c_n: np.ndarray, c_nm1: np.ndarray) -> EnergyDiagnostic:
    tau = sys.tau
    S_nl = evaluation.S - sys.S_lin
    D_n = evaluation.D
    w = np.asarray(c_n) - np.asarray(c_nm1)
    s = np.asarray(c_n) + np.asarray(c_nm1)
    # R^n = (S_lin - S_nl + tau D_lin) / (2 tau)
    Rw = (sys.S_lin @ w - S_nl @ w + tau * (sys.D_lin @ w)) / (2.0 * tau)
    diff_part = float(w @ Rw - 0.25 * (w @ (D_n @ w)))
    sum_part = float(s @ (D_n @ s))
    tol = 1e-12 * (abs(diff_part) + abs(sum_part) + 1e-300)
    return EnergyDiagnostic(value=diff_part + sum_part,
                            difference_part=diff_part, sum_part=sum_part,
                            hypothesis_violated=diff_part < -tol)


# ---------------------------------------------------------------------------
# stability-hypothesis checks


def coefficient_dominance(phys: PhysicalConstants, n_samples: int = 1000,
                          phi_mult=(1.0,), k_mult=(1.0,)) -> dict:
    """Margins of the starred coefficients over a dense sweep of [c_min, c_max]."""
    c = np.linspace(phys.c_min, phys.c_max, n_samples)
    margins = {"a_m": np.inf, "b_m": np.inf, "b_f": np.inf, "sigma": np.inf}
    for pm in phi_mult:
        for km in k_mult:
            b = phys.bounds(phi_mult=pm, k_mult=km)
            margins["a_m"] = min(margins["a_m"], float(np.min(b["a_m"] - phys.storage_m(c, pm))))
            margins["b_m"] = min(margins["b_m"], float(np.min(b["b_m"] - phys.mobility_m(c, pm, km))))
            margins["b_f"] = min(margins["b_f"], float(np.min(b["b_f"] - phys.mobility_f(c))))
            margins["sigma"] = min(margins["sigma"], float(np.min(b["sigma"] - phys.transfer(c, pm, km))))
    margins["ok"] = all(margins[k] >= 0.0 for k in ("a_m", "b_m", "b_f", "sigma"))
    return margins


def matrix_dominance(assembler: Assembler, phys: PhysicalConstants,
                     fields: CoefficientField, wells: Wells,
                     n_states: int = 5, seed: int = 0,
                     dense_limit: int = 400) -> dict:
    """Smallest eigenvalues of S_lin - S(c) and D_lin - D(c) over sampled states.

    Dense path, so the mesh must stay small; states are drawn uniformly from
    [c_min, c_max] per DOF plus the two endpoints.
    """
    n = assembler.n_dofs
    if n > dense_limit:
        raise TimestepError(f"matrix dominance check limited to {dense_limit} DOFs, got {n}")
    S_lin, D_lin = starred_operators(assembler, phys, fields, wells)
    rng = np.random.default_rng(seed)
    states = [np.full(n, phys.c_min), np.full(n, phys.c_max)]
    states += [rng.uniform(phys.c_min, phys.c_max, size=n) for _ in range(n_states)]
    s_min = np.inf
    d_min = np.inf
    for c in states:
        ev = evaluate_operators(assembler, phys, fields, wells, c)
        s_min = min(s_min, float(np.linalg.eigvalsh((S_lin - ev.S).toarray())[0]))
        d_min = min(d_min, float(np.linalg.eigvalsh((D_lin - ev.D).toarray())[0]))
    return {"S_margin": s_min, "D_margin": d_min,
            "ok": s_min >= -1e-12 and d_min >= -1e-12}


def check_splitting_bounds(phys: PhysicalConstants,
                           assembler: Assembler | None = None,
                           fields: CoefficientField | None = None,
                           wells: Wells | None = None,
                           n_samples: int = 1000) -> dict:
    """Coefficient-level dominance sweep, plus matrix-level margins on small meshes."""
    report = {"coefficients": coefficient_dominance(phys, n_samples)}
    if assembler is not None and assembler.n_dofs <= 400:
        report["matrices"] = matrix_dominance(assembler, phys, fields, wells)
    report["ok"] = all(part["ok"] for part in report.values() if isinstance(part, dict))
    return report
