"""Scenario runner: configuration, the simulation pipeline, and studies.

A scenario is a plain key=value config with section headers plus a JSON
fracture file.  Running one executes mesh construction, operator assembly
(once), preconditioner setup (once), and the time loop, then writes
deterministic CSV reports and optional VTK snapshots.  The study drivers
reproduce the experiment families: time-step convergence against a Picard
reference, and permeability-contrast sweeps over basis configurations.
"""

from __future__ import annotations

import configparser
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from fracgas import assembly as assembly_mod
from fracgas import precond as precond_mod
from fracgas.assembly import (Assembler, Wells, build_linear_operator,
                              dump_system)
from fracgas.mesh import (FineMesh, FractureSpec, build_coarse_cover,
                          build_structured_mesh, embed_fractures, export_vtk)
from fracgas.physics import CoefficientField, PhysicalConstants, load_raster
from fracgas.precond import build_two_grid, dump_preconditioner, spectra_table
from fracgas.timestep import (DirectSolver, SolverFailure, TimeLoopState,
                              check_splitting_bounds, energy_functional,
                              make_evaluator, make_jacobi_pcg_solver,
                              make_pcg_solver, relative_error,
                              step_linearly_implicit, step_picard_implicit,
                              time_step_size)

SECONDS_PER_DAY = 86400.0

DEFAULT_WELL_BOXES = ((0.1, 0.15, 0.05, 0.1), (0.6, 0.65, 0.9, 0.95))


class ConfigError(Exception):
    pass


@dataclass
class Scenario:
    """Complete description of one simulation run."""

    n: int = 50
    coarse: int = 10
    fractures: FractureSpec = field(default_factory=FractureSpec)
    phi_raster: str | None = None
    k_raster: str | None = None
    k_f: float = 1e6                      # fracture/matrix permeability contrast
    physics_overrides: dict = field(default_factory=dict)

    t_max_days: float = 1.0
    n_steps: int = 10
    tau_convention: str = "steps"
    scheme: str = "linearly-implicit"     # or "picard"
    initial: str = "constant"             # or "blob"
    freeze_coefficients: bool = False

    solver: str = "two-grid"              # linear solver: two-grid | jacobi | direct
    tol: float = 1e-9
    max_iter: int = 100
    picard_solver: str = "direct"         # direct | jacobi | spectral
    picard_max_inner: int = 10
    picard_tol_pct: float = 0.1

    basis_variant: str = "adaptive"       # fixed | adaptive | adaptive+1
    basis_threshold: float = 1e-3
    basis_fixed_m: int = 1
    smoothing_steps: int = 5
    local_operator: str = "diffusion_only"
    k_max: int = 32

    wells_enabled: bool = True
    well_boxes: tuple = DEFAULT_WELL_BOXES
    wells_implicit: bool = True

    output_dir: str | None = None
    vtk_steps: tuple = ()
    dump_matrices: bool = False

    def physics(self) -> PhysicalConstants:
        phys = PhysicalConstants(**self.physics_overrides) if self.physics_overrides \
            else PhysicalConstants()
        return phys.with_contrast(self.k_f)

    @property
    def t_max(self) -> float:
        return self.t_max_days * SECONDS_PER_DAY


@dataclass
class RunReport:
    """Everything one run produces besides the field output."""

    iterations: list                      # PCG (or Picard inner) count per step
    residuals: list
    c_min: list
    c_max: list
    energy: list                          # energy after each step (frozen matrices)
    energy_decay: list                    # E^{n+1} - E^n per step, same matrices
    hypothesis_violations: int
    n_coarse: int | None
    mode_counts: np.ndarray | None
    timings: dict
    build_counts: dict
    bounds_check: dict
    final_state: np.ndarray
    picard_converged: bool = True
    # steps with entries outside [c_min - tol, c_max + tol], tol = 1e-6 c_max;
    # monitored only, no maximum principle is enforced
    physical_bound_violations: int = 0

    @property
    def average_iterations(self) -> float:
        return float(np.mean(self.iterations)) if self.iterations else 0.0

    @property
    def total_iterations(self) -> int:
        return int(np.sum(self.iterations)) if self.iterations else 0


# ---------------------------------------------------------------------------
# configuration parsing


def _get(cfg, section, key, cast, default):
    if not cfg.has_option(section, key):
        return default
    raw = cfg.get(section, key)
    try:
        if cast is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}")


def _parse_boxes(raw: str):
    boxes = []
    for part in raw.split(";"):
        vals = [float(v) for v in part.replace(",", " ").split()]
        if len(vals) != 4:
            raise ConfigError(f"well box needs 4 numbers (x0 x1 y0 y1), got {part!r}")
        boxes.append(tuple(vals))
    return tuple(boxes)


def load_scenario(path) -> Scenario:
    """Parse a scenario config file; paths are resolved against its directory."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    # '#' only: ';' separates well boxes
    cfg = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        cfg.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}")
    base = path.parent

    def resolve(p):
        p = Path(p)
        return str(p if p.is_absolute() else base / p)

    sc = Scenario()
    sc.n = _get(cfg, "mesh", "n", int, sc.n)
    sc.coarse = _get(cfg, "mesh", "coarse", int, sc.coarse)
    frac_file = _get(cfg, "fractures", "file", str, None)
    if frac_file is None:
        raise ConfigError("missing [fractures] file = <fracture JSON>")
    frac_path = resolve(frac_file)
    if not Path(frac_path).exists():
        raise ConfigError(f"fracture file not found: {frac_path}")
    sc.fractures = FractureSpec.from_json(frac_path)

    sc.k_f = _get(cfg, "physics", "k_f", float, sc.k_f)
    for key in cfg.options("physics") if cfg.has_section("physics") else []:
        if key in ("k_f", "phi_raster", "k_raster"):
            continue
        if not hasattr(PhysicalConstants, "__dataclass_fields__") or \
                key not in PhysicalConstants.__dataclass_fields__:
            raise ConfigError(f"unknown physics constant {key!r}")
        sc.physics_overrides[key] = float(cfg.get("physics", key))
    phi_raster = _get(cfg, "physics", "phi_raster", str, None)
    k_raster = _get(cfg, "physics", "k_raster", str, None)
    if (phi_raster is None) != (k_raster is None):
        raise ConfigError("phi_raster and k_raster must be given together")
    if phi_raster is not None:
        sc.phi_raster, sc.k_raster = resolve(phi_raster), resolve(k_raster)
        for p in (sc.phi_raster, sc.k_raster):
            if not Path(p).exists():
                raise ConfigError(f"raster file not found: {p}")

    sc.t_max_days = _get(cfg, "time", "t_max_days", float, sc.t_max_days)
    sc.n_steps = _get(cfg, "time", "n_steps", int, sc.n_steps)
    sc.tau_convention = _get(cfg, "time", "tau_convention", str, sc.tau_convention)
    sc.scheme = _get(cfg, "time", "scheme", str, sc.scheme)
    sc.initial = _get(cfg, "time", "initial", str, sc.initial)
    sc.freeze_coefficients = _get(cfg, "time", "freeze_coefficients", bool,
                                  sc.freeze_coefficients)

    sc.solver = _get(cfg, "solver", "solver", str, sc.solver)
    sc.tol = _get(cfg, "solver", "tol", float, sc.tol)
    sc.max_iter = _get(cfg, "solver", "max_iter", int, sc.max_iter)
    sc.picard_solver = _get(cfg, "solver", "picard_solver", str, sc.picard_solver)
    sc.picard_max_inner = _get(cfg, "solver", "picard_max_inner", int, sc.picard_max_inner)
    sc.picard_tol_pct = _get(cfg, "solver", "picard_tol_pct", float, sc.picard_tol_pct)

    basis = _get(cfg, "precond", "basis", str, None)
    if basis is not None:
        sc.basis_variant, sc.basis_threshold, sc.basis_fixed_m = parse_basis(basis)
    sc.smoothing_steps = _get(cfg, "precond", "smoothing", int, sc.smoothing_steps)
    sc.local_operator = _get(cfg, "precond", "local_operator", str, sc.local_operator)
    sc.k_max = _get(cfg, "precond", "k_max", int, sc.k_max)

    sc.wells_enabled = _get(cfg, "wells", "enabled", bool, sc.wells_enabled)
    raw_boxes = _get(cfg, "wells", "boxes", str, None)
    if raw_boxes is not None:
        sc.well_boxes = _parse_boxes(raw_boxes)
    sc.wells_implicit = _get(cfg, "wells", "implicit", bool, sc.wells_implicit)

    out = _get(cfg, "output", "directory", str, None)
    sc.output_dir = resolve(out) if out else None
    vtk = _get(cfg, "output", "vtk_steps", str, "")
    if vtk.strip():
        sc.vtk_steps = tuple(int(v) for v in vtk.replace(",", " ").split())
    sc.dump_matrices = _get(cfg, "output", "dump_matrices", bool, sc.dump_matrices)

    _validate(sc)
    return sc


def parse_basis(raw: str):
    """Parse 'fixed:4', 'adaptive:1e-3' or 'adaptive+1:1e-3'."""
    try:
        kind, value = raw.split(":")
    except ValueError:
        raise ConfigError(f"basis spec needs the form kind:value, got {raw!r}")
    kind = kind.strip()
    if kind == "fixed":
        return "fixed", 1e-3, int(value)
    if kind in ("adaptive", "adaptive+1"):
        return kind, float(value), 1
    raise ConfigError(f"unknown basis kind {kind!r}")


def _validate(sc: Scenario) -> None:
    if sc.n < 2:
        raise ConfigError("mesh n must be at least 2")
    if sc.n % sc.coarse != 0:
        raise ConfigError(f"mesh n={sc.n} not divisible by coarse={sc.coarse}")
    if sc.scheme not in ("linearly-implicit", "picard"):
        raise ConfigError(f"unknown scheme {sc.scheme!r}")
    if sc.solver not in ("two-grid", "jacobi", "direct"):
        raise ConfigError(f"unknown solver {sc.solver!r}")
    if sc.picard_solver not in ("direct", "jacobi", "spectral"):
        raise ConfigError(f"unknown picard solver {sc.picard_solver!r}")
    if sc.basis_variant not in ("fixed", "adaptive", "adaptive+1"):
        raise ConfigError(f"unknown basis variant {sc.basis_variant!r}")
    if sc.initial not in ("constant", "blob"):
        raise ConfigError(f"unknown initial condition {sc.initial!r}")
    if sc.n_steps < 1 or sc.t_max_days <= 0:
        raise ConfigError("need n_steps >= 1 and t_max_days > 0")
    for box in sc.well_boxes:
        x0, x1, y0, y1 = box
        if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
            raise ConfigError(f"well box outside the unit square: {box}")


# ---------------------------------------------------------------------------
# pipeline


def build_problem(sc: Scenario):
    """Mesh, coefficient fields and wells for a scenario."""
    mesh = embed_fractures(build_structured_mesh(sc.n), sc.fractures)
    phys = sc.physics()
    if sc.phi_raster is not None:
        fields = CoefficientField.from_rasters(mesh, load_raster(sc.phi_raster),
                                               load_raster(sc.k_raster))
    else:
        fields = CoefficientField.homogeneous(mesh)
    assembler = Assembler(mesh)
    boxes = sc.well_boxes if sc.wells_enabled else []
    wells = Wells(assembler, phys, boxes, implicit=sc.wells_implicit)
    return mesh, phys, fields, assembler, wells


def initial_state(sc: Scenario, mesh: FineMesh, phys: PhysicalConstants) -> np.ndarray:
    if sc.initial == "constant":
        return np.full(mesh.n_dofs, phys.c_init)
    xy = mesh.dof_coordinates()
    bump = 0.5 - 0.5 * np.cos(2 * np.pi * xy[:, 0]) * np.cos(2 * np.pi * xy[:, 1])
    return phys.c_well + (phys.c_init - phys.c_well) * bump


def run_scenario(sc: Scenario) -> RunReport:
    """Execute the full pipeline and write the configured outputs."""
    assembly_mod.reset_build_counts()
    precond_mod.reset_build_counts()
    timings = {}

    t0 = time.perf_counter()
    mesh, phys, fields, assembler, wells = build_problem(sc)
    cover = build_coarse_cover(mesh, sc.coarse)
    timings["mesh"] = time.perf_counter() - t0

    tau = time_step_size(sc.t_max, sc.n_steps, sc.tau_convention)

    t0 = time.perf_counter()
    sys = build_linear_operator(assembler, phys, fields, wells, tau)
    timings["assembly"] = time.perf_counter() - t0

    evaluator = make_evaluator(assembler, phys, fields, wells,
                               frozen_system=sys if sc.freeze_coefficients else None)

    pre = None
    timings["eigen"] = 0.0
    if sc.scheme == "linearly-implicit" and sc.solver == "two-grid":
        t0 = time.perf_counter()
        pre = build_two_grid(assembler, phys, fields, wells, cover, sys.A,
                             variant=sc.basis_variant, threshold=sc.basis_threshold,
                             fixed_m=sc.basis_fixed_m, smoothing_steps=sc.smoothing_steps,
                             local_operator=sc.local_operator, tau=tau, k_max=sc.k_max)
        timings["eigen"] = time.perf_counter() - t0

    if sc.scheme == "linearly-implicit":
        if sc.solver == "two-grid":
            solver = make_pcg_solver(pre.apply, tol=sc.tol, max_iter=sc.max_iter)
        elif sc.solver == "jacobi":
            solver = make_jacobi_pcg_solver(tol=sc.tol, max_iter=max(sc.max_iter, 10000))
        else:
            solver = DirectSolver(tol=sc.tol)
    else:
        solver = _picard_solver(sc, assembler, phys, fields, wells, cover)

    state = TimeLoopState.start(initial_state(sc, mesh, phys), tau)
    rows = []
    iterations, residuals, cmins, cmaxs = [], [], [], []
    energies, decays = [], []
    violations = 0
    bound_violations = 0
    tol_phys = 1e-6 * phys.c_max
    picard_ok = True

    out_dir = Path(sc.output_dir) if sc.output_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        if sc.vtk_steps and 0 in sc.vtk_steps:
            _write_vtk(out_dir, mesh, state.c, 0)
        if sc.dump_matrices:
            dump_system(sys, out_dir / "matrices")
            if pre is not None:
                dump_preconditioner(pre, out_dir / "matrices")

    t0 = time.perf_counter()
    for _ in range(sc.n_steps):
        if sc.scheme == "linearly-implicit":
            ev = evaluator(state.c)
            e_now = energy_functional(sys, ev, state.c, state.c_prev)
            report, _ = step_linearly_implicit(sys, evaluator, state, solver,
                                               wells=wells, evaluation=ev)
            e_next = energy_functional(sys, ev, state.c, state.c_prev)
            iterations.append(report.iterations)
            residuals.append(report.final_relative_residual)
            energies.append(e_next.value)
            decays.append(e_next.value - e_now.value)
            if e_next.hypothesis_violated or e_now.hypothesis_violated:
                violations += 1
        else:
            inner, ok = step_picard_implicit(evaluator, wells.load, state, solver,
                                             inner_tol_pct=sc.picard_tol_pct,
                                             max_inner=sc.picard_max_inner)
            picard_ok = picard_ok and ok
            iterations.append(inner)
            residuals.append(0.0)
            energies.append(0.0)
            decays.append(0.0)
        cmins.append(float(state.c.min()))
        cmaxs.append(float(state.c.max()))
        if cmins[-1] < phys.c_min - tol_phys or cmaxs[-1] > phys.c_max + tol_phys:
            bound_violations += 1
        rows.append((state.step, state.step * tau, iterations[-1], residuals[-1],
                     cmins[-1], cmaxs[-1], energies[-1], decays[-1]))
        if out_dir and sc.vtk_steps and state.step in sc.vtk_steps:
            _write_vtk(out_dir, mesh, state.c, state.step)
    timings["solve"] = time.perf_counter() - t0

    bounds = check_splitting_bounds(phys, assembler if mesh.n_dofs <= 400 else None,
                                    fields, wells)
    counts = dict(assembly_mod.build_counts)
    counts.update(precond_mod.build_counts)
    report = RunReport(
        iterations=iterations, residuals=residuals, c_min=cmins, c_max=cmaxs,
        energy=energies, energy_decay=decays, hypothesis_violations=violations,
        physical_bound_violations=bound_violations,
        n_coarse=pre.n_coarse if pre else None,
        mode_counts=pre.selection.counts.copy() if pre else None,
        timings=timings, build_counts=counts, bounds_check=bounds,
        final_state=state.c.copy(), picard_converged=picard_ok)

    if out_dir:
        _write_steps_csv(out_dir / "steps.csv", rows)
        if pre is not None:
            _write_spectra_csv(out_dir / "spectra.csv",
                               spectra_table(pre.problems, pre.selection))
        _write_summary(out_dir / "summary.json", sc, report)
    return report


def _picard_solver(sc, assembler, phys, fields, wells, cover):
    if sc.picard_solver == "direct":
        return DirectSolver(tol=max(sc.tol, 1e-9))
    if sc.picard_solver == "jacobi":
        return make_jacobi_pcg_solver(tol=sc.tol, max_iter=max(sc.max_iter, 10000))

    def spectral_solve(A, b):
        # study mode: rebuild the spectral preconditioner for every operator
        pre = build_two_grid(assembler, phys, fields, wells, cover, A,
                             variant=sc.basis_variant, threshold=sc.basis_threshold,
                             fixed_m=sc.basis_fixed_m,
                             smoothing_steps=sc.smoothing_steps,
                             local_operator=sc.local_operator, k_max=sc.k_max)
        return make_pcg_solver(pre.apply, tol=sc.tol, max_iter=sc.max_iter)(A, b)

    return spectral_solve


# ---------------------------------------------------------------------------
# output writers (deterministic formatting)


def _fmt(v) -> str:
    return repr(float(v))


def _write_steps_csv(path, rows) -> None:
    lines = ["step,time,iterations,residual,c_min,c_max,energy,energy_decay"]
    for step, t, its, res, cmin, cmax, en, dec in rows:
        lines.append(f"{step},{_fmt(t)},{its},{_fmt(res)},{_fmt(cmin)},"
                     f"{_fmt(cmax)},{_fmt(en)},{_fmt(dec)}")
    Path(path).write_text("\n".join(lines) + "\n")


def _write_spectra_csv(path, table) -> None:
    if not table:
        return
    n_eigen = max(len(r) - 3 for r in table)
    header = "neighborhood,size,kept" + "".join(f",lambda{k + 1}" for k in range(n_eigen))
    lines = [header]
    for r in table:
        vals = [str(r["neighborhood"]), str(r["size"]), str(r["kept"])]
        vals += [_fmt(r[f"lambda{k + 1}"]) if f"lambda{k + 1}" in r else ""
                 for k in range(n_eigen)]
        lines.append(",".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")


def _write_vtk(out_dir: Path, mesh: FineMesh, c: np.ndarray, step: int) -> None:
    nm = mesh.n_matrix_dofs
    export_vtk(out_dir / f"solution_{step:05d}.vtk", mesh,
               {"c_m": c[:nm], "c_f": c})


def _write_summary(path, sc: Scenario, report: RunReport) -> None:
    data = {
        "scheme": sc.scheme,
        "k_f": sc.k_f,
        "n": sc.n,
        "coarse": sc.coarse,
        "n_steps": sc.n_steps,
        "average_iterations": report.average_iterations,
        "total_iterations": report.total_iterations,
        "n_coarse": report.n_coarse,
        "hypothesis_violations": report.hypothesis_violations,
        "physical_bound_violations": report.physical_bound_violations,
        "bounds_ok": report.bounds_check.get("ok"),
        "build_counts": report.build_counts,
        "picard_converged": report.picard_converged,
        "timings_seconds": {k: round(v, 3) for k, v in report.timings.items()},
    }
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# studies


def convergence_study(sc: Scenario, nt_list, reference_nt: int = 320) -> list[dict]:
    """Errors of the linearly implicit scheme against a fine Picard reference.

    The reference runs the Picard scheme at reference_nt steps; every entry
    reports e(c_ref, c) at the final time and the ratio to the previous
    (coarser) run.  Requires the 'steps' tau convention so all runs share
    the same final time.
    """
    if sc.tau_convention != "steps":
        raise ConfigError("convergence study needs the 'steps' tau convention")
    ref_sc = replace(sc, scheme="picard", n_steps=reference_nt, output_dir=None,
                     vtk_steps=())
    c_ref = run_scenario(ref_sc).final_state
    rows = []
    prev_err = None
    for nt in nt_list:
        run_sc = replace(sc, scheme="linearly-implicit", n_steps=nt,
                         output_dir=None, vtk_steps=())
        rep = run_scenario(run_sc)
        err = relative_error(c_ref, rep.final_state)
        rows.append({"n_steps": nt, "error_pct": err,
                     "ratio": (prev_err / err) if prev_err else None,
                     "average_iterations": rep.average_iterations})
        prev_err = err
    return rows


def contrast_sweep(sc: Scenario, kf_list, basis_list) -> list[dict]:
    """Average iteration counts over contrasts and basis configurations.

    Every (contrast, basis) pair assembles a fresh operator and
    preconditioner.  Non-convergence is recorded as the '>max_iter'
    sentinel instead of aborting the sweep.
    """
    rows = []
    for basis in basis_list:
        variant, threshold, fixed_m = (basis if isinstance(basis, tuple)
                                       else parse_basis(basis))
        row = {"basis": basis if isinstance(basis, str)
               else f"{variant}:{fixed_m if variant == 'fixed' else threshold}"}
        for kf in kf_list:
            run_sc = replace(sc, k_f=kf, basis_variant=variant,
                             basis_threshold=threshold, basis_fixed_m=fixed_m,
                             scheme="linearly-implicit", solver="two-grid",
                             output_dir=None, vtk_steps=())
            try:
                rep = run_scenario(run_sc)
                row[f"kf_{kf:g}"] = round(rep.average_iterations, 1)
                row[f"kf_{kf:g}_n_coarse"] = rep.n_coarse
            except SolverFailure:
                row[f"kf_{kf:g}"] = f">{sc.max_iter}"
                row[f"kf_{kf:g}_n_coarse"] = None
        rows.append(row)
    return rows


def write_table_csv(path, rows: list[dict]) -> None:
    """Dump study rows with a stable union-of-keys header."""
    keys = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    lines = [",".join(keys)]
    for r in rows:
        lines.append(",".join("" if r.get(k) is None else str(r.get(k)) for k in keys))
    Path(path).write_text("\n".join(lines) + "\n")
