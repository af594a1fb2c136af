"""Fracture-conforming structured triangulations of the unit square.

The fine grid is an n x n grid of squares split along their SW-NE diagonals.
Fracture segments are snapped onto mesh edges (horizontal, vertical and
SW-NE diagonal moves), so every fracture edge is an edge of the
triangulation and fracture vertices coincide with mesh vertices.

The coarse side is a uniform quad grid: each coarse node owns the patch of
coarse cells touching it, and carries the bilinear hat function of that node
as partition of unity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class MeshError(Exception):
    pass


# ---------------------------------------------------------------------------
# fine mesh


@dataclass
class FineMesh:
    """Triangulation plus the fracture edge network and DOF maps.

    Matrix DOFs are the mesh vertices (numbered first); fracture DOFs are the
    vertices lying on fracture edges, numbered by ascending vertex index and
    appended after the matrix block.
    """

    n: int
    vertices: np.ndarray          # (Nv, 2)
    triangles: np.ndarray         # (Nt, 3) vertex indices, CCW
    fracture_edges: np.ndarray    # (Ne, 2) vertex pairs, a < b, lexsorted
    frac_vertices: np.ndarray = field(default=None)  # sorted vertex ids on fractures
    edge_frac_dofs: np.ndarray = field(default=None)  # (Ne, 2) local fracture numbering

    def __post_init__(self):
        if self.frac_vertices is None:
            self.frac_vertices = np.unique(self.fracture_edges)
        if self.edge_frac_dofs is None:
            self.edge_frac_dofs = np.searchsorted(self.frac_vertices, self.fracture_edges)

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def n_matrix_dofs(self) -> int:
        return len(self.vertices)

    @property
    def n_fracture_dofs(self) -> int:
        return len(self.frac_vertices)

    @property
    def n_dofs(self) -> int:
        return self.n_matrix_dofs + self.n_fracture_dofs

    def dof_coordinates(self) -> np.ndarray:
        """Coordinates of all DOFs, matrix block then fracture block."""
        return np.vstack([self.vertices, self.vertices[self.frac_vertices]])

    def triangle_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                      - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))

    def fracture_lengths(self) -> np.ndarray:
        if len(self.fracture_edges) == 0:
            return np.zeros(0)
        d = self.vertices[self.fracture_edges[:, 1]] - self.vertices[self.fracture_edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])


def build_structured_mesh(n: int) -> FineMesh:
    """Uniform triangulation: (n+1)^2 vertices, 2 n^2 right triangles."""
    if n < 2:
        raise MeshError(f"need at least 2 cells per side, got n={n}")
    k = n + 1
    xs = np.arange(k) / n
    X, Y = np.meshgrid(xs, xs)          # row-major: index = j*k + i
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(n), np.arange(n))
    v00 = (j * k + i).ravel()
    v10 = v00 + 1
    v01 = v00 + k
    v11 = v01 + 1
    # each square split along its SW-NE diagonal, both triangles CCW
    tris = np.empty((2 * n * n, 3), dtype=np.int64)
    tris[0::2] = np.column_stack([v00, v10, v11])
    tris[1::2] = np.column_stack([v00, v11, v01])
    return FineMesh(n=n, vertices=vertices, triangles=tris,
                    fracture_edges=np.zeros((0, 2), dtype=np.int64))


# ---------------------------------------------------------------------------
# fracture specification and embedding


@dataclass
class FractureSpec:
    """Fracture network: explicit segments and/or a seeded random generator.

    Generator keys: count, length_range=(lo, hi), orientations (list of
    angles in degrees, or "uniform"), seed.  Networks are deterministic
    given the seed.
    """

    segments: list = field(default_factory=list)   # (x0, y0, x1, y1) tuples
    generator: dict | None = None

    def resolve(self) -> np.ndarray:
        """All segments (explicit first, then generated) as an (k, 4) array."""
        segs = [tuple(map(float, s)) for s in self.segments]
        if self.generator is not None:
            segs.extend(_generate_segments(self.generator))
        for s in segs:
            if not all(0.0 <= v <= 1.0 for v in s):
                raise MeshError(f"fracture endpoint outside the unit square: {s}")
        return np.array(segs, dtype=float).reshape(-1, 4)

    @classmethod
    def from_json(cls, path) -> "FractureSpec":
        with open(path) as f:
            data = json.load(f)
        return cls(segments=[tuple(s) for s in data.get("segments", [])],
                   generator=data.get("generator"))

    def to_json(self, path) -> None:
        data = {}
        if self.segments:
            data["segments"] = [list(s) for s in self.segments]
        if self.generator is not None:
            data["generator"] = self.generator
        with open(path, "w") as f:
            json.dump(data, f, indent=2)
            f.write("\n")


def _generate_segments(gen: dict) -> list:
    count = int(gen["count"])
    lo, hi = gen.get("length_range", (0.1, 0.4))
    orientations = gen.get("orientations", "uniform")
    rng = np.random.default_rng(int(gen.get("seed", 0)))
    segs = []
    for _ in range(count):
        cx, cy = rng.uniform(0.08, 0.92, size=2)
        length = rng.uniform(lo, hi)
        if orientations == "uniform":
            theta = rng.uniform(0.0, np.pi)
        else:
            theta = np.deg2rad(float(rng.choice(np.asarray(orientations, dtype=float))))
        dx, dy = 0.5 * length * np.cos(theta), 0.5 * length * np.sin(theta)
        x0, y0 = np.clip(cx - dx, 0.0, 1.0), np.clip(cy - dy, 0.0, 1.0)
        x1, y1 = np.clip(cx + dx, 0.0, 1.0), np.clip(cy + dy, 0.0, 1.0)
        segs.append((x0, y0, x1, y1))
    return segs


def _snap_vertex(n: int, x: float, y: float) -> tuple[int, int]:
    gi = int(np.floor(x * n + 0.5))
    gj = int(np.floor(y * n + 0.5))
    return min(max(gi, 0), n), min(max(gj, 0), n)


def _segment_distance(px, py, seg) -> float:
    x0, y0, x1, y1 = seg
    vx, vy = x1 - x0, y1 - y0
    L2 = vx * vx + vy * vy
    t = 0.0 if L2 == 0.0 else ((px - x0) * vx + (py - y0) * vy) / L2
    t = min(max(t, 0.0), 1.0)
    return float(np.hypot(px - (x0 + t * vx), py - (y0 + t * vy)))


def _walk_segment(n: int, seg, index: int) -> list[tuple[int, int]]:
    """Snap a segment to a chain of grid vertices.

    Moves are +-x, +-y and the SW-NE diagonal (the only diagonal present in
    the triangulation); at every step the candidate vertex closest to the
    original segment wins, so the path never drifts more than one cell away.
    """
    h = 1.0 / n
    i0, j0 = _snap_vertex(n, seg[0], seg[1])
    i1, j1 = _snap_vertex(n, seg[2], seg[3])
    if (i0, j0) == (i1, j1):
        raise MeshError(f"fracture segment {index} has zero length after snapping: {tuple(seg)}")
    path = [(i0, j0)]
    i, j = i0, j0
    while (i, j) != (i1, j1):
        dx = (i1 > i) - (i1 < i)
        dy = (j1 > j) - (j1 < j)
        candidates = []
        if dx and dy and dx == dy:
            candidates.append((i + dx, j + dy))
        if dx:
            candidates.append((i + dx, j))
        if dy:
            candidates.append((i, j + dy))
        best = min(candidates, key=lambda c: _segment_distance(c[0] * h, c[1] * h, seg))
        i, j = best
        path.append(best)
    return path


def embed_fractures(mesh: FineMesh, spec: FractureSpec) -> FineMesh:
    """Snap every fracture segment onto mesh edges; returns a new mesh.

    The resulting edge set is deduplicated across segments.  Intersecting
    fractures share the vertex (hence the DOF) at the intersection.
    """
    n, k = mesh.n, mesh.n + 1
    edges = []
    for idx, seg in enumerate(spec.resolve()):
        path = _walk_segment(n, seg, idx)
        for (ia, ja), (ib, jb) in zip(path[:-1], path[1:]):
            a, b = ja * k + ia, jb * k + ib
            edges.append((a, b) if a < b else (b, a))
    if not edges:
        raise MeshError("fracture specification produced no edges")
    eds = np.unique(np.array(edges, dtype=np.int64), axis=0)
    return FineMesh(n=mesh.n, vertices=mesh.vertices, triangles=mesh.triangles,
                    fracture_edges=eds)


# ---------------------------------------------------------------------------
# coarse cover


@dataclass
class CoarseCover:
    """Coarse quad grid with node neighborhoods and partition of unity.

    For node i, `local_dofs[i]` lists the global DOFs of the elements inside
    its neighborhood (matrix DOFs ascending, then fracture DOFs ascending)
    and `chi[i]` holds the bilinear hat of the node at those DOFs.
    """

    Nc: int
    H: float
    nodes: np.ndarray                 # (Nn, 2) coarse node coordinates
    cell_triangles: list              # per coarse cell: fine triangle ids
    cell_fracture_edges: list         # per coarse cell: fracture edge ids
    node_cells: list                  # per node: coarse cell ids of its patch
    local_matrix_dofs: list           # per node: mesh vertex ids (ascending)
    local_fracture_dofs: list         # per node: fracture-local ids (ascending)
    local_dofs: list                  # per node: global DOF ids (matrix, fracture)
    chi: list                         # per node: hat values aligned with local_dofs

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def local_triangles(self, i: int) -> np.ndarray:
        parts = [self.cell_triangles[c] for c in self.node_cells[i]]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def local_edges(self, i: int) -> np.ndarray:
        parts = [self.cell_fracture_edges[c] for c in self.node_cells[i]]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def _hat(t: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, 1.0 - np.abs(t))


def build_coarse_cover(mesh: FineMesh, Nc: int) -> CoarseCover:
    """Uniform Nc x Nc coarse grid; requires the fine grid to nest in it."""
    if mesh.n % Nc != 0:
        raise MeshError(f"fine cells per side ({mesh.n}) not divisible by coarse cells ({Nc})")
    H = 1.0 / Nc

    centroid = mesh.vertices[mesh.triangles].mean(axis=1)
    tri_cell = (np.minimum((centroid[:, 1] * Nc).astype(int), Nc - 1) * Nc
                + np.minimum((centroid[:, 0] * Nc).astype(int), Nc - 1))
    cell_triangles = [np.flatnonzero(tri_cell == c) for c in range(Nc * Nc)]

    if len(mesh.fracture_edges):
        mid = 0.5 * (mesh.vertices[mesh.fracture_edges[:, 0]]
                     + mesh.vertices[mesh.fracture_edges[:, 1]])
        edge_cell = (np.minimum((mid[:, 1] * Nc).astype(int), Nc - 1) * Nc
                     + np.minimum((mid[:, 0] * Nc).astype(int), Nc - 1))
    else:
        edge_cell = np.zeros(0, dtype=int)
    cell_edges = [np.flatnonzero(edge_cell == c) for c in range(Nc * Nc)]

    gx, gy = np.meshgrid(np.arange(Nc + 1), np.arange(Nc + 1))
    nodes = np.column_stack([gx.ravel() * H, gy.ravel() * H])

    node_cells, loc_m, loc_f, loc_all, chi = [], [], [], [], []
    Nm = mesh.n_matrix_dofs
    for node_id in range(len(nodes)):
        njx, njy = node_id % (Nc + 1), node_id // (Nc + 1)
        cells = [cy * Nc + cx
                 for cy in (njy - 1, njy) if 0 <= cy < Nc
                 for cx in (njx - 1, njx) if 0 <= cx < Nc]
        tris = np.concatenate([cell_triangles[c] for c in cells])
        mdofs = np.unique(mesh.triangles[tris])
        eds = [cell_edges[c] for c in cells]
        eds = np.concatenate(eds) if eds else np.zeros(0, dtype=np.int64)
        fdofs = (np.unique(mesh.edge_frac_dofs[eds]) if len(eds)
                 else np.zeros(0, dtype=np.int64))
        dofs = np.concatenate([mdofs, Nm + fdofs])
        xy = np.vstack([mesh.vertices[mdofs], mesh.vertices[mesh.frac_vertices[fdofs]]])
        x_i = nodes[node_id]
        vals = _hat((xy[:, 0] - x_i[0]) / H) * _hat((xy[:, 1] - x_i[1]) / H)
        node_cells.append(cells)
        loc_m.append(mdofs)
        loc_f.append(fdofs)
        loc_all.append(dofs)
        chi.append(vals)

    return CoarseCover(Nc=Nc, H=H, nodes=nodes, cell_triangles=cell_triangles,
                       cell_fracture_edges=cell_edges, node_cells=node_cells,
                       local_matrix_dofs=loc_m, local_fracture_dofs=loc_f,
                       local_dofs=loc_all, chi=chi)


def single_domain_cover(mesh: FineMesh) -> CoarseCover:
    """One neighborhood covering the whole mesh with chi identically 1.

    This is the exact-coarse-space limit: keeping every local eigenvector
    makes the prolongation square and the two-grid solve exact.
    """
    Nm = mesh.n_matrix_dofs
    mdofs = np.arange(Nm, dtype=np.int64)
    fdofs = np.arange(mesh.n_fracture_dofs, dtype=np.int64)
    dofs = np.concatenate([mdofs, Nm + fdofs])
    return CoarseCover(
        Nc=1, H=1.0, nodes=np.array([[0.5, 0.5]]),
        cell_triangles=[np.arange(len(mesh.triangles), dtype=np.int64)],
        cell_fracture_edges=[np.arange(len(mesh.fracture_edges), dtype=np.int64)],
        node_cells=[[0]], local_matrix_dofs=[mdofs], local_fracture_dofs=[fdofs],
        local_dofs=[dofs], chi=[np.ones(len(dofs))])


def local_dof_set(cover: CoarseCover, i: int) -> np.ndarray:
    """Global DOFs of neighborhood i: matrix block first, each ascending."""
    if not 0 <= i < cover.n_nodes:
        raise MeshError(f"coarse node index {i} out of range")
    return cover.local_dofs[i]


def partition_of_unity(mesh: FineMesh, cover: CoarseCover) -> np.ndarray:
    """Sum of all hats at every fine DOF; identically 1 for a valid cover."""
    total = np.zeros(mesh.n_dofs)
    for dofs, vals in zip(cover.local_dofs, cover.chi):
        np.add.at(total, dofs, vals)
    return total


# ---------------------------------------------------------------------------
# VTK output


def export_vtk(path, mesh: FineMesh, point_data: dict | None = None) -> None:
    """Legacy-ASCII VTK unstructured grid: triangles plus fracture lines.

    Point data arrays may have length Nv (matrix field) or N_dofs, in which
    case the fracture block overwrites the values at fracture vertices.
    """
    lines = ["# vtk DataFile Version 3.0", "fracgas mesh", "ASCII",
             "DATASET UNSTRUCTURED_GRID"]
    nv = len(mesh.vertices)
    lines.append(f"POINTS {nv} double")
    for x, y in mesh.vertices:
        lines.append(f"{x:.17g} {y:.17g} 0")
    nt, ne = len(mesh.triangles), len(mesh.fracture_edges)
    lines.append(f"CELLS {nt + ne} {4 * nt + 3 * ne}")
    for a, b, c in mesh.triangles:
        lines.append(f"3 {a} {b} {c}")
    for a, b in mesh.fracture_edges:
        lines.append(f"2 {a} {b}")
    lines.append(f"CELL_TYPES {nt + ne}")
    lines.extend(["5"] * nt)
    lines.extend(["3"] * ne)
    if point_data:
        lines.append(f"POINT_DATA {nv}")
        for name, values in point_data.items():
            values = np.asarray(values, dtype=float)
            if len(values) == mesh.n_dofs:
                merged = values[:nv].copy()
                merged[mesh.frac_vertices] = values[nv:]
                values = merged
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(f"{v:.17g}" for v in values)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
