"""Parametric pore shapes and structured triangular meshes for cellular solids.

A cell is a unit square of elastomer with a single pore in its center.  The
pore boundary is a polar curve r(theta) controlled by two coefficients; the
pore always covers half the cell area.  Components are square grids of such
cells, meshed with a deterministic ray-structured triangulation whose uniform
refinement produces nested finite element spaces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

# Boundary marker bits for vertices on the outer square of a component.
BOTTOM, RIGHT, TOP, LEFT = 1, 2, 4, 8

DEFAULT_THICKNESS_FLOOR = 0.05
DEFAULT_PORE_BOX = (-0.3, 0.3)

_WELD_TOL = 1e-9


class MeshingError(RuntimeError):
    """Raised when a pore layout cannot be triangulated."""


@dataclass(frozen=True)
class PoreShape:
    """Pore boundary r(theta) = r0 * (1 + alpha*cos(4 theta) + beta*cos(8 theta)).

    ``r0`` is derived so the pore covers half the cell area regardless of
    (alpha, beta).
    """

    alpha: float
    beta: float
    cell_side: float = 1.0

    @property
    def r0(self) -> float:
        return self.cell_side / math.sqrt(
            math.pi * (2.0 + self.alpha**2 + self.beta**2)
        )


def pore_radius(shape: PoreShape, theta):
    """Polar radius of the pore boundary at angle(s) ``theta``."""
    theta = np.asarray(theta, dtype=float)
    return shape.r0 * (
        1.0 + shape.alpha * np.cos(4.0 * theta) + shape.beta * np.cos(8.0 * theta)
    )


def pore_polygon(shape: PoreShape, n_points: int) -> np.ndarray:
    """Pore boundary polygon with ``n_points`` vertices at uniform angles,
    centered at the origin."""
    theta = 2.0 * math.pi * np.arange(n_points) / n_points
    r = pore_radius(shape, theta)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def polygon_area(points: np.ndarray) -> float:
    """Signed (shoelace) area of a closed polygon."""
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def is_valid_pore(
    shape: PoreShape,
    thickness_floor: float = DEFAULT_THICKNESS_FLOOR,
    n_grid: int = 10_000,
) -> bool:
    """Whether the pore keeps at least ``thickness_floor * cell_side`` of
    material everywhere.

    Two checks on a theta grid: the radius itself must exceed the floor, and
    the ligament between adjacent pores (cell side minus twice the axis-aligned
    pore extent) must exceed the floor.
    """
    L0 = shape.cell_side
    theta = np.linspace(0.0, 2.0 * math.pi, n_grid, endpoint=False)
    r = pore_radius(shape, theta)
    if r.min() <= thickness_floor * L0:
        return False
    extent = max(
        float(np.max(np.abs(r * np.cos(theta)))),
        float(np.max(np.abs(r * np.sin(theta)))),
    )
    ligament = L0 - 2.0 * extent
    return ligament > thickness_floor * L0


def sample_valid_pore(
    rng: np.random.Generator,
    box: tuple[float, float] = DEFAULT_PORE_BOX,
    thickness_floor: float = DEFAULT_THICKNESS_FLOOR,
    cell_side: float = 1.0,
    max_rejections: int = 10_000,
) -> PoreShape:
    """Draw a uniformly distributed valid pore shape by rejection from the
    (alpha, beta) box."""
    lo, hi = box
    for _ in range(max_rejections):
        alpha, beta = rng.uniform(lo, hi, size=2)
        shape = PoreShape(float(alpha), float(beta), cell_side)
        if is_valid_pore(shape, thickness_floor):
            return shape
    raise RuntimeError(
        f"no valid pore found in box {box} after {max_rejections} rejections"
    )


@dataclass
class Mesh:
    """Triangulated component domain.

    vertices : (nv, 2) reference coordinates
    triangles : (nt, 3) vertex indices, counterclockwise
    markers : (nv,) bitmask of outer faces the vertex lies on
        (BOTTOM | RIGHT | TOP | LEFT); 0 for interior and pore-boundary
        vertices
    pore_count : pores per side (columns for rectangular grids)
    pore_rows : pore rows when the grid is not square
    """

    vertices: np.ndarray
    triangles: np.ndarray
    markers: np.ndarray
    pore_count: int
    cell_side: float = 1.0
    pore_rows: int | None = None

    def __post_init__(self):
        if self.pore_rows is None:
            self.pore_rows = self.pore_count

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def width(self) -> float:
        return self.pore_count * self.cell_side

    @property
    def height(self) -> float:
        return self.pore_rows * self.cell_side

    def extent(self, axis: int) -> float:
        return self.height if axis == 1 else self.width

    @property
    def side(self) -> float:
        if self.pore_rows != self.pore_count:
            raise ValueError("side is only defined for square components")
        return self.pore_count * self.cell_side

    def boundary_vertices(self) -> np.ndarray:
        return np.flatnonzero(self.markers != 0)

    def boundary_dofs(self) -> np.ndarray:
        verts = self.boundary_vertices()
        return np.sort(np.concatenate([2 * verts, 2 * verts + 1]))

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def material_area(self) -> float:
        return float(self.signed_areas().sum())

    def max_edge_length(self) -> float:
        p = self.vertices[self.triangles]
        e = np.concatenate(
            [p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]]
        )
        return float(np.sqrt((e**2).sum(axis=1)).max())


def _weld(vertices: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Merge coincident vertices; returns (unique vertices, old->new index map)."""
    tree = cKDTree(vertices)
    pairs = tree.query_pairs(r=tol, output_type="ndarray")
    parent = np.arange(len(vertices))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(i) for i in range(len(vertices))])
    uniq, new_index = np.unique(roots, return_inverse=True)
    return vertices[uniq], new_index


def _cell_points(shape: PoreShape, center: np.ndarray, n_rays: int, n_layers: int):
    """Ray-structured point rings of one cell: pore polygon to cell square."""
    L0 = shape.cell_side
    theta = 2.0 * math.pi * np.arange(n_rays) / n_rays
    c, s = np.cos(theta), np.sin(theta)
    outer = 0.5 * L0 / np.maximum(np.abs(c), np.abs(s))
    inner = pore_radius(shape, theta)
    if np.any(inner >= outer - 0.02 * L0):
        raise MeshingError(
            f"pore at {center} approaches the cell boundary; "
            f"min clearance {float(np.min(outer - inner)):.4f}"
        )
    t = np.arange(n_layers + 1) / n_layers
    rho = inner[None, :] + t[:, None] * (outer - inner)[None, :]
    # rings[j, k] = point on ray k of ring j (ring 0 = pore boundary)
    rings = np.stack([rho * c[None, :], rho * s[None, :]], axis=-1) + center
    return rings


def _triangulate_rings(rings: np.ndarray, base: int):
    """Cross-split each quad between consecutive rings/rays into 4 triangles.

    Returns (extra centroid vertices, triangles) with ring vertices assumed
    stored row-major starting at global index ``base``.
    """
    n_layers = rings.shape[0] - 1
    n_rays = rings.shape[1]

    def vid(j, k):
        return base + j * n_rays + (k % n_rays)

    centroids = []
    triangles = []
    cbase = base + (n_layers + 1) * n_rays
    for j in range(n_layers):
        for k in range(n_rays):
            # counterclockwise: radially out, along +theta, radially in
            corners = rings[j, k], rings[j + 1, k], rings[j + 1, (k + 1) % n_rays], rings[j, (k + 1) % n_rays]
            m = cbase + len(centroids)
            centroids.append(0.25 * sum(corners))
            ia, ib, ic, id_ = vid(j, k), vid(j + 1, k), vid(j + 1, k + 1), vid(j, k + 1)
            triangles += [(ia, ib, m), (ib, ic, m), (ic, id_, m), (id_, ia, m)]
    return np.array(centroids), np.array(triangles, dtype=np.int64)


def build_grid_mesh(
    shape_grid,
    pore_resolution: int = 64,
    min_mesh_resolution: int = 8,
) -> Mesh:
    """Triangulate a rectangular [row][col] grid of cells (row = y index)."""
    if pore_resolution < 8 or pore_resolution % 8 != 0:
        raise ValueError("pore_resolution must be a positive multiple of 8")
    grid = [list(row) for row in shape_grid]
    rows = len(grid)
    cols = len(grid[0])
    if rows < 1 or any(len(r) != cols for r in grid):
        raise ValueError("shape grid must be rectangular")
    L0 = grid[0][0].cell_side
    if any(cell.cell_side != L0 for row in grid for cell in row):
        raise ValueError("all cells must share one cell_side")

    all_points = []
    all_tris = []
    base = 0
    for jy in range(rows):
        for ix in range(cols):
            shape = grid[jy][ix]
            center = np.array([(ix + 0.5) * L0, (jy + 0.5) * L0])
            theta = 2.0 * math.pi * np.arange(pore_resolution) / pore_resolution
            outer = 0.5 * L0 / np.maximum(
                np.abs(np.cos(theta)), np.abs(np.sin(theta))
            )
            extent = float(np.max(outer - pore_radius(shape, theta)))
            # layer count depends only on geometry (roughly isotropic cells),
            # never on min_mesh_resolution: resolution then enters purely
            # through nested quadrisection, so energies fall monotonically
            # under refinement
            arc = 4.0 * L0 / pore_resolution
            n_layers = max(1, round(extent / arc))
            try:
                rings = _cell_points(shape, center, pore_resolution, n_layers)
            except MeshingError as err:
                raise MeshingError(f"pore ({ix}, {jy}): {err}") from None
            centroids, tris = _triangulate_rings(
                rings.reshape(n_layers + 1, pore_resolution, 2), base
            )
            pts = np.vstack([rings.reshape(-1, 2), centroids])
            all_points.append(pts)
            all_tris.append(tris)
            base += len(pts)

    vertices = np.vstack(all_points)
    triangles = np.vstack(all_tris)
    vertices, remap = _weld(vertices, _WELD_TOL * L0)
    triangles = remap[triangles]

    mesh = Mesh(
        vertices=vertices,
        triangles=triangles,
        markers=_mark_outer_rectangle(vertices, cols * L0, rows * L0, _WELD_TOL * L0),
        pore_count=cols,
        cell_side=L0,
        pore_rows=rows,
    )
    _check_orientation(mesh)

    target = L0 / min_mesh_resolution
    while mesh.max_edge_length() > target * (1.0 + 1e-12):
        mesh = refine(mesh)
    return mesh


def build_component_mesh(
    shapes,
    pores_per_side: int = 1,
    pore_resolution: int = 64,
    min_mesh_resolution: int = 8,
) -> Mesh:
    """Triangulate a square component of ``pores_per_side`` x ``pores_per_side``
    cells, each with its own pore.

    ``shapes`` is a single PoreShape or a [row][col] grid (row = y index).
    Each pore contributes a polygon with ``pore_resolution`` vertices; the mesh
    is refined uniformly until the longest edge is at most
    cell_side / min_mesh_resolution, which keeps refinements nested.
    """
    if pores_per_side < 1:
        raise ValueError("pores_per_side must be >= 1")
    if isinstance(shapes, PoreShape):
        shapes = [[shapes] * pores_per_side for _ in range(pores_per_side)]
    grid = [list(row) for row in shapes]
    if len(grid) != pores_per_side or any(len(r) != pores_per_side for r in grid):
        raise ValueError("shape grid does not match pores_per_side")
    return build_grid_mesh(grid, pore_resolution, min_mesh_resolution)


def _mark_outer_rectangle(vertices: np.ndarray, width: float, height: float, tol: float) -> np.ndarray:
    x, y = vertices[:, 0], vertices[:, 1]
    markers = np.zeros(len(vertices), dtype=np.int64)
    markers[np.abs(y) < tol] |= BOTTOM
    markers[np.abs(x - width) < tol] |= RIGHT
    markers[np.abs(y - height) < tol] |= TOP
    markers[np.abs(x) < tol] |= LEFT
    return markers


def _check_orientation(mesh: Mesh) -> None:
    areas = mesh.signed_areas()
    bad = np.flatnonzero(areas <= 0)
    if bad.size:
        raise MeshingError(f"{bad.size} non-positive triangles, first at {bad[0]}")


def refine(mesh: Mesh) -> Mesh:
    """Uniform quadrisection: each triangle splits at its edge midpoints.

    The refined P1 space contains the original one, so minimum energies can
    only decrease under refinement.  Pore polygons keep their geometry (new
    boundary vertices sit on polygon chords).
    """
    verts = [mesh.vertices]
    markers = [mesh.markers]
    midpoint: dict[tuple[int, int], int] = {}
    next_id = mesh.n_vertices
    new_pts = []
    new_marks = []

    def mid(a: int, b: int) -> int:
        nonlocal next_id
        key = (a, b) if a < b else (b, a)
        idx = midpoint.get(key)
        if idx is None:
            idx = next_id
            midpoint[key] = idx
            next_id += 1
            new_pts.append(0.5 * (mesh.vertices[a] + mesh.vertices[b]))
            new_marks.append(mesh.markers[a] & mesh.markers[b])
        return idx

    tris = []
    for a, b, c in mesh.triangles:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        tris += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]

    if new_pts:
        verts.append(np.array(new_pts))
        markers.append(np.array(new_marks, dtype=np.int64))
    return Mesh(
        vertices=np.vstack(verts),
        triangles=np.array(tris, dtype=np.int64),
        markers=np.concatenate(markers),
        pore_count=mesh.pore_count,
        cell_side=mesh.cell_side,
        pore_rows=mesh.pore_rows,
    )


def is_connected(mesh: Mesh) -> bool:
    """Vertex connectivity through triangle edges."""
    n = mesh.n_vertices
    adj: list[list[int]] = [[] for _ in range(n)]
    for a, b, c in mesh.triangles:
        adj[a] += [b, c]
        adj[b] += [a, c]
        adj[c] += [a, b]
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        v = stack.pop()
        for w in adj[v]:
            if not seen[w]:
                seen[w] = True
                stack.append(w)
    return bool(seen.all())


def save_mesh(mesh: Mesh, path) -> None:
    """Plain-text mesh format: header "nv nt", vertex lines "x y marker",
    triangle lines "i j k" (0-based)."""
    with open(path, "w") as fh:
        fh.write(f"{mesh.n_vertices} {len(mesh.triangles)}\n")
        for (x, y), m in zip(mesh.vertices, mesh.markers):
            fh.write(f"{float(x)!r} {float(y)!r} {int(m)}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"{a} {b} {c}\n")


def load_mesh(path, pore_count: int = 1, cell_side: float = 1.0) -> Mesh:
    with open(path) as fh:
        nv, nt = map(int, fh.readline().split())
        verts = np.empty((nv, 2))
        marks = np.empty(nv, dtype=np.int64)
        for i in range(nv):
            x, y, m = fh.readline().split()
            verts[i] = (float(x), float(y))
            marks[i] = int(m)
        tris = np.empty((nt, 3), dtype=np.int64)
        for i in range(nt):
            tris[i] = [int(v) for v in fh.readline().split()]
    return Mesh(verts, tris, marks, pore_count, cell_side)
