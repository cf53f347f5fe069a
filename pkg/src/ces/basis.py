"""Spline reduced basis on component boundaries.

A component boundary is parameterized by N evenly spaced control points per
face, corners shared, giving n = 4*(N-1) points around the square.  The
canonical ordering walks the perimeter counterclockwise from the bottom-left
corner (faces bottom, right, top, left); a boundary vector stores the
horizontal and vertical displacement of each control point interleaved:
(ux0, uy0, ux1, uy1, ...), length 2n.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .geometry import BOTTOM, LEFT, RIGHT, TOP, Mesh

_FACES = ("bottom", "right", "top", "left")
_FACE_BITS = {"bottom": BOTTOM, "right": RIGHT, "top": TOP, "left": LEFT}


class BoundaryLayout:
    """Control-point geometry of one square component of side ``side``."""

    def __init__(self, N: int = 10, side: float = 2.0):
        if N < 4:
            raise ValueError("not-a-knot cubic splines need N >= 4 points per face")
        self.N = N
        self.side = side
        self.n_points = 4 * (N - 1)
        self.n_dofs = 2 * self.n_points
        t = np.linspace(0.0, side, N)
        pts = []
        pts += [(x, 0.0) for x in t]                      # bottom, BL -> BR
        pts += [(side, y) for y in t[1:]]                 # right, -> TR
        pts += [(side - x, side) for x in t[1:]]          # top, -> TL
        pts += [(0.0, side - y) for y in t[1:-1]]         # left, -> below BL
        self.points = np.array(pts)
        idx = np.arange(self.n_points)
        self.faces = {
            "bottom": idx[0:N],
            "right": idx[N - 1 : 2 * N - 1],
            "top": idx[2 * N - 2 : 3 * N - 2],
            "left": np.concatenate([idx[3 * N - 3 :], [0]]),
        }
        self._flip_perms: dict[str, np.ndarray] = {}

    def face_params(self, face: str) -> tuple[np.ndarray, np.ndarray]:
        """(control indices ordered by increasing coordinate, coordinates)."""
        ids = self.faces[face]
        axis = 0 if face in ("bottom", "top") else 1
        coords = self.points[ids, axis]
        order = np.argsort(coords)
        return ids[order], coords[order]

    def to_points(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u, float).reshape(self.n_points, 2)

    def to_vector(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, float).ravel()


def control_points(N: int = 10, side: float = 2.0) -> np.ndarray:
    return BoundaryLayout(N, side).points


@dataclass(frozen=True)
class SplineMap:
    """Linear map from a boundary vector to displacements of the mesh's
    outer-boundary dofs.

    ``dofs`` are the constrained mesh dof indices (sorted); ``matrix`` is
    (len(dofs), 2n).
    """

    matrix: np.ndarray
    dofs: np.ndarray
    layout: BoundaryLayout

    def apply(self, u: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(u, float)

    def boundary_conditions(self, u: np.ndarray):
        from .fem import DirichletBC

        return DirichletBC(self.dofs, self.matrix @ np.asarray(u, float))


def build_spline_map(mesh: Mesh, N: int = 10) -> SplineMap:
    """Cubic not-a-knot splines through the control points of each face,
    evaluated at every outer-boundary vertex of the mesh.

    Corner vertices are owned by one face; either face interpolates the shared
    control value there, so the assignment does not affect the map.
    """
    layout = BoundaryLayout(N, mesh.side)
    verts = mesh.boundary_vertices()
    dofs = np.sort(np.concatenate([2 * verts, 2 * verts + 1]))
    dof_row = {d: i for i, d in enumerate(dofs)}
    matrix = np.zeros((len(dofs), layout.n_dofs))

    owner = np.zeros(mesh.n_vertices, dtype=object)
    for face in _FACES:
        bit = _FACE_BITS[face]
        for v in verts:
            if mesh.markers[v] & bit and not owner[v]:
                owner[v] = face

    for face in _FACES:
        face_verts = np.array([v for v in verts if owner[v] == face], dtype=int)
        if face_verts.size == 0:
            continue
        ids, knots = layout.face_params(face)
        axis = 0 if face in ("bottom", "top") else 1
        coords = mesh.vertices[face_verts, axis]
        # basis response: columns of the interpolation operator at the vertices
        basis = CubicSpline(knots, np.eye(N), bc_type="not-a-knot")(coords)
        for comp in (0, 1):
            cols = 2 * ids + comp
            for i, v in enumerate(face_verts):
                matrix[dof_row[2 * v + comp], cols] = basis[i]
    return SplineMap(matrix=matrix, dofs=dofs, layout=layout)


def _rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def procrustes_align(u: np.ndarray, layout: BoundaryLayout):
    """Remove the rigid motion (rotation + translation, no scaling) that best
    maps the displaced control points onto the rest configuration.

    Returns (aligned displacement vector, (theta, translation), degenerate).
    The optimal rotation comes from the closed-form 2D orthogonal Procrustes
    problem and is always proper (det +1).
    """
    rest = layout.points
    pc = rest - rest.mean(axis=0)
    disp = layout.to_points(u)
    q = pc + disp - disp.mean(axis=0)
    a = float((pc * q).sum())
    b = float((pc[:, 1] * q[:, 0] - pc[:, 0] * q[:, 1]).sum())
    degenerate = a == 0.0 and b == 0.0
    theta = 0.0 if degenerate else float(np.arctan2(b, a))
    rot = _rotation(theta)
    aligned_pts = q @ rot.T - pc
    # translation that, with the rotation, maps displaced points onto rest
    centroid = rest.mean(axis=0) + disp.mean(axis=0)
    translation = rest.mean(axis=0) - rot @ centroid
    return layout.to_vector(aligned_pts), (theta, translation), degenerate


def macro_strain(u: np.ndarray, layout: BoundaryLayout) -> np.ndarray:
    """Macroscopic strain tensor from averaged face displacement differences.

    Entry (0, j): mean right-minus-left difference of displacement component
    j; entry (1, j): mean top-minus-bottom.  The mean over the N control
    points of a face is divided by the component side so entries are strains.
    """
    pts = layout.to_points(u)
    scale = 1.0 / (layout.N * layout.side)
    out = np.empty((2, 2))
    for row, (hi, lo) in enumerate((("right", "left"), ("top", "bottom"))):
        diff = pts[layout.faces[hi]].sum(axis=0) - pts[layout.faces[lo]].sum(axis=0)
        out[row] = scale * diff
    return out


def macro_strain_matrix(layout: BoundaryLayout) -> np.ndarray:
    """(4, 2n) matrix M with macro_strain(u).ravel() == M @ u."""
    m = np.zeros((4, layout.n_dofs))
    scale = 1.0 / (layout.N * layout.side)
    for row, (hi, lo) in enumerate((("right", "left"), ("top", "bottom"))):
        for j in (0, 1):
            m[2 * row + j, 2 * layout.faces[hi] + j] += scale
            m[2 * row + j, 2 * layout.faces[lo] + j] -= scale
    return m


def _flip_permutation(layout: BoundaryLayout, axis: str) -> np.ndarray:
    perm = layout._flip_perms.get(axis)
    if perm is not None:
        return perm
    pts = layout.points
    mirrored = pts.copy()
    if axis == "vertical":
        mirrored[:, 0] = layout.side - mirrored[:, 0]
    elif axis == "horizontal":
        mirrored[:, 1] = layout.side - mirrored[:, 1]
    else:
        raise ValueError("axis must be 'horizontal' or 'vertical'")
    perm = np.empty(layout.n_points, dtype=int)
    tol = 1e-9 * layout.side
    for i, p in enumerate(mirrored):
        hits = np.flatnonzero(np.all(np.abs(pts - p) < tol, axis=1))
        perm[i] = hits[0]
    layout._flip_perms[axis] = perm
    return perm


def flip(u: np.ndarray, layout: BoundaryLayout, axis: str) -> np.ndarray:
    """Mirror a boundary vector across the component's center line.

    ``axis='vertical'`` mirrors x -> side - x (swaps left/right, negates ux);
    ``axis='horizontal'`` mirrors y -> side - y (swaps top/bottom, negates uy).
    """
    perm = _flip_permutation(layout, axis)
    pts = layout.to_points(u)[perm].copy()
    pts[:, 0 if axis == "vertical" else 1] *= -1.0
    return layout.to_vector(pts)


def save_boundary_vector(u: np.ndarray, path) -> None:
    with open(path, "w") as fh:
        fh.write(" ".join(repr(float(x)) for x in np.asarray(u).ravel()) + "\n")


def load_boundary_vector(path) -> np.ndarray:
    with open(path) as fh:
        return np.array([float(tok) for tok in fh.readline().split()])
