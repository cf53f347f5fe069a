"""Tile component surrogates over a grid and minimize the composed energy.

Components (2x2-pore squares) share control points along their interfaces;
the composed energy is the sum of per-component surrogate energies over the
gathered boundary vectors.  Macroscopic loading enters through Dirichlet
values on the external top/bottom skeleton dofs; minimization uses an L-BFGS
two-loop recursion with a fixed step size.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import fem, geometry
from .basis import BoundaryLayout
from .component import MeshFidelity
from .surrogate import SurrogateParams, batched_energy_grad

log = logging.getLogger(__name__)


@dataclass
class Assembly:
    """Grid of components with shared skeleton control points."""

    grid: int
    N: int
    cell_side: float
    shapes: list
    points: np.ndarray              # (n_points, 2) unique control points
    gather_maps: np.ndarray         # (g*g, 2n_local) global dof index per local dof
    constrained_dofs: np.ndarray
    constrained_values: np.ndarray
    strain: float
    mode: str
    axis: int
    transverse: str = "fixed"

    @property
    def n_dofs(self) -> int:
        return 2 * len(self.points)

    @property
    def component_side(self) -> float:
        return 2.0 * self.cell_side

    @property
    def total_side(self) -> float:
        return self.grid * self.component_side

    @property
    def xi_array(self) -> np.ndarray:
        return np.array([[s.alpha, s.beta] for s in self.shapes])

    def full_vector(self, free_values: np.ndarray | None = None) -> np.ndarray:
        u = np.zeros(self.n_dofs)
        u[self.constrained_dofs] = self.constrained_values
        return u


def _normalize_shapes(shapes, grid: int):
    if isinstance(shapes, geometry.PoreShape):
        return [shapes] * (grid * grid)
    flat = []
    for item in shapes:
        if isinstance(item, geometry.PoreShape):
            flat.append(item)
        else:
            flat.extend(item)
    if len(flat) != grid * grid:
        raise ValueError(f"expected {grid * grid} shapes, got {len(flat)}")
    return flat


def build_assembly(
    shapes,
    grid: int,
    N: int = 10,
    strain: float = 0.0,
    mode: str = "compression",
    axis: int = 1,
    cell_side: float = 1.0,
    transverse: str = "fixed",
) -> Assembly:
    """Canonical global indexing of the skeleton control points plus Dirichlet
    data for symmetric axial loading.

    Shapes are listed per component, row-major from the bottom-left.  The
    loading-axis displacement on the external top and bottom skeleton edges is
    set to -/+ strain * total_side / 2 (swapped for tension); lateral edges
    stay free.  ``transverse='fixed'`` clamps the transverse component of the
    loaded edges to zero (see fem.axial_boundary_conditions).
    """
    if grid < 1:
        raise ValueError("grid must be >= 1")
    shapes = _normalize_shapes(shapes, grid)
    side = 2.0 * cell_side
    layout = BoundaryLayout(N, side)
    tol = 1e-9 * side

    local = layout.points
    all_pts = np.vstack(
        [local + np.array([gx * side, gy * side]) for gy in range(grid) for gx in range(grid)]
    )
    # canonical order: sort rounded coordinates by (y, x)
    keys = np.round(all_pts / tol).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    order = np.lexsort((uniq[:, 0], uniq[:, 1]))
    rank = np.empty(len(uniq), dtype=int)
    rank[order] = np.arange(len(uniq))
    point_ids = rank[inverse]
    points = np.zeros((len(uniq), 2))
    points[point_ids] = all_pts  # representative coordinates

    n_local = layout.n_points
    gather = np.empty((grid * grid, 2 * n_local), dtype=int)
    for ci in range(grid * grid):
        ids = point_ids[ci * n_local : (ci + 1) * n_local]
        gather[ci, 0::2] = 2 * ids
        gather[ci, 1::2] = 2 * ids + 1

    total = grid * side
    sign = -1.0 if mode == "compression" else 1.0
    half = 0.5 * strain * total
    coord = points[:, axis]
    top = np.flatnonzero(np.abs(coord - total) < tol)
    bottom = np.flatnonzero(np.abs(coord) < tol)
    cdofs = [2 * top + axis, 2 * bottom + axis]
    cvals = [np.full(top.size, sign * half), np.full(bottom.size, -sign * half)]
    if transverse == "fixed":
        loaded = np.concatenate([top, bottom])
        cdofs.append(2 * loaded + (1 - axis))
        cvals.append(np.zeros(loaded.size))
    cdofs = np.concatenate(cdofs)
    cvals = np.concatenate(cvals)
    order = np.argsort(cdofs)
    return Assembly(
        grid=grid, N=N, cell_side=cell_side, shapes=shapes,
        points=points, gather_maps=gather,
        constrained_dofs=cdofs[order], constrained_values=cvals[order],
        strain=strain, mode=mode, axis=axis, transverse=transverse,
    )


def composed_energy(assembly: Assembly, params: SurrogateParams, global_u: np.ndarray):
    """Sum of component surrogate energies and the scattered gradient.

    Gradient entries on constrained dofs are zeroed.
    """
    comps = global_u[assembly.gather_maps]
    energies, grads = batched_energy_grad(params, comps, assembly.xi_array)
    grad = np.zeros(assembly.n_dofs)
    np.add.at(grad, assembly.gather_maps.ravel(), grads.ravel())
    grad[assembly.constrained_dofs] = 0.0
    return float(energies.sum()), grad


@dataclass(frozen=True)
class LbfgsConfig:
    step: float = 0.25
    history: int = 10
    grad_tol: float = 1e-5
    rel_tol: float = 1e-9
    max_iters: int = 500
    max_halvings: int = 30


@dataclass
class SolveResult:
    solution: np.ndarray
    energy: float
    iterations: int
    converged: bool
    trajectory: list | None = None
    step_halvings: int = 0
    wall_time: float = 0.0


def solve_composed(
    assembly: Assembly,
    params: SurrogateParams,
    config: LbfgsConfig = LbfgsConfig(),
    keep_trajectory: bool = False,
) -> SolveResult:
    """Minimize the composed energy from zero free dofs with L-BFGS.

    Two-loop recursion with fixed step size; a non-finite trial energy halves
    the step for that iterate.  Converged when the gradient infinity norm or
    the relative energy change drops below tolerance.
    """
    t0 = time.perf_counter()
    x = assembly.full_vector()
    trajectory = [x.copy()] if keep_trajectory else None
    energy, grad = composed_energy(assembly, params, x)
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []
    halvings = 0
    converged = False
    iteration = 0

    for iteration in range(1, config.max_iters + 1):
        if np.abs(grad).max(initial=0.0) <= config.grad_tol:
            converged = True
            iteration -= 1
            break
        q = grad.copy()
        alpha = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s @ q)
            alpha.append(a)
            q -= a * y
        if y_hist:
            gamma = (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
            q *= gamma
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alpha)):
            beta = rho * (y @ q)
            q += (a - beta) * s
        direction = -q

        step = config.step
        for _ in range(config.max_halvings + 1):
            x_new = x + step * direction
            e_new, g_new = composed_energy(assembly, params, x_new)
            if np.isfinite(e_new) and np.isfinite(g_new).all():
                break
            step *= 0.5
            halvings += 1
        else:
            log.warning("L-BFGS stalled on non-finite energy at iter %d", iteration)
            break

        s = x_new - x
        y = g_new - grad
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > config.history:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)

        rel_change = abs(e_new - energy) / max(abs(energy), 1e-300)
        x, energy, grad = x_new, e_new, g_new
        if keep_trajectory:
            trajectory.append(x.copy())
        if rel_change <= config.rel_tol:
            converged = True
            break

    return SolveResult(
        solution=x, energy=energy, iterations=iteration, converged=converged,
        trajectory=trajectory, step_halvings=halvings,
        wall_time=time.perf_counter() - t0,
    )


def interpolate_at(mesh: geometry.Mesh, displacement: np.ndarray, points: np.ndarray) -> np.ndarray:
    """P1 interpolation of a vertex field at arbitrary points of the mesh."""
    tri_pts = mesh.vertices[mesh.triangles]
    centroids = tri_pts.mean(axis=1)
    tree = cKDTree(centroids)
    values = np.empty((len(points), displacement.shape[1]))
    n_query = min(32, len(centroids))
    dists, candidates = tree.query(points, k=n_query)
    if n_query == 1:
        candidates = candidates[:, None]
    for i, p in enumerate(points):
        found = False
        for t in candidates[i]:
            a, b, c = tri_pts[t]
            m = np.column_stack([b - a, c - a])
            try:
                lam = np.linalg.solve(m, p - a)
            except np.linalg.LinAlgError:
                continue
            l0 = 1.0 - lam.sum()
            if min(lam[0], lam[1], l0) >= -1e-9:
                vid = mesh.triangles[t]
                values[i] = (
                    l0 * displacement[vid[0]]
                    + lam[0] * displacement[vid[1]]
                    + lam[1] * displacement[vid[2]]
                )
                found = True
                break
        if not found:
            raise ValueError(f"point {p} not found in mesh")
    return values


@dataclass
class ReferenceAttempt:
    load_steps: int
    relaxation: float
    converged: bool
    wall_time: float
    energy: float


@dataclass
class ReferenceResult:
    values: np.ndarray        # control-point dof vector on the assembly
    energy: float
    n_dofs: int
    best: tuple | None
    attempts: list
    solution: fem.FemSolution | None


DEFAULT_SCHEDULE_GRID = (
    [1, 2, 5, 10, 20],
    [0.9, 0.7, 0.4, 0.1, 0.05],
)


def fea_reference(
    assembly: Assembly,
    material: fem.Material = fem.Material(),
    fidelity: MeshFidelity = MeshFidelity(16, 2),
    schedule_grid=DEFAULT_SCHEDULE_GRID,
    residual_tol: float | None = None,
) -> ReferenceResult:
    """Solve the full-domain FEA problem over a (load steps x relaxation)
    schedule grid, keep the fastest converged solve, and restrict the solution
    to the skeleton control points."""
    pores = 2 * assembly.grid
    shape_grid = [
        [assembly.shapes[(jy // 2) * assembly.grid + ix // 2] for ix in range(pores)]
        for jy in range(pores)
    ]
    mesh = geometry.build_component_mesh(
        shape_grid, pores, fidelity.pore_resolution, fidelity.min_mesh_resolution
    )
    bc = fem.axial_boundary_conditions(
        mesh, assembly.strain, assembly.mode, assembly.axis, assembly.transverse
    )
    tol = residual_tol if residual_tol is not None else 1e-8 * material.mu * assembly.cell_side
    attempts = []
    best = None
    best_sol = None
    for steps in schedule_grid[0]:
        for lam in schedule_grid[1]:
            sched = fem.SolveSchedule(load_steps=steps, relaxation=lam, residual_tol=tol)
            t0 = time.perf_counter()
            sol = fem.solve_dirichlet(mesh, bc, material, sched)
            wall = time.perf_counter() - t0
            attempts.append(ReferenceAttempt(steps, lam, sol.converged, wall, sol.energy))
            if sol.converged and (best is None or wall < best[2]):
                best = (steps, lam, wall)
                best_sol = sol
    if best_sol is None:
        log.warning("all schedules failed for fidelity %s", fidelity.label())
        return ReferenceResult(
            values=np.full(assembly.n_dofs, np.nan), energy=float("nan"),
            n_dofs=2 * mesh.n_vertices, best=None, attempts=attempts, solution=None,
        )
    vals = interpolate_at(mesh, best_sol.displacement, assembly.points)
    return ReferenceResult(
        values=vals.ravel(), energy=best_sol.energy, n_dofs=2 * mesh.n_vertices,
        best=(best[0], best[1]), attempts=attempts, solution=best_sol,
    )


def _global_flip_permutation(assembly: Assembly, axis: str):
    pts = assembly.points
    mirrored = pts.copy()
    col = 0 if axis == "vertical" else 1
    mirrored[:, col] = assembly.total_side - mirrored[:, col]
    tree = cKDTree(pts)
    dist, idx = tree.query(mirrored)
    if dist.max() > 1e-6 * assembly.total_side:
        raise ValueError("assembly control points are not mirror symmetric")
    return idx, col


def flip_global(assembly: Assembly, u: np.ndarray, axis: str) -> np.ndarray:
    """Mirror a global dof vector across the assembly's center line."""
    perm, col = _global_flip_permutation(assembly, axis)
    pts = u.reshape(-1, 2)[perm].copy()
    pts[:, col] *= -1.0
    return pts.ravel()


def compare(candidate, candidate_energy, reference, reference_energy, assembly: Assembly):
    """Solution-quality metrics against a reference.

    ``l2_error`` is the squared Euclidean distance at the control points,
    minimized over the 4-element flip group (energy is preserved under
    mirror-symmetric shape grids); ``rel_energy_error`` compares the
    candidate's own energy estimate to the reference energy.
    """
    variants = [np.asarray(candidate, float)]
    for axis in ("vertical", "horizontal"):
        variants.append(flip_global(assembly, variants[0], axis))
    variants.append(flip_global(assembly, variants[1], "horizontal"))
    l2 = min(float(((v - reference) ** 2).sum()) for v in variants)
    rel = abs(candidate_energy - reference_energy) / abs(reference_energy)
    return {"l2_error": l2, "rel_energy_error": rel}
