"""Collapsed energy of a single component in the spline reduced basis.

A component is a square of pores_per_side x pores_per_side cells sharing one
pore shape.  Given a boundary vector u the collapsed energy is the minimum
elastic energy of the interior with the spline interpolant of u imposed on
the outer square; its gradient and Hessian with respect to u follow from the
boundary reactions and the Schur-complement tangent pushed through the
(fixed, linear) spline map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import basis, fem, geometry


@dataclass(frozen=True)
class MeshFidelity:
    """Mesh generation knobs: pore polygon points and interior resolution."""

    pore_resolution: int = 24
    min_mesh_resolution: int = 2

    def label(self) -> str:
        return f"fea-p{self.pore_resolution}-r{self.min_mesh_resolution}"


DESK_FIDELITY = MeshFidelity(24, 2)


class ComponentProblem:
    """Caches the mesh, spline map and rest state of one (shape, material,
    fidelity) component and evaluates collapsed-energy labels."""

    def __init__(
        self,
        shape: geometry.PoreShape,
        material: fem.Material = fem.Material(),
        N: int = 10,
        pores_per_side: int = 2,
        fidelity: MeshFidelity = DESK_FIDELITY,
    ):
        self.shape = shape
        self.material = material
        self.pores_per_side = pores_per_side
        self.fidelity = fidelity
        self.mesh = geometry.build_component_mesh(
            shape, pores_per_side, fidelity.pore_resolution, fidelity.min_mesh_resolution
        )
        self.spline = basis.build_spline_map(self.mesh, N)
        self.layout = self.spline.layout
        self.residual_tol = 1e-8 * material.mu * shape.cell_side
        self.default_schedule = fem.SolveSchedule(
            load_steps=10, relaxation=0.1, residual_tol=self.residual_tol
        )
        self.warm_schedule = fem.SolveSchedule(
            load_steps=1, relaxation=1.0, residual_tol=self.residual_tol,
            max_newton_iters=60,
        )
        self.fallback_schedule = fem.SolveSchedule(
            load_steps=5, relaxation=0.1, residual_tol=self.residual_tol
        )
        # cheap-to-conservative ladder for cold starts
        self.cold_schedules = (
            self.warm_schedule,
            fem.SolveSchedule(load_steps=5, relaxation=0.3, residual_tol=self.residual_tol),
            self.default_schedule,
        )

    @property
    def xi(self) -> np.ndarray:
        return np.array([self.shape.alpha, self.shape.beta])

    def solve(
        self,
        u: np.ndarray,
        initial_guess: np.ndarray | None = None,
        schedule: fem.SolveSchedule | None = None,
    ) -> fem.FemSolution:
        """Minimize interior energy for boundary vector ``u``.

        With an initial guess the solve is warm-started without load stepping
        and falls back to a short load-stepped schedule on failure.
        """
        bc = self.spline.boundary_conditions(u)
        if schedule is not None:
            return fem.solve_dirichlet(self.mesh, bc, self.material, schedule, initial_guess)
        if initial_guess is None:
            for sched in self.cold_schedules:
                sol = fem.solve_dirichlet(self.mesh, bc, self.material, sched)
                if sol.converged:
                    return sol
            return sol
        sol = fem.solve_dirichlet(
            self.mesh, bc, self.material, self.warm_schedule, initial_guess
        )
        if not sol.converged:
            sol = fem.solve_dirichlet(
                self.mesh, bc, self.material, self.fallback_schedule, initial_guess
            )
        if not sol.converged:
            sol = fem.solve_dirichlet(self.mesh, bc, self.material, self.default_schedule)
        return sol

    def energy_gradient(self, solution: fem.FemSolution) -> np.ndarray:
        """Collapsed-energy gradient with respect to the 2n boundary dofs."""
        return self.spline.matrix.T @ fem.collapsed_gradient(solution)

    def hessian(self, solution: fem.FemSolution) -> np.ndarray:
        """Collapsed-energy Hessian with respect to the 2n boundary dofs."""
        h_mesh = fem.reduced_hessian(solution)
        return self.spline.matrix.T @ h_mesh @ self.spline.matrix

    def label(self, u: np.ndarray, initial_guess=None):
        """(energy, gradient, hessian, solution) for boundary vector ``u``."""
        sol = self.solve(u, initial_guess=initial_guess)
        if not sol.converged:
            raise fem.SingularSystemError("labeling solve failed to converge")
        return sol.energy, self.energy_gradient(sol), self.hessian(sol), sol


_problem_cache: dict = {}


def cached_problem(
    shape: geometry.PoreShape,
    material: fem.Material,
    N: int = 10,
    pores_per_side: int = 2,
    fidelity: MeshFidelity = DESK_FIDELITY,
) -> ComponentProblem:
    """Memoized ComponentProblem; meshing and spline setup dominate the cost
    of small solves."""
    key = (
        shape.alpha, shape.beta, shape.cell_side, material.mu, material.kappa,
        N, pores_per_side, fidelity.pore_resolution, fidelity.min_mesh_resolution,
    )
    prob = _problem_cache.get(key)
    if prob is None:
        prob = ComponentProblem(shape, material, N, pores_per_side, fidelity)
        _problem_cache[key] = prob
    return prob
