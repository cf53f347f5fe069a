"""Neo-Hookean finite elements on triangulated components.

Linear (P1) triangles, plane formulation directly in 2D.  The stored energy
density is

    W(F) = mu/2 * (det(F)^(-2/d) * tr(F F^T) - d) + kappa/2 * (det F - 1)^2

with d = 2 and F = I + grad(u).  Assembly returns the exact energy, residual
and consistent tangent; the solver minimizes energy under Dirichlet data on
the outer square using a load-stepped relaxed Newton iteration with
step-halving on element inversion or energy increase.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Mesh

log = logging.getLogger(__name__)

_EYE4 = np.einsum("ik,ql->iqkl", np.eye(2), np.eye(2))


class ElementInversionError(RuntimeError):
    """det F <= 0 on some triangle; carries the first offending index."""

    def __init__(self, triangle: int):
        super().__init__(f"element inversion in triangle {triangle}")
        self.triangle = triangle


class SingularSystemError(RuntimeError):
    pass


@dataclass(frozen=True)
class Material:
    """Neo-Hookean material; mu = shear modulus, kappa = bulk modulus."""

    mu: float = 1.0
    kappa: float = 10.0
    dim: int = 2

    def __post_init__(self):
        if self.mu <= 0 or self.kappa <= 0:
            raise ValueError("moduli must be positive")
        if self.dim != 2:
            raise ValueError("only the plane (d = 2) formulation is supported")


@dataclass(frozen=True)
class SolveSchedule:
    """Newton solve controls: load steps, relaxation and stopping."""

    load_steps: int = 10
    relaxation: float = 0.1
    max_newton_iters: int = 400
    residual_tol: float = 1e-8
    max_halvings: int = 20

    def __post_init__(self):
        if self.load_steps < 1:
            raise ValueError("load_steps must be >= 1")
        if not 0.0 < self.relaxation <= 1.0:
            raise ValueError("relaxation must be in (0, 1]")


def default_schedule(material: Material, cell_side: float = 1.0, **kw) -> SolveSchedule:
    """Schedule with the scale-aware residual tolerance 1e-8 * mu * L0."""
    kw.setdefault("residual_tol", 1e-8 * material.mu * cell_side)
    return SolveSchedule(**kw)


@dataclass(frozen=True)
class DirichletBC:
    """Constrained dof indices (sorted, unique) and target values."""

    dofs: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if len(self.dofs) != len(self.values):
            raise ValueError("dofs and values length mismatch")
        if np.any(np.diff(self.dofs) <= 0):
            raise ValueError("dofs must be sorted and unique")


def boundary_conditions_from_field(mesh: Mesh, field_values: np.ndarray) -> DirichletBC:
    """Constrain every outer-square vertex to the given (nv, 2) field."""
    verts = mesh.boundary_vertices()
    dofs = np.sort(np.concatenate([2 * verts, 2 * verts + 1]))
    return DirichletBC(dofs, np.asarray(field_values, float).ravel()[dofs])


def axial_boundary_conditions(
    mesh: Mesh,
    strain: float,
    mode: str = "compression",
    axis: int = 1,
    transverse: str = "fixed",
) -> DirichletBC:
    """Symmetric +/- strain*side/2 on the loading-axis displacement of the two
    faces normal to ``axis``; lateral faces stay free.

    With ``transverse='fixed'`` (default) the loaded faces are fully
    prescribed (clamped grips), which keeps the solution unique; 'free' leaves
    the transverse component unconstrained, at the cost of a zero-energy
    lateral translation mode.
    """
    from .geometry import BOTTOM, LEFT, RIGHT, TOP

    lo_bit, hi_bit = (BOTTOM, TOP) if axis == 1 else (LEFT, RIGHT)
    sign = -1.0 if mode == "compression" else 1.0
    half = 0.5 * strain * mesh.extent(axis)
    dofs, values = [], []
    for v in mesh.boundary_vertices():
        if mesh.markers[v] & hi_bit:
            dofs.append(2 * v + axis)
            values.append(sign * half)
        elif mesh.markers[v] & lo_bit:
            dofs.append(2 * v + axis)
            values.append(-sign * half)
        else:
            continue
        if transverse == "fixed":
            dofs.append(2 * v + (1 - axis))
            values.append(0.0)
    order = np.argsort(dofs)
    return DirichletBC(np.asarray(dofs)[order], np.asarray(values, float)[order])


def energy_density(F: np.ndarray, material: Material) -> float:
    """Stored energy per unit reference area for one deformation gradient."""
    F = np.asarray(F, float)
    J = F[0, 0] * F[1, 1] - F[0, 1] * F[1, 0]
    if J <= 0:
        raise ElementInversionError(0)
    I1 = float((F**2).sum())
    return 0.5 * material.mu * (I1 / J - 2.0) + 0.5 * material.kappa * (J - 1.0) ** 2


class _Reference:
    """Per-mesh quantities that do not depend on the displacement."""

    def __init__(self, mesh: Mesh):
        p = mesh.vertices[mesh.triangles]
        dm = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)
        det = dm[:, 0, 0] * dm[:, 1, 1] - dm[:, 0, 1] * dm[:, 1, 0]
        self.area = 0.5 * det
        inv = np.empty_like(dm)
        inv[:, 0, 0] = dm[:, 1, 1] / det
        inv[:, 0, 1] = -dm[:, 0, 1] / det
        inv[:, 1, 0] = -dm[:, 1, 0] / det
        inv[:, 1, 1] = dm[:, 0, 0] / det
        # gradN[t, a, :] = gradient of shape function a on triangle t
        self.gradN = np.empty((len(det), 3, 2))
        self.gradN[:, 1] = inv[:, 0, :]
        self.gradN[:, 2] = inv[:, 1, :]
        self.gradN[:, 0] = -(inv[:, 0, :] + inv[:, 1, :])
        t = mesh.triangles
        self.edofs = np.stack(
            [2 * t[:, 0], 2 * t[:, 0] + 1, 2 * t[:, 1], 2 * t[:, 1] + 1, 2 * t[:, 2], 2 * t[:, 2] + 1],
            axis=1,
        )
        self.rows = np.repeat(self.edofs, 6, axis=1).ravel()
        self.cols = np.tile(self.edofs, (1, 6)).ravel()
        self.ndofs = 2 * mesh.n_vertices


def _reference(mesh: Mesh) -> _Reference:
    ref = getattr(mesh, "_fem_reference", None)
    if ref is None:
        ref = _Reference(mesh)
        mesh._fem_reference = ref
    return ref


def _deformation_gradients(mesh: Mesh, u: np.ndarray, ref: _Reference) -> np.ndarray:
    ue = u.reshape(-1, 2)[mesh.triangles]  # (T, 3, 2)
    return np.eye(2) + np.einsum("tap,taq->tpq", ue, ref.gradN)


def _kinematics(F: np.ndarray):
    J = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    if np.any(J <= 0):
        raise ElementInversionError(int(np.argmax(J <= 0)))
    Finv = np.empty_like(F)
    Finv[:, 0, 0] = F[:, 1, 1] / J
    Finv[:, 0, 1] = -F[:, 0, 1] / J
    Finv[:, 1, 0] = -F[:, 1, 0] / J
    Finv[:, 1, 1] = F[:, 0, 0] / J
    I1 = (F**2).sum(axis=(1, 2))
    return J, Finv, I1


def total_energy(mesh: Mesh, u: np.ndarray, material: Material) -> float:
    """Energy only (used for step-acceptance tests); raises on inversion."""
    ref = _reference(mesh)
    F = _deformation_gradients(mesh, u, ref)
    J, _, I1 = _kinematics(F)
    W = 0.5 * material.mu * (I1 / J - 2.0) + 0.5 * material.kappa * (J - 1.0) ** 2
    return float(ref.area @ W)


def assemble(mesh: Mesh, u: np.ndarray, material: Material):
    """Energy, exact residual and consistent tangent at displacement ``u``.

    Returns (energy, residual (2 nv,), tangent CSC).  The residual is the full
    gradient of the energy with respect to every dof; callers restrict to free
    dofs themselves.
    """
    mu, kappa = material.mu, material.kappa
    ref = _reference(mesh)
    F = _deformation_gradients(mesh, u, ref)
    J, Finv, I1 = _kinematics(F)
    FinvT = np.transpose(Finv, (0, 2, 1))

    W = 0.5 * mu * (I1 / J - 2.0) + 0.5 * kappa * (J - 1.0) ** 2
    energy = float(ref.area @ W)

    # first Piola-Kirchhoff stress
    S = (
        (mu / J)[:, None, None] * F
        - (0.5 * mu * I1 / J)[:, None, None] * FinvT
        + (kappa * (J - 1.0) * J)[:, None, None] * FinvT
    )
    re = np.einsum("t,taq,tiq->tai", ref.area, ref.gradN, S)
    residual = np.zeros(ref.ndofs)
    np.add.at(residual, ref.edofs, re.reshape(-1, 6))

    # material tangent A[t, i, q, k, l] = dS_iq / dF_kl
    FxFinvT = np.einsum("tiq,tkl->tiqkl", F, FinvT)
    FTxF = np.einsum("tiq,tkl->tiqkl", FinvT, F)
    FTxFT = np.einsum("tiq,tkl->tiqkl", FinvT, FinvT)
    FinvFinv = np.einsum("tqk,tli->tiqkl", Finv, Finv)
    muJ = (mu / J)[:, None, None, None, None]
    A = (
        muJ * _EYE4
        - muJ * (FxFinvT + FTxF)
        + (0.5 * mu * I1 / J)[:, None, None, None, None] * (FTxFT + FinvFinv)
        + (kappa * (2.0 * J - 1.0) * J)[:, None, None, None, None] * FTxFT
        - (kappa * (J - 1.0) * J)[:, None, None, None, None] * FinvFinv
    )
    ke = np.einsum("t,taq,tiqjl,tbl->taibj", ref.area, ref.gradN, A, ref.gradN)
    tangent = sp.coo_matrix(
        (ke.reshape(-1), (ref.rows, ref.cols)), shape=(ref.ndofs, ref.ndofs)
    ).tocsc()
    return energy, residual, tangent


def _factorize(matrix: sp.csc_matrix, reg_rounds: int = 3):
    """Sparse LU with diagonal regularization retries on failure."""
    try:
        return spla.splu(matrix)
    except RuntimeError:
        pass
    reg = 1e-8 * float(np.abs(matrix.diagonal()).mean() or 1.0)
    eye = sp.identity(matrix.shape[0], format="csc")
    for _ in range(reg_rounds):
        try:
            return spla.splu(matrix + reg * eye)
        except RuntimeError:
            reg *= 10.0
    raise SingularSystemError("tangent factorization failed after regularization")


@dataclass
class FemSolution:
    """Converged (or best-effort) minimizer of the elastic energy."""

    mesh: Mesh
    material: Material
    bc: DirichletBC
    displacement: np.ndarray  # (nv, 2)
    energy: float
    converged: bool
    newton_iterations: int
    load_steps_used: int
    residual_norm: float
    diagnostics: list = field(default_factory=list)


def solve_dirichlet(
    mesh: Mesh,
    bc: DirichletBC,
    material: Material,
    schedule: SolveSchedule,
    initial_guess: np.ndarray | None = None,
) -> FemSolution:
    """Minimize the elastic energy subject to ``bc``.

    Boundary data is annealed linearly from the initial guess's constrained
    values (rest if no guess) to the target over ``schedule.load_steps``; each
    step runs a relaxed Newton iteration, halving the step on element
    inversion or energy increase.  Non-convergence returns the last iterate
    with ``converged=False``.
    """
    ndofs = 2 * mesh.n_vertices
    u = np.zeros(ndofs) if initial_guess is None else np.asarray(initial_guess, float).ravel().copy()
    free = np.setdiff1d(np.arange(ndofs), bc.dofs, assume_unique=False)
    start_vals = u[bc.dofs].copy()
    total_iters = 0
    diagnostics = []
    converged = True
    t0 = time.perf_counter()

    for step in range(1, schedule.load_steps + 1):
        frac = step / schedule.load_steps
        u[bc.dofs] = (1.0 - frac) * start_vals + frac * bc.values
        step_info = {"step": step, "iterations": 0, "halvings": 0}
        try:
            energy, residual, tangent = assemble(mesh, u, material)
        except ElementInversionError as err:
            step_info["failure"] = f"inverted at load step start ({err})"
            diagnostics.append(step_info)
            converged = False
            break

        step_ok = False
        for _ in range(schedule.max_newton_iters):
            rnorm = float(np.abs(residual[free]).max(initial=0.0))
            if rnorm <= schedule.residual_tol:
                step_ok = True
                break
            lu = _factorize(tangent[free][:, free])
            direction = lu.solve(residual[free])
            lam = schedule.relaxation
            accepted = False
            for _ in range(schedule.max_halvings + 1):
                trial = u.copy()
                trial[free] -= lam * direction
                try:
                    trial_energy = total_energy(mesh, trial, material)
                except ElementInversionError:
                    lam *= 0.5
                    step_info["halvings"] += 1
                    continue
                if trial_energy <= energy + 1e-12 * (1.0 + abs(energy)):
                    accepted = True
                    break
                lam *= 0.5
                step_info["halvings"] += 1
            if not accepted:
                step_info["failure"] = "step halving exhausted"
                break
            u = trial
            total_iters += 1
            step_info["iterations"] += 1
            energy, residual, tangent = assemble(mesh, u, material)
        else:
            rnorm = float(np.abs(residual[free]).max(initial=0.0))
            step_ok = rnorm <= schedule.residual_tol
            if not step_ok:
                step_info["failure"] = "newton iteration limit"

        step_info["residual"] = float(np.abs(residual[free]).max(initial=0.0))
        diagnostics.append(step_info)
        if not step_ok:
            converged = False
            break

    try:
        energy, residual, _ = assemble(mesh, u, material)
        rnorm = float(np.abs(residual[free]).max(initial=0.0))
    except ElementInversionError:
        # only reachable when a load step failed right at its boundary jump
        energy, rnorm = float("inf"), float("inf")
        converged = False
    log.info(
        "solve_dirichlet converged=%s steps=%d iters=%d residual=%.3e wall=%.3fs",
        converged, len(diagnostics), total_iters, rnorm, time.perf_counter() - t0,
    )
    return FemSolution(
        mesh=mesh,
        material=material,
        bc=bc,
        displacement=u.reshape(-1, 2),
        energy=energy,
        converged=converged,
        newton_iterations=total_iters,
        load_steps_used=len(diagnostics),
        residual_norm=rnorm,
        diagnostics=diagnostics,
    )


def collapsed_gradient(solution: FemSolution) -> np.ndarray:
    """Gradient of the collapsed energy with respect to the constrained
    boundary dofs (the reaction forces at the converged interior).

    With the interior at its energy minimum the partial derivative equals the
    total derivative, so no extra linear solve is needed.
    """
    if not solution.converged:
        raise ValueError("collapsed_gradient requires a converged solution")
    _, residual, _ = assemble(
        solution.mesh, solution.displacement.ravel(), solution.material
    )
    return residual[solution.bc.dofs]


def reduced_hessian(solution: FemSolution) -> np.ndarray:
    """Hessian of the collapsed energy over the constrained boundary dofs:
    the Schur complement K_bb - K_bi K_ii^{-1} K_ib of the tangent.

    One interior solve per boundary dof column.
    """
    if not solution.converged:
        raise ValueError("reduced_hessian requires a converged solution")
    mesh, bc = solution.mesh, solution.bc
    ndofs = 2 * mesh.n_vertices
    _, _, tangent = assemble(mesh, solution.displacement.ravel(), solution.material)
    b = bc.dofs
    i = np.setdiff1d(np.arange(ndofs), b)
    k_bb = tangent[b][:, b].toarray()
    k_ib = tangent[i][:, b].toarray()
    lu = _factorize(tangent[i][:, i])
    x = lu.solve(k_ib)
    return k_bb - k_ib.T @ x


def save_solution(solution: FemSolution, path) -> None:
    """Mesh text format followed by per-vertex "ux uy" lines."""
    mesh = solution.mesh
    with open(path, "w") as fh:
        fh.write(f"{mesh.n_vertices} {len(mesh.triangles)}\n")
        for (x, y), m in zip(mesh.vertices, mesh.markers):
            fh.write(f"{float(x)!r} {float(y)!r} {int(m)}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"{a} {b} {c}\n")
        for ux, uy in solution.displacement:
            fh.write(f"{float(ux)!r} {float(uy)!r}\n")
