"""Training-data generation: HMC over boundary displacements with an
FEA-evaluated shaping density, full derivative labeling, and DAgger
aggregation from composed-surrogate solution trajectories.

Each stored sample is the tuple (u, xi, E, grad E, hess E) for one component,
where E is the collapsed (interior-minimized) elastic energy.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import basis, fem, geometry
from .component import DESK_FIDELITY, ComponentProblem, MeshFidelity

log = logging.getLogger(__name__)

SOURCE_CODES = {"hmc": 0, "dagger": 1, "rejected-hmc": 2}
SOURCE_NAMES = {v: k for k, v in SOURCE_CODES.items()}

HMC_TEMPERATURES = (1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 0.1)
STRAIN_TARGET_STD = 0.15
SIGMA_FLOOR = 1e-4


@dataclass
class SampleRecord:
    """One labeled boundary state of a component."""

    u: np.ndarray
    xi: np.ndarray
    energy: float
    grad: np.ndarray
    hessian: np.ndarray
    source: str = "hmc"
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def validate(self):
        n = len(self.u)
        if self.hessian.shape != (n, n) or len(self.grad) != n:
            raise ValueError("record shape mismatch")
        arrays = np.concatenate([self.u, self.xi, [self.energy], self.grad, self.hessian.ravel()])
        if not np.isfinite(arrays).all():
            raise ValueError("non-finite entries in record")
        rel = np.abs(self.hessian - self.hessian.T).max() / max(np.abs(self.hessian).max(), 1e-300)
        if rel > 1e-8:
            raise ValueError(f"hessian asymmetry {rel:.2e}")
        if self.energy < 0:
            raise ValueError("negative energy")

    def persisted_equal(self, other: "SampleRecord") -> bool:
        return (
            np.array_equal(self.u, other.u)
            and np.array_equal(self.xi, other.xi)
            and self.energy == other.energy
            and np.array_equal(self.grad, other.grad)
            and np.array_equal(self.hessian, other.hessian)
            and self.source == other.source
            and self.seed == other.seed
        )


def _record_nbytes(n: int) -> int:
    # u, xi, E, grad, upper-triangular hessian as little-endian f64
    # plus a source byte and a u64 seed
    n_tri = n * (n + 1) // 2
    return 8 * (n + 2 + 1 + n + n_tri) + 1 + 8


def _pack(record: SampleRecord) -> bytes:
    n = len(record.u)
    iu, ju = np.triu_indices(n)
    body = np.concatenate(
        [record.u, record.xi, [record.energy], record.grad, record.hessian[iu, ju]]
    ).astype("<f8")
    tail = np.array([record.seed], dtype="<u8").tobytes()
    return body.tobytes() + bytes([SOURCE_CODES[record.source]]) + tail


def _unpack(blob: bytes, n: int) -> SampleRecord:
    n_tri = n * (n + 1) // 2
    floats = np.frombuffer(blob[: 8 * (2 * n + 3 + n_tri)], dtype="<f8")
    u = floats[:n].copy()
    xi = floats[n : n + 2].copy()
    energy = float(floats[n + 2])
    grad = floats[n + 3 : 2 * n + 3].copy()
    tri = floats[2 * n + 3 :]
    hess = np.zeros((n, n))
    iu, ju = np.triu_indices(n)
    hess[iu, ju] = tri
    hess[ju, iu] = tri
    source = SOURCE_NAMES[blob[-9]]
    seed = int(np.frombuffer(blob[-8:], dtype="<u8")[0])
    return SampleRecord(u, xi, energy, grad, hess, source, seed)


class Dataset:
    """Append-only binary record store with a text manifest.

    Layout: ``<name>.bin`` holds fixed-width records; ``<name>.manifest``
    stores the dof count, record count, per-source counts and a sha256 of the
    binary payload.
    """

    def __init__(self, path, n: int = 72):
        self.path = str(path)
        self.n = n
        self.record_size = _record_nbytes(n)

    @property
    def manifest_path(self) -> str:
        return self.path + ".manifest"

    def append(self, records) -> None:
        if isinstance(records, SampleRecord):
            records = [records]
        for r in records:
            r.validate()
        with open(self.path, "ab") as fh:
            for r in records:
                fh.write(_pack(r))
        self.write_manifest()

    def __len__(self) -> int:
        if not os.path.exists(self.path):
            return 0
        return os.path.getsize(self.path) // self.record_size

    def load(self) -> list[SampleRecord]:
        if not os.path.exists(self.path):
            return []
        size = os.path.getsize(self.path)
        n_rec, rem = divmod(size, self.record_size)
        records = []
        with open(self.path, "rb") as fh:
            for i in range(n_rec):
                blob = fh.read(self.record_size)
                try:
                    rec = _unpack(blob, self.n)
                    rec.validate()
                except Exception as err:
                    raise IOError(f"corrupt record {i} in {self.path}: {err}") from None
                records.append(rec)
        if rem:
            raise IOError(f"truncated record {n_rec} in {self.path}")
        return records

    def content_hash(self) -> str:
        h = hashlib.sha256()
        if os.path.exists(self.path):
            with open(self.path, "rb") as fh:
                for chunk in iter(lambda: fh.read(1 << 20), b""):
                    h.update(chunk)
        return h.hexdigest()

    def counts_by_source(self) -> dict:
        counts = dict.fromkeys(SOURCE_CODES, 0)
        with open(self.path, "rb") as fh:
            for _ in range(len(self)):
                blob = fh.read(self.record_size)
                counts[SOURCE_NAMES[blob[-9]]] += 1
        return counts

    def write_manifest(self) -> None:
        counts = self.counts_by_source()
        with open(self.manifest_path, "w") as fh:
            fh.write(f"n = {self.n}\n")
            fh.write(f"record_size = {self.record_size}\n")
            fh.write(f"records = {len(self)}\n")
            for k in sorted(counts):
                fh.write(f"count_{k} = {counts[k]}\n")
            fh.write(f"sha256 = {self.content_hash()}\n")

    def arrays(self):
        from .surrogate import TrainingArrays

        records = self.load()
        if not records:
            raise ValueError(f"dataset {self.path} is empty")
        return TrainingArrays(
            u=np.array([r.u for r in records]),
            xi=np.array([r.xi for r in records]),
            energy=np.array([r.energy for r in records]),
            grad=np.array([r.grad for r in records]),
            hessian=np.array([r.hessian for r in records]),
        )


@dataclass(frozen=True)
class HmcConfig:
    """Leapfrog and shaping-density knobs for one collector."""

    step_size: float = 0.01
    path_length: float = 0.1
    temperature: float = 1e-3
    momentum_std: float = 0.1
    samples_per_collector: int = 25
    boltzmann_sign: float = -1.0
    max_failures: int = 10

    def __post_init__(self):
        if min(self.step_size, self.path_length + 1.0, self.temperature, self.momentum_std) <= 0:
            raise ValueError("HMC hyperparameters must be positive")


def randomize_hmc_config(rng: np.random.Generator, samples_per_collector: int = 25) -> HmcConfig:
    """Collector hyperparameters drawn from the fixed randomization ranges."""
    return HmcConfig(
        step_size=float(rng.uniform(0.005, 0.02)),
        path_length=float(rng.uniform(0.05, 0.3)),
        temperature=float(HMC_TEMPERATURES[rng.integers(len(HMC_TEMPERATURES))]),
        momentum_std=float(rng.uniform(0.01, 0.3)),
        samples_per_collector=samples_per_collector,
    )


def draw_strain_target(rng: np.random.Generator) -> np.ndarray:
    """Target macroscopic strain tensor, i.i.d. Gaussian entries."""
    return STRAIN_TARGET_STD * rng.standard_normal((2, 2))


def _gaussian_terms(target: np.ndarray):
    prec = (target**2 + SIGMA_FLOOR).ravel()
    norm = 0.5 * float(np.log(prec / (2.0 * math.pi)).sum())
    return prec, norm


def shaping_logdensity(
    problem: ComponentProblem,
    u: np.ndarray,
    target_strain: np.ndarray,
    temperature: float,
    initial_guess=None,
    boltzmann_sign: float = -1.0,
):
    """Log-density -E/T + log N(macro_strain(u); target, Sigma) and its
    gradient with respect to u.

    Sigma is diagonal with precision target_ij^2 + floor per entry.  Returns
    (logp, grad, solution); raises on FEA non-convergence.
    """
    sol = problem.solve(u, initial_guess=initial_guess)
    if not sol.converged:
        raise fem.SingularSystemError("shaping density solve did not converge")
    energy = sol.energy
    grad_e = problem.energy_gradient(sol)
    cmat = basis.macro_strain_matrix(problem.layout)
    prec, norm = _gaussian_terms(target_strain)
    resid = cmat @ u - target_strain.ravel()
    logp = boltzmann_sign * energy / temperature + norm - 0.5 * float(prec @ resid**2)
    grad = boltzmann_sign * grad_e / temperature - cmat.T @ (prec * resid)
    return logp, grad, sol


def leapfrog(logdensity_grad, u0, v0, step_size, n_steps, vel_var):
    """Standard leapfrog integration under the shaping Hamiltonian, in
    velocity form: the momentum is drawn as a velocity v ~ N(0, vel_var I)
    (mass matrix I / vel_var) with kinetic energy |v|^2 / (2 vel_var).

    ``logdensity_grad(u)`` returns (logp, grad, aux).  Returns
    (u, v, logp, aux) at the final point.
    """
    u = u0.copy()
    v = v0.copy()
    logp, grad, aux = logdensity_grad(u)
    for _ in range(n_steps):
        v = v + 0.5 * step_size * vel_var * grad
        u = u + step_size * v
        logp, grad, aux = logdensity_grad(u)
        v = v + 0.5 * step_size * vel_var * grad
    return u, v, logp, aux


def hmc_chain(logdensity_grad, u0, config: HmcConfig, rng, n_samples: int):
    """Generic HMC; yields (u, accepted, logp, aux) per proposal.

    Rejected proposals are yielded too (the chain then continues from the last
    accepted state).
    """
    vel_var = config.momentum_std**2
    n_steps = max(0, round(config.path_length / config.step_size))
    u = np.asarray(u0, float).copy()
    logp, _, _ = logdensity_grad(u)
    produced = 0
    failures = 0
    while produced < n_samples:
        v0 = config.momentum_std * rng.standard_normal(len(u))
        try:
            u_new, v_new, logp_new, aux_new = leapfrog(
                logdensity_grad, u, v0, config.step_size, n_steps, vel_var
            )
        except (fem.SingularSystemError, fem.ElementInversionError) as err:
            failures += 1
            log.warning("leapfrog FEA failure %d: %s", failures, err)
            if failures > config.max_failures:
                return
            continue
        failures = 0
        h_old = -logp + 0.5 * float(v0 @ v0) / vel_var
        h_new = -logp_new + 0.5 * float(v_new @ v_new) / vel_var
        accepted = bool(np.log(rng.uniform()) < h_old - h_new)
        yield u_new.copy(), accepted, logp_new, aux_new
        produced += 1
        if accepted:
            u, logp = u_new, logp_new


def hmc_collect(
    problem: ComponentProblem,
    config: HmcConfig,
    rng: np.random.Generator,
    target_strain: np.ndarray | None = None,
    collector_id: int = 0,
) -> list[SampleRecord]:
    """Run one HMC collector on a component and label every proposal.

    The chain starts at rest; each FEA evaluation warm-starts from the
    previous leapfrog solution without load stepping.  Rejected proposals are
    labeled and stored with source='rejected-hmc' while the chain returns to
    the last accepted state.
    """
    if target_strain is None:
        target_strain = draw_strain_target(rng)
    seed = int(rng.integers(2**63))
    warm = {"sol": None}

    def logdensity_grad(u):
        guess = warm["sol"].displacement.ravel() if warm["sol"] is not None else None
        logp, grad, sol = shaping_logdensity(
            problem, u, target_strain, config.temperature,
            initial_guess=guess, boltzmann_sign=config.boltzmann_sign,
        )
        warm["sol"] = sol
        return logp, grad, sol

    records = []
    for u, accepted, _, sol in hmc_chain(
        logdensity_grad, np.zeros(problem.layout.n_dofs), config,
        rng, config.samples_per_collector,
    ):
        record = SampleRecord(
            u=u,
            xi=problem.xi,
            energy=sol.energy,
            grad=problem.energy_gradient(sol),
            hessian=problem.hessian(sol),
            source="hmc" if accepted else "rejected-hmc",
            seed=seed,
            meta={"collector": collector_id, "iters": sol.newton_iterations},
        )
        records.append(record)
    return records


@dataclass(frozen=True)
class DaggerScenario:
    """Deployment condition for one DAgger round."""

    grid: int = 2
    strain: float | None = None
    mode: str | None = None
    iterates: int = 4
    max_lbfgs_iters: int = 200


def draw_scenario_loading(rng: np.random.Generator):
    """Strain magnitude ~ U(0, 0.3); compression with probability 0.8."""
    strain = float(rng.uniform(0.0, 0.3))
    mode = "compression" if rng.uniform() < 0.8 else "tension"
    return strain, mode


def dagger_round(
    params,
    scenario: DaggerScenario,
    rng: np.random.Generator,
    material: fem.Material = fem.Material(),
    fidelity: MeshFidelity = DESK_FIDELITY,
    shapes=None,
    pore_box=geometry.DEFAULT_PORE_BOX,
) -> list[SampleRecord]:
    """Deploy the composed surrogate, sample iterates from its solution
    trajectory, and label each component's boundary vector with FEA."""
    from . import composer

    strain, mode = scenario.strain, scenario.mode
    if strain is None or mode is None:
        drawn_strain, drawn_mode = draw_scenario_loading(rng)
        strain = drawn_strain if strain is None else strain
        mode = drawn_mode if mode is None else mode
    g = scenario.grid
    if shapes is None:
        shapes = [sample_valid_pore_for_dagger(rng, pore_box) for _ in range(g * g)]
    assembly = composer.build_assembly(
        shapes, g, params.N, strain=strain, mode=mode, cell_side=shapes[0].cell_side
    )
    result = composer.solve_composed(
        assembly, params,
        composer.LbfgsConfig(max_iters=scenario.max_lbfgs_iters),
        keep_trajectory=True,
    )
    trajectory = result.trajectory
    if scenario.iterates == 0 or not trajectory:
        return []
    k = min(scenario.iterates, len(trajectory))
    picks = rng.choice(len(trajectory), size=k, replace=False)
    seed = int(rng.integers(2**63))

    # boundary displacements beyond this are unphysical for these materials
    # and never label successfully; skip them before the expensive solve
    u_cap = 0.6 * shapes[0].cell_side
    records = []
    problems: dict[int, ComponentProblem] = {}
    for it in sorted(picks):
        state = trajectory[it]
        for ci in range(g * g):
            u_comp = state[assembly.gather_maps[ci]]
            if np.abs(u_comp).max() > u_cap:
                log.info("dagger skip (iterate %d, component %d): |u|=%.2f", it, ci, np.abs(u_comp).max())
                continue
            prob = problems.get(ci)
            if prob is None:
                prob = ComponentProblem(
                    shapes[ci], material, params.N, fidelity=fidelity
                )
                problems[ci] = prob
            try:
                energy, grad, hess, sol = prob.label(u_comp)
            except (fem.SingularSystemError, fem.ElementInversionError) as err:
                log.warning("dagger label failed (iterate %d, component %d): %s", it, ci, err)
                continue
            records.append(
                SampleRecord(
                    u=u_comp, xi=prob.xi, energy=energy, grad=grad, hessian=hess,
                    source="dagger", seed=seed,
                    meta={"iterate": int(it), "component": ci,
                          "strain": strain, "mode": mode},
                )
            )
    return records


def sample_valid_pore_for_dagger(rng, box):
    return geometry.sample_valid_pore(rng, box=box)
