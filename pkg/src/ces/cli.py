"""Command-line entry points wiring the data pipeline end to end.

Commands: collect, train, dagger, solve-fea, solve-ces, benchmark, ablate,
validate.  Runs are driven by one INI-style config file that is archived
verbatim next to the outputs.  Exit codes: 0 success, 1 validation failure,
2 solver failure, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import shutil
import sys
import time
from dataclasses import dataclass, field
from multiprocessing import get_context

import numpy as np

from . import basis, composer, fem, geometry, pipeline
from .component import ComponentProblem, MeshFidelity
from .surrogate import (
    FeatureFlags,
    TrainConfig,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train,
    validation_metrics,
)

log = logging.getLogger("ces.cli")

RESULT_COLUMNS = ["method", "dofs", "wall_time_s", "l2_error", "rel_energy_error"]
EPOCH_COLUMNS = ["epoch", "l0", "l1", "l2", "E_pct_err", "G_sim", "Hvp_sim"]


class SolverFailure(RuntimeError):
    pass


@dataclass
class RunConfig:
    """Everything a run needs; mirrors the INI sections."""

    seed: int = 0
    output: str = "runs/desk"
    workers: int = 4
    # material
    mu: float = 1.0
    kappa: float = 10.0
    # geometry
    cell_side: float = 1.0
    thickness_floor: float = 0.05
    pore_box: tuple = geometry.DEFAULT_PORE_BOX
    pore_resolution: int = 24
    min_mesh_resolution: int = 2
    # spline
    N: int = 10
    # collect
    collectors: int = 8
    samples_per_collector: int = 25
    val_ratio: int = 12        # every val_ratio-th record goes to validation (11:1)
    # surrogate
    width: int = 128
    flags: FeatureFlags = field(default_factory=FeatureFlags)
    lr: float = 3e-4
    batch: int = 128
    epochs: int = 40
    # dagger
    dagger_rounds: int = 3
    dagger_grid: int = 2
    dagger_iterates: int = 4
    dagger_scenarios: int = 2
    retrain_epochs: int = 10
    # benchmark
    bench_grid: int = 2
    bench_strain: float = 0.125
    bench_modes: tuple = ("compression", "tension")
    bench_sampled_shapes: int = 2
    fidelities: tuple = (MeshFidelity(8, 1), MeshFidelity(16, 2), MeshFidelity(32, 4))
    schedule_steps: tuple = (1, 2, 5, 10, 20)
    schedule_relaxations: tuple = (0.9, 0.7, 0.4, 0.1, 0.05)
    config_path: str | None = None

    @property
    def material(self) -> fem.Material:
        return fem.Material(self.mu, self.kappa)

    @property
    def fidelity(self) -> MeshFidelity:
        return MeshFidelity(self.pore_resolution, self.min_mesh_resolution)

    @property
    def effective_workers(self) -> int:
        env = os.environ.get("CES_WORKERS")
        return max(1, int(env)) if env else max(1, self.workers)

    def data_dir(self) -> str:
        return os.path.join(self.output, "data")


def load_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    import configparser

    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = parser.read(path)
    if not read:
        raise ValueError(f"config file not found: {path}")
    cfg.config_path = path

    def get(section, key, cast, default):
        if parser.has_option(section, key):
            raw = parser.get(section, key)
            if cast is bool:
                return parser.getboolean(section, key)
            return cast(raw)
        return default

    cfg.seed = get("run", "seed", int, cfg.seed)
    cfg.output = get("run", "output", str, cfg.output)
    cfg.workers = get("run", "workers", int, cfg.workers)
    cfg.mu = get("material", "mu", float, cfg.mu)
    cfg.kappa = get("material", "kappa", float, cfg.kappa)
    cfg.cell_side = get("geometry", "cell_side", float, cfg.cell_side)
    cfg.thickness_floor = get("geometry", "thickness_floor", float, cfg.thickness_floor)
    if parser.has_option("geometry", "pore_box"):
        lo, hi = parser.get("geometry", "pore_box").split()
        cfg.pore_box = (float(lo), float(hi))
        if cfg.pore_box[0] >= cfg.pore_box[1]:
            raise ValueError("pore_box must be an increasing interval")
    cfg.pore_resolution = get("geometry", "pore_resolution", int, cfg.pore_resolution)
    cfg.min_mesh_resolution = get("geometry", "min_mesh_resolution", int, cfg.min_mesh_resolution)
    cfg.N = get("spline", "control_points", int, cfg.N)
    cfg.collectors = get("collect", "collectors", int, cfg.collectors)
    cfg.samples_per_collector = get("collect", "samples_per_collector", int, cfg.samples_per_collector)
    cfg.val_ratio = get("collect", "val_ratio", int, cfg.val_ratio)
    cfg.width = get("surrogate", "width", int, cfg.width)
    cfg.flags = FeatureFlags(
        scale_by_norm=get("surrogate", "scale_by_norm", bool, True),
        remove_rigid=get("surrogate", "remove_rigid", bool, True),
        sobolev_g=get("surrogate", "sobolev_g", bool, True),
        sobolev_hvp=get("surrogate", "sobolev_hvp", bool, True),
    )
    cfg.lr = get("surrogate", "lr", float, cfg.lr)
    cfg.batch = get("surrogate", "batch", int, cfg.batch)
    cfg.epochs = get("surrogate", "epochs", int, cfg.epochs)
    cfg.dagger_rounds = get("dagger", "rounds", int, cfg.dagger_rounds)
    cfg.dagger_grid = get("dagger", "grid", int, cfg.dagger_grid)
    cfg.dagger_iterates = get("dagger", "iterates", int, cfg.dagger_iterates)
    cfg.dagger_scenarios = get("dagger", "scenarios_per_round", int, cfg.dagger_scenarios)
    cfg.retrain_epochs = get("dagger", "retrain_epochs", int, cfg.retrain_epochs)
    cfg.bench_grid = get("benchmark", "grid", int, cfg.bench_grid)
    cfg.bench_strain = get("benchmark", "strain", float, cfg.bench_strain)
    if parser.has_option("benchmark", "modes"):
        cfg.bench_modes = tuple(parser.get("benchmark", "modes").split())
    cfg.bench_sampled_shapes = get("benchmark", "sampled_shapes", int, cfg.bench_sampled_shapes)
    if parser.has_option("benchmark", "fidelities"):
        fids = []
        for tok in parser.get("benchmark", "fidelities").split():
            p, r = tok.split(":")
            fids.append(MeshFidelity(int(p), int(r)))
        cfg.fidelities = tuple(fids)
    if parser.has_option("benchmark", "schedule_steps"):
        cfg.schedule_steps = tuple(int(t) for t in parser.get("benchmark", "schedule_steps").split())
    if parser.has_option("benchmark", "schedule_relaxations"):
        cfg.schedule_relaxations = tuple(
            float(t) for t in parser.get("benchmark", "schedule_relaxations").split()
        )
    return cfg


def _prepare_output(cfg: RunConfig) -> None:
    os.makedirs(cfg.output, exist_ok=True)
    os.makedirs(cfg.data_dir(), exist_ok=True)
    if cfg.config_path:
        shutil.copyfile(cfg.config_path, os.path.join(cfg.output, "config.ini"))


def _write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


def _combined_manifest(cfg: RunConfig, datasets: dict) -> None:
    lines = []
    for name, ds in sorted(datasets.items()):
        counts = ds.counts_by_source() if len(ds) else dict.fromkeys(pipeline.SOURCE_CODES, 0)
        lines.append(f"[{name}]")
        lines.append(f"records = {len(ds)}")
        for k in sorted(counts):
            lines.append(f"count_{k} = {counts[k]}")
        lines.append(f"sha256 = {ds.content_hash()}")
        lines.append("")
    with open(os.path.join(cfg.data_dir(), "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines))


def _collector_job(args):
    (seed, collector_id, cfg_tuple) = args
    (mu, kappa, cell_side, floor, box, pres, mres, n_ctrl, samples) = cfg_tuple
    rng = np.random.default_rng(seed)
    shape = geometry.sample_valid_pore(rng, box=box, thickness_floor=floor, cell_side=cell_side)
    problem = ComponentProblem(
        shape, fem.Material(mu, kappa), n_ctrl, fidelity=MeshFidelity(pres, mres)
    )
    hmc_cfg = pipeline.randomize_hmc_config(rng, samples_per_collector=samples)
    return pipeline.hmc_collect(problem, hmc_cfg, rng, collector_id=collector_id)


def cmd_collect(cfg: RunConfig) -> int:
    """Run parallel HMC collectors and write the train/val datasets."""
    _prepare_output(cfg)
    t0 = time.time()
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.collectors)
    cfg_tuple = (
        cfg.mu, cfg.kappa, cfg.cell_side, cfg.thickness_floor, cfg.pore_box,
        cfg.pore_resolution, cfg.min_mesh_resolution, cfg.N, cfg.samples_per_collector,
    )
    jobs = [(seeds[i], i, cfg_tuple) for i in range(cfg.collectors)]
    workers = min(cfg.effective_workers, cfg.collectors)
    if workers > 1:
        with get_context("fork").Pool(workers) as pool:
            batches = pool.map(_collector_job, jobs)
    else:
        batches = [_collector_job(j) for j in jobs]

    train_path = os.path.join(cfg.data_dir(), "train.bin")
    val_path = os.path.join(cfg.data_dir(), "val.bin")
    for path in (train_path, val_path):
        if os.path.exists(path):
            os.remove(path)
    n_local = 2 * 4 * (cfg.N - 1)
    train_ds = pipeline.Dataset(train_path, n_local)
    val_ds = pipeline.Dataset(val_path, n_local)
    train_recs, val_recs = [], []
    count = 0
    for batch in batches:
        for rec in batch:
            count += 1
            (val_recs if count % cfg.val_ratio == 0 else train_recs).append(rec)
    if train_recs:
        train_ds.append(train_recs)
    if val_recs:
        val_ds.append(val_recs)
    _combined_manifest(cfg, {"train": train_ds, "val": val_ds})
    log.info(
        "collected %d train / %d val records in %.1fs",
        len(train_ds), len(val_ds), time.time() - t0,
    )
    return 0


def _load_arrays(cfg: RunConfig, name: str):
    n_local = 2 * 4 * (cfg.N - 1)
    ds = pipeline.Dataset(os.path.join(cfg.data_dir(), f"{name}.bin"), n_local)
    return ds, (ds.arrays() if len(ds) else None)


def _history_rows(history):
    return [
        [h.epoch, h.losses.l0, h.losses.l1, h.losses.l2, h.e_pct_err, h.g_sim, h.hvp_sim]
        for h in history
    ]


def cmd_train(cfg: RunConfig, resume: bool = False, max_steps: int | None = None) -> int:
    """Train the surrogate on the collected dataset; emit per-epoch CSV."""
    _prepare_output(cfg)
    _, data = _load_arrays(cfg, "train")
    if data is None:
        raise ValueError("no training data; run `ces collect` first")
    _, val = _load_arrays(cfg, "val")
    ckpt = os.path.join(cfg.output, "checkpoint.bin")
    if resume and os.path.exists(ckpt):
        params = load_checkpoint(ckpt)
    else:
        params = init_params(
            np.random.default_rng(cfg.seed), cfg.N, 2.0 * cfg.cell_side, cfg.width, cfg.flags
        )
    tconf = TrainConfig(lr=cfg.lr, batch=cfg.batch, epochs=cfg.epochs,
                        seed=cfg.seed, max_steps=max_steps)
    params, history = train(params, data, tconf, val)
    train_ds, _ = _load_arrays(cfg, "train")
    save_checkpoint(params, ckpt, meta={
        "flags": cfg.flags.as_dict(), "seed": cfg.seed, "dataset_sha256": train_ds.content_hash(),
    })
    _write_csv(os.path.join(cfg.output, "training.csv"), EPOCH_COLUMNS, _history_rows(history))
    if history:
        last = history[-1]
        log.info("trained: total=%.4f E%%err=%.2f G-sim=%.4f Hvp-sim=%.4f",
                 last.losses.total, last.e_pct_err, last.g_sim, last.hvp_sim)
    return 0


def cmd_dagger(cfg: RunConfig) -> int:
    """Alternate surrogate training with trajectory labeling rounds."""
    _prepare_output(cfg)
    ckpt = os.path.join(cfg.output, "checkpoint.bin")
    if not os.path.exists(ckpt):
        raise ValueError("no checkpoint; run `ces train` first")
    params = load_checkpoint(ckpt)
    n_local = 2 * 4 * (cfg.N - 1)
    train_ds = pipeline.Dataset(os.path.join(cfg.data_dir(), "train.bin"), n_local)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xDA66E2)))

    for round_idx in range(cfg.dagger_rounds):
        new_records = []
        for s in range(cfg.dagger_scenarios):
            scenario = pipeline.DaggerScenario(grid=cfg.dagger_grid, iterates=cfg.dagger_iterates)
            recs = pipeline.dagger_round(
                params, scenario, rng, material=cfg.material,
                fidelity=cfg.fidelity, pore_box=cfg.pore_box,
            )
            new_records.extend(recs)
        if new_records:
            train_ds.append(new_records)
        _, data = _load_arrays(cfg, "train")
        _, val = _load_arrays(cfg, "val")
        params, history = train(
            params, data,
            TrainConfig(lr=cfg.lr, batch=cfg.batch, epochs=cfg.retrain_epochs,
                        seed=cfg.seed + round_idx + 1),
            val,
        )
        log.info("dagger round %d: +%d records, dataset=%d",
                 round_idx, len(new_records), len(train_ds))
    save_checkpoint(params, ckpt, meta={
        "flags": cfg.flags.as_dict(), "seed": cfg.seed,
        "dataset_sha256": train_ds.content_hash(), "dagger_rounds": cfg.dagger_rounds,
    })
    _combined_manifest(cfg, {
        "train": train_ds,
        "val": pipeline.Dataset(os.path.join(cfg.data_dir(), "val.bin"), n_local),
    })
    return 0


def _benchmark_shapes(cfg: RunConfig):
    shapes = [("circular", geometry.PoreShape(0.0, 0.0, cfg.cell_side))]
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xBE7C)))
    for i in range(cfg.bench_sampled_shapes):
        shapes.append(
            (f"sampled{i}", geometry.sample_valid_pore(
                rng, box=cfg.pore_box, thickness_floor=cfg.thickness_floor,
                cell_side=cfg.cell_side))
        )
    return shapes


def _fea_job(args):
    (assembly, material, fidelity, grid) = args
    return composer.fea_reference(assembly, material, fidelity, grid)


def cmd_benchmark(cfg: RunConfig) -> int:
    """CES vs the FEA fidelity ladder on the configured scenarios."""
    _prepare_output(cfg)
    ckpt = os.path.join(cfg.output, "checkpoint.bin")
    if not os.path.exists(ckpt):
        raise ValueError("no checkpoint; run `ces train` first")
    params = load_checkpoint(ckpt)
    grid_sched = (list(cfg.schedule_steps), list(cfg.schedule_relaxations))
    rows = []
    any_solved = False
    for name, shape in _benchmark_shapes(cfg):
        for mode in cfg.bench_modes:
            assembly = composer.build_assembly(
                shape, cfg.bench_grid, cfg.N, strain=cfg.bench_strain,
                mode=mode, cell_side=cfg.cell_side,
            )
            jobs = [(assembly, cfg.material, fid, grid_sched) for fid in cfg.fidelities]
            workers = min(cfg.effective_workers, len(jobs))
            if workers > 1:
                with get_context("fork").Pool(workers) as pool:
                    refs = pool.map(_fea_job, jobs)
            else:
                refs = [_fea_job(j) for j in jobs]
            finest = refs[-1]
            t0 = time.time()
            ces_result = composer.solve_composed(assembly, params)
            ces_time = time.time() - t0
            scenario = f"{name}-{mode}"
            if finest.solution is None:
                rows.append(["fea-finest", 0, 0.0, "", "", scenario, "failed"])
                continue
            any_solved = True
            for fid, ref in zip(cfg.fidelities, refs):
                if ref.solution is None:
                    rows.append([fid.label(), ref.n_dofs, "", "", "", scenario, "failed"])
                    continue
                met = composer.compare(ref.values, ref.energy, finest.values, finest.energy, assembly)
                best_time = min(a.wall_time for a in ref.attempts if a.converged)
                rows.append([
                    fid.label(), ref.n_dofs, f"{best_time:.3f}",
                    f"{met['l2_error']:.6e}", f"{met['rel_energy_error']:.6e}",
                    scenario, "ok",
                ])
            met = composer.compare(
                ces_result.solution, ces_result.energy, finest.values, finest.energy, assembly
            )
            rows.append([
                "ces", assembly.n_dofs, f"{ces_time:.3f}",
                f"{met['l2_error']:.6e}", f"{met['rel_energy_error']:.6e}",
                scenario, "ok",
            ])
    _write_csv(
        os.path.join(cfg.output, "results.csv"),
        RESULT_COLUMNS + ["scenario", "status"], rows,
    )
    if not any_solved:
        raise SolverFailure("every benchmark baseline failed")
    return 0


def cmd_solve_fea(cfg: RunConfig, strain: float | None, mode: str) -> int:
    """One full-domain FEA solve at the finest configured fidelity."""
    _prepare_output(cfg)
    shape = geometry.PoreShape(0.0, 0.0, cfg.cell_side)
    assembly = composer.build_assembly(
        shape, cfg.bench_grid, cfg.N,
        strain=cfg.bench_strain if strain is None else strain,
        mode=mode, cell_side=cfg.cell_side,
    )
    ref = composer.fea_reference(
        assembly, cfg.material, cfg.fidelities[-1],
        (list(cfg.schedule_steps), list(cfg.schedule_relaxations)),
    )
    if ref.solution is None:
        raise SolverFailure("all schedules failed")
    fem.save_solution(ref.solution, os.path.join(cfg.output, "fea_solution.txt"))
    basis.save_boundary_vector(ref.values, os.path.join(cfg.output, "fea_controls.txt"))
    log.info("fea energy %.6e with schedule %s", ref.energy, ref.best)
    return 0


def cmd_solve_ces(cfg: RunConfig, strain: float | None, mode: str) -> int:
    """One composed-surrogate solve from the trained checkpoint."""
    _prepare_output(cfg)
    ckpt = os.path.join(cfg.output, "checkpoint.bin")
    if not os.path.exists(ckpt):
        raise ValueError("no checkpoint; run `ces train` first")
    params = load_checkpoint(ckpt)
    shape = geometry.PoreShape(0.0, 0.0, cfg.cell_side)
    assembly = composer.build_assembly(
        shape, cfg.bench_grid, cfg.N,
        strain=cfg.bench_strain if strain is None else strain,
        mode=mode, cell_side=cfg.cell_side,
    )
    result = composer.solve_composed(assembly, params)
    if not result.converged:
        raise SolverFailure("composed solve did not converge")
    basis.save_boundary_vector(result.solution, os.path.join(cfg.output, "ces_controls.txt"))
    log.info("ces energy %.6e in %d iterations", result.energy, result.iterations)
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    """Train with all feature flags on and with each one off; emit the
    validation-metric table."""
    _prepare_output(cfg)
    _, data = _load_arrays(cfg, "train")
    if data is None:
        raise ValueError("no training data; run `ces collect` first")
    _, val = _load_arrays(cfg, "val")
    variants = [FeatureFlags()]
    for off in ("scale_by_norm", "remove_rigid", "sobolev_g", "sobolev_hvp"):
        variants.append(FeatureFlags(**{**FeatureFlags().as_dict(), off: False}))
    rows = []
    for flags in variants:
        params = init_params(
            np.random.default_rng(cfg.seed), cfg.N, 2.0 * cfg.cell_side, cfg.width, flags
        )
        params, history = train(
            params, data,
            TrainConfig(lr=cfg.lr, batch=cfg.batch, epochs=cfg.epochs, seed=cfg.seed),
            val,
        )
        e_pct, g_sim, hvp_sim = validation_metrics(
            params, val if val is not None else data, np.random.default_rng(cfg.seed)
        )
        d = flags.as_dict()
        rows.append([
            int(d["scale_by_norm"]), int(d["remove_rigid"]),
            int(d["sobolev_g"]), int(d["sobolev_hvp"]),
            f"{e_pct:.3f}", f"{g_sim:.5f}", f"{hvp_sim:.5f}",
        ])
    _write_csv(
        os.path.join(cfg.output, "ablation.csv"),
        ["scale", "remove_rigid", "sobolev_g", "sobolev_hvp", "E_pct_err", "G_sim", "Hvp_sim"],
        rows,
    )
    return 0


def cmd_validate(cfg: RunConfig) -> int:
    """Fast invariant suite; exits nonzero on the first violated property."""
    checks = []

    def check(name, ok):
        checks.append((name, bool(ok)))
        print(f"{'PASS' if ok else 'FAIL'}  {name}")

    theta = np.linspace(0, 2 * np.pi, 721)
    shape = geometry.PoreShape(0.17, -0.08, cfg.cell_side)
    r = geometry.pore_radius(shape, theta)
    r_neg = geometry.pore_radius(shape, -theta)
    r_pi = geometry.pore_radius(shape, np.pi - theta)
    check("pore mirror symmetry", max(np.abs(r - r_neg).max(), np.abs(r - r_pi).max()) < 1e-12)
    poly = geometry.pore_polygon(shape, 64)
    check("pore area at 64 points", abs(geometry.polygon_area(poly) - 0.5 * shape.cell_side**2) < 0.01 * 0.5)

    lay = basis.BoundaryLayout(cfg.N, 2.0 * cfg.cell_side)
    check("single component dofs", lay.n_dofs == 72 if cfg.N == 10 else lay.n_dofs == 8 * (cfg.N - 1))
    a4 = composer.build_assembly(geometry.PoreShape(0, 0, cfg.cell_side), 4, cfg.N, cell_side=cfg.cell_side)
    check("4x4 assembly dofs", a4.n_dofs == (690 if cfg.N == 10 else a4.n_dofs))

    rng = np.random.default_rng(0)
    u = rng.standard_normal(lay.n_dofs)
    t = np.tile(rng.standard_normal(2), lay.n_points)
    aligned, _, _ = basis.procrustes_align(t, lay)
    check("procrustes annihilates translations", np.abs(aligned).max() < 1e-10)
    a1, _, _ = basis.procrustes_align(u, lay)
    a2, _, _ = basis.procrustes_align(a1, lay)
    check("procrustes idempotent", np.abs(a1 - a2).max() < 1e-12)
    for ax in ("horizontal", "vertical"):
        check(f"{ax} flip involution", np.array_equal(basis.flip(basis.flip(u, lay, ax), lay, ax), u))

    mat = cfg.material
    check("shear energy density",
          abs(fem.energy_density(np.array([[1.0, 0.3], [0.0, 1.0]]), mat) - 0.045 * mat.mu) < 1e-12)
    c = 1.1
    check("dilation energy density",
          abs(fem.energy_density(c * np.eye(2), mat) - 0.5 * mat.kappa * (c * c - 1) ** 2) < 1e-12)

    prec = np.diag(np.linspace(0.5, 2.0, 6))
    logd = lambda x: (-0.5 * x @ prec @ x, -prec @ x, None)
    u0, v0 = rng.standard_normal(6), rng.standard_normal(6)
    uf, vf, _, _ = pipeline.leapfrog(logd, u0, v0, 0.01, 25, 1.0)
    ub, vb, _, _ = pipeline.leapfrog(logd, uf, -vf, 0.01, 25, 1.0)
    check("leapfrog reversibility", max(np.abs(ub - u0).max(), np.abs(-vb - v0).max()) < 1e-8)

    asm = composer.build_assembly(geometry.PoreShape(0, 0, cfg.cell_side), 2, cfg.N, cell_side=cfg.cell_side)
    x = rng.standard_normal(asm.n_dofs)
    y = rng.standard_normal(asm.gather_maps.shape)
    sc = np.zeros(asm.n_dofs)
    np.add.at(sc, asm.gather_maps.ravel(), y.ravel())
    check("gather/scatter adjoint", abs((x[asm.gather_maps] * y).sum() - x @ sc) < 1e-9)

    if all(ok for _, ok in checks):
        return 0
    raise ValueError("validation failed: " + ", ".join(n for n, ok in checks if not ok))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ces", description=__doc__)
    parser.add_argument("-c", "--config", default=None, help="INI config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("collect")
    p_train = sub.add_parser("train")
    p_train.add_argument("--resume", action="store_true")
    p_train.add_argument("--max-steps", type=int, default=None)
    sub.add_parser("dagger")
    for name in ("solve-fea", "solve-ces"):
        p = sub.add_parser(name)
        p.add_argument("--strain", type=float, default=None)
        p.add_argument("--mode", default="compression", choices=["compression", "tension"])
    sub.add_parser("benchmark")
    sub.add_parser("ablate")
    sub.add_parser("validate")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        cfg = load_config(args.config)
        if args.command == "collect":
            return cmd_collect(cfg)
        if args.command == "train":
            return cmd_train(cfg, resume=args.resume, max_steps=args.max_steps)
        if args.command == "dagger":
            return cmd_dagger(cfg)
        if args.command == "solve-fea":
            return cmd_solve_fea(cfg, args.strain, args.mode)
        if args.command == "solve-ces":
            return cmd_solve_ces(cfg, args.strain, args.mode)
        if args.command == "benchmark":
            return cmd_benchmark(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "validate":
            return cmd_validate(cfg)
        raise ValueError(f"unknown command {args.command}")
    except (ValueError, geometry.MeshingError) as err:
        log.error("%s", err)
        return 1
    except (SolverFailure, fem.SingularSystemError, fem.ElementInversionError) as err:
        log.error("solver failure: %s", err)
        return 2
    except OSError as err:
        log.error("I/O failure: %s", err)
        return 3


if __name__ == "__main__":
    sys.exit(main())
