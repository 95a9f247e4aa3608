"""Benchmark driver: configuration to load program to result bundle."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import benchmarks as bm
from .config import ConfigError, ProblemConfig
from .material import VonMisesLogStrain, embed_gradient
from .mesh_io import load_msh
from .solver import (
    DirichletBC,
    Discretization,
    LoadProgram,
    NeumannBC,
    PressureBC,
    Solution,
    StepRecord,
    TimeStepHistory,
    full_stresses_by_qp,
    gradients_by_qp,
    run_load_program,
)

log = logging.getLogger(__name__)


@dataclass
class Snapshot:
    """Quadrature-point fields of one accepted step."""

    step: int
    time: float
    points: np.ndarray         # (n_qp, d) deformed positions
    p: np.ndarray              # (n_qp,) equivalent plastic strain
    trace_sigma: np.ndarray    # (n_qp,) trace of the Cauchy stress


@dataclass
class CurveSample:
    step: int
    time: float
    control: float
    reaction: float
    iterations: int
    theta_min: float


@dataclass
class ResultBundle:
    config: ProblemConfig
    benchmark: bm.Benchmark
    history: TimeStepHistory
    snapshots: list[Snapshot] = field(default_factory=list)
    curve: list[CurveSample] = field(default_factory=list)
    discretization: Discretization | None = None

    @property
    def converged(self) -> bool:
        return self.history.converged


def _ramp_vector(values, d):
    vec = np.zeros(d)
    vec[:len(values)] = values[:d]
    return lambda x, t: np.tile(t * vec, (len(x), 1))


def _file_benchmark(cfg: ProblemConfig) -> bm.Benchmark:
    mesh = load_msh(cfg.mesh["path"])
    d = mesh.dimension
    known = {f.tag for f in mesh.faces if f.tag is not None}
    dirichlet, neumann, pressure = [], [], []
    for b in cfg.boundary:
        if b.tag not in known:
            raise ConfigError(f"loading.boundary: tag {b.tag!r} not found in mesh (tags: {', '.join(sorted(known))})")
        if b.type == "dirichlet":
            if any(c >= d for c in b.components):
                raise ConfigError(f"loading.boundary: component out of range for a {d}D mesh on tag {b.tag!r}")
            dirichlet.append(DirichletBC(b.tag, b.components, _ramp_vector(b.value, d) if b.value else None))
        elif b.type == "neumann":
            neumann.append(NeumannBC(b.tag, _ramp_vector(b.value, d)))
        else:
            pressure.append(PressureBC(b.tag, lambda t, pv=b.pressure: pv * t, b.follower))
    program = LoadProgram.uniform(cfg.steps if cfg.steps is not None else 10,
                                  dirichlet=dirichlet, neumann=neumann, pressure=pressure)
    tags = tuple(dict.fromkeys(b.tag for b in cfg.boundary if b.type == "dirichlet"))
    return bm.Benchmark("file", mesh, cfg.material, program, tags, {"control": "time"})


def build_benchmark(cfg: ProblemConfig) -> bm.Benchmark:
    """Instantiate the geometry, boundary conditions and load program of a configuration."""
    m, p = cfg.mesh, cfg.material
    steps = {} if cfg.steps is None else {"n_steps": cfg.steps}
    if cfg.benchmark == "cook":
        return bm.cook(m.get("n", 16), load=bm.COOK_LOAD if cfg.load is None else cfg.load,
                       merge_fraction=m.get("merge_fraction", 0.0), seed=m.get("seed", 0), params=p, **steps)
    if cfg.benchmark == "necking":
        return bm.necking(m.get("nx", 20), m.get("ny", 20), displacement=5.0 if cfg.load is None else cfg.load,
                          params=p, **steps)
    if cfg.benchmark == "sphere":
        return bm.sphere(m.get("n", 13), m.get("layers", 3), pressure=2.678 if cfg.load is None else cfg.load,
                         follower=cfg.follower, params=p, **steps)
    if cfg.benchmark == "manufactured":
        return bm.manufactured(m.get("n", 8), nu=p.nu, E=p.E)
    return _file_benchmark(cfg)


def quadrature_points(disc: Discretization) -> np.ndarray:
    return np.concatenate([r.points for r in disc.behavior_rules])


def cell_displacement_at_qp(disc: Discretization, u: Solution) -> np.ndarray:
    """Cell-unknown displacement at every behavior quadrature point, (n_qp, d)."""
    out = np.zeros((disc.n_qp, disc.d))
    for c, rule in enumerate(disc.behavior_rules):
        phi = disc.ops[c].ctx.cell_basis.eval(rule.points)[:, :disc.nl]
        out[disc.qp_offsets[c]:disc.qp_offsets[c + 1]] = phi @ u.cell[c].reshape(disc.d, disc.nl).T
    return out


def cauchy_trace(F: np.ndarray, P: np.ndarray) -> np.ndarray:
    """tr sigma with sigma = J^-1 P F^T for (n, 3, 3) arrays."""
    J = np.linalg.det(F)
    return np.einsum("nij,nij->n", P, F) / J


def _control_value(bench: bm.Benchmark, disc: Discretization, u: Solution, t: float) -> float:
    ctl = bench.control.get("control")
    if ctl == "load" and "point" in bench.control:
        return float(bm.face_displacement_at(disc, u, bench.control["point"], bench.control.get("point_tag"))[1])
    if ctl == "displacement":
        return float(bench.control["displacement"] * t)
    if ctl == "pressure":
        return float(bench.control["pressure"] * t)
    return float(t)


_REACTION_COMPONENT = {"cook": 1, "necking": 1, "sphere": 0}


def run_benchmark(cfg: ProblemConfig, keep_fields: bool = True) -> ResultBundle:
    """Run the configured problem; the bundle holds curves and per-step quadrature fields."""
    bench = build_benchmark(cfg)
    model = bench.model() if bench.small_strain else VonMisesLogStrain(cfg.material)
    disc = Discretization(bench.mesh, cfg.k, cfg.l, model, beta0=cfg.beta0, k_Q=cfg.k_Q,
                          experimental=cfg.experimental)
    x_ref = quadrature_points(disc)
    comp = min(_REACTION_COMPONENT.get(bench.name, disc.d - 1), disc.d - 1)
    bundle = ResultBundle(cfg, bench, TimeStepHistory([], [], [], True), discretization=disc)

    def record(rec: StepRecord, u: Solution, P_full: np.ndarray | None, p: np.ndarray):
        reaction = float(rec.reactions[bench.reaction_tags[0]][comp]) if bench.reaction_tags else 0.0
        bundle.curve.append(CurveSample(rec.step, rec.time, _control_value(bench, disc, u, rec.time),
                                        reaction, rec.iterations, rec.theta_min))
        if keep_fields:
            grad = gradients_by_qp(disc, u)
            F = embed_gradient(np.eye(disc.d) + grad)
            tr = np.zeros(disc.n_qp) if P_full is None else cauchy_trace(F, P_full)
            pts = x_ref + cell_displacement_at_qp(disc, u)
            bundle.snapshots.append(Snapshot(rec.step, rec.time, pts, np.array(p, copy=True), tr))

    def on_step(rec, gs):
        record(rec, gs.u, full_stresses_by_qp(disc, gs), gs.states.p)

    zero_rx = {tag: np.zeros(disc.d) for tag in bench.reaction_tags}
    record(StepRecord(0, 0.0, 0, [], zero_rx, float("nan"), 0.0), disc.zero_solution(), None,
           np.zeros(disc.n_qp))
    bundle.history = run_load_program(disc, bench.program, cfg.solver, bench.reaction_tags,
                                      keep_solutions=False, on_step=on_step)
    return bundle
