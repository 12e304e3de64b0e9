"""Problem formulations, continuation schedule and the MMA driver loop."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from typing import Callable

import numpy as np

from . import analysis as an
from .density import DensityPipeline
from .fe_model import SingularModelError
from .frc import PeakError
from .mma import MmaSettings, MmaState, MmaSubproblemError, mma_step
from .modal import EigenSolverError, OverdampedError
from .sensitivities import SensitivityError
from .ssm import InternalResonanceError

log = logging.getLogger(__name__)

KINDS = ("peak_min", "linear_ref", "backbone_only", "sn_control")
KKT_TOL = 1e-6
RECOVERABLE = (InternalResonanceError, OverdampedError, PeakError, SensitivityError, EigenSolverError,
               SingularModelError, MmaSubproblemError, np.linalg.LinAlgError, RuntimeError)


@dataclasses.dataclass(frozen=True)
class OptProblemSpec:
    """One of the four formulations.  Frequencies in rad/ms."""

    kind: str
    gamma_target: float | None = None
    omega_y_target: float | None = None
    omega_x_target: float | None = None
    area_max: float | None = None
    area_target: float | None = None
    b_target: float | None = None
    tol: float = 0.02
    one_sided_gamma: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("peak_min", "backbone_only") and not self.gamma_target:
            raise ValueError(f"{self.kind} needs a nonzero gamma_target")
        if self.kind == "sn_control":
            if self.b_target is None or not self.b_target > 0:
                raise ValueError("sn_control requires b_target > 0")
            if self.area_target is None:
                raise ValueError("sn_control requires area_target")
        elif self.area_max is None:
            raise ValueError(f"{self.kind} requires area_max")
        if (self.kind == "peak_min" and self.omega_x_target is not None and self.omega_y_target is not None
                and not self.omega_x_target > 3 * self.omega_y_target):
            raise ValueError("peak_min requires omega_x_target > 3 omega_y_target (cubic internal resonance)")
        if not self.tol > 0:
            raise ValueError("tol must be positive")

    @property
    def needs_cusp(self) -> bool:
        return self.kind == "sn_control"

    @property
    def needs_linear(self) -> bool:
        return self.kind == "linear_ref"


@dataclasses.dataclass
class Constraint:
    name: str
    value: float  # canonical g <= 0, unscaled
    grad: np.ndarray
    scale: float

    @property
    def satisfied(self) -> bool:
        return self.value <= KKT_TOL


@dataclasses.dataclass
class Evaluation:
    objective: float
    d_objective: np.ndarray
    constraints: list[Constraint]
    result: an.AnalysisResult

    @property
    def feasible(self) -> bool:
        return all(c.satisfied for c in self.constraints)

    def record(self) -> dict:
        r = self.result
        rec = {
            "objective": self.objective,
            "constraints": {c.name: c.value for c in self.constraints},
            "omega1": r.omega1,
            "omega2": r.omega2,
            "area": r.area,
        }
        if r.rom is not None:
            rec["gamma_im"] = r.rom.gamma.imag
            rec["gamma_re"] = r.rom.gamma.real
        if r.rho_max is not None:
            rec["rho_max"] = r.rho_max
        if r.c_lin is not None:
            rec["c_lin"] = r.c_lin
        rec["b"] = r.b
        rec["n_sn"] = r.n_sn
        return rec


def _two_sided(value, target, dvalue, tol, name):
    q = value / target - 1
    return Constraint(name, q**2 - tol**2, 2 * q / target * dvalue, tol**2)


def evaluate(problem: OptProblemSpec, structure: an.Structure, pipeline: DensityPipeline, x: np.ndarray,
             prev_phi=None) -> Evaluation:
    """Run the analysis chain and package objective/constraints as ``g <= 0``."""
    kind = problem.kind
    res = an.analyze(structure, pipeline, x, rom=True, peak=kind in ("peak_min", "sn_control"),
                     cusp=problem.needs_cusp, linear=problem.needs_linear, prev_phi=prev_phi)
    g = an.gradients(structure, pipeline, res, linear=problem.needs_linear)
    tol = problem.tol
    cons: list[Constraint] = []
    gim = res.rom.gamma.imag
    dgim = g.d_gamma.imag
    gt = problem.gamma_target

    if kind == "peak_min":
        obj, dobj = res.rho_max, g.d_rho_max
    elif kind == "linear_ref":
        obj, dobj = res.c_lin, g.d_c_lin
    elif kind == "backbone_only":
        q = gim / gt - 1
        if problem.one_sided_gamma:
            v = max(0.0, -q)
            obj, dobj = v**2, -2 * v / gt * dgim
        else:
            obj, dobj = q**2, 2 * q / gt * dgim
    else:
        obj, dobj = -res.rho_max, -g.d_rho_max

    if kind == "peak_min":
        if problem.one_sided_gamma:
            cons.append(Constraint("gamma", 1 - gim / gt, -dgim / gt, tol))
        else:
            cons.append(_two_sided(gim, gt, dgim, tol, "gamma"))
    if kind != "sn_control" and problem.omega_y_target is not None:
        cons.append(_two_sided(res.omega1, problem.omega_y_target, g.d_omega1, tol, "omega_y"))
    if problem.omega_x_target is not None:
        cons.append(Constraint("omega_x", 1 - res.omega2 / problem.omega_x_target,
                               -g.d_omega2 / problem.omega_x_target, tol))
    if kind == "sn_control":
        b = res.b
        db = np.sign(b) * g.d_b if g.d_b is not None else np.zeros(pipeline.n_design)
        cons.append(Constraint("b", abs(b) / problem.b_target - 1, db / problem.b_target, 1.0))
        cons.append(_two_sided(res.area, problem.area_target, g.d_area, tol, "area"))
    else:
        cons.append(Constraint("area", res.area / problem.area_max - 1, g.d_area / problem.area_max, tol))
    return Evaluation(float(obj), np.asarray(dobj, dtype=float), cons, res)


@dataclasses.dataclass
class Schedule:
    """Continuation in the SIMP exponent, then in the projection sharpness.

    A stage ends after ``stage_iters`` iterations or earlier once the design
    settles; the run converges only in the last stage.
    """

    p_values: tuple = (1.0, 1.5, 2.0, 2.5, 3.0)
    sigma_start: float = 10.0
    sigma_max: float = 160.0
    sigma_fixed: bool = False
    stage_iters: int = 50
    max_iters: int = 300
    move: float = 0.2
    conv_tol: float = 1e-2
    min_move: float = 1e-3
    snapshot_every: int = 0

    def stages(self) -> list[tuple[float, float]]:
        out = [(p, self.sigma_start) for p in self.p_values]
        if not self.sigma_fixed:
            s = self.sigma_start
            while s < self.sigma_max:
                s = min(2 * s, self.sigma_max)
                out.append((self.p_values[-1], s))
        return out


@dataclasses.dataclass
class RunResult:
    x: np.ndarray
    history: list[dict]
    converged: bool
    iterations: int
    evaluation: Evaluation | None
    failures: int = 0
    seconds_per_iteration: float = 0.0
    state: MmaState | None = None


def _objective_scale(problem: OptProblemSpec, f0: float) -> float:
    if problem.kind == "backbone_only":
        return 1.0
    return max(abs(f0), 1e-300)


def run(problem: OptProblemSpec, structure: an.Structure, pipeline: DensityPipeline, x0: np.ndarray,
        schedule: Schedule | None = None, settings: MmaSettings | None = None,
        callback: Callable[[dict, np.ndarray, MmaState], None] | None = None, log_path=None,
        state: MmaState | None = None, stage: int = 0) -> RunResult:
    """Iterate evaluate -> MMA step with continuation; roll back and halve the move limit on failures.

    ``callback(record, x, state)`` receives the evaluated design and the
    already advanced optimizer state after every iteration.
    """
    schedule = schedule or Schedule()
    settings = settings or MmaSettings(move=schedule.move)
    stages = schedule.stages()
    stage = min(stage, len(stages) - 1)
    pipeline.p, pipeline.sigma = stages[stage]
    state = state or MmaState.start(x0, move=schedule.move)
    history: list[dict] = []
    failures = 0
    prev_phi = None
    fh = open(log_path, "a") if log_path else None
    t_start = time.perf_counter()
    stage_start = state.iteration
    ev = None
    good = None
    fscale = None
    converged = False
    try:
        while state.iteration < schedule.max_iters:
            t0 = time.perf_counter()
            try:
                ev = evaluate(problem, structure, pipeline, state.x, prev_phi)
            except RECOVERABLE as exc:
                failures += 1
                retry = state.move / 2
                if good is None or retry < schedule.min_move:
                    log.error("analysis failed and cannot roll back: %s", exc)
                    break
                log.warning("analysis failed at iteration %d (%s); rolling back with move %.3g",
                            state.iteration, exc, retry)
                state = good["state"].snapshot()
                state.move = retry
                ev = good["ev"]
                try:
                    _step(state, ev, good["fscale"], settings)
                except MmaSubproblemError as sub_exc:
                    log.error("rollback step failed: %s", sub_exc)
                    state = good["state"]
                    break
                continue
            prev_phi = ev.result.modal.phi
            if fscale is None:
                fscale = _objective_scale(problem, ev.objective)
            good = {"state": state.snapshot(), "ev": ev, "fscale": fscale}
            xprev = state.x.copy()
            it = state.iteration
            in_last = stage == len(stages) - 1
            base = state.snapshot()
            move_used = state.move
            while True:
                try:
                    _step(state, ev, fscale, settings)
                    break
                except MmaSubproblemError as exc:
                    failures += 1
                    retry = state.move / 2
                    if retry < schedule.min_move:
                        log.error("%s; move limit exhausted", exc)
                        state = base
                        break
                    log.warning("%s; step rejected, retrying with move %.3g", exc, retry)
                    state = base.snapshot()
                    state.move = retry
            if state is base:
                break
            move_used = state.move
            state.move = min(schedule.move, 1.25 * state.move)  # recover after rollbacks
            change = float(np.max(np.abs(state.x - xprev)))
            rec = {"iteration": it, "stage": stage, "p": pipeline.p, "sigma": pipeline.sigma,
                   "max_change": change, "move": move_used, "seconds": time.perf_counter() - t0}
            rec.update(ev.record())
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            # a step capped by a shrunken move limit says nothing about convergence
            settled = (change < schedule.conv_tol and ev.feasible
                       and (move_used > schedule.conv_tol or change < 0.5 * move_used))
            if settled and in_last:
                converged = True
                state.x = xprev
            elif not in_last and (settled or state.iteration - stage_start >= schedule.stage_iters):
                stage += 1
                stage_start = state.iteration
                pipeline.p, pipeline.sigma = stages[stage]
                state.move = schedule.move
            state.stage = stage
            if callback:
                callback(rec, xprev, state)
            if converged:
                break
        final_x = state.x
        if not converged:
            try:
                ev = evaluate(problem, structure, pipeline, final_x, prev_phi)
            except RECOVERABLE:
                pass
    finally:
        if fh:
            fh.close()
    n_it = len(history)
    spi = (time.perf_counter() - t_start) / max(n_it, 1)
    pipeline.forward(state.x)
    state.stage = stage
    return RunResult(state.x.copy(), history, converged, n_it, ev, failures, spi, state)


def _step(state: MmaState, ev: Evaluation, fscale: float, settings: MmaSettings) -> None:
    g = np.array([c.value / c.scale for c in ev.constraints])
    dg = np.array([c.grad / c.scale for c in ev.constraints])
    mma_step(state, ev.objective / fscale, ev.d_objective / fscale, g, dg, settings)
