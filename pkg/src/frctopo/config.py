"""YAML run configuration with unit-suffixed physical values.

Internal units are ng, um, ms.  Every physical entry is written as
``"<number> <unit>"`` (for example ``"148e9 Pa"`` or ``"600 kHz"``); bare
numbers are accepted only for dimensionless quantities.
"""

from __future__ import annotations

import dataclasses
import math
import re
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .analysis import Material, Structure
from .density import DensityPipeline
from .fe_model import build_mesh
from .optimize import KINDS, OptProblemSpec, Schedule

UNITS = {
    "length": {"um": 1.0, "mm": 1e3, "m": 1e6, "nm": 1e-3},
    "modulus": {"Pa": 1.0, "kPa": 1e3, "MPa": 1e6, "GPa": 1e9},
    "density": {"ng/um^3": 1.0, "kg/m^3": 1e-6, "g/cm^3": 1e-3},
    "force": {"ng*um/ms^2": 1.0, "N": 1e12, "mN": 1e9, "uN": 1e6, "nN": 1e3},
    # circular frequency in rad/ms
    "frequency": {"kHz": 2 * math.pi, "Hz": 2 * math.pi * 1e-3, "MHz": 2 * math.pi * 1e3, "rad/ms": 1.0},
    "ratio": {"": 1.0, "%": 1e-2},
}

_NUM = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(\S*)\s*$")


class ConfigError(ValueError):
    pass


class _Src:
    """Field-path to YAML line lookup for diagnostics."""

    def __init__(self, text: str):
        self.lines: dict[str, int] = {}
        try:
            node = yaml.compose(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"YAML syntax error: {exc}") from exc
        if node is not None:
            self._walk(node, "")

    def _walk(self, node, path):
        self.lines.setdefault(path, node.start_mark.line + 1)
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = f"{path}.{k.value}" if path else k.value
                self.lines[p] = k.start_mark.line + 1
                self._walk(v, p)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                self._walk(v, f"{path}[{i}]")

    def error(self, path: str, msg: str) -> ConfigError:
        probe = path
        while probe and probe not in self.lines:
            probe = probe.rsplit(".", 1)[0] if "." in probe else ""
        line = self.lines.get(probe)
        where = f"line {line}, " if line else ""
        return ConfigError(f"{where}field '{path}': {msg}")


def parse_quantity(value: Any, kind: str) -> float:
    """Convert ``"<number> <unit>"`` (or a bare number for ratios) to internal units."""
    table = UNITS[kind]
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        if kind != "ratio":
            raise ValueError(f"missing unit (one of {sorted(u for u in table if u)})")
        return float(value)
    if not isinstance(value, str):
        raise ValueError(f"expected a quantity string, got {value!r}")
    m = _NUM.match(value)
    if not m:
        raise ValueError(f"cannot parse quantity {value!r}")
    num, unit = float(m.group(1)), m.group(2)
    if unit not in table:
        raise ValueError(f"unit {unit!r} is not a {kind} unit (one of {sorted(u for u in table if u)})")
    return num * table[unit]


@dataclasses.dataclass
class MeshConfig:
    nx: int
    ny: int
    element_size: float
    non_design: list = dataclasses.field(default_factory=list)
    fixed_edges: tuple = ("left",)
    x_constrained_edges: tuple = ("right",)


@dataclasses.dataclass
class DampingConfig:
    xi0: float = 0.001
    alpha: float | None = None
    beta: float | None = None


@dataclasses.dataclass
class ForcingConfig:
    amplitude: float
    node: tuple
    direction: int = 1
    eps: float = 0.01
    output_nodes: list = dataclasses.field(default_factory=list)
    output_direction: int = 1
    levels: list = dataclasses.field(default_factory=list)


@dataclasses.dataclass
class PipelineConfig:
    radius: float = 4.0
    sigma: float = 10.0
    eta: float = 0.5
    p: float = 1.0
    floor: float = 1e-6
    initial_density: float = 0.5


@dataclasses.dataclass
class OutputsConfig:
    frc_points: int = 400
    frc_halfwidth: float = 0.02  # fraction of the linear frequency
    sn_eps_range: tuple = (0.01, 1.2)  # multiples of forcing.eps
    sn_points: int = 50
    snapshot_every: int = 0


@dataclasses.dataclass
class RunConfig:
    mesh: MeshConfig
    material: Material
    damping: DampingConfig
    forcing: ForcingConfig
    pipeline: PipelineConfig
    problem: OptProblemSpec | None
    schedule: Schedule
    outputs: OutputsConfig
    raw: dict = dataclasses.field(default_factory=dict, repr=False)

    def build_structure(self) -> Structure:
        mc, fc = self.mesh, self.forcing
        mesh = build_mesh(mc.nx, mc.ny, mc.element_size, non_design=mc.non_design,
                          fixed_edges=mc.fixed_edges, x_constrained_edges=mc.x_constrained_edges)
        return Structure(mesh, self.material, force_node=tuple(fc.node), force=fc.amplitude,
                         force_direction=fc.direction, output_nodes=tuple(map(tuple, fc.output_nodes)),
                         output_direction=fc.output_direction, eps=fc.eps)

    def build_pipeline(self, mesh) -> DensityPipeline:
        pc = self.pipeline
        return DensityPipeline(mesh, radius=pc.radius, sigma=pc.sigma, eta=pc.eta, p=pc.p, floor=pc.floor)

    def setup(self):
        """Structure with damping fixed from the initial layout, pipeline and initial design."""
        st = self.build_structure()
        pl = self.build_pipeline(st.mesh)
        x0 = np.full(pl.n_design, self.pipeline.initial_density)
        if self.damping.alpha is not None:
            st.alpha, st.beta = self.damping.alpha, self.damping.beta
        else:
            st.init_damping(pl.forward(x0).physical, self.damping.xi0)
        return st, pl, x0


SECTIONS = ("mesh", "material", "damping", "forcing", "pipeline", "problem", "schedule", "outputs")
_DIRS = {"x": 0, "y": 1, 0: 0, 1: 1}


def _take(src: _Src, sec: dict, path: str, key: str, kind: str | None = None, default=dataclasses.MISSING,
          cast=None):
    full = f"{path}.{key}"
    if key not in sec:
        if default is dataclasses.MISSING:
            raise src.error(full, "required field missing")
        return default
    val = sec.pop(key)
    try:
        if kind is not None:
            if isinstance(val, list):
                return [parse_quantity(v, kind) for v in val]
            return parse_quantity(val, kind)
        return cast(val) if cast else val
    except (TypeError, ValueError) as exc:
        raise src.error(full, str(exc)) from None


def _point(src, v, path):
    try:
        x, y = (parse_quantity(c, "length") for c in v)
    except (TypeError, ValueError) as exc:
        raise src.error(path, f"expected [x, y] lengths: {exc}") from None
    return (x, y)


def _direction(src, v, path):
    if v not in _DIRS:
        raise src.error(path, f"direction must be 'x' or 'y', got {v!r}")
    return _DIRS[v]


def _leftover(src, sec, path):
    if sec:
        k = next(iter(sec))
        raise src.error(f"{path}.{k}", "unknown field")


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    return parse_config(text)


def parse_config(text: str) -> RunConfig:
    src = _Src(text)
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise src.error("", "top level must be a mapping")
    raw = yaml.safe_load(text)
    for k in data:
        if k not in SECTIONS:
            raise src.error(k, f"unknown section (expected one of {', '.join(SECTIONS)})")
    sec = {k: dict(data.get(k) or {}) for k in SECTIONS}

    m = sec["mesh"]
    mesh = MeshConfig(
        nx=_take(src, m, "mesh", "nx", cast=int),
        ny=_take(src, m, "mesh", "ny", cast=int),
        element_size=_take(src, m, "mesh", "element_size", "length"),
        non_design=[[parse_quantity(c, "length") for c in r] for r in _take(src, m, "mesh", "non_design", default=[])],
        fixed_edges=tuple(_take(src, m, "mesh", "fixed_edges", default=["left"])),
        x_constrained_edges=tuple(_take(src, m, "mesh", "x_constrained_edges", default=["right"])),
    )
    _leftover(src, m, "mesh")

    ma = sec["material"]
    d0 = Material()
    material = Material(
        E=_take(src, ma, "material", "E", "modulus", default=d0.E),
        nu=_take(src, ma, "material", "nu", "ratio", default=d0.nu),
        rho=_take(src, ma, "material", "density", "density", default=d0.rho),
        thickness=_take(src, ma, "material", "thickness", "length", default=d0.thickness),
    )
    _leftover(src, ma, "material")

    da = sec["damping"]
    damping = DampingConfig(
        xi0=_take(src, da, "damping", "xi0", "ratio", default=0.001),
        alpha=_take(src, da, "damping", "alpha", default=None, cast=float),
        beta=_take(src, da, "damping", "beta", default=None, cast=float),
    )
    if (damping.alpha is None) != (damping.beta is None):
        raise src.error("damping", "give both alpha and beta or neither")
    _leftover(src, da, "damping")

    fo = sec["forcing"]
    node = _point(src, _take(src, fo, "forcing", "node"), "forcing.node")
    forcing = ForcingConfig(
        amplitude=_take(src, fo, "forcing", "amplitude", "force"),
        node=node,
        direction=_direction(src, _take(src, fo, "forcing", "direction", default="y"), "forcing.direction"),
        eps=_take(src, fo, "forcing", "eps", "ratio", default=0.01),
        output_nodes=[_point(src, p, f"forcing.output_nodes[{i}]")
                      for i, p in enumerate(_take(src, fo, "forcing", "output_nodes", default=[]))] or [node],
        output_direction=_direction(src, _take(src, fo, "forcing", "output_direction", default="y"),
                                    "forcing.output_direction"),
        levels=_take(src, fo, "forcing", "levels", "force", default=[]),
    )
    _leftover(src, fo, "forcing")

    pi = sec["pipeline"]
    pipeline = PipelineConfig(**{k: _take(src, pi, "pipeline", k, "ratio", default=getattr(PipelineConfig(), k))
                                 for k in ("radius", "sigma", "eta", "p", "floor", "initial_density")})
    _leftover(src, pi, "pipeline")

    pr = sec["problem"]
    problem = None
    if pr:
        kind = _take(src, pr, "problem", "kind", cast=str)
        if kind not in KINDS:
            raise src.error("problem.kind", f"unknown kind {kind!r}; expected one of {KINDS}")
        kw = dict(
            kind=kind,
            gamma_target=_take(src, pr, "problem", "gamma_target", default=None, cast=float),
            omega_y_target=_take(src, pr, "problem", "omega_y_target", "frequency", default=None),
            omega_x_target=_take(src, pr, "problem", "omega_x_target", "frequency", default=None),
            area_max=_take(src, pr, "problem", "area_max", "ratio", default=None),
            area_target=_take(src, pr, "problem", "area_target", "ratio", default=None),
            b_target=_take(src, pr, "problem", "b_target", default=None, cast=float),
            tol=_take(src, pr, "problem", "tol", "ratio", default=0.02),
            one_sided_gamma=_take(src, pr, "problem", "one_sided_gamma", default=False, cast=bool),
        )
        _leftover(src, pr, "problem")
        try:
            problem = OptProblemSpec(**kw)
        except ValueError as exc:
            raise src.error("problem", str(exc)) from None

    sc = sec["schedule"]
    d = Schedule()
    schedule = Schedule(
        p_values=tuple(_take(src, sc, "schedule", "p_values", default=list(d.p_values))),
        sigma_start=_take(src, sc, "schedule", "sigma_start", "ratio", default=pipeline.sigma),
        sigma_max=_take(src, sc, "schedule", "sigma_max", "ratio", default=d.sigma_max),
        sigma_fixed=_take(src, sc, "schedule", "sigma_fixed", default=d.sigma_fixed, cast=bool),
        stage_iters=_take(src, sc, "schedule", "stage_iters", default=d.stage_iters, cast=int),
        max_iters=_take(src, sc, "schedule", "max_iters", default=d.max_iters, cast=int),
        move=_take(src, sc, "schedule", "move", "ratio", default=d.move),
        conv_tol=_take(src, sc, "schedule", "conv_tol", "ratio", default=d.conv_tol),
    )
    _leftover(src, sc, "schedule")

    ou = sec["outputs"]
    outputs = OutputsConfig(
        frc_points=_take(src, ou, "outputs", "frc_points", default=400, cast=int),
        frc_halfwidth=_take(src, ou, "outputs", "frc_halfwidth", "ratio", default=0.02),
        sn_eps_range=tuple(_take(src, ou, "outputs", "sn_eps_range", default=[0.01, 1.2])),
        sn_points=_take(src, ou, "outputs", "sn_points", default=50, cast=int),
        snapshot_every=_take(src, ou, "outputs", "snapshot_every", default=0, cast=int),
    )
    _leftover(src, ou, "outputs")
    schedule.snapshot_every = outputs.snapshot_every
    return RunConfig(mesh, material, damping, forcing, pipeline, problem, schedule, outputs, raw=raw)
