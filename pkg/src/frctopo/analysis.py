"""Forward analysis chain and its gradients in design variables.

design x -> densities -> assembled model -> modes -> ROM -> peak / SN / cusp,
plus the linear harmonic objective and the area fraction.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import frc
from . import sensitivities as sens
from .density import DensityPipeline, DesignField
from .fe_model import AssembledModel, ElementOperators, Mesh, assemble, element_operators, mesh_element_set
from .modal import ModalData, modal_analysis, rayleigh_constants, solve_modes
from .ssm import W11_FACTOR, RomCoefficients, build_rom


@dataclasses.dataclass(frozen=True)
class Material:
    E: float = 148e9  # Pa = ng/(um ms^2)
    nu: float = 0.23
    rho: float = 2330e-6  # ng/um^3
    thickness: float = 24.0  # um


@dataclasses.dataclass
class Structure:
    """Mesh, material, load and output description shared by all analyses."""

    mesh: Mesh
    material: Material = dataclasses.field(default_factory=Material)
    force_node: tuple[float, float] | None = None
    force: float = 0.0
    force_direction: int = 1
    output_nodes: tuple = ()
    output_direction: int = 1
    eps: float = 0.01
    alpha: float = 0.0
    beta: float = 0.0
    w11_factor: float = W11_FACTOR

    def __post_init__(self):
        m = self.material
        self.ops: ElementOperators = element_operators(m.E, m.nu, m.rho, m.thickness, self.mesh.element_size)
        self.elements = mesh_element_set(self.mesh, self.ops)

    def model(self, densities: np.ndarray, check: bool = True) -> AssembledModel:
        return assemble(
            self.mesh, densities, self.ops,
            force_node=self.force_node, force=self.force, force_direction=self.force_direction,
            output_nodes=self.output_nodes, output_direction=self.output_direction,
            alpha=self.alpha, beta=self.beta, check=check, elements=self.elements,
        )

    def init_damping(self, densities: np.ndarray, xi0: float) -> tuple[float, float]:
        """Fix Rayleigh constants from the first two frequencies of ``densities``."""
        m = self.model(densities)
        om, _ = solve_modes(m.M, m.K, 2)
        self.alpha, self.beta = rayleigh_constants(om[0], om[1], xi0)
        return self.alpha, self.beta


@dataclasses.dataclass
class AnalysisResult:
    field: DesignField
    model: AssembledModel
    modal: ModalData
    rom: RomCoefficients | None = None
    rho_max: float | None = None
    Omega_max: float | None = None
    sn: frc.SnPoint | None = None
    cusp: frc.CuspData | None = None
    area: float = 0.0
    d_area: np.ndarray | None = None
    c_lin: float | None = None
    n_sn: int = 0

    @property
    def other(self) -> int:
        return 1 - self.modal.master

    @property
    def omega1(self) -> float:
        """Master frequency (omega_Y)."""
        return self.modal.omega

    @property
    def omega2(self) -> float:
        """The other tracked frequency (omega_X)."""
        return float(self.modal.omegas[self.other])

    @property
    def b(self) -> float:
        return 0.0 if self.cusp is None else self.cusp.b


def analyze(structure: Structure, pipeline: DensityPipeline, x: np.ndarray, *, rom: bool = True,
            peak: bool = True, cusp: bool = False, linear: bool = False, prev_phi=None) -> AnalysisResult:
    field = pipeline.forward(x)
    model = structure.model(field.physical)
    modal = modal_analysis(model, count=2, prev_phi=prev_phi)
    A, dA = pipeline.area_fraction(field)
    res = AnalysisResult(field, model, modal, area=A, d_area=dA)
    if rom or peak or cusp:
        res.rom = build_rom(model, modal, structure.w11_factor)
    if peak:
        res.rho_max, res.Omega_max = frc.peak(res.rom, structure.eps)
    if cusp:
        pts = frc.sn_points(res.rom, structure.eps)
        res.n_sn = len(pts)
        gc = frc.governing_cusp(res.rom, structure.eps, pts)
        if gc is not None:
            res.sn, res.cusp = gc
    if linear:
        res.c_lin = sens.linear_objective(model, res.omega1, structure.eps)
    return res


def gradients(structure: Structure, pipeline: DensityPipeline, res: AnalysisResult, *,
              linear: bool = False) -> sens.SensitivityBundle:
    """Design-variable gradients of every quantity available in ``res``."""
    model, modal, field = res.model, res.modal, res.field
    k, j = modal.master, res.other
    d_om1 = sens.d_omega(model, modal.modes[:, k], modal.omegas[k], neighbours=[modal.omegas[j]])
    d_om2 = sens.d_omega(model, modal.modes[:, j], modal.omegas[j], neighbours=[modal.omegas[k]])
    out = sens.SensitivityBundle(
        d_omega1=sens.chain_to_design(d_om1, pipeline, field),
        d_omega2=sens.chain_to_design(d_om2, pipeline, field),
        d_area=res.d_area,
    )
    if res.rom is not None:
        rs = sens.rom_sensitivities(model, res.rom)
        out.d_lam = sens.chain_to_design(rs.d_lam, pipeline, field)
        out.d_gamma = sens.chain_to_design(rs.d_gamma, pipeline, field)
        out.d_ftilde = sens.chain_to_design(rs.d_ftilde, pipeline, field)
        if res.rho_max is not None:
            drm = sens.d_rho_max(res.rom, structure.eps, res.rho_max, rs.d_lam, rs.d_gamma, rs.d_ftilde)
            out.d_rho_max = sens.chain_to_design(drm, pipeline, field)
        if res.cusp is not None:
            db = sens.d_b(res.sn, res.cusp, res.rom, structure.eps, rs.d_lam, rs.d_gamma, rs.d_ftilde)
            out.d_b = sens.chain_to_design(db, pipeline, field)
        elif res.rom is not None:
            out.d_b = np.zeros(pipeline.n_design)
    if linear:
        om = modal.omega
        _, dcl = sens.d_linear_objective(model, om, structure.eps, d_Omega=d_om1)
        out.d_c_lin = sens.chain_to_design(dcl, pipeline, field)
    return out
