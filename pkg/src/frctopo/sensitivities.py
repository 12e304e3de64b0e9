"""Derivatives of modal, ROM and FRC quantities with respect to element weights.

All ``d_*`` functions return one entry per element of the assembled model,
i.e. derivatives with respect to the physical densities ``mu_hat``.  Mass,
stiffness and both nonlinear tensors are linear in each weight, so the
element contributions are the unit element operators contracted with the
current fields.  ``alpha`` and ``beta`` are held fixed; the damping ratio
follows ``omega``.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import frc
from .density import DensityPipeline, DesignField
from .modal import ModalData
from .ssm import RomCoefficients

log = logging.getLogger(__name__)


class SensitivityError(RuntimeError):
    pass


class AtCuspError(SensitivityError):
    """The saddle-node derivative formulas degenerate (coalescing points or fold at the peak)."""


def _edot(es, y, ve) -> np.ndarray:
    """Per-element ``y_e . v_e`` for element vectors ``ve`` (no conjugation)."""
    return np.einsum("ed,ed->e", es.gather(y), ve)


# --- eigenvalues ---------------------------------------------------------------------------

def d_omega(model, phi: np.ndarray, omega: float, neighbours=()) -> np.ndarray:
    """``d omega / d mu_e = phi^T (K_e - omega^2 M_e) phi / (2 omega)``."""
    for other in neighbours:
        if abs(other - omega) < 1e-6 * omega:
            log.warning("repeated eigenvalue near %.6g: frequency derivative is not defined", omega)
    es = model.elements
    return (es.quad_elements("K", phi, phi) - omega**2 * es.quad_elements("M", phi, phi)) / (2 * omega)


def d_xi(omega: float, d_om, alpha: float, beta: float):
    return 0.5 * (beta - alpha / omega**2) * np.asarray(d_om)


def d_lambda(omega: float, d_om, xi: float, lam: complex, alpha: float, beta: float):
    """``lam' = -(xi' omega lam + (xi lam + omega) omega') / (lam + xi omega)``."""
    d_om = np.asarray(d_om)
    dxi = d_xi(omega, d_om, alpha, beta)
    return -(dxi * omega * lam + (xi * lam + omega) * d_om) / (lam + xi * omega)


def _lambda_omega_derivs(omega: float, alpha: float, beta: float):
    """Derivatives of Re(lam), Im(lam), lam and kappa with respect to omega."""
    r = -0.5 * (alpha + beta * omega**2)
    w = np.sqrt(omega**2 - r**2)
    dr = -beta * omega
    dw = (omega - r * dr) / w
    dkappa = 1j * dw / (2 * w**2)
    return r, w, dr, dw, complex(dr, dw), dkappa


# --- bordered eigen system -------------------------------------------------------------------

class BorderedEigenSystem:
    """LU of ``[[K - w^2 M, M phi], [phi^T M, 0]]``, used to eliminate ``d phi``.

    For any coefficient vector ``a`` the contraction ``a . d phi`` equals
    ``-eta^T (K_e - w^2 M_e) phi - 0.5 nu phi^T M_e phi`` per element, where
    ``(eta, nu)`` solves the bordered system with right side ``(a, 0)``.
    """

    def __init__(self, model, phi: np.ndarray, omega: float):
        n = model.n
        Mphi = model.M @ phi
        A = sp.bmat(
            [[(model.K - omega**2 * model.M), sp.csc_matrix(Mphi[:, None])], [sp.csr_matrix(Mphi[None, :]), None]],
            format="csc",
        )
        self.phi, self.omega, self.n = phi, omega, n
        self._lu = spla.splu(A)
        piv = np.abs(self._lu.U.diagonal())
        if piv.min() < 1e-13 * piv.max():
            raise SensitivityError("bordered eigen system singular (repeated eigenvalue?)")
        self.n_solves = 0
        es = model.elements
        self._es = es
        self._phiMphi = es.quad_elements("M", phi, phi)

    def solve(self, a: np.ndarray) -> tuple[np.ndarray, complex]:
        rhs = np.concatenate([a, [0.0]])
        self.n_solves += 1
        if np.iscomplexobj(rhs):
            x = self._lu.solve(np.ascontiguousarray(rhs.real)) + 1j * self._lu.solve(np.ascontiguousarray(rhs.imag))
        else:
            x = self._lu.solve(rhs)
        return x[:-1], x[-1]

    def contract(self, a: np.ndarray) -> np.ndarray:
        """Per-element ``a . d phi / d mu_e``."""
        eta, nu = self.solve(a)
        es, phi, w2 = self._es, self.phi, self.omega**2
        return -(es.quad_elements("K", eta, phi) - w2 * es.quad_elements("M", eta, phi)) - 0.5 * nu * self._phiMphi


# --- ROM coefficients ----------------------------------------------------------------------

@dataclasses.dataclass
class RomSensitivities:
    d_omega: np.ndarray
    d_lam: np.ndarray
    d_gamma: np.ndarray
    d_ftilde: np.ndarray
    n_solves: int


def adjoint_gamma(model, rom: RomCoefficients, bordered: BorderedEigenSystem | None = None,
                  d_om: np.ndarray | None = None) -> np.ndarray:
    """``d gamma / d mu_e`` for every element at the cost of three extra solves.

    Two transposed cohomological solves give the multipliers of the W20 and
    W11 equations; one bordered solve removes the mode-shape variation.
    """
    es = model.elements
    phi, W20, W11, kappa, c = rom.phi, rom.W20, rom.W11, rom.kappa, rom.w11_factor
    omega, lam = rom.omega, rom.lam
    alpha, beta = model.alpha, model.beta
    r, w, dr, dw, dlam_dw, dkappa = _lambda_omega_derivs(omega, alpha, beta)
    if bordered is None:
        bordered = BorderedEigenSystem(model, phi, omega)
    if d_om is None:
        d_om = d_omega(model, phi, omega)

    g = model.f2_adjoint(phi, phi)  # v.x = phi.F2(phi, x)
    l20 = rom.solvers["W20"].solve(2 * kappa * g, trans="T")
    l11 = rom.solvers["W11"].solve(2 * kappa * g, trans="T")
    l2 = l20 + c * l11

    # explicit dependence through the element operators
    ex = -kappa * _edot(es, phi, 2 * es.f2_elements(phi, W20 + W11) + 3 * es.f3_elements(phi, phi, phi))
    a20, b20 = 4 * lam**2 + 2 * lam * alpha, 2 * lam * beta + 1
    a11, b11 = 4 * r**2 + 2 * r * alpha, 2 * r * beta + 1
    ex += a20 * es.quad_elements("M", l20, W20) + b20 * es.quad_elements("K", l20, W20)
    ex += a11 * es.quad_elements("M", l11, W11) + b11 * es.quad_elements("K", l11, W11)
    ex += _edot(es, l2, es.f2_elements(phi, phi))

    # coefficient of d phi
    a = (
        -kappa * rom.f21
        - 2 * kappa * model.f2_adjoint(phi, W20 + W11)
        - 9 * kappa * model.f3_adjoint(phi, phi, phi)
        + 2 * model.f2_adjoint(l2, phi)
    )
    # coefficient of d omega
    MW20, KW20 = model.M @ W20, model.K @ W20
    MW11, KW11 = model.M @ W11, model.K @ W11
    s = -dkappa * (phi @ rom.f21)
    s += dlam_dw * (l20 @ ((8 * lam + 2 * alpha) * MW20 + 2 * beta * KW20))
    s += dr * (l11 @ ((8 * r + 2 * alpha) * MW11 + 2 * beta * KW11))
    return ex + bordered.contract(a) + s * d_om


def adjoint_ftilde(model, rom: RomCoefficients, bordered: BorderedEigenSystem | None = None,
                   d_om: np.ndarray | None = None) -> np.ndarray:
    """``d f~ / d mu_e`` with ``f~ = 0.5 kappa phi^T f_ext`` (one bordered solve)."""
    f = np.asarray(model.f_ext, dtype=float)
    if not np.any(f):
        return np.zeros(model.elements.n_elements, dtype=complex)
    phi, omega = rom.phi, rom.omega
    *_, dkappa = _lambda_omega_derivs(omega, model.alpha, model.beta)
    if bordered is None:
        bordered = BorderedEigenSystem(model, phi, omega)
    if d_om is None:
        d_om = d_omega(model, phi, omega)
    return bordered.contract(0.5 * rom.kappa * f.astype(complex)) + 0.5 * dkappa * (phi @ f) * d_om


def rom_sensitivities(model, rom: RomCoefficients) -> RomSensitivities:
    """Derivatives of omega, lam, gamma and f~ sharing one bordered factorization."""
    before = sum(s.n_solves for s in rom.solvers.values())
    bordered = BorderedEigenSystem(model, rom.phi, rom.omega)
    d_om = d_omega(model, rom.phi, rom.omega)
    dlam = d_lambda(rom.omega, d_om, rom.xi, rom.lam, model.alpha, model.beta)
    dg = adjoint_gamma(model, rom, bordered, d_om)
    df = adjoint_ftilde(model, rom, bordered, d_om)
    after = sum(s.n_solves for s in rom.solvers.values())
    return RomSensitivities(d_om, dlam, dg, df, after - before + bordered.n_solves)


# --- FRC quantities ------------------------------------------------------------------------

def d_abs_ftilde(ftilde: complex, dftilde):
    return np.real(np.conj(ftilde) * np.asarray(dftilde)) / abs(ftilde)


def d_rho_max(rom, eps: float, rho_max: float, dlam, dgamma, dftilde):
    """Derivative of the peak amplitude from the implicit peak equation."""
    a, b = rom.lam.real, rom.gamma.real
    den = a + 3 * b * rho_max**2
    if abs(den) < 1e-12 * abs(a):
        raise SensitivityError("peak amplitude sits on a fold of the peak equation")
    num = eps * d_abs_ftilde(rom.ftilde, dftilde) * np.sign(a) - np.real(dlam) * rho_max - np.real(dgamma) * rho_max**3
    return num / den


def _sn_partials(rho, Om, a, w, b, d):
    """Partials of A, B1, B2 in (rho, Omega) at a saddle-node point."""
    c = w - Om + d * rho**2
    dA_dO = np.array([[0.0, rho], [-1 / rho, 0.0]])
    dA_dr = np.array([[6 * b * rho, -(w - Om) - 3 * d * rho**2], [3 * d - (w - Om) / rho**2, 2 * b * rho]])
    dB1_dr = np.array([[6 * b, 0.0], [0.0, a + 3 * b * rho**2]])
    dB2_dO = np.array([[2 / rho**2, 0.0], [0.0, -1.0]])
    off = a / rho**2 - b
    dB2_dr = np.array([[4 * (w - Om) / rho**3, off], [off, 2 * d * rho]])
    return c, dA_dO, dA_dr, dB1_dr, dB2_dO, dB2_dr


def _sn_param_partials(rho, da, dw, db, dd):
    """Partials of A, B1, B2 with respect to the reduced coefficients (one direction)."""
    dA = np.array([
        [da + 3 * db * rho**2, -(dw + dd * rho**2) * rho],
        [2 * dd * rho + (dw + dd * rho**2) / rho, da + db * rho**2],
    ])
    dB1 = np.array([[6 * db * rho, 0.0], [0.0, da * rho + db * rho**3]])
    off = -(da + db * rho**2) / rho
    dB2 = np.array([[2 * dd - 2 * (dw + dd * rho**2) / rho**2, off], [off, dw + dd * rho**2]])
    return dA, dB1, dB2


def sn_point_derivative(sn: frc.SnPoint, rom, eps: float, da, dw, db, dd, dF):
    """``(rho_SN', Omega_SN')`` for one direction of the reduced coefficients.

    ``dF`` is the derivative of ``eps |f~|``.
    """
    a, w, b, d = rom.lam.real, rom.lam.imag, rom.gamma.real, rom.gamma.imag
    rho, Om = sn.rho, sn.Omega
    F = eps * abs(rom.ftilde)
    E, dE = F**2, 2 * F * dF
    P = a * rho + b * rho**3
    Q = E + 2 * a * b * rho**4 + 2 * b**2 * rho**6
    c1 = (
        8 * d * dd * rho**6 * (E - P**2)
        + 4 * d**2 * rho**6 * (dE - 2 * P * (da * rho + db * rho**3))
        - 2 * Q * (dE + 2 * da * b * rho**4 + 2 * a * db * rho**4 + 4 * b * db * rho**6)
    )
    c2 = (
        2 * Q * (8 * a * b * rho**3 + 12 * b**2 * rho**5)
        + 24 * d**2 * rho**5 * (P**2 - E)
        + 8 * d**2 * P * (a + 3 * b * rho**2) * rho**6
    )
    scale = abs(2 * Q * (8 * a * b * rho**3)) + abs(2 * Q * 12 * b**2 * rho**5) + 24 * d**2 * rho**5 * (P**2 + E) \
        + abs(8 * d**2 * P * (a + 3 * b * rho**2) * rho**6)
    if abs(c2) <= 1e-10 * scale:
        raise AtCuspError("saddle-node points coalesce (c2 = 0): at cusp")
    drho = c1 / c2
    c3 = dw + dd * rho**2 + 2 * d * rho * drho
    c = w - Om + d * rho**2
    c4 = dE - 2 * P * (da * rho + a * drho + db * rho**3 + 3 * b * rho**2 * drho) - 2 * c**2 * rho * drho
    c5 = 2 * c * rho**2
    if abs(c5) <= 1e-12 * (abs(w) + abs(Om)) * rho**2:
        raise AtCuspError("saddle-node point coincides with the peak (c5 = 0)")
    return drho, c3 - c4 / c5


def cusp_derivative(sn: frc.SnPoint, cusp: frc.CuspData, rom, eps: float, da, dw, db, dd, dF) -> float:
    """Directional derivative of the cusp coefficient ``b`` at a saddle-node point."""
    a, w, b, d = rom.lam.real, rom.lam.imag, rom.gamma.real, rom.gamma.imag
    rho, Om = sn.rho, sn.Omega
    drho, dOm = sn_point_derivative(sn, rom, eps, da, dw, db, dd, dF)
    _, dA_dO, dA_dr, dB1_dr, dB2_dO, dB2_dr = _sn_partials(rho, Om, a, w, b, d)
    pA, pB1, pB2 = _sn_param_partials(rho, da, dw, db, dd)
    Ad = pA + dA_dO * dOm + dA_dr * drho
    B1d = pB1 + dB1_dr * drho
    B2d = pB2 + dB2_dO * dOm + dB2_dr * drho
    A, phi, psi, B1, B2 = cusp.A, cusp.phi, cusp.psi, cusp.B1, cusp.B2

    def bordered(Mat, rhs, last):
        S = np.zeros((3, 3))
        S[:2, :2] = Mat
        S[:2, 2] = psi
        S[2, :2] = psi
        if abs(np.linalg.det(S)) < 1e-14 * max(1.0, np.abs(S).max()) ** 3:
            raise SensitivityError("singular bordered system for the null-vector derivative")
        return np.linalg.solve(S, np.concatenate([rhs, [last]]))[:2]

    dpsi = bordered(A.T, -Ad.T @ psi, 0.0)
    dphi = bordered(A, -Ad @ phi, -phi @ dpsi)
    Bpp = np.array([phi @ B1 @ phi, phi @ B2 @ phi])
    Bd = np.array([phi @ B1d @ phi, phi @ B2d @ phi])
    Bpd = np.array([phi @ B1 @ dphi, phi @ B2 @ dphi])
    return float(dpsi @ Bpp + psi @ Bd + 2 * psi @ Bpd)


def cusp_gradient(sn, cusp, rom, eps: float) -> np.ndarray:
    """Gradient of ``b`` with respect to (Re lam, Im lam, Re gamma, Im gamma, eps |f~|)."""
    eye = np.eye(5)
    return np.array([cusp_derivative(sn, cusp, rom, eps, *eye[k]) for k in range(5)])


def d_b(sn, cusp, rom, eps: float, dlam, dgamma, dftilde) -> np.ndarray:
    g = cusp_gradient(sn, cusp, rom, eps)
    dF = eps * d_abs_ftilde(rom.ftilde, dftilde)
    return g[0] * np.real(dlam) + g[1] * np.imag(dlam) + g[2] * np.real(dgamma) + g[3] * np.imag(dgamma) + g[4] * dF


# --- linear harmonic response --------------------------------------------------------------

def harmonic_response(model, Omega: float, eps: float = 1.0):
    D = (model.K + 1j * Omega * model.C - Omega**2 * model.M).tocsc()
    lu = spla.splu(D)
    piv = np.abs(lu.U.diagonal())
    if piv.min() < 1e-14 * piv.max():
        raise SensitivityError("dynamic stiffness singular at the evaluation frequency")
    return lu.solve(eps * np.asarray(model.f_ext, dtype=complex)), lu


def linear_objective(model, Omega: float, eps: float = 1.0) -> float:
    U, _ = harmonic_response(model, Omega, eps)
    return float(np.sum(np.abs(U[model.output_dofs]) ** 2))


def d_linear_objective(model, Omega: float, eps: float = 1.0, d_Omega=None) -> tuple[float, np.ndarray]:
    """``c_lin = |U|^T L |U|`` and its element derivatives via one adjoint solve.

    ``d_Omega`` (per element) adds the dependence through the excitation
    frequency when ``Omega`` tracks a natural frequency.
    """
    U, lu = harmonic_response(model, Omega, eps)
    out = model.output_dofs
    rhs = np.zeros(model.n, dtype=complex)
    rhs[out] = np.conj(U[out])
    y = lu.solve(rhs, trans="T")
    es = model.elements
    kM = 1j * Omega * model.alpha - Omega**2
    kK = 1 + 1j * Omega * model.beta
    dD_U = kM * es.quad_elements("M", y, U) + kK * es.quad_elements("K", y, U)
    grad = -2 * np.real(dD_U)
    if d_Omega is not None:
        dD = 1j * (model.C @ U) - 2 * Omega * (model.M @ U)
        grad = grad - 2 * np.real(y @ dD) * np.asarray(d_Omega)
    return float(np.sum(np.abs(U[out]) ** 2)), grad


# --- chain rule ------------------------------------------------------------------------------

@dataclasses.dataclass
class SensitivityBundle:
    """Derivatives with respect to the design variables (design elements only)."""

    d_omega1: np.ndarray
    d_omega2: np.ndarray | None = None
    d_lam: np.ndarray | None = None
    d_gamma: np.ndarray | None = None
    d_ftilde: np.ndarray | None = None
    d_rho_max: np.ndarray | None = None
    d_b: np.ndarray | None = None
    d_area: np.ndarray | None = None
    d_c_lin: np.ndarray | None = None


def chain_to_design(d_phys, pipeline: DensityPipeline, field: DesignField):
    """Back-propagate a per-element (real or complex) derivative to the design variables."""
    if d_phys is None:
        return None
    d_phys = np.asarray(d_phys)
    if np.iscomplexobj(d_phys):
        return pipeline.backprop(d_phys.real, field) + 1j * pipeline.backprop(d_phys.imag, field)
    return pipeline.backprop(d_phys, field)


def abs_b_gradient(b: float, db):
    """Gradient of ``|b|``; zero at ``b = 0``."""
    return np.sign(b) * np.asarray(db)


# --- finite-difference report ----------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class GradientCheck:
    quantity: str
    element: int
    analytic: float
    fd: float

    @property
    def rel_error(self) -> float:
        return abs(self.analytic - self.fd) / max(abs(self.fd), abs(self.analytic), 1e-300)


def central_difference(fn, x: np.ndarray, index: int, step: float, order: int = 2):
    """Central difference of a dict-valued ``fn`` along ``x[index]`` (order 2 or 4)."""
    def at(k):
        xx = x.copy()
        xx[index] += k * step
        return fn(xx)

    fp, fm = at(1), at(-1)
    if order == 2:
        return {k: (fp[k] - fm[k]) / (2 * step) for k in fp}
    if order != 4:
        raise ValueError("order must be 2 or 4")
    fpp, fmm = at(2), at(-2)
    return {k: (8 * (fp[k] - fm[k]) - (fpp[k] - fmm[k])) / (12 * step) for k in fp if k in fpp and k in fmm}


def _scalar_quantities(res, structure) -> dict:
    q = {"omega1": res.omega1, "omega2": res.omega2, "area": res.area}
    if res.rom is not None:
        q.update(
            lam_re=res.rom.lam.real, lam_im=res.rom.lam.imag,
            gamma_re=res.rom.gamma.real, gamma_im=res.rom.gamma.imag,
            ftilde_re=res.rom.ftilde.real, ftilde_im=res.rom.ftilde.imag,
        )
    if res.rho_max is not None:
        q["rho_max"] = res.rho_max
    if res.cusp is not None:
        q["b"] = res.b
    if res.c_lin is not None:
        q["c_lin"] = res.c_lin
    return q


def _bundle_quantities(g: SensitivityBundle) -> dict:
    q = {"omega1": g.d_omega1, "omega2": g.d_omega2, "area": g.d_area}
    for name, arr in (("lam", g.d_lam), ("gamma", g.d_gamma), ("ftilde", g.d_ftilde)):
        if arr is not None:
            q[name + "_re"], q[name + "_im"] = arr.real, arr.imag
    for name, arr in (("rho_max", g.d_rho_max), ("b", g.d_b), ("c_lin", g.d_c_lin)):
        if arr is not None:
            q[name] = arr
    return q


def check_gradients(structure, pipeline, x: np.ndarray, indices, step: float = 5e-3, cusp: bool = True,
                    linear: bool = True) -> list[GradientCheck]:
    """Compare analytic design gradients with fourth-order central differences.

    ``step`` is absolute in the design variable.  The five-point stencil keeps
    truncation error near ``step^4`` so that eigen-solver round-off, not the
    stencil, sets the floor.
    """
    from .analysis import analyze, gradients

    x = np.asarray(x, dtype=float)
    res = analyze(structure, pipeline, x, cusp=cusp, linear=linear)
    base = _scalar_quantities(res, structure)
    grads = _bundle_quantities(gradients(structure, pipeline, res, linear=linear))
    prev = res.modal.phi

    def fn(xx):
        r = analyze(structure, pipeline, xx, cusp=cusp, linear=linear, prev_phi=prev)
        return _scalar_quantities(r, structure)

    out = []
    for i in indices:
        fd = central_difference(fn, x, int(i), step, order=4)
        for k in base:
            if k in fd and k in grads:
                out.append(GradientCheck(k, int(i), float(grads[k][i]), float(fd[k])))
    pipeline.forward(x)
    return out
