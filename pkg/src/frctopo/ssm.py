"""Cubic-order reduction on the spectral submanifold of the master mode pair.

The autonomous parameterization is ``x = phi (p + conj p) + W20 p^2 +
W11 p conj(p) + conj(W20) conj(p)^2 + O(3)`` and the reduced dynamics in
normal form read ``dp/dt = lam p + gamma p^2 conj(p) + eps f~ e^{i W t}``.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .modal import ModalData

#: Right-hand-side factor of the W11 equation, ``D11 W11 = -c f2(phi, phi)``.
#: 2 is the coefficient of p conj(p) in f2(x1, x1); 1 is kept for comparison.
W11_FACTOR = 2.0


class InternalResonanceError(RuntimeError):
    """A cohomological operator is (nearly) singular."""


@dataclasses.dataclass(frozen=True)
class ReducedDynamics:
    """The three complex numbers defining the polar reduced dynamics."""

    lam: complex
    gamma: complex
    ftilde: complex


@dataclasses.dataclass(frozen=True)
class RomCoefficients(ReducedDynamics):
    omega: float
    xi: float
    phi: np.ndarray
    psi: np.ndarray
    kappa: complex
    W20: np.ndarray
    W11: np.ndarray
    f21: np.ndarray
    w11_factor: float
    solvers: dict = dataclasses.field(default_factory=dict, repr=False, compare=False)

    @property
    def reduced(self) -> ReducedDynamics:
        return ReducedDynamics(self.lam, self.gamma, self.ftilde)


def left_vector(phi: np.ndarray, omega: float, xi: float) -> tuple[np.ndarray, complex]:
    """Left vector ``psi = kappa phi`` normalized against the first-order pencil."""
    if xi >= 1:
        raise ValueError("left vector undefined for xi >= 1")
    kappa = -1j / (2.0 * omega * np.sqrt(1.0 - xi**2))
    return kappa * np.asarray(phi), kappa


class _Solver:
    """LU of ``a M + b K`` with transpose solves; rejects near-singular systems."""

    def __init__(self, model, a: complex, b: complex, what: str):
        A = (a * model.M + b * model.K).tocsc()
        self.complex = np.iscomplexobj(A.data)
        n = A.shape[0]
        if n <= 200:
            Ad = A.toarray()
            cond = np.linalg.cond(Ad)
            if not np.isfinite(cond) or cond > 1e12:
                raise InternalResonanceError(f"{what} operator near singular (cond {cond:.2e})")
            self._dense = Ad
            self._lu = None
        else:
            self._dense = None
            self._lu = spla.splu(A)
            piv = np.abs(self._lu.U.diagonal())
            if piv.min() < 1e-12 * piv.max():
                raise InternalResonanceError(f"{what} operator near singular (pivot ratio {piv.min() / piv.max():.2e})")
        self.n_solves = 0

    def solve(self, rhs, trans: str = "N") -> np.ndarray:
        self.n_solves += 1
        if self._dense is not None:
            A = self._dense.T if trans == "T" else self._dense
            return np.linalg.solve(A, rhs)
        if not self.complex and np.iscomplexobj(rhs):
            return self._lu.solve(np.ascontiguousarray(rhs.real), trans=trans) + 1j * self._lu.solve(
                np.ascontiguousarray(rhs.imag), trans=trans
            )
        return self._lu.solve(np.asarray(rhs, dtype=complex if self.complex else float), trans=trans)


def _w20_operator(model, lam: complex) -> _Solver:
    return _Solver(model, 4 * lam**2 + 2 * lam * model.alpha, 2 * lam * model.beta + 1, "W20")


def _w11_operator(model, lam: complex) -> _Solver:
    r = lam.real
    return _Solver(model, 4 * r**2 + 2 * r * model.alpha, 2 * r * model.beta + 1, "W11")


def solve_w20(model, phi: np.ndarray, lam: complex, solver: _Solver | None = None) -> np.ndarray:
    """Solve ``(4 lam^2 M + 2 lam C + K) W20 = -f2(phi, phi)``."""
    solver = solver or _w20_operator(model, lam)
    return solver.solve(-model.f2(phi, phi).astype(complex))


def solve_w11(model, phi: np.ndarray, lam: complex, factor: float = W11_FACTOR,
              solver: _Solver | None = None) -> np.ndarray:
    """Solve ``(4 Re(lam)^2 M + 2 Re(lam) C + K) W11 = -factor f2(phi, phi)``."""
    solver = solver or _w11_operator(model, lam)
    return solver.solve(-factor * model.f2(phi, phi))


def f21_vector(model, phi, W20, W11) -> np.ndarray:
    return (
        model.f2(phi, W20) + model.f2(W20, phi) + model.f2(phi, W11) + model.f2(W11, phi)
        + 3.0 * model.f3(phi, phi, phi)
    )


def gamma(psi: np.ndarray, f21: np.ndarray) -> complex:
    return complex(-psi @ f21)


def modal_force(psi: np.ndarray, f_ext: np.ndarray) -> complex:
    return complex(0.5 * psi @ f_ext)


def build_rom(model, modal: ModalData, w11_factor: float = W11_FACTOR) -> RomCoefficients:
    """Assemble all cubic-order coefficients of the master-mode ROM."""
    phi, omega = modal.phi, modal.omega
    xi = modal.xi
    lam = modal.lam
    psi, kappa = left_vector(phi, omega, xi)
    s20 = _w20_operator(model, lam)
    s11 = _w11_operator(model, lam)
    W20 = solve_w20(model, phi, lam, s20)
    W11 = solve_w11(model, phi, lam, w11_factor, s11)
    f21 = f21_vector(model, phi, W20, W11)
    return RomCoefficients(
        lam=lam,
        gamma=gamma(psi, f21),
        ftilde=modal_force(psi, model.f_ext),
        omega=omega,
        xi=xi,
        phi=phi,
        psi=psi,
        kappa=kappa,
        W20=W20,
        W11=W11,
        f21=f21,
        w11_factor=w11_factor,
        solvers={"W20": s20, "W11": s11},
    )


def nonautonomous_x0(model, Omega: float, rom: RomCoefficients) -> np.ndarray:
    """Leading forced coefficient of the periodic SSM with the resonant part removed.

    Solves ``(K + i W C - W^2 M) x0 = f/2 - f~ (C + (lam + i W) M) phi``: the
    resonant share of the forcing is carried by the reduced dynamics.
    """
    f = np.asarray(model.f_ext, dtype=float)
    if not np.any(f):
        return np.zeros(model.n, dtype=complex)
    D = (model.K + 1j * Omega * model.C - Omega**2 * model.M).tocsc()
    phi = rom.phi
    rhs = 0.5 * f - rom.ftilde * (model.C @ phi + (rom.lam + 1j * Omega) * (model.M @ phi))
    if model.n <= 200:
        return np.linalg.solve(D.toarray(), rhs)
    return spla.spsolve(D, rhs)


def reconstruct(rho: float, theta: float, Omega: float, rom: RomCoefficients, x0=None, eps: float = 0.0,
                dofs=None, samples: int = 256) -> np.ndarray:
    """Time-domain peak amplitude ``max_t |x(t)|`` at the selected dofs over one period."""
    dofs = np.arange(rom.phi.size) if dofs is None else np.asarray(dofs)
    t = np.linspace(0.0, 2 * np.pi, samples, endpoint=False)
    ph = np.exp(1j * (theta + t))
    z = 2 * np.real(np.outer(rom.phi[dofs], rho * ph))
    z += 2 * np.real(np.outer(rom.W20[dofs], rho**2 * ph**2))
    z += (2.0 / rom.w11_factor) * np.real(rom.W11[dofs])[:, None] * rho**2
    if x0 is not None and eps:
        z += 2 * np.real(np.outer(eps * x0[dofs], np.exp(1j * t)))
    return np.max(np.abs(z), axis=1)
