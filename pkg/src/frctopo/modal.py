"""Undamped modes, Rayleigh damping and the master eigenvalue."""

from __future__ import annotations

import dataclasses
import logging

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

DENSE_LIMIT = 2000


class EigenSolverError(RuntimeError):
    pass


class OverdampedError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class ModalData:
    omegas: np.ndarray
    modes: np.ndarray
    alpha: float
    beta: float
    master: int = 0

    @property
    def omega(self) -> float:
        return float(self.omegas[self.master])

    @property
    def phi(self) -> np.ndarray:
        return self.modes[:, self.master]

    @property
    def xi(self) -> float:
        return damping_ratio(self.omega, self.alpha, self.beta)

    @property
    def lam(self) -> complex:
        return master_eigenvalue(self.omega, self.xi)


def _fix_signs(V: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(V), axis=0)
    s = np.sign(V[idx, np.arange(V.shape[1])])
    s[s == 0] = 1.0
    return V * s


def solve_modes(M, K, count: int = 2, tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """Lowest ``count`` circular frequencies and mass-normalized modes.

    Dense LAPACK below ``DENSE_LIMIT`` dofs, sparse shift-invert Lanczos
    about zero otherwise.  Each mode's largest-magnitude entry is positive.
    """
    n = M.shape[0]
    count = min(count, n)
    if n <= DENSE_LIMIT:
        Md = M.toarray() if sp.issparse(M) else np.asarray(M, dtype=float)
        Kd = K.toarray() if sp.issparse(K) else np.asarray(K, dtype=float)
        w2, V = sla.eigh(Kd, Md, subset_by_index=[0, count - 1])
    else:
        ncv = min(n - 1, max(2 * count + 1, 20))
        try:
            w2, V = spla.eigsh(K, k=count, M=M, sigma=0.0, which="LM", ncv=ncv, tol=1e-12)
        except spla.ArpackNoConvergence as exc:
            raise EigenSolverError(f"shift-invert Lanczos did not converge: {exc}") from exc
        order = np.argsort(w2)
        w2, V = w2[order], V[:, order]
    if np.any(w2 <= 0):
        raise EigenSolverError("non-positive eigenvalue: stiffness matrix not positive definite")
    w2, V = _refine(M, K, w2, V)
    V = V / np.sqrt(np.einsum("ij,ij->j", V, M @ V))
    V = _fix_signs(V)
    omegas = np.sqrt(w2)
    # normwise backward error; relative to ||K v|| it overstates roundoff on high-contrast layouts
    k1 = spla.norm(K, 1) if sp.issparse(K) else np.linalg.norm(K, 1)
    m1 = spla.norm(M, 1) if sp.issparse(M) else np.linalg.norm(M, 1)
    res = np.linalg.norm(K @ V - (M @ V) * w2, axis=0) / ((k1 + w2 * m1) * np.linalg.norm(V, axis=0))
    if np.any(res > tol):
        raise EigenSolverError(f"eigen residuals {res} exceed {tol}")
    return omegas, V


def _refine(M, K, w2, V):
    """One shifted inverse-iteration step per mode, then Rayleigh quotients.

    Brings eigenvalues close to working precision, which finite-difference
    checks of frequency derivatives depend on.
    """
    Ms = sp.csc_matrix(M)
    Ks = sp.csc_matrix(K)
    V = V.copy()
    w2 = w2.copy()
    for j in range(V.shape[1]):
        shift = w2[j] * (1 - 1e-8)
        try:
            x = spla.splu((Ks - shift * Ms).tocsc()).solve(Ms @ V[:, j])
        except RuntimeError:
            continue
        x /= np.linalg.norm(x)
        w2[j] = (x @ (Ks @ x)) / (x @ (Ms @ x))
        V[:, j] = x
    return w2, V


def rayleigh_constants(omega1: float, omega2: float, xi0: float) -> tuple[float, float]:
    """Mass and stiffness coefficients giving ratio ``xi0`` at both frequencies."""
    if not omega1 < omega2:
        raise ValueError("need omega1 < omega2")
    if not 0 < xi0 < 1:
        raise ValueError("damping ratio must lie in (0, 1)")
    return xi0 * 2 * omega1 * omega2 / (omega1 + omega2), xi0 * 2 / (omega1 + omega2)


def damping_ratio(omega: float, alpha: float, beta: float) -> float:
    return 0.5 * (alpha / omega + beta * omega)


def master_eigenvalue(omega: float, xi: float) -> complex:
    if xi >= 1:
        raise OverdampedError(f"damping ratio {xi} >= 1: master pair not oscillatory")
    return complex(-xi * omega, omega * np.sqrt(1 - xi**2))


def track_master_mode(prev_phi, modes: np.ndarray, M, default: int = 0, threshold: float = 0.5) -> int:
    """Index of the current mode that best matches ``prev_phi`` in the M-inner product."""
    if prev_phi is None:
        return default
    mac = np.abs(prev_phi @ (M @ modes))
    k = int(np.argmax(mac))
    if mac[k] < threshold:
        log.warning("master mode lost (best MAC %.3f); falling back to the lowest mode", mac[k])
        return default
    return k


def modal_analysis(model, count: int = 2, prev_phi=None) -> ModalData:
    omegas, V = solve_modes(model.M, model.K, count)
    k = track_master_mode(prev_phi, V, model.M)
    return ModalData(omegas, V, model.alpha, model.beta, master=k)
