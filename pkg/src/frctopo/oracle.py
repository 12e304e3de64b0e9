"""Brute-force reference computations for the ROM, the full model and the cusp.

Nothing here reuses the polynomial root finders of :mod:`frctopo.frc`; the
steady states come from time integration and the cusp from counting.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np
import scipy.linalg as sla

from . import frc

log = logging.getLogger(__name__)

FULL_LIMIT = 200
DENSE_TENSOR_LIMIT = 40


class OracleError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class RomSteady:
    rho: float
    theta: float
    converged: bool
    time: float


def _rom_rhs(q, lam, gamma, Omega, force):
    # rotating frame q = p exp(-i W t): the forced polar ROM becomes autonomous
    return (lam - 1j * Omega) * q + gamma * abs(q) ** 2 * q + force


def integrate_rom(rom, eps: float, Omega: float, rho0: float, theta0: float = 0.0, T: float | None = None,
                  tol: float = 1e-10) -> RomSteady:
    """RK4 integration of the reduced dynamics until ``rho`` stops changing.

    Convergence is tested once per forcing period (or per ten steps when the
    step exceeds the period): ``|d rho| < tol max(1, rho)``.
    """
    lam, gamma = complex(rom.lam), complex(rom.gamma)
    force = eps * complex(rom.ftilde)
    if not lam.real < 0:
        raise OracleError("integrate_rom needs Re(lam) < 0")
    T = 50.0 / abs(lam.real) if T is None else T
    q = rho0 * np.exp(1j * theta0)
    period = 2 * np.pi / Omega
    t = 0.0
    while t < T:
        rate = abs(lam - 1j * Omega) + 3 * abs(gamma) * max(abs(q), rho0) ** 2 + abs(lam.real)
        h = min(0.05 / rate, period)
        n = max(1, int(np.ceil(max(period, 10 * h) / h)))
        r_old = abs(q)
        for _ in range(n):
            k1 = _rom_rhs(q, lam, gamma, Omega, force)
            k2 = _rom_rhs(q + 0.5 * h * k1, lam, gamma, Omega, force)
            k3 = _rom_rhs(q + 0.5 * h * k2, lam, gamma, Omega, force)
            k4 = _rom_rhs(q + h * k3, lam, gamma, Omega, force)
            q = q + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += n * h
        if not np.isfinite(q):
            raise OracleError("reduced dynamics diverged")
        if abs(abs(q) - r_old) < tol * max(1.0, abs(q)):
            return RomSteady(abs(q), float(np.angle(q)), True, t)
    log.warning("integrate_rom: no steady state after t = %.3g (Omega = %.6g)", t, Omega)
    return RomSteady(abs(q), float(np.angle(q)), False, t)


@dataclasses.dataclass(frozen=True)
class FullSteady:
    amplitude: np.ndarray  # max |x| over the last period at each output dof
    converged: bool
    periods: int


def _dense(A):
    return A.toarray() if hasattr(A, "toarray") else np.asarray(A, dtype=float)


def _dense_tensors(model):
    """Assembled dense F2 (n,n,n) and F3 (n,n,n,n) for small models."""
    es, n = model.elements, model.n
    F2 = np.zeros((n + 1,) * 3)
    F3 = np.zeros((n + 1,) * 4)
    for e in range(es.n_elements):
        d = es._pad[e]
        t = es.etype[e]
        w = model.weights[e]
        F2[np.ix_(d, d, d)] += w * es.F2e[t]
        F3[np.ix_(d, d, d, d)] += w * es.F3e[t]
    return F2[:n, :n, :n], F3[:n, :n, :n, :n]


def _force_kernels(model, K):
    """Internal force and tangent callables; dense tensors when cheap enough."""
    if model.n <= DENSE_TENSOR_LIMIT:
        F2, F3 = _dense_tensors(model)

        def fint(x):
            F2x = F2 @ x
            F3xx = (F3 @ x) @ x
            return K @ x + F2x @ x + F3xx @ x, K + 2 * F2x + 3 * F3xx

        return fint
    return lambda x: (model.internal_force(x), _dense(model.tangent(x)))


def integrate_full(model, eps: float, Omega: float, T: float | None = None, steps_per_period: int = 400,
                   tol: float = 1e-6, min_periods: int = 5, newton_tol: float = 1e-10,
                   from_linear: bool = True) -> FullSteady:
    """Average-acceleration Newmark integration of the full nonlinear model.

    Starts from the linear harmonic response (or rest) and stops when the
    per-period output amplitude changes by less than ``tol`` relative.
    """
    n = model.n
    if n > FULL_LIMIT:
        raise OracleError(f"integrate_full is limited to n <= {FULL_LIMIT} (got {n})")
    M, K = _dense(model.M), _dense(model.K)
    C = model.alpha * M + model.beta * K
    f = eps * np.asarray(model.f_ext, dtype=float)
    out = np.asarray(model.output_dofs)
    period = 2 * np.pi / Omega
    h = period / steps_per_period
    if T is None:
        w_min = np.sqrt(max(sla.eigh(K, M, eigvals_only=True, subset_by_index=[0, 0])[0], 1e-300))
        xi_min = 0.5 * (model.alpha / w_min + model.beta * w_min)
        T = max(20.0 / max(xi_min * w_min, 1e-300), 50 * period)

    if from_linear:
        U = np.linalg.solve(K + 1j * Omega * C - Omega**2 * M, f)
        x, v = U.real.copy(), (1j * Omega * U).real.copy()
    else:
        x, v = np.zeros(n), np.zeros(n)
    fint = _force_kernels(model, K)
    a = np.linalg.solve(M, f - C @ v - fint(x)[0])
    c0, c1 = 4 / h**2, 2 / h

    t = 0.0
    prev_amp = None
    periods = 0
    while t < T:
        amp = np.zeros(out.size)
        for _ in range(steps_per_period):
            t += h
            ft = f * np.cos(Omega * t)
            xn = x + h * v + 0.25 * h**2 * a  # predictor
            for it in range(30):
                an = c0 * (xn - x) - 4 / h * v - a
                vn = v + 0.5 * h * (a + an)
                g, Kt = fint(xn)
                r = M @ an + C @ vn + g - ft
                J = c0 * M + c1 * C + Kt
                dx = np.linalg.solve(J, -r)
                xn = xn + dx
                if np.linalg.norm(dx) <= newton_tol * max(1.0, np.linalg.norm(xn)):
                    break
            else:
                raise OracleError(f"Newton failed at t = {t:.4g}")
            a_new = c0 * (xn - x) - 4 / h * v - a
            v = v + 0.5 * h * (a + a_new)
            x, a = xn, a_new
            amp = np.maximum(amp, np.abs(x[out]))
        periods += 1
        if not np.all(np.isfinite(amp)):
            raise OracleError("full integration diverged")
        if (prev_amp is not None and periods >= min_periods
                and np.max(np.abs(amp - prev_amp)) <= tol * max(np.max(amp), 1e-300)):
            return FullSteady(amp, True, periods)
        prev_amp = amp
    log.warning("integrate_full: not steady after %d periods", periods)
    return FullSteady(amp, False, periods)


@dataclasses.dataclass(frozen=True)
class CuspLocation:
    eps: float
    points: list
    b: float


def sn_count(rom, eps: float) -> int:
    """SN points counted from a dense FRC sweep (no use of the SN polynomial)."""
    a, w, b, d = rom.lam.real, rom.lam.imag, rom.gamma.real, rom.gamma.imag
    E = (eps * abs(rom.ftilde)) ** 2
    # fold points are where the number of real roots of the cubic in rho^2 changes
    rho_lin = np.sqrt(E) / abs(a)
    span = abs(d) * rho_lin**2 + 10 * abs(a)
    Om = np.linspace(w - span, w + span + abs(d) * rho_lin**2, 4001)
    counts = np.array([len(frc._real_roots([b**2 + d**2, 2 * (a * b + (w - o) * d), a**2 + (w - o) ** 2, -E]))
                       for o in Om])
    return int(np.count_nonzero(np.diff(counts)))


def locate_cusp(rom, eps_lo: float, eps_hi: float, rtol: float = 1e-12, count=None) -> CuspLocation:
    """Bisection in ``eps`` on the number of SN points (0 below, 2 above the cusp).

    ``count`` maps ``eps`` to a point count; the default uses the SN solver so
    that the returned points are the near-coalesced pair.
    """
    count = count or (lambda e: len(frc.sn_points(rom, e)))
    lo, hi = float(eps_lo), float(eps_hi)
    if not 0 < lo < hi:
        raise ValueError("need 0 < eps_lo < eps_hi")
    if count(lo) != 0 or count(hi) != 2:
        raise ValueError(f"invalid bracket: SN counts {count(lo)} at {lo:g} and {count(hi)} at {hi:g}")
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if count(mid) == 0:
            lo = mid
        else:
            hi = mid
    pts = frc.sn_points(rom, hi)
    bs = [abs(frc.cusp_coefficient(p, rom).b) for p in pts]
    return CuspLocation(hi, pts, float(max(bs)) if bs else 0.0)


def duffing_cusp_eps(rom) -> float:
    """Closed-form fold onset for ``Re(gamma) = 0``: triple root of the amplitude cubic."""
    a, d = abs(rom.lam.real), abs(rom.gamma.imag)
    return float(np.sqrt(8 * a**3 / (3 * np.sqrt(3) * d)) / abs(rom.ftilde))
