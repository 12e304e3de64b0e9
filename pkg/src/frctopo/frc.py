"""Forced response, peak, saddle-node points and cusp coefficient of the polar ROM.

All functions take any object with complex attributes ``lam``, ``gamma`` and
``ftilde`` plus the force scale ``eps``.  Fixed points satisfy

    (Re(lam) rho + Re(gamma) rho^3)^2 + (Im(lam) - W + Im(gamma) rho^2)^2 rho^2 = eps^2 |f~|^2.
"""

from __future__ import annotations

import dataclasses

import numpy as np

IMAG_TOL = 1e-9


class PeakError(RuntimeError):
    pass


class DegenerateSNError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class FrcSample:
    Omega: float
    rho: float
    theta: float
    stable: bool
    physical_amp: np.ndarray | None = None


@dataclasses.dataclass(frozen=True)
class SnPoint:
    rho: float
    Omega: float
    k: float
    branch_sign: int


@dataclasses.dataclass(frozen=True)
class CuspData:
    b: float
    phi: np.ndarray
    psi: np.ndarray
    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray


def _parts(rom):
    return rom.lam.real, rom.lam.imag, rom.gamma.real, rom.gamma.imag


def _real_roots(coeffs, positive=True) -> np.ndarray:
    """Real roots of a polynomial (highest degree first) via companion eigenvalues."""
    c = np.asarray(coeffs, dtype=float)
    nz = np.flatnonzero(np.abs(c) > 0)
    if nz.size == 0:
        return np.zeros(0)
    c = c[nz[0]:]
    if c.size == 1:
        return np.zeros(0)
    r = np.roots(c)
    scale = max(1.0, np.max(np.abs(r)))
    real = r[np.abs(r.imag) <= IMAG_TOL * scale].real
    if positive:
        real = real[real > 0]
    return np.sort(real)


def frc_residual(rho, Omega, rom, eps) -> float:
    """Residual of the FRC equation relative to its floating-point evaluation scale.

    The detuning ``Im(lam) - W + Im(gamma) rho^2`` cancels large terms, so the
    scale includes their magnitudes.
    """
    a, w, b, d = _parts(rom)
    s = rho**2
    c = w - Omega + d * s
    t1 = (a * rho + b * rho**3) ** 2
    t2 = c**2 * s
    E = (eps * abs(rom.ftilde)) ** 2
    scale = E + t1 + t2 + 2 * abs(c) * (abs(w) + abs(Omega) + abs(d) * s) * s
    return abs(t1 + t2 - E) / scale


def vector_field(rho, theta, Omega, rom, eps):
    """Right side of the polar reduced dynamics."""
    a, w, b, d = _parts(rom)
    fr, fi = rom.ftilde.real, rom.ftilde.imag
    rdot = a * rho + b * rho**3 + eps * (fr * np.cos(theta) + fi * np.sin(theta))
    tdot = w - Omega + d * rho**2 + eps * (fi * np.cos(theta) - fr * np.sin(theta)) / rho
    return np.array([rdot, tdot])


def jacobian(rho: float, Omega: float, rom) -> np.ndarray:
    """Jacobian of the polar reduced dynamics at a fixed point, in (rho, theta)."""
    a, w, b, d = _parts(rom)
    c = w - Omega + d * rho**2
    return np.array([
        [a + 3 * b * rho**2, -c * rho],
        [2 * d * rho + c / rho, a + b * rho**2],
    ])


def fixed_point_phase(rho: float, Omega: float, rom) -> float:
    a, w, b, d = _parts(rom)
    chi = np.angle(rom.ftilde)
    th = chi + np.arctan2((w - Omega + d * rho**2) * rho, -(a * rho + b * rho**3))
    return float(np.angle(np.exp(1j * th)))


def frc_at(Omega: float, rom, eps: float) -> list[FrcSample]:
    """All fixed points at forcing frequency ``Omega`` (cubic in rho^2)."""
    a, w, b, d = _parts(rom)
    E = (eps * abs(rom.ftilde)) ** 2
    if not E > 0:
        raise ValueError("eps |f~| must be positive")
    c = w - Omega
    coeffs = [b**2 + d**2, 2 * (a * b + c * d), a**2 + c**2, -E]
    out = []
    for s in _real_roots(coeffs):
        s = _polish(lambda s: np.polyval(coeffs, s), lambda s: np.polyval(np.polyder(coeffs), s), s)
        rho = float(np.sqrt(s))
        J = jacobian(rho, Omega, rom)
        stable = bool(np.linalg.det(J) > 0 and np.trace(J) < 0)
        out.append(FrcSample(float(Omega), rho, fixed_point_phase(rho, Omega, rom), stable))
    return out


def _polish(f, df, x, iters=3):
    for _ in range(iters):
        g = df(x)
        if g == 0:
            break
        step = f(x) / g
        if not np.isfinite(step) or abs(step) > 0.1 * abs(x):
            break
        x = x - step
    return x


def frc_curve(rom, eps: float, Omegas) -> list[FrcSample]:
    return [s for W in Omegas for s in frc_at(W, rom, eps)]


def peak(rom, eps: float) -> tuple[float, float]:
    """Peak of the reduced FRC: ``(rho_max, Omega_max)``."""
    a, w, b, d = _parts(rom)
    if not a < 0:
        raise PeakError("peak requires Re(lam) < 0")
    F = eps * abs(rom.ftilde)
    coeffs = [b, 0.0, a, -F * np.sign(a)]
    roots = _real_roots(coeffs)
    if roots.size == 0:
        raise PeakError("no positive root for the peak amplitude: ROM breakdown")
    rho = _polish(lambda r: np.polyval(coeffs, r), lambda r: 3 * b * r**2 + a, roots[0])
    return float(rho), float(backbone(rom, rho))


def backbone(rom, rho):
    return rom.lam.imag + rom.gamma.imag * np.asarray(rho) ** 2


def sn_polynomial(rom, eps: float) -> np.ndarray:
    """Coefficients (in s = rho^2, highest first) of the saddle-node amplitude equation."""
    a, w, b, d = _parts(rom)
    E = (eps * abs(rom.ftilde)) ** 2
    g2 = b**2 + d**2
    return np.array([
        4 * b**4 + 4 * d**2 * b**2,
        8 * a * b * g2,
        4 * a**2 * g2,
        4 * E * (b**2 - d**2),
        4 * E * a * b,
        0.0,
        E**2,
    ])


def det_residual(rho, Omega, rom) -> float:
    """|det A| relative to the magnitude of its terms (detuning cancellation included)."""
    a, w, b, d = _parts(rom)
    s = rho**2
    c = w - Omega + d * s
    det = (a + 3 * b * s) * (a + b * s) + c * (2 * d * s + c)
    scale = abs((a + 3 * b * s) * (a + b * s)) + (abs(w) + abs(Omega) + abs(d) * s) * (2 * abs(d) * s + abs(c))
    return abs(det) / scale


def _sn_newton(s, Omega, rom, eps, iters=6):
    """Refine (s, Omega) on {FRC = 0, det A = 0}."""
    a, w, b, d = _parts(rom)
    E = (eps * abs(rom.ftilde)) ** 2
    for _ in range(iters):
        c = w - Omega + d * s
        g1 = (a + b * s) ** 2 * s + c**2 * s - E
        g2 = (a + 3 * b * s) * (a + b * s) + c * (2 * d * s + c)
        J = np.array([
            [2 * b * (a + b * s) * s + (a + b * s) ** 2 + 2 * c * d * s + c**2, -2 * c * s],
            [3 * b * (a + b * s) + b * (a + 3 * b * s) + d * (2 * d * s + c) + c * 3 * d, -(2 * d * s + 2 * c)],
        ])
        try:
            ds, dO = np.linalg.solve(J, [g1, g2])
        except np.linalg.LinAlgError:
            break
        if not (np.isfinite(ds) and np.isfinite(dO)) or abs(ds) > 0.1 * s:
            break
        s, Omega = s - ds, Omega - dO
        if abs(ds) <= 1e-15 * s:
            break
    return s, Omega


def sn_points(rom, eps: float, tol: float = 1e-8) -> list[SnPoint]:
    """Saddle-node points of the reduced FRC (empty when the FRC has no fold)."""
    a, w, b, d = _parts(rom)
    F = eps * abs(rom.ftilde)
    if not F > 0:
        raise ValueError("eps |f~| must be positive")
    out: list[SnPoint] = []
    sgn = 1 if d >= 0 else -1
    for s in _real_roots(sn_polynomial(rom, eps)):
        rad = F**2 / s - (a + b * s) ** 2
        if rad < 0:
            if rad > -1e-9 * F**2 / s:
                rad = 0.0
            else:
                continue
        k = np.sqrt(rad)
        for branch in (sgn, -sgn):
            Om = w + d * s + branch * k
            s1, Om1 = _sn_newton(s, Om, rom, eps)
            rho = np.sqrt(s1)
            if det_residual(rho, Om1, rom) <= tol and frc_residual(rho, Om1, rom, eps) <= tol:
                if not any(abs(p.rho - rho) <= 1e-9 * rho and abs(p.Omega - Om1) <= 1e-12 * abs(Om1) for p in out):
                    out.append(SnPoint(float(rho), float(Om1), float(k), branch))
                break
    return sorted(out, key=lambda p: p.Omega)


def null_vectors(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Right/left null vectors of a singular 2x2 matrix with psi.psi = 1 and psi.phi = 1."""
    U, S, Vt = np.linalg.svd(A)
    phi = Vt[-1]
    psi = U[:, -1]
    psi = psi / np.linalg.norm(psi)
    if psi[np.argmax(np.abs(psi))] < 0:
        psi = -psi
    pp = psi @ phi
    if abs(pp) < 1e-12:
        raise DegenerateSNError("left and right null vectors are orthogonal")
    return phi / pp, psi


def b_matrices(rho: float, Omega: float, rom) -> tuple[np.ndarray, np.ndarray]:
    a, w, b, d = _parts(rom)
    b21 = w - Omega + d * rho**2
    b22 = -(a + b * rho**2) / rho
    B1 = np.array([[6 * b * rho, 0.0], [0.0, a * rho + b * rho**3]])
    B2 = np.array([[2 * d - 2 * b21 / rho**2, b22], [b22, b21]])
    return B1, B2


def cusp_coefficient(sn: SnPoint, rom) -> CuspData:
    """Quadratic normal-form coefficient ``b = psi . B(phi, phi)`` at a saddle-node point."""
    A = jacobian(sn.rho, sn.Omega, rom)
    phi, psi = null_vectors(A)
    B1, B2 = b_matrices(sn.rho, sn.Omega, rom)
    bval = psi @ np.array([phi @ B1 @ phi, phi @ B2 @ phi])
    return CuspData(float(bval), phi, psi, A, B1, B2)


def governing_cusp(rom, eps: float, points=None) -> tuple[SnPoint, CuspData] | None:
    """The saddle-node point with the larger |b|, or None when there is no fold."""
    best = None
    for p in sn_points(rom, eps) if points is None else points:
        try:
            c = cusp_coefficient(p, rom)
        except DegenerateSNError:
            continue
        if best is None or abs(c.b) > abs(best[1].b):
            best = (p, c)
    return best


def sn_sweep(rom, eps_values) -> list[tuple[float, float, float, int]]:
    """Saddle-node curve ``(eps, rho_SN, Omega_SN, branch)`` over a grid of force scales.

    Branch labels follow nearest-neighbour continuity in (rho, Omega) along the grid.
    """
    out = []
    prev: list[tuple[float, float, int]] = []
    next_label = 0
    for eps in eps_values:
        pts = sn_points(rom, eps)
        cur = []
        free = list(prev)
        for p in pts:
            if free:
                j = min(range(len(free)), key=lambda i: np.hypot(free[i][0] - p.rho, free[i][1] - p.Omega))
                label = free.pop(j)[2]
            else:
                label = next_label
                next_label += 1
            cur.append((p.rho, p.Omega, label))
            out.append((float(eps), p.rho, p.Omega, label))
        prev = cur
    return out
