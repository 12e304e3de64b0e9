"""Method of Moving Asymptotes with a dual projected-Newton subproblem solver.

Problem form (m constraints, n variables)::

    min  f0(x) + a0 z + sum_i (c_i y_i + d_i y_i^2 / 2)
    s.t. f_i(x) - a_i z - y_i <= 0,  xmin <= x <= xmax,  y, z >= 0

With ``a = 0`` and large ``c`` the artificial ``y`` only absorb infeasible
subproblems; ``z`` is unused.
"""

from __future__ import annotations

import dataclasses

import numpy as np


class MmaSubproblemError(RuntimeError):
    pass


@dataclasses.dataclass
class MmaSettings:
    asyinit: float = 0.5
    asyincr: float = 1.2
    asydecr: float = 0.7
    move: float = 0.2
    albefa: float = 0.1
    raa0: float = 1e-5
    c: float = 1000.0
    d: float = 1.0
    kkt_tol: float = 1e-9


@dataclasses.dataclass
class MmaState:
    x: np.ndarray
    xmin: np.ndarray
    xmax: np.ndarray
    iteration: int = 0
    xold1: np.ndarray | None = None
    xold2: np.ndarray | None = None
    low: np.ndarray | None = None
    upp: np.ndarray | None = None
    move: float = 0.2
    stage: int = 0

    @classmethod
    def start(cls, x0, xmin=0.0, xmax=1.0, move: float = 0.2) -> "MmaState":
        x0 = np.asarray(x0, dtype=float).copy()
        n = x0.size
        return cls(x=x0, xmin=np.broadcast_to(xmin, n).astype(float), xmax=np.broadcast_to(xmax, n).astype(float),
                   xold1=x0.copy(), xold2=x0.copy(), move=move)

    def snapshot(self) -> "MmaState":
        return dataclasses.replace(self, **{k: (None if getattr(self, k) is None else getattr(self, k).copy())
                                            for k in ("x", "xold1", "xold2", "low", "upp")})


def _asymptotes(state: MmaState, s: MmaSettings):
    x, xmin, xmax = state.x, state.xmin, state.xmax
    span = xmax - xmin
    if state.iteration < 2 or state.low is None:
        return x - s.asyinit * span, x + s.asyinit * span
    zzz = (x - state.xold1) * (state.xold1 - state.xold2)
    factor = np.ones_like(x)
    factor[zzz > 0] = s.asyincr
    factor[zzz < 0] = s.asydecr
    low = x - factor * (state.xold1 - state.low)
    upp = x + factor * (state.upp - state.xold1)
    low = np.clip(low, x - 10 * span, x - 0.01 * span)
    upp = np.clip(upp, x + 0.01 * span, x + 10 * span)
    return low, upp


def mma_step(state: MmaState, f0: float, df0: np.ndarray, g: np.ndarray, dg: np.ndarray,
             settings: MmaSettings | None = None) -> tuple[np.ndarray, float]:
    """One MMA update; returns the new design and the subproblem KKT residual.

    ``g`` (m,) and ``dg`` (m, n) are constraint values and gradients in the
    canonical form ``g <= 0``.  ``state`` is advanced in place.
    """
    s = settings or MmaSettings()
    x = state.x
    df0 = np.asarray(df0, dtype=float)
    g = np.atleast_1d(np.asarray(g, dtype=float))
    dg = np.atleast_2d(np.asarray(dg, dtype=float))
    if not (np.all(np.isfinite(df0)) and np.all(np.isfinite(g)) and np.all(np.isfinite(dg)) and np.isfinite(f0)):
        raise ValueError("non-finite objective or constraint data")
    m, n = dg.shape
    low, upp = _asymptotes(state, s)
    span = state.xmax - state.xmin
    alfa = np.maximum.reduce([low + s.albefa * (x - low), x - state.move * span, state.xmin])
    beta = np.minimum.reduce([upp - s.albefa * (upp - x), x + state.move * span, state.xmax])

    ux1, xl1 = upp - x, x - low
    ux2, xl2 = ux1**2, xl1**2
    inv_span = 1.0 / np.maximum(span, 1e-5)
    p0 = np.maximum(df0, 0)
    q0 = np.maximum(-df0, 0)
    pq0 = 0.001 * (p0 + q0) + s.raa0 * inv_span
    p0 = (p0 + pq0) * ux2
    q0 = (q0 + pq0) * xl2
    P = np.maximum(dg, 0)
    Q = np.maximum(-dg, 0)
    PQ = 0.001 * (P + Q) + s.raa0 * inv_span[None, :]
    P = (P + PQ) * ux2[None, :]
    Q = (Q + PQ) * xl2[None, :]
    b = P @ (1 / ux1) + Q @ (1 / xl1) - g

    xnew, kkt = subsolve(m, n, low, upp, alfa, beta, p0, q0, P, Q, 1.0, np.zeros(m), b,
                         np.full(m, s.c), np.full(m, s.d), s.kkt_tol)
    state.xold2 = state.xold1
    state.xold1 = x.copy()
    state.low, state.upp = low, upp
    state.x = np.clip(xnew, state.xmin, state.xmax)
    state.iteration += 1
    return state.x, kkt


def _primal(lam, low, upp, alfa, beta, p0, q0, P, Q):
    """Minimizer of the separable Lagrangian for fixed multipliers (closed form, clipped)."""
    pj = p0 + P.T @ lam
    qj = q0 + Q.T @ lam
    sp_, sq = np.sqrt(pj), np.sqrt(qj)
    x = (sp_ * low + sq * upp) / (sp_ + sq)
    return np.clip(x, alfa, beta), pj, qj


def subsolve(m, n, low, upp, alfa, beta, p0, q0, P, Q, a0, a, b, c, d, kkt_tol=1e-9, max_iter=200):
    """Maximize the concave dual of the MMA subproblem by projected Newton.

    For multipliers ``lam >= 0`` the primal ``x(lam)`` and the artificial
    ``y(lam) = max(0, (lam - c)/d)`` are explicit (``z = 0`` since ``a = 0``),
    so the KKT residual reduces to the projected dual gradient.
    """
    if np.any(a):
        raise ValueError("only a = 0 is supported")

    def dual(lam):
        x, pj, qj = _primal(lam, low, upp, alfa, beta, p0, q0, P, Q)
        ux, xl = upp - x, x - low
        y = np.maximum(0.0, (lam - c) / d)
        W = np.sum(pj / ux + qj / xl) + np.sum(c * y + 0.5 * d * y**2 - lam * y) - lam @ b
        grad = P @ (1 / ux) + Q @ (1 / xl) - b - y
        return W, grad, x, y, pj, qj

    def projected(lam, grad):
        return np.where(lam > 0, grad, np.maximum(grad, 0.0))

    scale = max(1.0, float(np.abs(b).max()))
    lam = np.ones(m)
    W, grad, x, y, pj, qj = dual(lam)
    kkt = float(np.abs(projected(lam, grad)).max())
    mu = 0.0  # Levenberg damping, grown until the projected step ascends
    for _ in range(max_iter):
        if kkt <= kkt_tol * scale:
            break
        ux, xl = upp - x, x - low
        free_x = (x > alfa) & (x < beta)
        G = P / ux**2 - Q / xl**2
        D = 2 * pj / ux**3 + 2 * qj / xl**3
        Gf = G[:, free_x]
        H = -(Gf / D[free_x]) @ Gf.T - np.diag(((lam > c) / d).astype(float))
        fr = ~((lam <= 0) & (grad <= 0))
        hmax = max(1e-12, float(np.abs(np.diag(H)).max()))
        mu = max(mu / 10, 1e-12 * hmax)
        accepted = False
        while mu < 1e30 * hmax:
            step = np.zeros(m)
            step[fr] = np.linalg.solve(H[np.ix_(fr, fr)] - mu * np.eye(fr.sum()), -grad[fr])
            cand = np.maximum(lam + step, 0.0)
            Wc, gc, xc, yc, pc, qc = dual(cand)
            if Wc >= W + 1e-4 * grad @ (cand - lam) - 1e-15 * abs(W):
                accepted = True
                break
            # near the optimum the ascent is below the rounding of W: judge by the gradient instead
            if Wc >= W - 1e-12 * max(1.0, abs(W)) and np.abs(projected(cand, gc)).max() <= 0.5 * kkt:
                accepted = True
                break
            mu = max(10 * mu, 1e-8 * hmax)
        if not accepted or np.array_equal(cand, lam):
            break
        lam, W, grad, x, y, pj, qj = cand, Wc, gc, xc, yc, pc, qc
        kkt = float(np.abs(projected(lam, grad)).max())
    if not np.all(np.isfinite(x)) or kkt > kkt_tol * scale:
        raise MmaSubproblemError(f"MMA subproblem did not converge (KKT residual {kkt:.3e})")
    return x, kkt
