"""Design variables -> filtered -> projected -> SIMP-interpolated densities."""

from __future__ import annotations

import dataclasses

import numpy as np
import scipy.sparse as sp

from .fe_model import Mesh


def filter_matrix(mesh: Mesh, radius: float) -> sp.csr_matrix:
    """Row-normalized cone filter over element centroids (radius in elements)."""
    if radius < 1:
        raise ValueError("filter radius must be at least one element")
    r = int(np.ceil(radius))
    nx, ny = mesh.nx, mesh.ny
    rows, cols, vals = [], [], []
    ix = np.arange(mesh.n_elements) % nx
    iy = np.arange(mesh.n_elements) // nx
    for dx in range(-r, r + 1):
        for dy in range(-r, r + 1):
            dist = np.hypot(dx, dy)
            if dist >= radius:
                continue
            jx, jy = ix + dx, iy + dy
            ok = (jx >= 0) & (jx < nx) & (jy >= 0) & (jy < ny)
            rows.append(np.flatnonzero(ok))
            cols.append((jy * nx + jx)[ok])
            vals.append(np.full(ok.sum(), radius - dist))
    W = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(mesh.n_elements, mesh.n_elements),
    ).tocsr()
    return sp.diags(1.0 / np.asarray(W.sum(axis=1)).ravel()) @ W


def project(mu_f: np.ndarray, sigma: float, eta: float) -> np.ndarray:
    """Smoothed Heaviside projection; maps 0 -> 0 and 1 -> 1."""
    num = np.tanh(sigma * eta) + np.tanh(sigma * (mu_f - eta))
    return num / (np.tanh(sigma * eta) + np.tanh(sigma * (1.0 - eta)))


def project_derivative(mu_f: np.ndarray, sigma: float, eta: float) -> np.ndarray:
    den = np.tanh(sigma * eta) + np.tanh(sigma * (1.0 - eta))
    return sigma * (1.0 - np.tanh(sigma * (mu_f - eta)) ** 2) / den


def interpolate(mu_p: np.ndarray, p: float, floor: float = 1e-6) -> np.ndarray:
    """SIMP power law with a stiffness floor."""
    if p < 1:
        raise ValueError("penalization exponent must be >= 1")
    return floor + (1.0 - floor) * mu_p**p


@dataclasses.dataclass(frozen=True)
class DesignField:
    mu: np.ndarray
    filtered: np.ndarray
    projected: np.ndarray
    physical: np.ndarray
    radius: float
    sigma: float
    eta: float
    p: float
    floor: float


class StaleCacheError(RuntimeError):
    pass


class DensityPipeline:
    """Forward map and chain rule for one mesh.

    ``p`` and ``sigma`` are mutable for continuation; a :class:`DesignField`
    produced before a parameter change is rejected by :meth:`backprop`.
    """

    def __init__(self, mesh: Mesh, radius: float = 4.0, sigma: float = 10.0, eta: float = 0.5,
                 p: float = 1.0, floor: float = 1e-6):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0 < eta < 1:
            raise ValueError("eta must lie in (0, 1)")
        self.mesh = mesh
        self.radius = float(radius)
        self.H = filter_matrix(mesh, radius)
        self.sigma = float(sigma)
        self.eta = float(eta)
        self.p = float(p)
        self.floor = float(floor)
        self.design = mesh.design_elements
        self.pinned = mesh.non_design
        self._last: DesignField | None = None

    @property
    def n_design(self) -> int:
        return self.design.size

    def expand(self, x: np.ndarray) -> np.ndarray:
        """Full element field from design variables (non-design set to 1)."""
        mu = np.ones(self.mesh.n_elements)
        mu[self.design] = x
        return mu

    def forward(self, x: np.ndarray) -> DesignField:
        """``x`` holds one variable per design element, or one per element."""
        x = np.asarray(x, dtype=float)
        mu = self.expand(x) if x.size == self.n_design else x.copy()
        mu[self.pinned] = 1.0
        mf = self.H @ mu
        mp = project(mf, self.sigma, self.eta)
        mp[self.pinned] = 1.0
        mh = interpolate(mp, self.p, self.floor)
        mh[self.pinned] = 1.0
        field = DesignField(mu, mf, mp, mh, self.radius, self.sigma, self.eta, self.p, self.floor)
        self._last = field
        return field

    def _check(self, field: DesignField) -> None:
        if field is None or self._last is None:
            raise StaleCacheError("no forward pass cached")
        if (field.sigma, field.eta, field.p, field.floor) != (self.sigma, self.eta, self.p, self.floor):
            raise StaleCacheError("pipeline parameters changed since the forward pass")

    def backprop(self, dJ_dphys: np.ndarray, field: DesignField) -> np.ndarray:
        """Map ``dJ/d(physical)`` to ``dJ/d(design variables)`` (design elements only)."""
        self._check(field)
        g = np.asarray(dJ_dphys, dtype=float).copy()
        g[self.pinned] = 0.0
        g = g * field.p * (1.0 - field.floor) * field.projected ** (field.p - 1.0)
        return self._through_projection(g, field)

    def _through_projection(self, dJ_dproj: np.ndarray, field: DesignField) -> np.ndarray:
        g = np.asarray(dJ_dproj, dtype=float).copy()
        g[self.pinned] = 0.0
        g = g * project_derivative(field.filtered, field.sigma, field.eta)
        return (self.H.T @ g)[self.design]

    def area_fraction(self, field: DesignField) -> tuple[float, np.ndarray]:
        """Mean projected density over the design domain and its design gradient."""
        self._check(field)
        A = float(field.projected[self.design].mean())
        dA = np.zeros(self.mesh.n_elements)
        dA[self.design] = 1.0 / self.n_design
        return A, self._through_projection(dA, field)
