"""Plane-stress bilinear quads with exact cubic geometric nonlinearity.

The internal force of a total-Lagrangian element with Green-Lagrange strain
and a St. Venant-Kirchhoff material is a cubic polynomial of the nodal
displacements.  It is stored as

    f_int(u) = K u + F2(u, u) + F3(u, u, u)

with ``F2`` symmetric in its last two indices and ``F3`` symmetric in its
last three.  Global tensors are never formed: contractions gather nodal
values per element and scatter the weighted element results.

Units follow the ng / um / ms system, in which 1 Pa = 1 ng/(um ms^2).
"""

from __future__ import annotations

import dataclasses
import itertools
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "Mesh",
    "ElementOperators",
    "ElementSet",
    "AssembledModel",
    "build_mesh",
    "element_operators",
    "assemble",
    "contract_f2",
    "contract_f3",
    "SingularModelError",
]

_GAUSS = 1.0 / np.sqrt(3.0)
_NODE_XI = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


class SingularModelError(ValueError):
    """Raised when the constrained stiffness matrix is singular."""


@dataclasses.dataclass(frozen=True)
class Mesh:
    """Structured rectangular mesh of square elements.

    Nodes are numbered row by row from the bottom-left corner, elements
    likewise; each element lists its nodes counter-clockwise.
    """

    nx: int
    ny: int
    element_size: float
    coords: np.ndarray
    connectivity: np.ndarray
    non_design: np.ndarray
    fixed_dofs: np.ndarray
    constrained_x_dofs: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_elements(self) -> int:
        return self.connectivity.shape[0]

    @property
    def design_elements(self) -> np.ndarray:
        mask = np.ones(self.n_elements, dtype=bool)
        mask[self.non_design] = False
        return np.flatnonzero(mask)

    @property
    def centroids(self) -> np.ndarray:
        return self.coords[self.connectivity].mean(axis=1)

    @property
    def constrained_dofs(self) -> np.ndarray:
        return np.union1d(self.fixed_dofs, self.constrained_x_dofs)

    @property
    def free_dofs(self) -> np.ndarray:
        return np.setdiff1d(np.arange(2 * self.n_nodes), self.constrained_dofs)

    @property
    def n_free(self) -> int:
        return 2 * self.n_nodes - self.constrained_dofs.size

    def node_at(self, x: float, y: float) -> int:
        """Index of the node located at ``(x, y)`` (um)."""
        d = np.hypot(self.coords[:, 0] - x, self.coords[:, 1] - y)
        k = int(np.argmin(d))
        if d[k] > 1e-6 * self.element_size:
            raise ValueError(f"no node at ({x}, {y})")
        return k

    def free_index(self, node: int, direction: int) -> int:
        """Position of a nodal DOF in the reduced (free) vector."""
        full = 2 * node + direction
        idx = np.searchsorted(self.free_dofs, full)
        if idx >= self.free_dofs.size or self.free_dofs[idx] != full:
            raise ValueError(f"dof {full} of node {node} is constrained")
        return int(idx)


def _edge_nodes(nx: int, ny: int, edge: str) -> np.ndarray:
    grid = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    edges = {"left": grid[:, 0], "right": grid[:, -1], "bottom": grid[0, :], "top": grid[-1, :]}
    try:
        return edges[edge]
    except KeyError:
        raise ValueError(f"unknown edge {edge!r}") from None


def build_mesh(
    nx: int,
    ny: int,
    element_size: float,
    non_design: Sequence[Sequence[float]] = (),
    fixed_edges: Sequence[str] = ("left",),
    x_constrained_edges: Sequence[str] = ("right",),
) -> Mesh:
    """Build a structured mesh with rectangular non-design regions.

    Parameters
    ----------
    nx, ny : int
        Element counts along x and y.
    element_size : float
        Side of the square elements (um).
    non_design : sequence of (x0, x1, y0, y1)
        Rectangles (um) whose elements are pinned to full material. Their
        sides must fall on element boundaries.
    fixed_edges, x_constrained_edges : sequence of str
        Edges ("left", "right", "bottom", "top") that are fully clamped or
        constrained in x only.
    """
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be at least 1")
    if element_size <= 0:
        raise ValueError("element_size must be positive")
    h = float(element_size)
    xs = np.arange(nx + 1) * h
    ys = np.arange(ny + 1) * h
    X, Y = np.meshgrid(xs, ys)
    coords = np.column_stack([X.ravel(), Y.ravel()])

    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny))
    n0 = (iy * (nx + 1) + ix).ravel()
    connectivity = np.column_stack([n0, n0 + 1, n0 + nx + 2, n0 + nx + 1])

    cent = coords[connectivity].mean(axis=1)
    pinned = np.zeros(nx * ny, dtype=bool)
    for region in non_design:
        x0, x1, y0, y1 = map(float, region)
        for v in (x0, x1, y0, y1):
            if abs(v / h - round(v / h)) > 1e-9:
                raise ValueError(
                    f"non-design region {tuple(region)} is not aligned to the "
                    f"{h} um grid (offending coordinate {v})"
                )
        pinned |= (cent[:, 0] > x0) & (cent[:, 0] < x1) & (cent[:, 1] > y0) & (cent[:, 1] < y1)

    fixed = [np.column_stack([2 * n, 2 * n + 1]).ravel() for n in (_edge_nodes(nx, ny, e) for e in fixed_edges)]
    xcon = [2 * _edge_nodes(nx, ny, e) for e in x_constrained_edges]
    fixed_dofs = np.unique(np.concatenate(fixed)) if fixed else np.zeros(0, dtype=int)
    x_dofs = np.unique(np.concatenate(xcon)) if xcon else np.zeros(0, dtype=int)
    return Mesh(
        nx=nx,
        ny=ny,
        element_size=h,
        coords=coords,
        connectivity=connectivity,
        non_design=np.flatnonzero(pinned),
        fixed_dofs=fixed_dofs.astype(int),
        constrained_x_dofs=np.setdiff1d(x_dofs, fixed_dofs).astype(int),
    )


@dataclasses.dataclass(frozen=True)
class ElementOperators:
    """Unit-density operators of one element (8 DOFs, ordering u0x u0y u1x ...)."""

    Me: np.ndarray
    Ke: np.ndarray
    F2e: np.ndarray
    F3e: np.ndarray

    def internal_force(self, u: np.ndarray) -> np.ndarray:
        return (
            self.Ke @ u
            + np.einsum("dij,i,j->d", self.F2e, u, u)
            + np.einsum("dijk,i,j,k->d", self.F3e, u, u, u)
        )


def _plane_stress_tensor(E: float, nu: float) -> np.ndarray:
    lam = E * nu / (1.0 - nu**2)
    mu = E / (2.0 * (1.0 + nu))
    d = np.eye(2)
    return (
        lam * np.einsum("ij,kl->ijkl", d, d)
        + mu * (np.einsum("ik,jl->ijkl", d, d) + np.einsum("il,jk->ijkl", d, d))
    )


def _symmetrize(T: np.ndarray, axes: Sequence[int]) -> np.ndarray:
    perms = list(itertools.permutations(axes))
    out = np.zeros_like(T)
    base = list(range(T.ndim))
    for p in perms:
        order = base.copy()
        for src, dst in zip(axes, p):
            order[src] = dst
        out += np.transpose(T, order)
    return out / len(perms)


def element_operators(E: float, nu: float, rho: float, t: float, size: float) -> ElementOperators:
    """Mass, stiffness, quadratic and cubic tensors of a square element.

    ``E`` in ng/(um ms^2) (numerically equal to Pa), ``rho`` in ng/um^3,
    ``t`` and ``size`` in um.  2x2 Gauss quadrature integrates all four
    operators of the bilinear square exactly except the mass, which is
    integrated with the same rule (consistent mass, exact for bilinear N).
    """
    if not E > 0 or not rho > 0 or not t > 0 or not size > 0:
        raise ValueError("E, rho, thickness and size must be positive")
    if not 0.0 <= nu < 0.5:
        raise ValueError(f"Poisson ratio {nu} outside [0, 0.5)")
    C = _plane_stress_tensor(E, nu)
    detJ = size**2 / 4.0
    Me = np.zeros((8, 8))
    Ke = np.zeros((8, 8))
    F2 = np.zeros((8, 8, 8))
    F3 = np.zeros((8, 8, 8, 8))
    for gx, gy in itertools.product((-_GAUSS, _GAUSS), repeat=2):
        N = 0.25 * (1 + _NODE_XI[:, 0] * gx) * (1 + _NODE_XI[:, 1] * gy)
        dN = 0.25 * np.column_stack(
            [_NODE_XI[:, 0] * (1 + _NODE_XI[:, 1] * gy), _NODE_XI[:, 1] * (1 + _NODE_XI[:, 0] * gx)]
        )
        G = dN * (2.0 / size)
        # H[i, j] = du_i/dX_j as a linear map of the element dofs
        Hmap = np.zeros((2, 2, 8))
        for a in range(4):
            for i in range(2):
                Hmap[i, :, 2 * a + i] = G[a]
        E1 = 0.5 * (Hmap + Hmap.transpose(1, 0, 2))
        E2 = 0.5 * np.einsum("kid,kje->ijde", Hmap, Hmap)
        E2 = 0.5 * (E2 + E2.transpose(0, 1, 3, 2))
        w = detJ * t
        CE1 = np.einsum("ijkl,kld->ijd", C, E1)
        CE2 = np.einsum("ijkl,klef->ijef", C, E2)
        Ke += w * np.einsum("ijd,ije->de", E1, CE1)
        F2 += w * (np.einsum("ijd,ijef->def", E1, CE2) + 2.0 * np.einsum("ijde,ijf->def", E2, CE1))
        F3 += w * 2.0 * np.einsum("ijde,ijfg->defg", E2, CE2)
        Nm = np.zeros((2, 8))
        Nm[0, 0::2] = N
        Nm[1, 1::2] = N
        Me += rho * w * Nm.T @ Nm
    F2 = _symmetrize(F2, (1, 2))
    F3 = _symmetrize(F3, (1, 2, 3))
    return ElementOperators(Me=0.5 * (Me + Me.T), Ke=0.5 * (Ke + Ke.T), F2e=F2, F3e=F3)


@dataclasses.dataclass(frozen=True)
class ElementSet:
    """Element-to-DOF maps and per-type unit operators.

    ``dofs[e]`` lists the reduced DOF index of each local DOF of element
    ``e`` (-1 where eliminated).  Element ``e`` uses operators of type
    ``etype[e]``.  This covers both the FE mesh (one shared type) and small
    hand-built systems with one part per physical coefficient.
    """

    dofs: np.ndarray
    etype: np.ndarray
    Me: np.ndarray
    Ke: np.ndarray
    F2e: np.ndarray
    F3e: np.ndarray
    n: int

    def __post_init__(self):
        pad = np.where(self.dofs < 0, self.n, self.dofs)
        object.__setattr__(self, "_pad", pad)
        groups = [(t, np.flatnonzero(self.etype == t)) for t in np.unique(self.etype)]
        object.__setattr__(self, "_groups", groups)
        nl = np.array([np.any(self.F2e[t]) or np.any(self.F3e[t]) for t in range(self.F2e.shape[0])])
        object.__setattr__(self, "_has_nl", nl)

    @property
    def n_elements(self) -> int:
        return self.dofs.shape[0]

    def gather(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v)
        if v.shape[0] != self.n:
            raise ValueError(f"vector of length {v.shape[0]} does not match {self.n} free dofs")
        return np.concatenate([v, np.zeros(1, dtype=v.dtype)])[self._pad]

    def scatter(self, ve: np.ndarray) -> np.ndarray:
        idx = self._pad.ravel()
        if np.iscomplexobj(ve):
            re = np.bincount(idx, weights=ve.real.ravel(), minlength=self.n + 1)
            im = np.bincount(idx, weights=ve.imag.ravel(), minlength=self.n + 1)
            return (re + 1j * im)[: self.n]
        return np.bincount(idx, weights=ve.ravel(), minlength=self.n + 1)[: self.n]

    def _per_element(self, fn, dtype) -> np.ndarray:
        """Evaluate ``fn(type, rows)`` per operator type into an (ne, ...) array."""
        out = None
        for t, rows in self._groups:
            val = fn(t, rows)
            if out is None:
                out = np.zeros((self.n_elements,) + val.shape[1:], dtype=dtype)
            out[rows] = val
        return out

    # element-level (unweighted) kernels -------------------------------
    def f2_elements(self, a, b) -> np.ndarray:
        ae, be = self.gather(a), self.gather(b)
        dt = np.result_type(ae, be)
        return self._per_element(
            lambda t, r: np.einsum("dij,ei,ej->ed", self.F2e[t], ae[r], be[r], optimize=True), dt
        )

    def f3_elements(self, a, b, c) -> np.ndarray:
        ae, be, ce = self.gather(a), self.gather(b), self.gather(c)
        dt = np.result_type(ae, be, ce)

        def fn(t, r):
            tmp = np.einsum("dijk,ek->edij", self.F3e[t], ce[r], optimize=True)
            return np.einsum("edij,ei,ej->ed", tmp, ae[r], be[r], optimize=True)

        return self._per_element(fn, dt)

    def f2_adjoint_elements(self, y, a) -> np.ndarray:
        """Per-element gradient of ``y . F2(a, x)`` with respect to ``x``."""
        ye, ae = self.gather(y), self.gather(a)
        dt = np.result_type(ye, ae)
        return self._per_element(
            lambda t, r: np.einsum("dij,ed,ei->ej", self.F2e[t], ye[r], ae[r], optimize=True), dt
        )

    def f3_adjoint_elements(self, y, a, b) -> np.ndarray:
        """Per-element gradient of ``y . F3(a, b, x)`` with respect to ``x``."""
        ye, ae, be = self.gather(y), self.gather(a), self.gather(b)
        dt = np.result_type(ye, ae, be)

        def fn(t, r):
            tmp = np.einsum("dijk,ed->eijk", self.F3e[t], ye[r], optimize=True)
            return np.einsum("eijk,ei,ej->ek", tmp, ae[r], be[r], optimize=True)

        return self._per_element(fn, dt)

    def quad_elements(self, which: str, a, b) -> np.ndarray:
        """Per-element bilinear forms ``a_e^T X_e b_e`` with X = M or K (no transpose conjugation)."""
        ops = {"M": self.Me, "K": self.Ke}[which]
        ae, be = self.gather(a), self.gather(b)
        dt = np.result_type(ae, be)
        return self._per_element(lambda t, r: np.einsum("ed,df,ef->e", ae[r], ops[t], be[r]), dt)

    def assemble_matrix(self, which: str, weights: np.ndarray) -> sp.csc_matrix:
        ops = {"M": self.Me, "K": self.Ke}[which]
        vals = weights[:, None, None] * ops[self.etype]
        rows = np.broadcast_to(self._pad[:, :, None], vals.shape).ravel()
        cols = np.broadcast_to(self._pad[:, None, :], vals.shape).ravel()
        keep = (rows < self.n) & (cols < self.n)
        A = sp.coo_matrix((vals.ravel()[keep], (rows[keep], cols[keep])), shape=(self.n, self.n))
        return A.tocsc()


@dataclasses.dataclass(frozen=True)
class AssembledModel:
    """Constrained second-order system ``M x'' + C x' + K x + f2 + f3 = eps f_ext cos(W t)``.

    ``C = alpha M + beta K``.  ``output_dofs`` are reduced DOF indices
    selected by the diagonal output matrix L.
    """

    elements: ElementSet
    weights: np.ndarray
    M: sp.csc_matrix
    K: sp.csc_matrix
    f_ext: np.ndarray
    output_dofs: np.ndarray
    alpha: float = 0.0
    beta: float = 0.0
    mesh: Mesh | None = None

    @property
    def n(self) -> int:
        return self.elements.n

    @property
    def C(self) -> sp.csc_matrix:
        return (self.alpha * self.M + self.beta * self.K).tocsc()

    @property
    def L(self) -> sp.dia_matrix:
        d = np.zeros(self.n)
        d[self.output_dofs] = 1.0
        return sp.diags(d)

    def with_damping(self, alpha: float, beta: float) -> "AssembledModel":
        return dataclasses.replace(self, alpha=float(alpha), beta=float(beta))

    def with_force(self, f_ext: np.ndarray) -> "AssembledModel":
        return dataclasses.replace(self, f_ext=np.asarray(f_ext, dtype=float))

    def f2(self, a, b) -> np.ndarray:
        return contract_f2(self, a, b)

    def f3(self, a, b, c) -> np.ndarray:
        return contract_f3(self, a, b, c)

    def internal_force(self, x: np.ndarray) -> np.ndarray:
        return self.K @ x + self.f2(x, x) + self.f3(x, x, x)

    def f2_adjoint(self, y, a) -> np.ndarray:
        """Vector ``v`` with ``v . x = y . F2(a, x)`` for all ``x``."""
        return self.elements.scatter(self.weights[:, None] * self.elements.f2_adjoint_elements(y, a))

    def f3_adjoint(self, y, a, b) -> np.ndarray:
        return self.elements.scatter(self.weights[:, None] * self.elements.f3_adjoint_elements(y, a, b))

    def tangent(self, x: np.ndarray) -> sp.csc_matrix:
        """Jacobian ``K + 2 F2(x, .) + 3 F3(x, x, .)`` of the internal force."""
        es = self.elements
        xe = es.gather(x)

        def fn(t, r):
            return (
                es.Ke[t][None]
                + 2.0 * np.einsum("dij,ei->edj", es.F2e[t], xe[r])
                + 3.0 * np.einsum("dijk,ei,ej->edk", es.F3e[t], xe[r], xe[r], optimize=True)
            )

        blocks = es._per_element(fn, xe.dtype) * self.weights[:, None, None]
        pad = es._pad
        rows = np.broadcast_to(pad[:, :, None], blocks.shape).ravel()
        cols = np.broadcast_to(pad[:, None, :], blocks.shape).ravel()
        keep = (rows < self.n) & (cols < self.n)
        return sp.coo_matrix((blocks.ravel()[keep], (rows[keep], cols[keep])), shape=(self.n, self.n)).tocsc()

    @classmethod
    def from_parts(
        cls,
        parts: Sequence[dict],
        n: int,
        f_ext=None,
        output_dofs=(0,),
        alpha: float = 0.0,
        beta: float = 0.0,
        weights=None,
    ) -> "AssembledModel":
        """Build a small model from dense parts.

        Each part is a dict with optional keys ``M``, ``K``, ``F2``, ``F3``
        (dense, acting on all ``n`` dofs).  Every part becomes one "element"
        whose weight is a design parameter.
        """
        nt = len(parts)
        Me = np.zeros((nt, n, n))
        Ke = np.zeros((nt, n, n))
        F2 = np.zeros((nt, n, n, n))
        F3 = np.zeros((nt, n, n, n, n))
        for k, p in enumerate(parts):
            if "M" in p:
                Me[k] = p["M"]
            if "K" in p:
                Ke[k] = p["K"]
            if "F2" in p:
                F2[k] = _symmetrize(np.asarray(p["F2"], dtype=float), (1, 2))
            if "F3" in p:
                F3[k] = _symmetrize(np.asarray(p["F3"], dtype=float), (1, 2, 3))
        es = ElementSet(
            dofs=np.tile(np.arange(n), (nt, 1)),
            etype=np.arange(nt),
            Me=Me,
            Ke=Ke,
            F2e=F2,
            F3e=F3,
            n=n,
        )
        w = np.ones(nt) if weights is None else np.asarray(weights, dtype=float)
        f = np.zeros(n) if f_ext is None else np.asarray(f_ext, dtype=float)
        return cls(
            elements=es,
            weights=w,
            M=es.assemble_matrix("M", w),
            K=es.assemble_matrix("K", w),
            f_ext=f,
            output_dofs=np.asarray(output_dofs, dtype=int),
            alpha=alpha,
            beta=beta,
        )

    def reweighted(self, weights: np.ndarray) -> "AssembledModel":
        """Same topology and force, new element weights."""
        w = np.asarray(weights, dtype=float)
        return dataclasses.replace(
            self, weights=w, M=self.elements.assemble_matrix("M", w), K=self.elements.assemble_matrix("K", w)
        )


def _check_dims(model: AssembledModel, *vs) -> None:
    for v in vs:
        if np.shape(v) != (model.n,):
            raise ValueError(f"expected vectors of shape ({model.n},), got {np.shape(v)}")


def contract_f2(model: AssembledModel, a, b) -> np.ndarray:
    """``f2^i(a, b) = F2^{ijk} a^j b^k`` (complex inputs allowed)."""
    _check_dims(model, a, b)
    es = model.elements
    return es.scatter(model.weights[:, None] * es.f2_elements(a, b))


def contract_f3(model: AssembledModel, a, b, c) -> np.ndarray:
    """``f3^i(a, b, c) = F3^{ijkl} a^j b^k c^l``."""
    _check_dims(model, a, b, c)
    es = model.elements
    return es.scatter(model.weights[:, None] * es.f3_elements(a, b, c))


def mesh_element_set(mesh: Mesh, ops: ElementOperators) -> ElementSet:
    full_to_free = -np.ones(2 * mesh.n_nodes, dtype=int)
    full_to_free[mesh.free_dofs] = np.arange(mesh.free_dofs.size)
    edofs = np.empty((mesh.n_elements, 8), dtype=int)
    edofs[:, 0::2] = 2 * mesh.connectivity
    edofs[:, 1::2] = 2 * mesh.connectivity + 1
    return ElementSet(
        dofs=full_to_free[edofs],
        etype=np.zeros(mesh.n_elements, dtype=int),
        Me=ops.Me[None],
        Ke=ops.Ke[None],
        F2e=ops.F2e[None],
        F3e=ops.F3e[None],
        n=mesh.free_dofs.size,
    )


def assemble(
    mesh: Mesh,
    densities: np.ndarray,
    ops: ElementOperators,
    force_node: tuple[float, float] | None = None,
    force: float = 0.0,
    force_direction: int = 1,
    output_nodes: Sequence[tuple[float, float]] = (),
    output_direction: int = 1,
    alpha: float = 0.0,
    beta: float = 0.0,
    check: bool = True,
    elements: ElementSet | None = None,
) -> AssembledModel:
    """Assemble the constrained model for physical densities ``densities``.

    ``force`` is the nodal load amplitude (ng um/ms^2) applied at
    ``force_node`` in ``force_direction`` (0 = x, 1 = y).  ``elements`` may
    be passed to reuse the DOF maps of a previous assembly.
    """
    w = np.asarray(densities, dtype=float)
    if w.shape != (mesh.n_elements,):
        raise ValueError(f"need one density per element ({mesh.n_elements}), got {w.shape}")
    if check:
        if np.any(w <= 0) or np.any(w > 1 + 1e-12):
            raise ValueError("physical densities must lie in (0, 1]")
        if mesh.non_design.size and not np.allclose(w[mesh.non_design], 1.0):
            raise ValueError("non-design elements must carry unit density")
        if mesh.fixed_dofs.size < 4:
            raise SingularModelError("insufficient constraints: stiffness matrix singular")
    es = mesh_element_set(mesh, ops) if elements is None else elements
    M = es.assemble_matrix("M", w)
    K = es.assemble_matrix("K", w)
    if check:
        try:
            lu = spla.splu(K)
        except RuntimeError as exc:
            raise SingularModelError(f"constrained stiffness is singular: {exc}") from exc
        piv = np.abs(lu.U.diagonal())
        if piv.min() <= 1e-12 * piv.max():
            raise SingularModelError("constrained stiffness is singular (zero pivot)")
    f = np.zeros(es.n)
    if force_node is not None and force != 0.0:
        f[mesh.free_index(mesh.node_at(*force_node), force_direction)] = force
    outs = [mesh.free_index(mesh.node_at(*p), output_direction) for p in output_nodes]
    return AssembledModel(
        elements=es,
        weights=w,
        M=M,
        K=K,
        f_ext=f,
        output_dofs=np.asarray(outs, dtype=int),
        alpha=alpha,
        beta=beta,
        mesh=mesh,
    )
