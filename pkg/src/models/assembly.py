"""
Galerkin assembly for -div(kappa grad u) = f with elementwise constant kappa.

Builds the SPD system over free nodes (Dirichlet nodes eliminated
symmetrically), energy norms, the strong element/edge residuals and the
split r_k = R_k + F_k of the linear residual.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.io import mmwrite
from scipy.sparse.linalg import spsolve

from src.models.mesh import DIRICHLET, NEUMANN, DofLayout, Mesh
from src.models.reference_element import ReferenceElement, triangle_quadrature

logger = logging.getLogger(__name__)


class AssemblyError(ValueError):
    """Inconsistent problem data."""


@dataclass
class ProblemSpec:
    """
    Poisson problem data.

    Args:
        kappa: coefficient per region tag (elementwise constant, positive)
        source: f(x, y)
        neumann: g(x, y, nx, ny), the prescribed flux kappa du/dn; zero if None
        dirichlet: boundary values u(x, y); zero if None
        exact: analytic solution u(x, y), when known
        exact_grad: analytic gradient (ux, uy), when known
        pin_point: vertex fixed to the exact value (or 0) to remove the
            constant nullspace of pure Neumann problems
    """
    kappa: Dict[int, float]
    source: Callable
    neumann: Optional[Callable] = None
    dirichlet: Optional[Callable] = None
    exact: Optional[Callable] = None
    exact_grad: Optional[Callable] = None
    pin_point: Optional[Tuple[float, float]] = None
    name: str = 'poisson'

    def kappa_per_element(self, mesh: Mesh) -> np.ndarray:
        missing = set(np.unique(mesh.region).tolist()) - set(self.kappa)
        if missing:
            raise AssemblyError(f"No kappa given for region(s) {sorted(missing)}")
        kappa = np.array([self.kappa[int(r)] for r in mesh.region], dtype=float)
        if np.any(~np.isfinite(kappa)) or np.any(kappa <= 0):
            raise AssemblyError("kappa must be positive on every element")
        return kappa


class FESpace:
    """
    Degree-N continuous space on a mesh with cached affine geometry.

    Attributes:
        layout: global node numbering
        jac, inv_jac: (nt, 2, 2) element Jacobians and inverses
        det: (nt,) |det J| = 2|K|
        metric: (nt, 2, 2) inv_jac @ inv_jac.T
        normals: (nt, 3, 2) outward unit normals of the local edges
    """

    def __init__(self, mesh: Mesh, elem: ReferenceElement):
        self.mesh = mesh
        self.elem = elem
        self.layout = DofLayout(mesh, elem)
        self.l2g = self.layout.local_to_global
        self.n_nodes = self.layout.n_nodes

        p = mesh.vertices[mesh.triangles]
        self.origin = p[:, 0]
        self.jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        self.inv_jac = np.linalg.inv(self.jac)
        self.det = np.abs(np.linalg.det(self.jac))
        self.metric = np.einsum('tba,tca->tbc', self.inv_jac, self.inv_jac)
        self.area = 0.5 * self.det
        self.diameter = mesh.diameters()
        self.edge_length = mesh.edge_lengths()

        normals = np.empty((mesh.n_triangles, 3, 2))
        for i in range(3):
            d = p[:, (i + 1) % 3] - p[:, i]
            length = np.hypot(d[:, 0], d[:, 1])
            normals[:, i, 0] = d[:, 1] / length
            normals[:, i, 1] = -d[:, 0] / length
        self.normals = normals

    @property
    def degree(self) -> int:
        return self.elem.degree

    def map_points(self, ref_points: np.ndarray) -> np.ndarray:
        """(npts, 2) reference points -> (nt, npts, 2) physical points."""
        return self.origin[:, None, :] + np.einsum('tij,pj->tpi', self.jac, ref_points)

    def gradients(self, u_full: np.ndarray, ref_grads: np.ndarray) -> np.ndarray:
        """Physical gradient of u_h, (nt, npts, 2), from reference basis gradients (npts, Np, 2)."""
        g_ref = np.einsum('qnb,tn->tqb', ref_grads, u_full[self.l2g])
        return np.einsum('tba,tqb->tqa', self.inv_jac, g_ref)

    def edge_points(self, triangles: np.ndarray, local: np.ndarray) -> np.ndarray:
        """Physical edge quadrature points, (len(triangles), nqe, 2)."""
        refs = np.stack([self.elem.edge_to_reference(i, self.elem.edge_points) for i in range(3)])
        r = refs[local]
        return self.origin[triangles][:, None, :] + np.einsum('eij,eqj->eqi', self.jac[triangles], r)

    def scatter(self, local: np.ndarray, triangles: Optional[np.ndarray] = None) -> np.ndarray:
        """Sum per-element local vectors (nt, Np) into a global nodal vector."""
        l2g = self.l2g if triangles is None else self.l2g[triangles]
        return np.bincount(l2g.ravel(), weights=local.ravel(), minlength=self.n_nodes)


@dataclass
class SparseSystem:
    """
    A x = b over the free nodes.

    ``A_full``/``b_full`` are the unconstrained operator and load; ``free``
    and ``fixed`` index the global nodes, ``fixed_values`` holds the
    Dirichlet (and pinned) values.
    """
    A: sp.csr_matrix
    b: np.ndarray
    free: np.ndarray
    fixed: np.ndarray
    fixed_values: np.ndarray
    A_full: sp.csr_matrix
    b_full: np.ndarray
    space: FESpace
    spec: ProblemSpec
    kappa: np.ndarray = field(repr=False, default=None)
    neumann_balance: Optional[float] = None

    @property
    def n_free(self) -> int:
        return len(self.free)

    @property
    def mesh(self) -> Mesh:
        return self.space.mesh

    @property
    def elem(self) -> ReferenceElement:
        return self.space.elem

    def expand(self, x: np.ndarray) -> np.ndarray:
        """Full nodal vector with constrained values filled in."""
        u = np.empty(self.space.n_nodes)
        u[self.free] = x
        u[self.fixed] = self.fixed_values
        return u

    def restrict(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u)[self.free]

    def energy(self, x: np.ndarray) -> float:
        return float(x @ (self.A @ x))

    def residual(self, x: np.ndarray) -> np.ndarray:
        return self.b - self.A @ x

    def validate(self, rtol: float = 1e-6) -> Dict:
        """
        Check the assembled data.

        A pure Neumann problem is only well posed when int f + int g vanishes;
        the mismatch is measured against the total absolute load.
        """
        issues = []
        if self.neumann_balance is not None:
            scale = max(float(np.abs(self.b_full).sum()), np.finfo(float).tiny)
            if abs(self.neumann_balance) > rtol * scale:
                issues.append(f"incompatible Neumann data: int f + int g = "
                              f"{self.neumann_balance:.3e} (load {scale:.3e})")
        if not np.all(np.isfinite(self.b)):
            issues.append("non-finite load vector")
        return {'valid': not issues, 'issues': issues}


def _constrained_nodes(space: FESpace, spec: ProblemSpec) -> Tuple[np.ndarray, np.ndarray]:
    mesh = space.mesh
    dirichlet_edges = mesh.boundary_edges(DIRICHLET)
    fixed = space.layout.edge_dofs(dirichlet_edges, space.elem)
    coords = space.layout.coordinates
    if spec.dirichlet is not None and len(fixed):
        values = np.asarray(spec.dirichlet(coords[fixed, 0], coords[fixed, 1]), dtype=float)
        values = np.broadcast_to(values, fixed.shape).copy()
    else:
        values = np.zeros(len(fixed))

    if spec.pin_point is not None:
        d = np.hypot(mesh.vertices[:, 0] - spec.pin_point[0], mesh.vertices[:, 1] - spec.pin_point[1])
        pinned = int(np.argmin(d))
        if d[pinned] > 1e-10:
            raise AssemblyError(f"pin point {spec.pin_point} is not a mesh vertex")
        if pinned not in set(fixed.tolist()):
            x, y = mesh.vertices[pinned]
            value = float(spec.exact(x, y)) if spec.exact is not None else 0.0
            fixed = np.append(fixed, pinned)
            values = np.append(values, value)
    if len(fixed) == 0:
        raise AssemblyError("Pure Neumann problem needs a pin_point to fix the constant")
    order = np.argsort(fixed)
    return fixed[order], values[order]


def assemble(mesh: Mesh, elem: ReferenceElement, spec: ProblemSpec) -> SparseSystem:
    """
    Assemble stiffness and load, then eliminate constrained nodes.

    Args:
        mesh: conforming triangulation
        elem: reference element of degree N
        spec: problem data

    Returns:
        SparseSystem with A symmetric positive definite on the free nodes
    """
    kappa = spec.kappa_per_element(mesh)
    space = FESpace(mesh, elem)
    w = elem.quad_weights
    grads = elem.quad_grads

    ref_stiffness = np.einsum('q,qnb,qmc->bcnm', w, grads, grads)
    local_A = np.einsum('t,tbc,bcnm->tnm', kappa * space.det, space.metric, ref_stiffness)
    rows = np.repeat(space.l2g, elem.n_nodes, axis=1).ravel()
    cols = np.tile(space.l2g, (1, elem.n_nodes)).ravel()
    A_full = sp.coo_matrix((local_A.ravel(), (rows, cols)),
                           shape=(space.n_nodes, space.n_nodes)).tocsr()
    A_full.sum_duplicates()

    xq = space.map_points(elem.quad_points)
    fq = np.broadcast_to(spec.source(xq[..., 0], xq[..., 1]), xq.shape[:2])
    local_b = np.einsum('tq,q,qn->tn', fq, w, elem.quad_values) * space.det[:, None]
    b_full = space.scatter(local_b)

    neumann_edges = mesh.boundary_edges(NEUMANN)
    if len(neumann_edges) and spec.neumann is not None:
        t = mesh.edge_triangles[neumann_edges, 0]
        li = mesh.edge_local[neumann_edges, 0]
        pts = space.edge_points(t, li)
        n = space.normals[t, li]
        g = np.broadcast_to(spec.neumann(pts[..., 0], pts[..., 1],
                                         n[:, None, 0], n[:, None, 1]), pts.shape[:2])
        phi = elem.edge_values[li]
        local = np.einsum('eq,q,eqn->en', g, elem.edge_weights, phi)
        local *= space.edge_length[neumann_edges][:, None]
        b_full += space.scatter(local, t)

    fixed, fixed_values = _constrained_nodes(space, spec)
    free = np.setdiff1d(np.arange(space.n_nodes), fixed)
    balance = None
    if len(mesh.boundary_edges(DIRICHLET)) == 0:
        balance = float(b_full.sum())
        logger.info("Pure Neumann data: int f + int g = %.3e", balance)

    A_free = A_full[free][:, free].tocsr()
    b = b_full[free] - A_full[free][:, fixed] @ fixed_values

    logger.info("Assembled N=%d on %d triangles: %d nodes, %d free, nnz=%d",
                elem.degree, mesh.n_triangles, space.n_nodes, len(free), A_free.nnz)
    return SparseSystem(A=A_free, b=b, free=free, fixed=fixed, fixed_values=fixed_values,
                        A_full=A_full, b_full=b_full, space=space, spec=spec, kappa=kappa,
                        neumann_balance=balance)


def direct_solve(system: SparseSystem) -> np.ndarray:
    """Sparse direct solve of A x = b, the reference for algebraic errors."""
    if system.n_free == 0:
        return np.zeros(0)
    return np.asarray(spsolve(system.A.tocsc(), system.b)).reshape(-1)


# ---------------------------------------------------------------- norms

def _fine_rule(elem: ReferenceElement):
    return triangle_quadrature(max(2 * elem.degree + 8, 16))


def energy_norm(space: FESpace, spec: ProblemSpec, v) -> float:
    """
    Energy norm sqrt(a(v, v)).

    Args:
        v: a full nodal vector of the space, or a callable returning the
            analytic gradient (vx, vy) at (x, y)
    """
    kappa = spec.kappa_per_element(space.mesh)
    if callable(v):
        pts, w = _fine_rule(space.elem)
        xq = space.map_points(pts)
        gx, gy = v(xq[..., 0], xq[..., 1])
        integrand = np.broadcast_to(gx, xq.shape[:2]) ** 2 + np.broadcast_to(gy, xq.shape[:2]) ** 2
    else:
        g = space.gradients(np.asarray(v, dtype=float), space.elem.quad_grads)
        integrand = (g ** 2).sum(axis=2)
        w = space.elem.quad_weights
    value = np.einsum('tq,q,t->', integrand, w, kappa * space.det)
    return float(np.sqrt(max(value, 0.0)))


def energy_error(space: FESpace, spec: ProblemSpec, u_full: np.ndarray,
                 exact_grad: Optional[Callable] = None) -> float:
    """Energy norm of u - u_h against the analytic gradient."""
    exact_grad = exact_grad or spec.exact_grad
    if exact_grad is None:
        raise AssemblyError("energy_error needs an analytic gradient")
    kappa = spec.kappa_per_element(space.mesh)
    pts, w = _fine_rule(space.elem)
    _, ref_grads = space.elem.eval_basis(pts)
    gh = space.gradients(u_full, ref_grads)
    xq = space.map_points(pts)
    gx, gy = exact_grad(xq[..., 0], xq[..., 1])
    diff2 = (gx - gh[..., 0]) ** 2 + (gy - gh[..., 1]) ** 2
    return float(np.sqrt(np.einsum('tq,q,t->', diff2, w, kappa * space.det)))


# ------------------------------------------------------- strong residuals

EDGE_DIRICHLET = 0
EDGE_INTERIOR = 1
EDGE_NEUMANN = 2


def edge_kinds(mesh: Mesh) -> np.ndarray:
    kinds = np.full(mesh.n_edges, EDGE_INTERIOR, dtype=np.int64)
    kinds[mesh.boundary_edges(DIRICHLET)] = EDGE_DIRICHLET
    kinds[mesh.boundary_edges(NEUMANN)] = EDGE_NEUMANN
    return kinds


@dataclass
class StrongResiduals:
    """
    r_E at element quadrature points and r_J at edge quadrature points.

    Edge values follow the orientation of the edge's first triangle;
    Dirichlet edges carry zeros.
    """
    element: np.ndarray
    edge: np.ndarray
    element_norm2: np.ndarray
    element_mean: np.ndarray
    edge_norm2: np.ndarray
    edge_mean: np.ndarray
    edge_kind: np.ndarray
    edge_flux: np.ndarray = field(repr=False, default=None)


def normal_fluxes(space: FESpace, kappa: np.ndarray, u_full: np.ndarray) -> np.ndarray:
    """kappa grad u_h . n on every local edge, (nt, 3, nqe), in each triangle's own orientation."""
    out = np.empty((space.mesh.n_triangles, 3, len(space.elem.edge_points)))
    for i in range(3):
        g = space.gradients(u_full, space.elem.edge_grads[i])
        out[:, i] = kappa[:, None] * np.einsum('tqa,ta->tq', g, space.normals[:, i])
    return out


def _strong_residuals(space: FESpace, spec: ProblemSpec, kappa: np.ndarray,
                      u_full: np.ndarray) -> StrongResiduals:
    mesh, elem = space.mesh, space.elem
    u_loc = u_full[space.l2g]
    dxx, dxy, dyy = elem.second_derivative_matrices()
    C = space.metric
    lap_nodal = (C[:, 0, 0, None] * (u_loc @ dxx.T)
                 + 2.0 * C[:, 0, 1, None] * (u_loc @ dxy.T)
                 + C[:, 1, 1, None] * (u_loc @ dyy.T))
    lap_q = lap_nodal @ elem.quad_values.T
    xq = space.map_points(elem.quad_points)
    fq = np.broadcast_to(spec.source(xq[..., 0], xq[..., 1]), xq.shape[:2])
    r_E = fq + kappa[:, None] * lap_q
    w = elem.quad_weights
    element_norm2 = space.det * (r_E ** 2 @ w)
    element_mean = 2.0 * (r_E @ w)

    flux = normal_fluxes(space, kappa, u_full)
    kinds = edge_kinds(mesh)
    t0, i0 = mesh.edge_triangles[:, 0], mesh.edge_local[:, 0]
    t1, i1 = mesh.edge_triangles[:, 1], mesh.edge_local[:, 1]
    own = flux[t0, i0]
    r_J = np.zeros_like(own)

    inner = np.flatnonzero(kinds == EDGE_INTERIOR)
    # the neighbour runs along the edge backwards; the rule is symmetric
    r_J[inner] = -(own[inner] + flux[t1[inner], i1[inner]][:, ::-1])

    neu = np.flatnonzero(kinds == EDGE_NEUMANN)
    if len(neu):
        if spec.neumann is not None:
            pts = space.edge_points(t0[neu], i0[neu])
            n = space.normals[t0[neu], i0[neu]]
            g = np.broadcast_to(spec.neumann(pts[..., 0], pts[..., 1],
                                             n[:, None, 0], n[:, None, 1]), pts.shape[:2])
        else:
            g = 0.0
        r_J[neu] = g - own[neu]

    we = elem.edge_weights
    edge_norm2 = space.edge_length * (r_J ** 2 @ we)
    edge_mean = r_J @ we
    return StrongResiduals(element=r_E, edge=r_J, element_norm2=element_norm2,
                           element_mean=element_mean, edge_norm2=edge_norm2,
                           edge_mean=edge_mean, edge_kind=kinds, edge_flux=flux)


def strong_residuals(system: SparseSystem, x_k: np.ndarray) -> StrongResiduals:
    """r_E = f + div(kappa grad u_h^k) per element and the normal-flux residual r_J per edge."""
    return _strong_residuals(system.space, system.spec, system.kappa, system.expand(x_k))


def element_residual_vector(space: FESpace, residuals: StrongResiduals) -> np.ndarray:
    """(R)_n = sum_K (phi_n, r_E)_K over all global nodes."""
    elem = space.elem
    local = np.einsum('tq,q,qn->tn', residuals.element, elem.quad_weights, elem.quad_values)
    return space.scatter(local * space.det[:, None])


def edge_residual_vector(space: FESpace, residuals: StrongResiduals) -> np.ndarray:
    """
    sum over interior and Neumann edges of (phi_n, r_J), by edge quadrature.

    Each edge is integrated once from its first triangle; the edge nodes are
    shared with the neighbour, so the other side adds nothing new.
    """
    mesh, elem = space.mesh, space.elem
    edges = np.flatnonzero(residuals.edge_kind != EDGE_DIRICHLET)
    we = elem.edge_weights
    r_J = residuals.edge[edges] * space.edge_length[edges][:, None]

    t0, i0 = mesh.edge_triangles[edges, 0], mesh.edge_local[edges, 0]
    return space.scatter(np.einsum('eq,q,eqn->en', r_J, we, elem.edge_values[i0]), t0)


def split_residual(system: SparseSystem, x_k: np.ndarray,
                   r_k: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Split r_k = b - A x_k into element part R_k and edge part F_k = r_k - R_k.

    Returns:
        (R_k, F_k) over the free nodes
    """
    residuals = strong_residuals(system, x_k)
    R = system.restrict(element_residual_vector(system.space, residuals))
    r = system.residual(x_k) if r_k is None else r_k
    return R, r - R


# ---------------------------------------------------------------- weights

@dataclass
class WeightVector:
    """w_n = min over supp(phi_n) of 1/kappa, over the free nodes."""
    values: np.ndarray

    def norm(self, v: np.ndarray) -> float:
        return float(np.sqrt(np.sum(self.values * np.asarray(v) ** 2)))

    def masked_norm(self, v: np.ndarray, mask: np.ndarray) -> float:
        return float(np.sqrt(np.sum(mask * self.values * np.asarray(v) ** 2)))


def weight_vector(system: SparseSystem) -> WeightVector:
    space = system.space
    w = np.full(space.n_nodes, np.inf)
    np.minimum.at(w, space.l2g.ravel(), np.repeat(1.0 / system.kappa, space.elem.n_nodes))
    return WeightVector(values=system.restrict(w))


# ------------------------------------------------------------------ export

def export_matrix_market(system: SparseSystem, prefix: str) -> Tuple[str, str]:
    """Write A and b in Matrix Market coordinate format."""
    a_path, b_path = f"{prefix}_A.mtx", f"{prefix}_b.mtx"
    mmwrite(a_path, system.A, comment='stiffness over free nodes', symmetry='symmetric')
    mmwrite(b_path, sp.coo_matrix(system.b.reshape(-1, 1)), comment='load over free nodes')
    logger.info("Matrix Market export: %s, %s", a_path, b_path)
    return a_path, b_path
