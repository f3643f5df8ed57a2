"""
A posteriori error estimators and indicators evaluated along a CG run.

Every estimator works on the current iterate x_k over the free nodes:
the residual-based eta_R and eta_MR, the BDM flux-recovery estimator and its
cheap lower bound, and the weighted residual indicator eta_RF^w (globally
and per subdomain). eta_alg is read from the iteration trace.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import eval_legendre

from src.models.assembly import (EDGE_DIRICHLET, EDGE_INTERIOR, EDGE_NEUMANN, FESpace,
                                 SparseSystem, StrongResiduals, WeightVector,
                                 _fine_rule, element_residual_vector, strong_residuals,
                                 weight_vector)
from src.models.krylov import IterationTrace
from src.models.mesh import SUBDOMAIN_CLASSES, SubdomainMask

logger = logging.getLogger(__name__)

BDM_FULL = 'full'
BDM_LOWER_BOUND = 'lower_bound'
BDM_OFF = 'off'
BDM_MODES = (BDM_FULL, BDM_LOWER_BOUND, BDM_OFF)


class BdmSystemError(RuntimeError):
    """A local flux-recovery system is singular."""


@dataclass
class EstimatorSample:
    """
    Estimator values at iteration k.

    ``eta_alg`` is filled in d iterations later; ``None`` marks a value
    that was not computed (or not yet available).
    """
    k: int
    res_l2: float
    res_w: float
    eta_alg: Optional[float] = None
    eta_R: Optional[float] = None
    eta_MR: Optional[float] = None
    eta_BDM: Optional[float] = None
    eta_BDM_lb: Optional[float] = None
    eta_RF_w: Optional[float] = None
    subdomains: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    eta_R_elements: Optional[np.ndarray] = field(default=None, repr=False)

    def as_row(self) -> Dict:
        row = {'iter': self.k, 'res_l2': self.res_l2, 'res_w': self.res_w,
               'eta_alg': self.eta_alg, 'eta_R': self.eta_R, 'eta_MR': self.eta_MR,
               'eta_BDM': self.eta_BDM, 'eta_BDM_lb': self.eta_BDM_lb, 'eta_RF_w': self.eta_RF_w}
        for name, (res_p, eta_p) in self.subdomains.items():
            row[f'res_w_{name}'] = res_p
            row[f'eta_RF_w_{name}'] = eta_p
        return row


# -------------------------------------------------------------- eta_alg

def eta_alg(trace: IterationTrace, k: int, d: int = 10) -> Optional[float]:
    """||x_{k+d} - x_k||_A, or None while iteration k+d has not been reached."""
    return trace.algebraic_increment(k, d)


# ------------------------------------------------------- residual based

def _edge_kappa(space: FESpace, kappa: np.ndarray) -> np.ndarray:
    t = space.mesh.edge_triangles
    k1 = np.where(t[:, 1] >= 0, kappa[np.maximum(t[:, 1], 0)], 0.0)
    return np.maximum(kappa[t[:, 0]], k1)


def residual_indicator_per_element(space: FESpace, kappa: np.ndarray,
                                   residuals: StrongResiduals) -> np.ndarray:
    """
    eta_{R,K}^2 for every triangle.

    Interior edges contribute half to each neighbour, Neumann edges in full
    to their triangle, Dirichlet edges nothing.
    """
    mesh = space.mesh
    N = space.degree
    values = space.diameter ** 2 / (kappa * N ** 2) * residuals.element_norm2

    edge_term = space.edge_length / (_edge_kappa(space, kappa) * N) * residuals.edge_norm2
    kinds = residuals.edge_kind
    inner = np.flatnonzero(kinds == EDGE_INTERIOR)
    neu = np.flatnonzero(kinds == EDGE_NEUMANN)
    np.add.at(values, mesh.edge_triangles[inner, 0], 0.5 * edge_term[inner])
    np.add.at(values, mesh.edge_triangles[inner, 1], 0.5 * edge_term[inner])
    np.add.at(values, mesh.edge_triangles[neu, 0], edge_term[neu])
    return values


def eta_R(system: SparseSystem, x_k: np.ndarray,
          residuals: Optional[StrongResiduals] = None) -> Tuple[float, np.ndarray]:
    """
    Residual estimator with explicit h, N and kappa scaling.

    Returns:
        (global value, per-element eta_{R,K})
    """
    residuals = residuals or strong_residuals(system, x_k)
    squares = residual_indicator_per_element(system.space, system.kappa, residuals)
    return float(np.sqrt(squares.sum())), np.sqrt(squares)


def eta_MR(system: SparseSystem, x_k: np.ndarray,
           residuals: Optional[StrongResiduals] = None) -> float:
    """Modified residual estimator built from element and edge mean values."""
    residuals = residuals or strong_residuals(system, x_k)
    space = system.space
    element = space.area ** 3 * residuals.element_mean ** 2 / system.kappa
    edges = np.flatnonzero(residuals.edge_kind != EDGE_DIRICHLET)
    h = space.edge_length[edges]
    edge = h ** 3 * residuals.edge_mean[edges] ** 2 / _edge_kappa(space, system.kappa)[edges]
    return float(np.sqrt(element.sum() + edge.sum()))


# ----------------------------------------------------------- BDM recovery

@dataclass
class BdmLocal:
    """
    Per-element flux-recovery data.

    Attributes:
        mu2: (nt,) smallest eigenvalue of L_K^T M_K L_K
        lifting: (nt, 2*nm, 3*(N+1)) matrices L_K, None in lower-bound mode
        gram: (nt, 3*(N+1), 3*(N+1)) L_K^T M_K L_K, None in lower-bound mode
        systems: (nt, n, n) local matrices when kept for direct solves
        mass_scale: (nt,) |det J| / kappa_K, M_K = mass_scale * I
    """
    degree: int
    mode: str
    mu2: np.ndarray
    mass_scale: np.ndarray
    lifting: Optional[np.ndarray] = field(default=None, repr=False)
    gram: Optional[np.ndarray] = field(default=None, repr=False)
    systems: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def system_size(self) -> int:
        return (self.degree + 1) * (self.degree + 2)

    @property
    def n_edge_moments(self) -> int:
        return 3 * (self.degree + 1)

    def lift(self, d: np.ndarray, triangles: Optional[np.ndarray] = None) -> np.ndarray:
        """rho_K coefficients L_K d_K for edge data d (nt, 3, N+1)."""
        if self.lifting is None:
            raise BdmSystemError("lifting matrices were discarded (lower-bound mode)")
        L = self.lifting if triangles is None else self.lifting[triangles]
        return np.einsum('tij,tj->ti', L, d.reshape(len(L), -1))

    def solve(self, K: int, d_K: np.ndarray) -> np.ndarray:
        """rho_K by a direct solve of the local system."""
        if self.systems is None:
            raise BdmSystemError("local systems were not kept")
        rhs = np.zeros(self.system_size)
        rhs[-self.n_edge_moments:] = np.ravel(d_K)
        return np.linalg.solve(self.systems[K], rhs)


def _edge_moment_basis(N: int, t: np.ndarray) -> np.ndarray:
    """sqrt(2m+1) P_m(2t-1), (len(t), N+1); orthonormal on [0,1]."""
    m = np.arange(N + 1)
    return np.sqrt(2 * m + 1)[None, :] * eval_legendre(m[None, :], 2.0 * t[:, None] - 1.0)


def _local_systems(space: FESpace, triangles: np.ndarray) -> np.ndarray:
    """
    Square moment systems B_K acting on rho = sum_j (a_j phi_j, b_j phi_j).

    Rows: gradients of modes of degree 1..N-1, curls of bubble * P_{N-2},
    then N+1 orthonormal edge moments of rho.n on each local edge.
    """
    elem = space.elem
    N = elem.degree
    pts, w = elem.quad_points, elem.quad_weights
    phi, _ = elem.modal(pts)
    nm = phi.shape[1]

    inv_jac = space.inv_jac[triangles]
    det = space.det[triangles]

    def physical(g_ref):
        return np.einsum('tba,qmb->tqma', inv_jac, g_ref)

    tests = []
    if N >= 2:
        _, g_w = elem.modal(pts, N - 1)
        tests.append(physical(g_w[:, 1:, :]))
    if N >= 2:
        q_vals, q_grads = elem.modal(pts, N - 2)
        lam = np.column_stack([1.0 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]])
        bubble = lam.prod(axis=1)
        d_bubble = np.column_stack([
            lam[:, 0] * lam[:, 2] - lam[:, 1] * lam[:, 2],
            lam[:, 0] * lam[:, 1] - lam[:, 1] * lam[:, 2]])
        g_psi = bubble[:, None, None] * q_grads + d_bubble[:, None, :] * q_vals[:, :, None]
        g_psi = physical(g_psi)
        tests.append(np.stack([g_psi[..., 1], -g_psi[..., 0]], axis=-1))

    rows = []
    for test in tests:
        # int_K rho . test with rho = (phi_j, 0) then (0, phi_j)
        bx = np.einsum('q,tqra,qj->trj', w, test[..., :1], phi)
        by = np.einsum('q,tqra,qj->trj', w, test[..., 1:], phi)
        rows.append(np.concatenate([bx, by], axis=2) * det[:, None, None])

    t_e, w_e = elem.edge_points, elem.edge_weights
    z = _edge_moment_basis(N, t_e)
    length = np.stack([space.edge_length[space.mesh.triangle_edges[triangles, i]] for i in range(3)],
                      axis=1)
    normals = space.normals[triangles]
    for i in range(3):
        phi_e, _ = elem.modal(elem.edge_to_reference(i, t_e))
        # int_l rho.n z_m ds with z_m = basis / sqrt(|l|)
        base = np.einsum('q,qm,qj->mj', w_e, z, phi_e)
        scale = np.sqrt(length[:, i])
        bx = scale[:, None, None] * normals[:, i, 0, None, None] * base
        by = scale[:, None, None] * normals[:, i, 1, None, None] * base
        rows.append(np.concatenate([bx, by], axis=2))

    B = np.concatenate(rows, axis=1)
    if B.shape[1] != 2 * nm:
        raise BdmSystemError(f"local system has {B.shape[1]} rows, expected {2 * nm}")
    return B


def bdm_precompute(system: SparseSystem, mode: str = BDM_FULL, keep_systems: bool = False,
                   chunk: int = 512) -> BdmLocal:
    """
    Build and invert every local moment system once.

    Args:
        system: assembled problem (kappa elementwise constant)
        mode: 'full' keeps the lifting matrices; 'lower_bound' keeps only mu_K^2
        keep_systems: also keep the local matrices for direct solves

    Raises:
        BdmSystemError: a local system is singular
    """
    if mode not in (BDM_FULL, BDM_LOWER_BOUND):
        raise ValueError(f"unknown BDM mode {mode!r}")
    space = system.space
    N = space.degree
    nt = space.mesh.n_triangles
    n_edge = 3 * (N + 1)
    mass_scale = space.det / system.kappa

    mu2 = np.empty(nt)
    lifting = np.empty((nt, (N + 1) * (N + 2), n_edge)) if mode == BDM_FULL else None
    gram = np.empty((nt, n_edge, n_edge)) if mode == BDM_FULL else None
    systems = np.empty((nt, (N + 1) * (N + 2), (N + 1) * (N + 2))) if keep_systems else None

    for start in range(0, nt, chunk):
        tri = np.arange(start, min(start + chunk, nt))
        B = _local_systems(space, tri)
        cond = np.linalg.cond(B)
        bad = np.flatnonzero(~np.isfinite(cond) | (cond > 1e13))
        if len(bad):
            K = int(tri[bad[0]])
            raise BdmSystemError(f"singular flux-recovery system on triangle {K} "
                                 f"(cond={cond[bad[0]]:.2e})")
        rhs = np.zeros((len(tri), B.shape[1], n_edge))
        rhs[:, -n_edge:, :] = np.eye(n_edge)
        L = np.linalg.solve(B, rhs)
        G = mass_scale[tri, None, None] * np.einsum('tji,tjk->tik', L, L)
        mu2[tri] = np.maximum(np.linalg.eigvalsh(G)[:, 0], 0.0)
        if mode == BDM_FULL:
            lifting[tri] = L
            gram[tri] = G
        if keep_systems:
            systems[tri] = B

    logger.info("BDM local systems: %d of size %d (mode=%s), mu^2 in [%.3e, %.3e]",
                nt, (N + 1) * (N + 2), mode, mu2.min(), mu2.max())
    return BdmLocal(degree=N, mode=mode, mu2=mu2, mass_scale=mass_scale,
                    lifting=lifting, gram=gram, systems=systems)


def bdm_edge_data(space: FESpace, kappa: np.ndarray, residuals: StrongResiduals) -> np.ndarray:
    """
    Edge moments d_K of the weighted normal-flux jump, (nt, 3, N+1).

    Each triangle takes the share kappa_K / (kappa_K + kappa_other) of the
    interior jump and the full Neumann mismatch; Dirichlet edges give zero.
    """
    mesh, elem = space.mesh, space.elem
    N = elem.degree
    zw = elem.edge_weights[:, None] * _edge_moment_basis(N, elem.edge_points)
    scale = np.sqrt(space.edge_length)
    d = np.zeros((mesh.n_triangles, 3, N + 1))

    kinds = residuals.edge_kind
    t0, i0 = mesh.edge_triangles[:, 0], mesh.edge_local[:, 0]
    t1, i1 = mesh.edge_triangles[:, 1], mesh.edge_local[:, 1]

    neu = np.flatnonzero(kinds == EDGE_NEUMANN)
    d[t0[neu], i0[neu]] = scale[neu, None] * (residuals.edge[neu] @ zw)

    inner = np.flatnonzero(kinds == EDGE_INTERIOR)
    k0, k1 = kappa[t0[inner]], kappa[t1[inner]]
    r_J = residuals.edge[inner]
    d[t0[inner], i0[inner]] = (scale[inner] * k0 / (k0 + k1))[:, None] * (r_J @ zw)
    d[t1[inner], i1[inner]] = (scale[inner] * k1 / (k0 + k1))[:, None] * (r_J[:, ::-1] @ zw)
    return d


def eta_BDM(system: SparseSystem, x_k: np.ndarray, local: BdmLocal,
            residuals: Optional[StrongResiduals] = None) -> float:
    """(sum_K ||kappa^{-1/2} rho_K||^2)^{1/2} from the stored lifting Gram matrices."""
    if local.gram is None:
        raise BdmSystemError("eta_BDM needs the lifting matrices; precompute with mode='full'")
    residuals = residuals or strong_residuals(system, x_k)
    d = bdm_edge_data(system.space, system.kappa, residuals).reshape(system.mesh.n_triangles, -1)
    value = np.einsum('ti,tij,tj->', d, local.gram, d)
    return float(np.sqrt(max(value, 0.0)))


def eta_BDM_lb(system: SparseSystem, x_k: np.ndarray, local: BdmLocal,
               residuals: Optional[StrongResiduals] = None) -> float:
    """(sum_K mu_K^2 ||d_K||^2)^{1/2}."""
    residuals = residuals or strong_residuals(system, x_k)
    d = bdm_edge_data(system.space, system.kappa, residuals)
    return float(np.sqrt(np.sum(local.mu2 * np.sum(d ** 2, axis=(1, 2)))))


def bdm_flux_norms(local: BdmLocal, d: np.ndarray) -> np.ndarray:
    """||kappa^{-1/2} rho_K||^2 per element from the lifted coefficients."""
    coeffs = local.lift(d)
    return local.mass_scale * np.sum(coeffs ** 2, axis=1)


# ----------------------------------------------------------------- eta_RF

@dataclass
class RFResult:
    eta_RF_w: float
    res_w: float
    subdomains: Dict[str, Tuple[float, float]] = field(default_factory=dict)


def eta_RF(system: SparseSystem, x_k: np.ndarray, weights: Optional[WeightVector] = None,
           masks: Optional[SubdomainMask] = None, r_k: Optional[np.ndarray] = None,
           residuals: Optional[StrongResiduals] = None) -> RFResult:
    """
    eta_RF^w = ||R_k||_w + ||F_k||_w with r_k = R_k + F_k.

    Args:
        weights: weight vector over the free nodes (built if None)
        masks: node classes over the free nodes for the subdomain pairs
        r_k: the solver's residual; b - A x_k if None

    Returns:
        RFResult with per-subdomain (||M_p r_k||_w, eta_RF^{w,p})
    """
    weights = weights or weight_vector(system)
    residuals = residuals or strong_residuals(system, x_k)
    r = system.residual(x_k) if r_k is None else r_k
    R = system.restrict(element_residual_vector(system.space, residuals))
    F = r - R
    result = RFResult(eta_RF_w=weights.norm(R) + weights.norm(F), res_w=weights.norm(r))
    if masks is not None:
        for name, mask in masks.masks.items():
            result.subdomains[name] = (weights.masked_norm(r, mask),
                                       weights.masked_norm(R, mask) + weights.masked_norm(F, mask))
    return result


# --------------------------------------------------------- energy errors

def element_energy(space: FESpace, kappa: np.ndarray, u_full: np.ndarray,
                   exact_grad=None) -> np.ndarray:
    """
    kappa ||grad(u - u_h)||_K^2 per element, or kappa ||grad u_h||_K^2
    when no analytic gradient is given.
    """
    if exact_grad is None:
        g = space.gradients(u_full, space.elem.quad_grads)
        w = space.elem.quad_weights
        sq = (g ** 2).sum(axis=2)
    else:
        pts, w = _fine_rule(space.elem)
        _, ref_grads = space.elem.eval_basis(pts)
        g = space.gradients(u_full, ref_grads)
        xq = space.map_points(pts)
        gx, gy = exact_grad(xq[..., 0], xq[..., 1])
        sq = (gx - g[..., 0]) ** 2 + (gy - g[..., 1]) ** 2
    return kappa * space.det * (sq @ w)


def subdomain_energy(per_element: np.ndarray, element_class: np.ndarray) -> Dict[str, float]:
    """Energy norm restricted to the interior, overlap and exterior elements."""
    return {name: float(np.sqrt(per_element[element_class == name].sum()))
            for name in SUBDOMAIN_CLASSES}


def mark_above_mean(indicators: np.ndarray) -> np.ndarray:
    """Triangles whose indicator exceeds the mean."""
    indicators = np.asarray(indicators)
    return np.flatnonzero(indicators > indicators.mean())


# ------------------------------------------------------------------ suite

ESTIMATORS = ('eta_R', 'eta_MR', 'eta_BDM', 'eta_BDM_lb', 'eta_RF')


class EstimatorSuite:
    """
    Evaluates the configured estimators on an iterate.

    Geometry, weights and BDM data are built once; :meth:`sample` shares one
    strong-residual evaluation across all estimators.

    Args:
        system: assembled problem
        masks: node classes over all global nodes (restricted to free nodes here)
        bdm_mode: 'full', 'lower_bound' or 'off'
        enabled: estimator names to evaluate, default all
    """

    def __init__(self, system: SparseSystem, masks: Optional[SubdomainMask] = None,
                 bdm_mode: str = BDM_FULL, enabled: Optional[List[str]] = None):
        if bdm_mode not in BDM_MODES:
            raise ValueError(f"bdm_mode must be one of {BDM_MODES}, got {bdm_mode!r}")
        self.system = system
        self.weights = weight_vector(system)
        self.masks = masks.restrict(system.free) if masks is not None else None
        self.enabled = set(enabled or ESTIMATORS)
        unknown = self.enabled - set(ESTIMATORS)
        if unknown:
            raise ValueError(f"unknown estimators {sorted(unknown)}")
        if bdm_mode == BDM_OFF:
            self.enabled -= {'eta_BDM', 'eta_BDM_lb'}
        elif bdm_mode == BDM_LOWER_BOUND:
            self.enabled.discard('eta_BDM')
        self.bdm = None
        if self.enabled & {'eta_BDM', 'eta_BDM_lb'}:
            self.bdm = bdm_precompute(system, mode=bdm_mode)

    def sample(self, k: int, x_k: np.ndarray, r_k: Optional[np.ndarray] = None) -> EstimatorSample:
        system = self.system
        r = system.residual(x_k) if r_k is None else r_k
        residuals = strong_residuals(system, x_k)
        out = EstimatorSample(k=k, res_l2=float(np.linalg.norm(r)), res_w=self.weights.norm(r))
        if 'eta_R' in self.enabled:
            out.eta_R, out.eta_R_elements = eta_R(system, x_k, residuals)
        if 'eta_MR' in self.enabled:
            out.eta_MR = eta_MR(system, x_k, residuals)
        if self.bdm is not None:
            d = bdm_edge_data(system.space, system.kappa, residuals)
            flat = d.reshape(system.mesh.n_triangles, -1)
            if 'eta_BDM' in self.enabled:
                out.eta_BDM = float(np.sqrt(max(np.einsum('ti,tij,tj->', flat, self.bdm.gram, flat), 0.0)))
            if 'eta_BDM_lb' in self.enabled:
                out.eta_BDM_lb = float(np.sqrt(np.sum(self.bdm.mu2 * np.sum(flat ** 2, axis=1))))
        if 'eta_RF' in self.enabled:
            rf = eta_RF(system, x_k, self.weights, self.masks, r_k=r, residuals=residuals)
            out.eta_RF_w = rf.eta_RF_w
            out.subdomains = rf.subdomains
        return out
