"""
Degree-N reference triangle with vertices (0,0), (1,0), (0,1).

Nodal points follow the warp & blend construction, the Vandermonde matrix is
built on an orthonormal Koornwinder-Dubiner basis, and quadrature uses
collapsed Gauss-Jacobi rules with positive weights.
"""

import logging
from functools import lru_cache
from typing import Tuple

import numpy as np
from scipy.special import eval_jacobi, gammaln, roots_jacobi, roots_legendre

logger = logging.getLogger(__name__)

MAX_DEGREE = 12

# Optimised blend parameters for the warp & blend nodes, indexed by N-1.
ALPHA_OPT = [0.0000, 0.0000, 1.4152, 0.1001, 0.2751, 0.9800, 1.0999,
             1.2832, 1.3648, 1.4773, 1.4959, 1.5743, 1.5770, 1.6223, 1.6258]

VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


class UnsupportedDegreeError(ValueError):
    """Polynomial degree outside the supported range."""


def _check_degree(N: int):
    if not 1 <= N <= MAX_DEGREE:
        raise UnsupportedDegreeError(f"degree N={N} outside supported range 1..{MAX_DEGREE}")


# ----------------------------------------------------------- 1D polynomials

def jacobi_normalized(x: np.ndarray, alpha: float, beta: float, n: int) -> np.ndarray:
    """Jacobi polynomial P_n^(alpha,beta) normalised to unit weighted L2 norm on [-1,1]."""
    log_gamma = ((alpha + beta + 1) * np.log(2.0) - np.log(2 * n + alpha + beta + 1)
                 + gammaln(n + alpha + 1) + gammaln(n + beta + 1)
                 - gammaln(n + alpha + beta + 1) - gammaln(n + 1))
    return eval_jacobi(n, alpha, beta, x) / np.exp(0.5 * log_gamma)


def jacobi_normalized_grad(x: np.ndarray, alpha: float, beta: float, n: int) -> np.ndarray:
    if n == 0:
        return np.zeros_like(np.asarray(x, dtype=float))
    return np.sqrt(n * (n + alpha + beta + 1)) * jacobi_normalized(x, alpha + 1, beta + 1, n - 1)


def gauss_lobatto(N: int) -> np.ndarray:
    """N+1 Legendre-Gauss-Lobatto points on [-1,1]."""
    if N == 1:
        return np.array([-1.0, 1.0])
    inner, _ = roots_jacobi(N - 1, 1.0, 1.0)
    return np.concatenate([[-1.0], np.sort(inner), [1.0]])


# --------------------------------------------------------------- nodal set

def _warp_factor(N: int, rout: np.ndarray) -> np.ndarray:
    lgl = gauss_lobatto(N)
    req = np.linspace(-1.0, 1.0, N + 1)
    veq = np.column_stack([jacobi_normalized(req, 0, 0, j) for j in range(N + 1)])
    pmat = np.vstack([jacobi_normalized(rout, 0, 0, i) for i in range(N + 1)])
    lmat = np.linalg.solve(veq.T, pmat)
    warp = lmat.T @ (lgl - req)
    zerof = (np.abs(rout) < 1.0 - 1e-10).astype(float)
    sf = 1.0 - (zerof * rout) ** 2
    return warp / sf + warp * (zerof - 1.0)


def nodal_set(N: int) -> np.ndarray:
    """
    Warp & blend nodes on the unit reference triangle.

    Args:
        N: polynomial degree, 1..12

    Returns:
        ((N+1)(N+2)/2, 2) array of reference coordinates
    """
    _check_degree(N)
    alpha = ALPHA_OPT[N - 1]
    L1, L3 = [], []
    for n in range(N + 1):
        for m in range(N + 1 - n):
            L1.append(n / N)
            L3.append(m / N)
    L1 = np.array(L1)
    L3 = np.array(L3)
    L2 = 1.0 - L1 - L3

    # equilateral triangle coordinates
    X = -L2 + L3
    Y = (-L2 - L3 + 2.0 * L1) / np.sqrt(3.0)
    blend1 = 4.0 * L2 * L3
    blend2 = 4.0 * L1 * L3
    blend3 = 4.0 * L1 * L2
    warp1 = blend1 * _warp_factor(N, L3 - L2) * (1.0 + (alpha * L1) ** 2)
    warp2 = blend2 * _warp_factor(N, L1 - L3) * (1.0 + (alpha * L2) ** 2)
    warp3 = blend3 * _warp_factor(N, L2 - L1) * (1.0 + (alpha * L3) ** 2)
    X = X + warp1 + np.cos(2 * np.pi / 3) * warp2 + np.cos(4 * np.pi / 3) * warp3
    Y = Y + np.sin(2 * np.pi / 3) * warp2 + np.sin(4 * np.pi / 3) * warp3

    # equilateral -> biunit (r, s) -> unit triangle
    l1 = (np.sqrt(3.0) * Y + 1.0) / 3.0
    l2 = (-3.0 * X - np.sqrt(3.0) * Y + 2.0) / 6.0
    l3 = (3.0 * X - np.sqrt(3.0) * Y + 2.0) / 6.0
    r = -l2 + l3 - l1
    s = -l2 - l3 + l1
    return np.column_stack([(r + 1.0) / 2.0, (s + 1.0) / 2.0])


# ------------------------------------------------------------ modal basis

def modal_degrees(M: int) -> np.ndarray:
    """Total degree of each orthonormal mode, in the order used by :func:`dubiner_basis`."""
    return np.array([i + j for i in range(M + 1) for j in range(M + 1 - i)])


def dubiner_basis(M: int, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Orthonormal modes of total degree <= M on the unit triangle.

    Returns:
        values (npts, nmodes) and gradients (npts, nmodes, 2)
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    r = 2.0 * pts[:, 0] - 1.0
    s = 2.0 * pts[:, 1] - 1.0
    denom = 1.0 - s
    near_top = np.abs(denom) < 1e-14
    a = np.where(near_top, -1.0, 2.0 * (1.0 + r) / np.where(near_top, 1.0, denom) - 1.0)
    b = s

    values, grads = [], []
    for i in range(M + 1):
        fa = jacobi_normalized(a, 0, 0, i)
        dfa = jacobi_normalized_grad(a, 0, 0, i)
        for j in range(M + 1 - i):
            gb = jacobi_normalized(b, 2 * i + 1, 0, j)
            dgb = jacobi_normalized_grad(b, 2 * i + 1, 0, j)
            values.append(np.sqrt(2.0) * fa * gb * (1.0 - b) ** i)

            half = 0.5 * (1.0 - b)
            dr = dfa * gb
            ds = dfa * gb * 0.5 * (1.0 + a)
            if i > 0:
                dr = dr * half ** (i - 1)
                ds = ds * half ** (i - 1)
            tmp = dgb * half ** i
            if i > 0:
                tmp = tmp - 0.5 * i * gb * half ** (i - 1)
            ds = ds + fa * tmp
            scale = 2.0 ** (i + 0.5)
            grads.append(np.stack([dr * scale, ds * scale], axis=-1))

    # unit triangle has a quarter of the biunit area; d/dxi = 2 d/dr
    values = 2.0 * np.column_stack(values)
    grads = 4.0 * np.stack(grads, axis=1)
    return values, grads


# ------------------------------------------------------------- quadrature

@lru_cache(maxsize=None)
def triangle_quadrature(exactness: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Collapsed Gauss-Jacobi rule on the unit triangle.

    Uses x = u, y = v(1-u) with a Gauss-Jacobi(1,0) rule in u and
    Gauss-Legendre in v.

    Args:
        exactness: total polynomial degree integrated exactly

    Returns:
        points (nq, 2), weights (nq,) summing to 1/2
    """
    n = max(1, int(np.ceil((exactness + 1) / 2.0)))
    gu, wu = roots_jacobi(n, 1.0, 0.0)
    gv, wv = roots_legendre(n)
    u = 0.5 * (gu + 1.0)
    v = 0.5 * (gv + 1.0)
    U, V = np.meshgrid(u, v, indexing='ij')
    WU, WV = np.meshgrid(wu / 4.0, wv / 2.0, indexing='ij')
    points = np.column_stack([U.ravel(), (V * (1.0 - U)).ravel()])
    weights = (WU * WV).ravel()
    points.setflags(write=False)
    weights.setflags(write=False)
    return points, weights


@lru_cache(maxsize=None)
def edge_quadrature(exactness: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule on [0,1]; weights sum to 1."""
    n = max(1, int(np.ceil((exactness + 1) / 2.0)))
    g, w = roots_legendre(n)
    t = 0.5 * (g + 1.0)
    w = 0.5 * w
    t.setflags(write=False)
    w.setflags(write=False)
    return t, w


# ------------------------------------------------------- reference element

class ReferenceElement:
    """
    Nodal Lagrange element of degree N on the unit triangle.

    Attributes:
        nodes: (Np, 2) nodal points
        vertex_nodes: node index of each vertex
        edge_nodes: (3, N+1) node indices on local edge i, ordered from
            vertex i to vertex i+1
        interior_nodes: nodes off the boundary
        quad_points, quad_weights: triangle rule exact to degree 2N+2
        edge_points, edge_weights: rule on [0,1] exact to degree 2N+1
    """

    def __init__(self, N: int):
        _check_degree(N)
        self.degree = N
        self.n_nodes = (N + 1) * (N + 2) // 2
        self.nodes = nodal_set(N)
        self._locate_nodes()

        self.vandermonde, gmodal = dubiner_basis(N, self.nodes)
        self.vandermonde_inv = np.linalg.inv(self.vandermonde)
        self.dxi = gmodal[:, :, 0] @ self.vandermonde_inv
        self.deta = gmodal[:, :, 1] @ self.vandermonde_inv

        self.quad_points, self.quad_weights = triangle_quadrature(2 * N + 2)
        self.edge_points, self.edge_weights = edge_quadrature(2 * N + 1)
        self.quad_values, self.quad_grads = self.eval_basis(self.quad_points)
        on_edges = [self.eval_basis(self.edge_to_reference(i, self.edge_points)) for i in range(3)]
        self.edge_values = np.stack([v for v, _ in on_edges])
        self.edge_grads = np.stack([g for _, g in on_edges])

        for arr in (self.nodes, self.vandermonde, self.vandermonde_inv, self.dxi, self.deta,
                    self.quad_values, self.quad_grads, self.edge_values, self.edge_grads):
            arr.setflags(write=False)

    def _locate_nodes(self, tol: float = 1e-10):
        xi, eta = self.nodes[:, 0], self.nodes[:, 1]
        self.vertex_nodes = np.array(
            [int(np.argmin(np.hypot(xi - vx, eta - vy))) for vx, vy in VERTICES])
        on_edge = [np.abs(eta) < tol, np.abs(xi + eta - 1.0) < tol, np.abs(xi) < tol]
        keys = [xi, eta, -eta]
        edge_nodes = []
        for i in range(3):
            ids = np.flatnonzero(on_edge[i])
            edge_nodes.append(ids[np.argsort(keys[i][ids])])
        self.edge_nodes = np.array(edge_nodes)
        if self.edge_nodes.shape != (3, self.degree + 1):
            raise RuntimeError(f"nodal set of degree {self.degree} has a malformed edge layout")
        boundary = np.zeros(self.n_nodes, dtype=bool)
        boundary[self.edge_nodes.ravel()] = True
        self.interior_nodes = np.flatnonzero(~boundary)
        # position of the edge nodes along the edge, shared by all three edges
        self.edge_node_params = xi[self.edge_nodes[0]]

    @staticmethod
    def edge_to_reference(i: int, t: np.ndarray) -> np.ndarray:
        """Reference coordinates of parameter t on local edge i."""
        a, b = VERTICES[i], VERTICES[(i + 1) % 3]
        t = np.asarray(t, dtype=float)
        return a[None, :] + t[:, None] * (b - a)[None, :]

    def eval_basis(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Nodal basis at arbitrary reference points.

        Returns:
            values (npts, Np) and reference gradients (npts, Np, 2)
        """
        modes, gmodes = dubiner_basis(self.degree, points)
        values = modes @ self.vandermonde_inv
        grads = np.einsum('pmd,mn->pnd', gmodes, self.vandermonde_inv)
        return values, grads

    def modal(self, points: np.ndarray, degree: int = None) -> Tuple[np.ndarray, np.ndarray]:
        return dubiner_basis(self.degree if degree is None else degree, points)

    def second_derivative_matrices(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nodal d2/dxi2, d2/dxideta, d2/deta2."""
        return self.dxi @ self.dxi, self.dxi @ self.deta, self.deta @ self.deta

    def vandermonde_condition(self) -> float:
        return float(np.linalg.cond(self.vandermonde))

    def __repr__(self) -> str:
        return f"ReferenceElement(N={self.degree}, nodes={self.n_nodes})"


@lru_cache(maxsize=None)
def reference_element(N: int) -> ReferenceElement:
    """Shared, cached element of degree N."""
    elem = ReferenceElement(N)
    logger.debug("Built reference element N=%d (cond V = %.3e)", N, elem.vandermonde_condition())
    return elem


def quadrature(N: int):
    """Triangle and edge rules used for degree N: ((points, weights), (t, weights))."""
    _check_degree(N)
    return triangle_quadrature(2 * N + 2), edge_quadrature(2 * N + 1)
