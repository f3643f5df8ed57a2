"""
Preconditioned conjugate gradients with full tracing.

The solver records, per iteration k, the residual norms, the step length
gamma_k, the direction energy ||p_k||_A^2 and the running sum
sum_{i<k} gamma_i^2 ||p_i||_A^2 from which ||x_{k+d} - x_k||_A is read off.
An observer is called after every iterate and may stop the iteration.
Deflated CG reuses an orthonormal recycle basis between solves.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd
import scipy.linalg as la
import scipy.sparse as sp
from scipy.sparse.linalg import splu

logger = logging.getLogger(__name__)


class IndefiniteMatrixError(RuntimeError):
    """Non-positive curvature p^T A p met during CG."""


class PreconditionerBreakdown(RuntimeError):
    """Incomplete factorisation hit a non-positive pivot."""


# ---------------------------------------------------------- preconditioners

class Preconditioner:
    """z = M^{-1} r."""

    kind = 'identity'

    def __call__(self, r: np.ndarray) -> np.ndarray:
        return self.apply(r)

    def apply(self, r: np.ndarray) -> np.ndarray:
        return np.array(r, dtype=float, copy=True)

    def describe(self) -> Dict:
        return {'kind': self.kind}


class IncompleteCholesky(Preconditioner):
    """M = L L^T from :func:`ichol`."""

    kind = 'ichol'

    def __init__(self, L: sp.csc_matrix, droptol: float, shift: float):
        self.L = L
        self.droptol = droptol
        self.shift = shift
        # triangular solves through SuperLU without reordering or pivoting
        self._lower = splu(L.tocsc(), permc_spec='NATURAL', diag_pivot_thresh=0.0,
                           options={'SymmetricMode': True})
        self._upper = splu(L.T.tocsc(), permc_spec='NATURAL', diag_pivot_thresh=0.0,
                           options={'SymmetricMode': True})

    def apply(self, r: np.ndarray) -> np.ndarray:
        return self._upper.solve(self._lower.solve(np.asarray(r, dtype=float)))

    def describe(self) -> Dict:
        return {'kind': self.kind, 'droptol': self.droptol, 'shift': self.shift,
                'fill': int(self.L.nnz)}


def _ichol_once(A: sp.csc_matrix, droptol: float, shift: float) -> IncompleteCholesky:
    n = A.shape[0]
    lower_A = sp.tril(A, format='csc')
    col_norms = np.asarray(abs(lower_A).sum(axis=0)).reshape(-1)
    shifted = (A + shift * sp.diags(A.diagonal())).tocsc()
    lower = sp.tril(shifted, format='csc')
    lower.sort_indices()

    col_rows: List[np.ndarray] = [None] * n
    col_vals: List[np.ndarray] = [None] * n
    row_entries: List[List] = [[] for _ in range(n)]
    work = np.zeros(n)

    for j in range(n):
        start, end = lower.indptr[j], lower.indptr[j + 1]
        rows_j = lower.indices[start:end]
        work[rows_j] = lower.data[start:end]
        pattern = [rows_j, np.array([j])]
        for k, l_jk in row_entries[j]:
            rk, vk = col_rows[k], col_vals[k]
            sel = rk >= j
            work[rk[sel]] -= l_jk * vk[sel]
            pattern.append(rk[sel])
        rows = np.unique(np.concatenate(pattern))
        col = work[rows].copy()
        work[rows] = 0.0

        pivot = col[0]
        if rows[0] != j or not pivot > 0.0:
            raise PreconditionerBreakdown(
                f"ichol pivot {pivot:.3e} at column {j}; retry with a larger shift than {shift}")
        # drop on the unscaled column so the rule is invariant under A -> c A
        keep = np.abs(col) >= droptol * col_norms[j]
        keep[0] = True
        l_jj = np.sqrt(pivot)
        rows, col = rows[keep], col[keep] / l_jj
        col[0] = l_jj
        col_rows[j], col_vals[j] = rows, col
        for i, v in zip(rows[1:], col[1:]):
            row_entries[i].append((j, v))

    indptr = np.zeros(n + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(r) for r in col_rows])
    L = sp.csc_matrix((np.concatenate(col_vals), np.concatenate(col_rows), indptr), shape=(n, n))
    logger.info("ichol(droptol=%.1e, shift=%.2f): nnz(L)=%d, nnz(tril A)=%d",
                droptol, shift, L.nnz, lower.nnz)
    return IncompleteCholesky(L, droptol, shift)


def ichol(A: sp.spmatrix, droptol: float = 1e-4, shift: float = 0.1,
          retries: int = 0) -> IncompleteCholesky:
    """
    Threshold incomplete Cholesky of A + shift * diag(A).

    Left-looking column factorisation. Before scaling by the pivot, an
    entry of column j is dropped when it is below droptol * ||A(j:, j)||_1.
    With droptol = 0 nothing is dropped. After a breakdown the shift is
    doubled (starting from at least 0.1) up to ``retries`` times.

    Raises:
        PreconditionerBreakdown: on a non-positive pivot with no retries left
    """
    A = sp.csc_matrix(A, dtype=float)
    for attempt in range(retries + 1):
        try:
            return _ichol_once(A, droptol, shift)
        except PreconditionerBreakdown as exc:
            if attempt == retries:
                raise
            next_shift = max(2.0 * shift, 0.1)
            logger.warning("%s; retrying with shift %.2f", exc, next_shift)
            shift = next_shift


# --------------------------------------------------------------- tracing

@dataclass
class IterationTrace:
    """
    Per-iteration record of a CG run.

    Row k describes iterate x_k. ``gamma[k]`` and ``pAp[k]`` belong to the
    step x_k -> x_{k+1} and are NaN on the last row; ``energy_sum[k]`` is
    sum_{i<k} gamma_i^2 ||p_i||_A^2.
    """
    res_l2: List[float] = field(default_factory=list)
    res_w: List[float] = field(default_factory=list)
    gamma: List[float] = field(default_factory=list)
    pAp: List[float] = field(default_factory=list)
    energy_sum: List[float] = field(default_factory=list)
    err_A: List[float] = field(default_factory=list)
    iterates: List[np.ndarray] = field(default_factory=list)
    directions: List[np.ndarray] = field(default_factory=list)
    reason: str = ''
    final_x: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_iterations(self) -> int:
        return max(len(self.res_l2) - 1, 0)

    @property
    def last(self) -> int:
        return len(self.res_l2) - 1

    def algebraic_increment(self, k: int, d: int) -> Optional[float]:
        """||x_{k+d} - x_k||_A from the direction sums, or None if k+d is not reached."""
        if k < 0 or d < 0 or k + d > self.last:
            return None
        return float(np.sqrt(max(self.energy_sum[k + d] - self.energy_sum[k], 0.0)))

    def to_frame(self) -> pd.DataFrame:
        n = len(self.res_l2)
        frame = pd.DataFrame({
            'iter': np.arange(n),
            'res_l2': self.res_l2,
            'gamma': self.gamma + [np.nan] * (n - len(self.gamma)),
            'pAp': self.pAp + [np.nan] * (n - len(self.pAp)),
            'energy_sum': self.energy_sum,
        })
        if self.res_w:
            frame['res_w'] = self.res_w
        if self.err_A:
            frame['err_A'] = self.err_A
        return frame


@dataclass
class SolverStep:
    """State handed to the observer after iterate k."""
    k: int
    x: np.ndarray
    r: np.ndarray
    trace: IterationTrace


Observer = Callable[[SolverStep], bool]


@dataclass
class RecycleSpace:
    """
    Orthonormal deflation basis U (n x m) with its image AU.

    Args:
        U: basis, may have zero columns
        dim: target number of vectors kept on refresh
        update_period: iterations between harmonic Ritz refreshes
    """
    U: np.ndarray
    dim: int = 20
    update_period: int = 20
    AU: Optional[np.ndarray] = None

    @classmethod
    def empty(cls, n: int, dim: int = 20, update_period: int = 20) -> 'RecycleSpace':
        return cls(U=np.zeros((n, 0)), dim=dim, update_period=update_period)

    @classmethod
    def from_vectors(cls, vectors: np.ndarray, dim: Optional[int] = None,
                     update_period: int = 20) -> 'RecycleSpace':
        """Orthonormalise the columns of ``vectors``; rank-deficient columns are dropped."""
        Q = _orthonormal_columns(np.asarray(vectors, dtype=float))
        return cls(U=Q, dim=dim if dim is not None else Q.shape[1], update_period=update_period)

    @property
    def size(self) -> int:
        return self.U.shape[1]

    def orthonormality_defect(self) -> float:
        if self.size == 0:
            return 0.0
        return float(np.abs(self.U.T @ self.U - np.eye(self.size)).max())


def _orthonormal_columns(Z: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    if Z.shape[1] == 0:
        return Z.copy()
    Q, R, _ = la.qr(Z, mode='economic', pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > tol * diag[0])) if diag[0] > 0 else 0
    return Q[:, :rank]


# ------------------------------------------------------------------ solvers

def _run(A, b, M: Preconditioner, observer: Optional[Observer], max_iter: int,
         hard_floor: float, x0: Optional[np.ndarray], x_ref: Optional[np.ndarray],
         weights: Optional[np.ndarray], store_iterates: bool,
         deflation: Optional[RecycleSpace] = None,
         on_direction: Optional[Callable[[np.ndarray, np.ndarray], None]] = None,
         stagnation_window: Optional[int] = None) -> IterationTrace:
    n = len(b)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float, copy=True)
    trace = IterationTrace()

    W = AW = E_factor = None
    if deflation is not None and deflation.size > 0:
        W = deflation.U
        AW = A @ W
        deflation.AU = AW
        E_factor = la.cho_factor(W.T @ AW)
        r = b - A @ x
        x = x + W @ la.cho_solve(E_factor, W.T @ r)

    def project(z):
        if W is None:
            return z
        return z - W @ la.cho_solve(E_factor, AW.T @ z)

    def record(x, r):
        trace.res_l2.append(float(np.linalg.norm(r)))
        if weights is not None:
            trace.res_w.append(float(np.sqrt(np.sum(weights * r * r))))
        if x_ref is not None:
            e = x_ref - x
            trace.err_A.append(float(np.sqrt(max(e @ (A @ e), 0.0))))
        if store_iterates:
            trace.iterates.append(x.copy())
        logger.debug("k=%d ||r||=%.6e", len(trace.res_l2) - 1, trace.res_l2[-1])

    r = b - A @ x
    r0_norm = float(np.linalg.norm(r))
    trace.energy_sum.append(0.0)
    record(x, r)
    if observer is not None and observer(SolverStep(0, x, r, trace)):
        trace.reason = 'observer'
        trace.final_x = x
        return trace
    if r0_norm == 0.0:
        trace.reason = 'hard_floor'
        trace.final_x = x
        return trace

    z = M(r)
    p = project(z)
    rz = float(r @ z)
    best = 0
    for k in range(max_iter):
        Ap = A @ p
        pAp = float(p @ Ap)
        if not pAp > 0.0:
            raise IndefiniteMatrixError(f"p^T A p = {pAp:.3e} at iteration {k}")
        gamma = rz / pAp
        x = x + gamma * p
        r = r - gamma * Ap
        if W is not None:
            # keep W^T r = 0 in floating point; the update also moves x so r stays b - A x
            mu = la.cho_solve(E_factor, W.T @ r)
            x = x + W @ mu
            r = r - AW @ mu
        trace.gamma.append(gamma)
        trace.pAp.append(pAp)
        trace.energy_sum.append(trace.energy_sum[-1] + gamma * gamma * pAp)
        if store_iterates:
            trace.directions.append(p.copy())
        if on_direction is not None:
            on_direction(p, Ap)
        record(x, r)

        if observer is not None and observer(SolverStep(k + 1, x, r, trace)):
            trace.reason = 'observer'
            break
        if trace.res_l2[-1] <= hard_floor * r0_norm:
            trace.reason = 'hard_floor'
            break
        if trace.res_l2[-1] < trace.res_l2[best]:
            best = k + 1
        elif stagnation_window and k + 1 - best >= stagnation_window:
            trace.reason = 'stagnation'
            break
        z = M(r)
        rz_new = float(r @ z)
        beta = rz_new / rz
        p = project(z) + beta * p
        rz = rz_new
    else:
        trace.reason = 'max_iter'
    trace.final_x = x
    logger.info("CG stopped after %d iterations (%s), ||r||/||r0|| = %.3e",
                trace.n_iterations, trace.reason,
                trace.res_l2[-1] / r0_norm if r0_norm else 0.0)
    return trace


def pcg(A, b: np.ndarray, M: Optional[Preconditioner] = None, observer: Optional[Observer] = None,
        max_iter: int = 10000, hard_floor: float = 1e-14, x0: Optional[np.ndarray] = None,
        x_ref: Optional[np.ndarray] = None, weights: Optional[np.ndarray] = None,
        store_iterates: bool = False, stagnation_window: Optional[int] = None) -> IterationTrace:
    """
    Preconditioned CG.

    Args:
        A: SPD matrix or operator supporting ``A @ v``
        b: right-hand side
        M: preconditioner (identity if None)
        observer: called with a SolverStep after every iterate; True stops
        max_iter: iteration cap
        hard_floor: stop once ||r_k|| <= hard_floor * ||r_0||
        x_ref: exact solution; enables the err_A column
        weights: diagonal weights for the ||r_k||_w column
        store_iterates: keep every iterate and direction (tests only)
        stagnation_window: stop once the smallest residual is this many iterations old

    Returns:
        IterationTrace, with the final iterate in ``trace.final_x``
    """
    return _run(A, np.asarray(b, dtype=float), M or Preconditioner(), observer, max_iter,
                hard_floor, x0, x_ref, weights, store_iterates,
                stagnation_window=stagnation_window)


class _RitzCollector:
    """Gathers search directions and refreshes the next recycle basis every window."""

    def __init__(self, A, start: np.ndarray, dim: int, period: int):
        self.A = A
        self.dim = dim
        self.period = period
        self.U = start
        self.AU = A @ start if start.shape[1] else start
        self.P: List[np.ndarray] = []
        self.AP: List[np.ndarray] = []

    def __call__(self, p: np.ndarray, Ap: np.ndarray):
        self.P.append(p.copy())
        self.AP.append(Ap.copy())
        if len(self.P) >= self.period:
            self.refresh()

    def refresh(self):
        if not self.P:
            return
        Z = np.column_stack([self.U] + self.P)
        AZ = np.column_stack([self.AU] + self.AP)
        self.P, self.AP = [], []
        self.U, self.AU = harmonic_ritz(Z, AZ, self.dim)


def harmonic_ritz(Z: np.ndarray, AZ: np.ndarray, m: int, tol: float = 1e-10):
    """
    Harmonic Ritz vectors of the m smallest harmonic Ritz values on span(Z).

    Returns:
        orthonormal U (n x m') and AU, m' <= m
    """
    Q, R, perm = la.qr(Z, mode='economic', pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > tol * diag[0])) if len(diag) and diag[0] > 0 else 0
    if rank == 0:
        return Z[:, :0], AZ[:, :0]
    Q = Q[:, :rank]
    AQ = la.solve_triangular(R[:rank, :rank], AZ[:, perm[:rank]].T, trans='T').T
    G_aa = AQ.T @ AQ
    G_qa = Q.T @ AQ
    G_qa = 0.5 * (G_qa + G_qa.T)
    _, Y = la.eigh(G_aa, G_qa)
    keep = min(m, rank)
    U = Q @ Y[:, :keep]
    AU = AQ @ Y[:, :keep]
    Q2, R2 = la.qr(U, mode='economic')
    AU = la.solve_triangular(R2, AU.T, trans='T').T
    return Q2, AU


def recycling_pcg(A, b: np.ndarray, M: Optional[Preconditioner] = None,
                  recycle: Optional[RecycleSpace] = None, observer: Optional[Observer] = None,
                  max_iter: int = 10000, hard_floor: float = 1e-14,
                  x0: Optional[np.ndarray] = None, x_ref: Optional[np.ndarray] = None,
                  weights: Optional[np.ndarray] = None, store_iterates: bool = False,
                  stagnation_window: Optional[int] = 200):
    """
    Deflated PCG with a recycled subspace.

    The initial guess is corrected by the projection onto span(U) and every
    search direction is made A-orthogonal to U. After every step the
    residual's component in span(U) is removed by a Galerkin correction of
    x, so U^T r stays at rounding level even past convergence. The solve
    also stops when the residual has not improved for ``stagnation_window``
    iterations. U is fixed during the solve; the basis for the next solve is
    refreshed every ``update_period`` iterations from harmonic Ritz vectors of
    [U_next, last window of directions].

    Returns:
        (IterationTrace, RecycleSpace for the next solve)
    """
    b = np.asarray(b, dtype=float)
    recycle = recycle or RecycleSpace.empty(len(b), dim=0)
    if recycle.size and recycle.orthonormality_defect() > 1e-8:
        logger.warning("Recycle basis lost orthonormality; re-orthonormalising")
        recycle = RecycleSpace.from_vectors(recycle.U, recycle.dim, recycle.update_period)

    collector = None
    if recycle.dim > 0:
        collector = _RitzCollector(A, recycle.U, recycle.dim, recycle.update_period)
    trace = _run(A, b, M or Preconditioner(), observer, max_iter, hard_floor, x0, x_ref,
                 weights, store_iterates, deflation=recycle if recycle.size else None,
                 on_direction=collector, stagnation_window=stagnation_window)
    if collector is None:
        return trace, recycle
    collector.refresh()
    updated = RecycleSpace(U=collector.U, dim=recycle.dim, update_period=recycle.update_period,
                           AU=collector.AU)
    logger.info("Recycle space refreshed: %d vectors", updated.size)
    return trace, updated
