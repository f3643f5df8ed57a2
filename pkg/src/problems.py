"""
Benchmark problem data: analytic fields, manufactured sources and the
test-problem catalogue (smooth Neumann problem, anisotropic diamond mesh,
L-shape with jumping coefficients).
"""

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import polynomial as P

from src.models import (DIRICHLET, NEUMANN, LSHAPE_REGIONS, Mesh, ProblemSpec, SubdomainMask,
                        diamond_mesh, lshape_mesh, unit_square_mesh)


@dataclass(frozen=True)
class ExpPolynomial:
    """p(t) * exp(rate * t) with p given by ascending coefficients."""
    coeffs: Tuple[float, ...]
    rate: float = 0.0

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return P.polyval(t, self.coeffs) * np.exp(self.rate * t)

    def derivative(self) -> 'ExpPolynomial':
        d = P.polyadd(P.polymul([self.rate], self.coeffs), P.polyder(self.coeffs))
        return ExpPolynomial(tuple(np.atleast_1d(d).tolist()), self.rate)


@dataclass(frozen=True)
class SmoothField:
    """
    Sum of separable terms X_i(x) * Y_i(y), differentiated exactly.

    Example:
        x + y is ``SmoothField(((X, ONE), (ONE, Y)))`` with X(t) = Y(t) = t.
    """
    terms: Tuple[Tuple[ExpPolynomial, ExpPolynomial], ...]

    def value(self, x, y):
        return sum(fx(x) * fy(y) for fx, fy in self.terms)

    def gradient(self, x, y):
        gx = sum(fx.derivative()(x) * fy(y) for fx, fy in self.terms)
        gy = sum(fx(x) * fy.derivative()(y) for fx, fy in self.terms)
        return gx, gy

    def laplacian(self, x, y):
        return sum(fx.derivative().derivative()(x) * fy(y) + fx(x) * fy.derivative().derivative()(y)
                   for fx, fy in self.terms)


ONE = ExpPolynomial((1.0,))


def polynomial_field(terms: Sequence[Tuple[Sequence[float], Sequence[float]]]) -> SmoothField:
    """Field from pairs of ascending polynomial coefficients in x and y."""
    return SmoothField(tuple((ExpPolynomial(tuple(a)), ExpPolynomial(tuple(b))) for a, b in terms))


# (1 - t^2)^2 e^t in each variable
SMOOTH_NEUMANN_FIELD = SmoothField(((ExpPolynomial((1.0, 0.0, -2.0, 0.0, 1.0), 1.0),
                                     ExpPolynomial((1.0, 0.0, -2.0, 0.0, 1.0), 1.0)),))


def manufacture_rhs(field: SmoothField, kappa: float = 1.0) -> Callable:
    """f = -div(kappa grad u) for a constant kappa."""
    def source(x, y):
        return -kappa * field.laplacian(x, y)
    return source


def neumann_flux(field: SmoothField, kappa: float = 1.0) -> Callable:
    """g = kappa du/dn as a function of the point and the outward normal."""
    def flux(x, y, nx, ny):
        gx, gy = field.gradient(x, y)
        return kappa * (gx * nx + gy * ny)
    return flux


def constant_source(value: float) -> Callable:
    def source(x, y):
        return np.full(np.broadcast(x, y).shape, float(value))
    return source


def sine_source(offset: float, amplitude: float) -> Callable:
    """offset + amplitude * sin(x)."""
    def source(x, y):
        return offset + amplitude * np.sin(x) + 0.0 * np.asarray(y)
    return source


def field_problem(field: SmoothField, kappa: float = 1.0, pin_point=(1.0, 1.0),
                  name: str = 'manufactured') -> ProblemSpec:
    """Pure Neumann problem with exact data for ``field``."""
    return ProblemSpec(kappa={0: kappa}, source=manufacture_rhs(field, kappa),
                       neumann=neumann_flux(field, kappa), exact=field.value,
                       exact_grad=field.gradient, pin_point=pin_point, name=name)


# ------------------------------------------------------------ catalogue

@dataclass
class Problem:
    """A discretisation-ready benchmark instance."""
    name: str
    mesh: Mesh
    spec: ProblemSpec
    degree: int
    masks: Optional[SubdomainMask] = None
    warm_up_source: Optional[Callable] = None

    @property
    def has_exact_solution(self) -> bool:
        return self.spec.exact_grad is not None


PROBLEMS = ('test1', 'test2', 'test3_1', 'test3_2', 'test4')

# coefficient inside the three square inclusions and source for the L-shape cases
LSHAPE_CASES = {
    'test3_1': {'kappa_inclusion': 1e-6, 'source': 0.1},
    'test3_2': {'kappa_inclusion': 1e6, 'source': 10.0},
    'test4': {'kappa_inclusion': 1e6, 'source': 10.0},
}


def smooth_neumann_problem() -> ProblemSpec:
    return field_problem(SMOOTH_NEUMANN_FIELD, name='smooth_neumann')


def test1_mesh(n: int = 8) -> Mesh:
    return unit_square_mesh(n, boundary=NEUMANN)


def test2_mesh(ratio: float = 1.0 / 32.0, cells: int = 4) -> Mesh:
    return diamond_mesh(ratio, cells=cells, boundary=NEUMANN)


def lshape_spec(kappa_inclusion: float, source: float, name: str) -> ProblemSpec:
    kappa = {0: 1.0}
    kappa.update({tag: kappa_inclusion for tag in LSHAPE_REGIONS})
    return ProblemSpec(kappa=kappa, source=constant_source(source), name=name)


def lshape_base_mesh(h: float = 0.2) -> Mesh:
    return lshape_mesh(h, boundary=DIRICHLET)
