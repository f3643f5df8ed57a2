"""Shared fixtures: small assembled problems and recorded CG traces."""

import os
import sys

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.models import (DIRICHLET, NEUMANN, ProblemSpec, assemble, direct_solve, pcg,
                        reference_element, unit_square_mesh)
from src.problems import polynomial_field, smooth_neumann_problem, test1_mesh


def linear_patch_spec(kappa: float = 1.0) -> ProblemSpec:
    """u = x + y with exact Dirichlet data and f = 0."""
    field = polynomial_field([((0.0, 1.0), (1.0,)), ((1.0,), (0.0, 1.0))])
    return ProblemSpec(kappa={0: kappa}, source=lambda x, y: 0.0 * x,
                       dirichlet=field.value, exact=field.value, exact_grad=field.gradient,
                       name='linear_patch')


def random_spd(n: int, seed: int = 0, cond: float = 1e3) -> np.ndarray:
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eigs = np.logspace(0.0, np.log10(cond), n)
    return (Q * eigs) @ Q.T


@pytest.fixture(scope='session')
def test1_system():
    """Test problem 1 at N=4 on the 128-triangle mesh."""
    return assemble(test1_mesh(8), reference_element(4), smooth_neumann_problem())


@pytest.fixture(scope='session')
def test1_reference(test1_system):
    return direct_solve(test1_system)


@pytest.fixture(scope='session')
def test1_trace(test1_system, test1_reference):
    """Unpreconditioned CG run on test 1 with iterates kept."""
    return pcg(test1_system.A, test1_system.b, x_ref=test1_reference, hard_floor=1e-12,
               store_iterates=True)


@pytest.fixture(scope='session')
def patch_system():
    """Linear solution on a 4x4 Dirichlet square, N=3."""
    mesh = unit_square_mesh(4, boundary=DIRICHLET)
    return assemble(mesh, reference_element(3), linear_patch_spec())


@pytest.fixture(scope='session')
def neumann_square():
    return unit_square_mesh(2, boundary=NEUMANN)
