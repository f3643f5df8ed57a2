import numpy as np
import pytest
from scipy.io import mmread

from src.models import (DIRICHLET, NEUMANN, AssemblyError, Mesh, ProblemSpec, assemble,
                        direct_solve, energy_norm, export_matrix_market, lshape_mesh,
                        reference_element, split_residual, strong_residuals, unit_square_mesh,
                        weight_vector)
from src.models.assembly import EDGE_DIRICHLET, EDGE_INTERIOR, edge_residual_vector
from src.problems import SMOOTH_NEUMANN_FIELD, constant_source, smooth_neumann_problem
from src.problems import test1_mesh as square_mesh


def _two_triangles(boundary=DIRICHLET):
    return Mesh([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 1, 2], [0, 2, 3]], default_tag=boundary)


class TestAssemble:
    def test_single_free_node(self):
        spec = ProblemSpec(kappa={0: 1.0}, source=constant_source(0.0))
        system = assemble(unit_square_mesh(2), reference_element(1), spec)
        assert system.n_free == 1
        np.testing.assert_allclose(system.A.toarray(), [[4.0]], atol=1e-12)

    def test_linear_patch(self, patch_system):
        x = direct_solve(patch_system)
        coords = patch_system.space.layout.coordinates[patch_system.free]
        np.testing.assert_allclose(x, coords.sum(axis=1), atol=1e-10)

    def test_symmetry(self, test1_system):
        A = test1_system.A
        assert abs(A - A.T).max() / abs(A).max() <= 1e-12

    def test_pin_must_be_vertex(self):
        spec = ProblemSpec(kappa={0: 1.0}, source=constant_source(1.0), pin_point=(0.3, 0.3))
        with pytest.raises(AssemblyError):
            assemble(unit_square_mesh(2, boundary=NEUMANN), reference_element(2), spec)

    def test_pure_neumann_needs_pin(self):
        spec = ProblemSpec(kappa={0: 1.0}, source=constant_source(0.0))
        with pytest.raises(AssemblyError):
            assemble(unit_square_mesh(2, boundary=NEUMANN), reference_element(2), spec)

    def test_kappa_checks(self):
        mesh = lshape_mesh()
        with pytest.raises(AssemblyError):
            assemble(mesh, reference_element(1), ProblemSpec(kappa={0: 1.0}, source=constant_source(1)))
        bad = {0: 1.0, 1: 1.0, 2: -1.0, 3: 1.0}
        with pytest.raises(AssemblyError):
            assemble(mesh, reference_element(1), ProblemSpec(kappa=bad, source=constant_source(1)))

    def test_compatible_neumann_data(self, test1_system, patch_system):
        assert abs(test1_system.neumann_balance) <= 1e-8
        assert test1_system.validate()['valid']
        assert patch_system.neumann_balance is None
        assert patch_system.validate()['valid']

    def test_incompatible_neumann_data_reported(self):
        spec = ProblemSpec(kappa={0: 1.0}, source=constant_source(1.0), pin_point=(1.0, 1.0))
        system = assemble(unit_square_mesh(2, boundary=NEUMANN), reference_element(2), spec)
        assert system.neumann_balance == pytest.approx(1.0)
        report = system.validate()
        assert not report['valid']
        assert 'incompatible Neumann data' in report['issues'][0]

    def test_galerkin_orthogonality(self, test1_system, test1_reference):
        # a(u - u_h, phi_n) = b_n - (A x)_n
        residual = test1_system.residual(test1_reference)
        assert np.abs(residual).max() <= 1e-8


class TestEnergyNorm:
    def test_zero(self, test1_system):
        assert energy_norm(test1_system.space, test1_system.spec, np.zeros(test1_system.space.n_nodes)) == 0.0

    def test_matches_quadratic_form(self, test1_system):
        rng = np.random.default_rng(3)
        u = rng.standard_normal(test1_system.space.n_nodes)
        expected = np.sqrt(u @ (test1_system.A_full @ u))
        assert abs(energy_norm(test1_system.space, test1_system.spec, u) - expected) <= 1e-10 * expected

    def test_analytic_solution(self):
        spec = smooth_neumann_problem()
        coarse = assemble(square_mesh(8), reference_element(4), spec).space
        fine = assemble(square_mesh(16), reference_element(4), spec).space
        a = energy_norm(coarse, spec, SMOOTH_NEUMANN_FIELD.gradient)
        b = energy_norm(fine, spec, SMOOTH_NEUMANN_FIELD.gradient)
        assert abs(a - b) <= 1e-8 * b


class TestStrongResiduals:
    def test_linear_patch_vanishes(self, patch_system):
        res = strong_residuals(patch_system, direct_solve(patch_system))
        assert np.abs(res.element).max() <= 1e-11
        inner = res.edge_kind == EDGE_INTERIOR
        assert np.abs(res.edge[inner]).max() <= 1e-11

    def test_laplacian_of_quadratic(self):
        mesh = Mesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]])
        spec = ProblemSpec(kappa={0: 1.0}, source=constant_source(0.0), dirichlet=lambda x, y: x ** 2)
        system = assemble(mesh, reference_element(2), spec)
        assert system.n_free == 0
        res = strong_residuals(system, np.zeros(0))
        np.testing.assert_allclose(res.element, 2.0, atol=1e-12)
        np.testing.assert_allclose(res.element_mean, [2.0], atol=1e-12)

    def test_jump_sign(self):
        # u_h = x - y below the diagonal, 0 above it
        spec = ProblemSpec(kappa={0: 1.0}, source=constant_source(0.0),
                           dirichlet=lambda x, y: np.maximum(x - y, 0.0))
        system = assemble(_two_triangles(), reference_element(1), spec)
        res = strong_residuals(system, np.zeros(0))
        inner = np.flatnonzero(res.edge_kind == EDGE_INTERIOR)
        assert len(inner) == 1
        np.testing.assert_allclose(res.edge[inner[0]], np.sqrt(2.0), atol=1e-12)


class TestSplitResidual:
    def test_identity_at_converged_solve(self, test1_system, test1_reference):
        r = test1_system.residual(test1_reference)
        R, F = split_residual(test1_system, test1_reference)
        assert np.linalg.norm(r) <= 1e-10 * np.linalg.norm(test1_system.b)
        assert np.linalg.norm(R) > 1e3 * np.linalg.norm(r)
        np.testing.assert_allclose(R + F, r, atol=1e-12 * max(np.linalg.norm(R), 1.0))

    def test_patch(self, patch_system):
        R, F = split_residual(patch_system, direct_solve(patch_system))
        assert np.abs(R).max() <= 1e-10
        assert np.abs(F).max() <= 1e-10

    @pytest.mark.parametrize('mesh_factory', [
        lambda: unit_square_mesh(3), lambda: lshape_mesh(), lambda: _two_triangles(NEUMANN)])
    def test_random_iterates(self, mesh_factory):
        mesh = mesh_factory()
        kappa = {int(r): 1.0 + r for r in np.unique(mesh.region)}
        pin = None if len(mesh.boundary_edges(DIRICHLET)) else (1.0, 1.0)
        spec = ProblemSpec(kappa=kappa, source=lambda x, y: 1.0 + x * y,
                           neumann=lambda x, y, nx, ny: nx - 2 * ny, pin_point=pin)
        system = assemble(mesh, reference_element(3), spec)
        rng = np.random.default_rng(7)
        for _ in range(100):
            x = rng.standard_normal(system.n_free)
            r = system.residual(x)
            R, F = split_residual(system, x, r)
            assert np.linalg.norm(R + F - r) <= 1e-12 * np.linalg.norm(r)

    def test_edge_quadrature_matches(self):
        spec = ProblemSpec(kappa={0: 1.0}, source=lambda x, y: 1.0 + x * y,
                           neumann=lambda x, y, nx, ny: x * nx + y * ny, pin_point=(1.0, 1.0))
        system = assemble(_two_triangles(NEUMANN), reference_element(3), spec)
        rng = np.random.default_rng(11)
        x = rng.standard_normal(system.n_free)
        _, F = split_residual(system, x)
        direct = system.restrict(edge_residual_vector(system.space, strong_residuals(system, x)))
        np.testing.assert_allclose(direct, F, rtol=1e-9, atol=1e-9 * np.abs(F).max())

    def test_interior_edge_counted_once(self):
        spec = ProblemSpec(kappa={0: 1.0}, source=constant_source(0.0), pin_point=(1.0, 1.0))
        system = assemble(_two_triangles(NEUMANN), reference_element(2), spec)
        x = np.random.default_rng(3).standard_normal(system.n_free)
        residuals = strong_residuals(system, x)
        inner = residuals.edge_kind == EDGE_INTERIOR
        assert np.abs(residuals.edge_mean[inner]).max() > 1e-3
        # the nodal basis sums to one along every edge
        edges = residuals.edge_kind != EDGE_DIRICHLET
        expected = np.sum(system.space.edge_length[edges] * residuals.edge_mean[edges])
        total = edge_residual_vector(system.space, residuals).sum()
        assert total == pytest.approx(expected, rel=1e-12, abs=1e-12)


class TestWeights:
    def test_unit_kappa(self, test1_system):
        np.testing.assert_array_equal(weight_vector(test1_system).values, 1.0)

    def test_min_over_support(self):
        mesh = lshape_mesh()
        spec = ProblemSpec(kappa={0: 1.0, 1: 1e6, 2: 1e6, 3: 1e6}, source=constant_source(1.0))
        system = assemble(mesh, reference_element(2), spec)
        w = weight_vector(system).values
        coords = system.space.layout.coordinates[system.free]
        inside = (np.abs(coords[:, 0] + 0.5) < 0.3 + 1e-12) & (np.abs(coords[:, 1] - 0.5) < 0.3 + 1e-12)
        assert np.all(w[inside] == 1e-6)
        far = (coords[:, 0] > -0.15) & (coords[:, 1] > -0.15)
        assert np.all(w[far] == 1.0)


def test_matrix_market_export(tmp_path, test1_system):
    a_path, b_path = export_matrix_market(test1_system, str(tmp_path / 'test1'))
    A = mmread(a_path).tocsr()
    b = np.asarray(mmread(b_path).todense()).reshape(-1)
    np.testing.assert_allclose(A.toarray(), test1_system.A.toarray(), rtol=1e-14, atol=1e-14)
    np.testing.assert_allclose(b, test1_system.b, rtol=1e-14)
