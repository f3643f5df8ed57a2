"""
High-order finite element models for Poisson problems and CG stopping criteria.
"""

from src.models.mesh import (DIRICHLET, NEUMANN, INTERIOR, OVERLAP, EXTERIOR, LSHAPE_REGIONS,
                             DofLayout, Mesh, MeshError, SubdomainMask, classify_elements,
                             classify_subdomains, diamond_mesh, lshape_mesh, read_mesh,
                             refine_marked, unit_square_mesh, write_mesh)
from src.models.reference_element import (ReferenceElement, UnsupportedDegreeError,
                                          reference_element)
from src.models.assembly import (AssemblyError, FESpace, ProblemSpec, SparseSystem, WeightVector,
                                 assemble, direct_solve, energy_error, energy_norm,
                                 export_matrix_market, split_residual, strong_residuals,
                                 weight_vector)
from src.models.krylov import (IncompleteCholesky, IndefiniteMatrixError, IterationTrace,
                               Preconditioner, PreconditionerBreakdown, RecycleSpace, SolverStep,
                               ichol, pcg, recycling_pcg)
from src.models.estimators import (BdmLocal, BdmSystemError, EstimatorSample, EstimatorSuite,
                                   bdm_precompute, eta_alg, eta_BDM, eta_BDM_lb, eta_MR, eta_R,
                                   eta_RF, mark_above_mean)
from src.models.criteria import (CriteriaEngine, CriterionConfig, CriterionVerdict, Decision,
                                 evaluate, quality_ratio, replay, score, summary_frame, tau_sweep)

__all__ = [
    'DIRICHLET', 'NEUMANN', 'INTERIOR', 'OVERLAP', 'EXTERIOR', 'LSHAPE_REGIONS',
    'Mesh', 'MeshError', 'DofLayout', 'SubdomainMask',
    'unit_square_mesh', 'diamond_mesh', 'lshape_mesh', 'refine_marked',
    'classify_elements', 'classify_subdomains', 'read_mesh', 'write_mesh',
    'ReferenceElement', 'UnsupportedDegreeError', 'reference_element',
    'AssemblyError', 'FESpace', 'ProblemSpec', 'SparseSystem', 'WeightVector',
    'assemble', 'direct_solve', 'energy_error', 'energy_norm', 'export_matrix_market',
    'split_residual', 'strong_residuals', 'weight_vector',
    'IncompleteCholesky', 'IndefiniteMatrixError', 'IterationTrace', 'Preconditioner',
    'PreconditionerBreakdown', 'RecycleSpace', 'SolverStep', 'ichol', 'pcg', 'recycling_pcg',
    'BdmLocal', 'BdmSystemError', 'EstimatorSample', 'EstimatorSuite', 'bdm_precompute',
    'eta_alg', 'eta_BDM', 'eta_BDM_lb', 'eta_MR', 'eta_R', 'eta_RF', 'mark_above_mean',
    'CriteriaEngine', 'CriterionConfig', 'CriterionVerdict', 'Decision', 'evaluate',
    'quality_ratio', 'replay', 'score', 'summary_frame', 'tau_sweep',
]
