"""
Experiment workflow: build a test problem, solve it with PCG (or recycling
PCG) while every stopping criterion watches the iteration, and write the
trace and summary tables.
"""

import logging
import os
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from multiprocessing import Pool
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.models import (Preconditioner, RecycleSpace, SparseSystem, assemble,
                        classify_subdomains, direct_solve, energy_error, ichol, pcg,
                        recycling_pcg, reference_element, refine_marked, write_mesh)
from src.models.criteria import (CriteriaEngine, CriterionVerdict, parse_criteria, parse_grid,
                                 score, summary_frame, tau_sweep)
from src.models.estimators import EstimatorSuite, eta_R, mark_above_mean
from src.models.mesh import DofLayout, Mesh
from src.problems import (LSHAPE_CASES, PROBLEMS, Problem, lshape_base_mesh, lshape_spec,
                          sine_source, smooth_neumann_problem, test1_mesh, test2_mesh)

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.10e'
MAX_REFERENCE_DOFS = 5_000_000
ICHOL_RETRIES = 8


class ProblemSizeError(ValueError):
    """A solve would exceed the desk-scale size guard."""


class EstimatorInvariantError(RuntimeError):
    """A recorded trace row breaks an estimator bound."""


# ------------------------------------------------------------ configuration

BASE_CRITERIA = 'c1,c2,c3,c4,c5,c7:1e-6,c7:1e-8,c7:1e-10'
SUBDOMAIN_CRITERIA = BASE_CRITERIA + ',c6'


@dataclass
class ExperimentConfig:
    """
    Parameters of one benchmark run.

    Per-problem defaults live in PROBLEM_DEFAULTS; values from a config file
    and then from the command line override them.
    """
    problem: str = 'test1'
    name: str = ''
    degree: int = 4
    n: int = 8
    ratio: float = 1.0 / 32.0
    cells: int = 4
    h: float = 0.2
    refine_passes: int = 0
    max_elements: int = 1500
    reference_levels: int = 1
    tau: float = 0.05
    delay: int = 10
    criteria: str = BASE_CRITERIA
    sample_every: int = 1
    bdm_mode: str = 'full'
    preconditioner: str = 'ichol'
    droptol: float = 1e-4
    shift: float = 0.1
    max_iter: int = 5000
    hard_floor: float = 1e-14
    stop_when_all_fired: bool = False
    recycle_dim: int = 20
    recycle_period: int = 20
    warm_up_floor: float = 1e-10
    out_dir: str = 'results'
    seed: int = 0

    PROBLEM_DEFAULTS = {
        'test1': {'degree': 4, 'n': 8, 'criteria': BASE_CRITERIA},
        'test2': {'degree': 6, 'ratio': 1.0 / 32.0, 'cells': 4, 'criteria': BASE_CRITERIA},
        'test3_1': {'degree': 4, 'h': 0.2, 'refine_passes': 10, 'max_elements': 1500,
                    'criteria': SUBDOMAIN_CRITERIA},
        'test3_2': {'degree': 4, 'h': 0.2, 'refine_passes': 10, 'max_elements': 1500,
                    'criteria': SUBDOMAIN_CRITERIA},
        'test4': {'degree': 4, 'h': 0.2, 'refine_passes': 10, 'max_elements': 1500,
                  'criteria': SUBDOMAIN_CRITERIA, 'recycle_dim': 20, 'recycle_period': 20},
    }

    @classmethod
    def for_problem(cls, problem: str, **overrides) -> 'ExperimentConfig':
        if problem not in cls.PROBLEM_DEFAULTS:
            raise ValueError(f"unknown problem {problem!r}; expected one of {list(PROBLEMS)}")
        values = dict(cls.PROBLEM_DEFAULTS[problem])
        values.update(overrides)
        return cls(problem=problem, **values)

    @classmethod
    def from_mapping(cls, mapping: Dict[str, str], overrides: Optional[Dict] = None) -> 'ExperimentConfig':
        """Typed config from string values (file) plus already-typed overrides (CLI)."""
        known = {f.name: f.type for f in fields(cls)}
        merged = dict(mapping)
        merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
        unknown = sorted(set(merged) - set(known))
        if unknown:
            raise ValueError(f"unknown configuration key(s): {', '.join(unknown)}")
        problem = str(merged.pop('problem', 'test1'))
        typed = {key: _coerce(value, known[key], key) for key, value in merged.items()}
        return cls.for_problem(problem, **typed)

    @property
    def label(self) -> str:
        return self.name or f"{self.problem}_N{self.degree}"

    @property
    def output_dir(self) -> str:
        return os.path.join(self.out_dir, self.label)

    def criterion_configs(self):
        return parse_criteria(self.criteria, tau=self.tau, delay=self.delay)

    def validate(self) -> Dict:
        """Report {'valid', 'issues'} without raising."""
        issues = []
        if self.problem not in PROBLEMS:
            issues.append(f"unknown problem {self.problem!r}")
        for key in ('degree', 'n', 'cells', 'max_elements', 'delay', 'sample_every', 'max_iter',
                    'recycle_period'):
            if getattr(self, key) <= 0:
                issues.append(f"{key} must be positive")
        for key in ('ratio', 'h', 'droptol', 'hard_floor', 'warm_up_floor'):
            if not getattr(self, key) > 0:
                issues.append(f"{key} must be positive")
        if self.shift < 0:
            issues.append("shift must be non-negative")
        for key in ('refine_passes', 'reference_levels', 'recycle_dim'):
            if getattr(self, key) < 0:
                issues.append(f"{key} must be non-negative")
        if not 0.0 < self.tau < 1.0:
            issues.append(f"tau must lie in (0, 1), got {self.tau}")
        if self.ratio > 1.0:
            issues.append("ratio must not exceed 1")
        if self.bdm_mode not in ('full', 'lower_bound', 'off'):
            issues.append(f"unknown bdm_mode {self.bdm_mode!r}")
        if self.preconditioner not in ('ichol', 'none'):
            issues.append(f"unknown preconditioner {self.preconditioner!r}")
        try:
            self.criterion_configs()
        except ValueError as exc:
            issues.append(str(exc))
        return {'valid': not issues, 'issues': issues}

    def echo(self) -> str:
        return ''.join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def _coerce(value, kind, key: str):
    if not isinstance(value, str):
        return value
    value = value.strip()
    try:
        if kind is bool:
            if value.lower() in ('1', 'true', 'yes', 'on'):
                return True
            if value.lower() in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(Fraction(value)) if '/' in value else float(value)
    except ValueError as exc:
        raise ValueError(f"bad value for {key}: {value!r}") from exc
    return value


def load_config(path: str) -> Dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition('=')
            if not sep or not key.strip():
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            values[key.strip()] = value.strip()
    return values


# ----------------------------------------------------------- problem setup

def estimate_dofs(mesh: Mesh, degree: int) -> int:
    interior = (degree - 1) * (degree - 2) // 2
    return mesh.n_vertices + mesh.n_edges * (degree - 1) + mesh.n_triangles * interior


def adaptive_refine(mesh: Mesh, spec, degree: int, passes: int,
                    max_elements: Optional[int] = None) -> Mesh:
    """
    Solve, mark triangles whose eta_{R,K} exceeds the mean, refine; repeat.

    When refining every marked triangle would overshoot ``max_elements``,
    the marked set is cut back to its largest indicators (halving until the
    refined mesh fits) so later passes keep grading towards the
    singularities instead of stopping.
    """
    elem = reference_element(degree)
    for level in range(passes):
        if max_elements is not None and mesh.n_triangles >= max_elements:
            logger.info("Element cap %d reached after %d pass(es)", max_elements, level)
            break
        if estimate_dofs(mesh, degree) > MAX_REFERENCE_DOFS:
            raise ProblemSizeError(f"refinement pass {level} would exceed {MAX_REFERENCE_DOFS} dofs")
        system = assemble(mesh, elem, spec)
        x = direct_solve(system)
        _, per_element = eta_R(system, x)
        marked = mark_above_mean(per_element)
        candidate = refine_marked(mesh, marked)
        if max_elements is not None and candidate.n_triangles > max_elements:
            ranked = marked[np.argsort(per_element[marked])[::-1]]
            while candidate.n_triangles > max_elements and len(ranked) > 1:
                ranked = ranked[:len(ranked) // 2]
                candidate = refine_marked(mesh, ranked)
            if candidate.n_triangles > max_elements:
                logger.info("Pass %d cannot stay under the cap %d; keeping %d triangles",
                            level, max_elements, mesh.n_triangles)
                break
            logger.info("Pass %d refines the %d largest of %d marked triangles (cap %d)",
                        level, len(ranked), len(marked), max_elements)
        mesh = candidate
    return mesh


def build_problem(config: ExperimentConfig) -> Problem:
    """Mesh (refined when the problem asks for it), data and subdomain masks."""
    if config.problem == 'test1':
        return Problem(config.problem, test1_mesh(config.n), smooth_neumann_problem(), config.degree)
    if config.problem == 'test2':
        return Problem(config.problem, test2_mesh(config.ratio, config.cells),
                       smooth_neumann_problem(), config.degree)
    case = LSHAPE_CASES[config.problem]
    spec = lshape_spec(case['kappa_inclusion'], case['source'], config.problem)
    mesh = adaptive_refine(lshape_base_mesh(config.h), spec, config.degree,
                           config.refine_passes, config.max_elements)
    elem = reference_element(config.degree)
    masks = classify_subdomains(mesh, DofLayout(mesh, elem))
    warm_up = sine_source(10.0, 50.0) if config.problem == 'test4' else None
    return Problem(config.problem, mesh, spec, config.degree, masks=masks, warm_up_source=warm_up)


def _full_energy(system: SparseSystem, x: np.ndarray) -> float:
    u = system.expand(x)
    return float(u @ (system.A_full @ u))


def reference_solution(problem: Problem, levels: int = 1,
                       system: Optional[SparseSystem] = None) -> Tuple[np.ndarray, float]:
    """
    Tight direct solve and ||u - u_h||_E.

    With an analytic solution the discretisation error is integrated
    directly; otherwise it is ||u_fine||_E^2 - ||u_h||_E^2 from a solve on a
    mesh refined ``levels`` more times by the same marker (nested spaces).
    """
    elem = reference_element(problem.degree)
    system = system or assemble(problem.mesh, elem, problem.spec)
    x = direct_solve(system)
    if problem.has_exact_solution:
        return x, energy_error(system.space, problem.spec, system.expand(x))

    fine_mesh = adaptive_refine(problem.mesh, problem.spec, problem.degree, levels)
    dofs = estimate_dofs(fine_mesh, problem.degree)
    if dofs > MAX_REFERENCE_DOFS:
        raise ProblemSizeError(f"reference solve needs {dofs} dofs (limit {MAX_REFERENCE_DOFS})")
    fine = assemble(fine_mesh, elem, problem.spec)
    x_fine = direct_solve(fine)
    gap = _full_energy(fine, x_fine) - _full_energy(system, x)
    if gap < 0:
        logger.warning("Reference energy gap is negative (%.3e); clamping to 0", gap)
    e_dis = float(np.sqrt(max(gap, 0.0)))
    logger.info("Reference solve on %d triangles (%d dofs): ||e_dis||_E = %.6e",
                fine_mesh.n_triangles, dofs, e_dis)
    return x, e_dis


def build_preconditioner(config: ExperimentConfig, system: SparseSystem) -> Preconditioner:
    if config.preconditioner == 'none':
        return Preconditioner()
    return ichol(system.A, droptol=config.droptol, shift=config.shift, retries=ICHOL_RETRIES)


def warm_up_recycle_space(problem: Problem, config: ExperimentConfig,
                          M: Preconditioner) -> RecycleSpace:
    """Recycle basis from a recycling-CG solve with the warm-up source on the same mesh."""
    spec = replace(problem.spec, source=problem.warm_up_source, name=f"{problem.name}_warm_up")
    system = assemble(problem.mesh, reference_element(problem.degree), spec)
    empty = RecycleSpace.empty(system.n_free, config.recycle_dim, config.recycle_period)
    trace, space = recycling_pcg(system.A, system.b, M, empty, max_iter=config.max_iter,
                                 hard_floor=config.warm_up_floor)
    logger.info("Warm-up solve: %d iterations, recycle space of %d vectors",
                trace.n_iterations, space.size)
    return space


# ------------------------------------------------------------------- runs

@dataclass
class ExperimentResult:
    config: ExperimentConfig
    problem: Problem
    system: SparseSystem
    engine: CriteriaEngine
    trace: object
    verdicts: List[CriterionVerdict]
    e_dis: float
    x_ref: np.ndarray
    summary: pd.DataFrame
    trace_frame: pd.DataFrame
    recycle: Optional[RecycleSpace] = None
    files: Dict[str, str] = field(default_factory=dict)

    @property
    def samples(self):
        return [self.engine.samples[k] for k in sorted(self.engine.samples)]

    def verdict(self, label: str) -> CriterionVerdict:
        for v in self.verdicts:
            if v.config.label == label:
                return v
        raise KeyError(label)


def check_invariants(frame: pd.DataFrame):
    """Upper bound ||r_k||_w <= eta_RF^w and ordering eta_BDM_lb <= eta_BDM on every row."""
    if 'eta_RF_w' in frame:
        rows = frame.dropna(subset=['eta_RF_w'])
        bad = rows[rows['res_w'] > rows['eta_RF_w'] * (1.0 + 1e-12)]
        if len(bad):
            raise EstimatorInvariantError(
                f"||r_k||_w > eta_RF^w at iteration(s) {bad['iter'].tolist()[:5]}")
    if 'eta_BDM' in frame and 'eta_BDM_lb' in frame:
        rows = frame.dropna(subset=['eta_BDM', 'eta_BDM_lb'])
        bad = rows[rows['eta_BDM_lb'] > rows['eta_BDM'] * (1.0 + 1e-10)]
        if len(bad):
            raise EstimatorInvariantError(
                f"eta_BDM_lb > eta_BDM at iteration(s) {bad['iter'].tolist()[:5]}")


def _trace_frame(trace, engine: CriteriaEngine, e_dis: float) -> pd.DataFrame:
    frame = trace.to_frame()
    samples = engine.sample_frame().drop(columns=['res_l2', 'res_w'], errors='ignore')
    frame = frame.merge(samples, on='iter', how='left')
    if 'err_A' in frame:
        frame['total_error'] = np.sqrt(e_dis ** 2 + frame['err_A'] ** 2)
    # estimators that were never evaluated leave all-empty columns
    return frame.dropna(axis=1, how='all')


def write_outputs(result: ExperimentResult, extra: Optional[Dict[str, pd.DataFrame]] = None):
    out = result.config.output_dir
    os.makedirs(out, exist_ok=True)
    files = {
        'trace': os.path.join(out, 'trace.csv'),
        'summary': os.path.join(out, 'summary.csv'),
        'mesh': os.path.join(out, 'mesh.txt'),
        'config': os.path.join(out, 'config.echo'),
    }
    check_invariants(result.trace_frame)
    result.trace_frame.to_csv(files['trace'], index=False, float_format=FLOAT_FORMAT)
    result.summary.to_csv(files['summary'], index=False, float_format=FLOAT_FORMAT)
    write_mesh(result.problem.mesh, files['mesh'])
    with open(files['config'], 'w') as fh:
        fh.write(result.config.echo())
    for name, frame in (extra or {}).items():
        files[name] = os.path.join(out, f'{name}.csv')
        frame.to_csv(files[name], index=False, float_format=FLOAT_FORMAT)
    result.files.update(files)
    logger.info("Wrote %s", ', '.join(sorted(files.values())))


def run_experiment(config: ExperimentConfig, write: bool = True,
                   problem: Optional[Problem] = None) -> ExperimentResult:
    """
    Solve one benchmark with all configured criteria watching the iteration.

    Raises:
        ValueError: invalid configuration
    """
    report = config.validate()
    if not report['valid']:
        raise ValueError("invalid configuration: " + '; '.join(report['issues']))
    criteria = config.criterion_configs()

    problem = problem or build_problem(config)
    elem = reference_element(config.degree)
    system = assemble(problem.mesh, elem, problem.spec)
    for issue in system.validate()['issues']:
        logger.warning("%s: %s", config.label, issue)
    x_ref, e_dis = reference_solution(problem, config.reference_levels, system)

    M = build_preconditioner(config, system)
    suite = EstimatorSuite(system, masks=problem.masks, bdm_mode=config.bdm_mode)
    engine = CriteriaEngine(criteria, sampler=suite.sample, weights=suite.weights.norm,
                            sample_every=config.sample_every,
                            stop_when_all_fired=config.stop_when_all_fired, delay=config.delay)

    recycle = None
    solve_kwargs = dict(observer=engine, max_iter=config.max_iter, hard_floor=config.hard_floor,
                        x_ref=x_ref, weights=suite.weights.values)
    if problem.warm_up_source is not None:
        start = warm_up_recycle_space(problem, config, M)
        trace, recycle = recycling_pcg(system.A, system.b, M, start, **solve_kwargs)
    else:
        trace = pcg(system.A, system.b, M, **solve_kwargs)

    verdicts = engine.finalize(trace.err_A, e_dis)
    for v in verdicts:
        if not v.fired:
            logger.info("%s did not fire within %d iterations", v.config.label, trace.n_iterations)
    result = ExperimentResult(config=config, problem=problem, system=system, engine=engine,
                              trace=trace, verdicts=verdicts, e_dis=e_dis, x_ref=x_ref,
                              summary=summary_frame(verdicts, config.degree),
                              trace_frame=_trace_frame(trace, engine, e_dis), recycle=recycle)
    if write:
        write_outputs(result)
    return result


def sweep_tau(config: ExperimentConfig, grid: str = '3:30:50', write: bool = True):
    """Run once to the hard floor, then re-evaluate the frozen trace for each 1/tau."""
    config = replace(config, stop_when_all_fired=False)
    result = run_experiment(config, write=False)
    table = tau_sweep(result.engine.configs, result.samples, result.trace, result.trace.err_A,
                      result.e_dis, parse_grid(grid))
    if write:
        write_outputs(result, extra={'tau_sweep': table})
    return result, table


# ------------------------------------------------------------------ batch

def _run_one(config: ExperimentConfig):
    try:
        result = run_experiment(config)
        return config.label, result.summary, None
    except Exception as exc:  # reported per experiment, the batch continues
        return config.label, None, f"{type(exc).__name__}: {exc}"


def scores_frame(summaries: Dict[str, pd.DataFrame]) -> pd.DataFrame:
    """Criterion x experiment table of 0/1/2 scores with a total column."""
    rows = []
    for label, summary in summaries.items():
        for _, row in summary.iterrows():
            ratio = row['quality_ratio'] if row['fired'] else None
            rows.append({'criterion': row['criterion'], 'experiment': label,
                         'score': score(None if ratio is None or pd.isna(ratio) else float(ratio))})
    if not rows:
        return pd.DataFrame(columns=['criterion', 'total'])
    table = pd.DataFrame(rows).pivot_table(index='criterion', columns='experiment',
                                           values='score', aggfunc='first', fill_value=0)
    table['total'] = table.sum(axis=1)
    return table.reset_index()


def run_batch(configs: Sequence[ExperimentConfig], jobs: int = 1, out_dir: str = 'results'):
    """
    Run several experiments, in worker processes when jobs > 1.

    Returns:
        (summaries by label, errors by label)
    """
    if jobs > 1:
        with Pool(processes=jobs) as pool:
            outcomes = pool.map(_run_one, list(configs))
    else:
        outcomes = [_run_one(c) for c in configs]

    summaries, errors = {}, {}
    for label, summary, error in outcomes:
        if error is None:
            summaries[label] = summary
            logger.info("[OK] %s", label)
        else:
            errors[label] = error
            logger.error("%s failed: %s", label, error)
    if len(summaries) > 1:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, 'scores.csv')
        scores_frame(summaries).to_csv(path, index=False)
        logger.info("Wrote %s", path)
    return summaries, errors
