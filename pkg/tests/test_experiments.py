import glob
import os

import numpy as np
import pandas as pd
import pytest

from src.experiments import (EstimatorInvariantError, ExperimentConfig, adaptive_refine, build_problem,
                             check_invariants, load_config, reference_solution, run_batch,
                             run_experiment, scores_frame, sweep_tau)
from src.models import LSHAPE_REGIONS
from src.problems import LSHAPE_CASES, lshape_base_mesh, lshape_spec

import run_bench

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def _small(tmp_path, **overrides):
    values = dict(degree=2, n=4, criteria='c1,c3,c5,c7:1e-8', out_dir=str(tmp_path))
    values.update(overrides)
    return ExperimentConfig.for_problem('test1', **values)


class TestConfig:
    def test_problem_defaults(self):
        config = ExperimentConfig.for_problem('test2')
        assert config.degree == 6 and config.ratio == 1.0 / 32.0
        assert config.label == 'test2_N6'
        with pytest.raises(ValueError):
            ExperimentConfig.for_problem('test5')

    def test_from_mapping(self):
        config = ExperimentConfig.from_mapping(
            {'problem': 'test3_2', 'tau': '1/20', 'stop_when_all_fired': 'yes', 'degree': '3'},
            overrides={'degree': 5, 'delay': None})
        assert config.tau == pytest.approx(0.05)
        assert config.stop_when_all_fired is True
        assert config.degree == 5
        assert config.delay == 10
        assert 'c6' in config.criteria

    def test_rejects_unknown_and_bad_values(self):
        with pytest.raises(ValueError, match='unknown configuration'):
            ExperimentConfig.from_mapping({'droptolerance': '1e-4'})
        with pytest.raises(ValueError, match='bad value'):
            ExperimentConfig.from_mapping({'degree': 'four'})

    def test_validate(self):
        report = ExperimentConfig(tau=1.5, degree=0, criteria='c1,c9').validate()
        assert not report['valid']
        assert len(report['issues']) == 3
        assert ExperimentConfig().validate()['valid']

    def test_load_config(self, tmp_path):
        path = tmp_path / 'run.cfg'
        path.write_text("# comment\nproblem = test2  # trailing\n\nratio = 1/8\n")
        assert load_config(str(path)) == {'problem': 'test2', 'ratio': '1/8'}
        path.write_text("problem test2\n")
        with pytest.raises(ValueError, match='key = value'):
            load_config(str(path))

    @pytest.mark.parametrize('path', sorted(glob.glob(os.path.join(ROOT, 'configs', '*.cfg'))))
    def test_shipped_configs(self, path):
        config = ExperimentConfig.from_mapping(load_config(path))
        assert config.validate()['valid'], config.validate()['issues']

    def test_echo(self):
        text = ExperimentConfig(name='demo').echo()
        assert 'name = demo\n' in text and 'tau = 0.05\n' in text


class TestRun:
    def test_writes_outputs(self, tmp_path):
        result = run_experiment(_small(tmp_path))
        for key in ('trace', 'summary', 'mesh', 'config'):
            assert os.path.exists(result.files[key])
        trace = pd.read_csv(result.files['trace'])
        assert {'iter', 'res_l2', 'res_w', 'err_A', 'eta_alg', 'eta_R', 'eta_BDM', 'eta_RF_w',
                'total_error'} <= set(trace.columns)
        summary = pd.read_csv(result.files['summary'])
        assert list(summary['criterion']) == ['C1', 'C3', 'C5', 'C7:1e-08']
        assert os.path.dirname(result.files['trace']).endswith('test1_N2')

    def test_fired_ratios_at_least_one(self, tmp_path):
        result = run_experiment(_small(tmp_path), write=False)
        for verdict in result.verdicts:
            assert verdict.fired
            assert verdict.quality_ratio >= 1.0 - 1e-6

    def test_deterministic(self, tmp_path):
        first = run_experiment(_small(tmp_path), write=False)
        second = run_experiment(_small(tmp_path), write=False)
        pd.testing.assert_frame_equal(first.summary, second.summary)
        np.testing.assert_array_equal(first.trace.res_l2, second.trace.res_l2)

    def test_stop_when_all_fired(self, tmp_path):
        result = run_experiment(_small(tmp_path, stop_when_all_fired=True), write=False)
        assert result.trace.reason == 'observer'
        assert result.trace.last == max(v.decided_at for v in result.verdicts)

    def test_invalid_config(self, tmp_path):
        with pytest.raises(ValueError, match='invalid configuration'):
            run_experiment(_small(tmp_path, tau=2.0))

    def test_sweep_writes_table(self, tmp_path):
        result, table = sweep_tau(_small(tmp_path), grid='3:30:5')
        assert os.path.exists(result.files['tau_sweep'])
        assert set(table['criterion']) == {'C1', 'C3', 'C5'}
        assert table['inv_tau'].nunique() == 5

    def test_lshape_reference(self):
        config = ExperimentConfig.for_problem('test3_2', degree=2, refine_passes=0)
        problem = build_problem(config)
        assert problem.masks is not None and not problem.has_exact_solution
        x, e_dis = reference_solution(problem, levels=1)
        assert e_dis > 0.0 and np.all(np.isfinite(x))

    def test_diamond_mesh_size(self):
        problem = build_problem(ExperimentConfig.for_problem('test2'))
        assert problem.mesh.n_triangles == 64

    def test_refinement_grades_under_cap(self):
        case = LSHAPE_CASES['test3_1']
        spec = lshape_spec(case['kappa_inclusion'], case['source'], 'test3_1')
        base = lshape_base_mesh(0.2)
        mesh = adaptive_refine(base, spec, degree=2, passes=6, max_elements=400)
        assert mesh.n_triangles <= 400
        # red refinement quarters the area: at least three generations somewhere
        assert mesh.areas().min() <= base.areas().min() / 64.0 * (1 + 1e-12)

    def test_recycled_run(self, tmp_path):
        config = ExperimentConfig.for_problem('test4', degree=2, refine_passes=0, recycle_dim=8,
                                              recycle_period=10, out_dir=str(tmp_path))
        result = run_experiment(config, write=False)
        assert result.recycle is not None
        assert 0 < result.recycle.size <= 8
        assert result.verdict('C7:1e-08').fired
        assert result.trace.reason != 'max_iter'
        err = np.asarray(result.trace.err_A)
        assert err[int(np.argmin(err)):].max() <= 1e-6 * err[0]


class TestInvariants:
    def test_rf_upper_bound(self):
        frame = pd.DataFrame({'iter': [0, 1], 'res_w': [1.0, 2.0], 'eta_RF_w': [1.5, 1.0]})
        with pytest.raises(EstimatorInvariantError):
            check_invariants(frame)

    def test_bdm_order(self):
        frame = pd.DataFrame({'iter': [0], 'res_w': [1.0], 'eta_BDM': [1.0], 'eta_BDM_lb': [2.0]})
        with pytest.raises(EstimatorInvariantError):
            check_invariants(frame)

    def test_missing_values_pass(self):
        check_invariants(pd.DataFrame({'iter': [0], 'res_w': [1.0], 'eta_RF_w': [np.nan]}))


class TestBatch:
    def test_scores(self):
        summary = pd.DataFrame({'criterion': ['C1', 'C5', 'C7:1e-08'],
                                'quality_ratio': [1.2, 3.0, np.nan],
                                'fired': [True, True, False]})
        table = scores_frame({'a': summary, 'b': summary.assign(quality_ratio=[1.8, 1.4, np.nan])})
        scores = table.set_index('criterion')
        assert scores.loc['C1', 'total'] == 3
        assert scores.loc['C5', 'total'] == 2
        assert scores.loc['C7:1e-08', 'total'] == 0

    def test_failure_is_reported(self, tmp_path):
        good = _small(tmp_path, name='good')
        bad = _small(tmp_path, name='bad', criteria='c9')
        summaries, errors = run_batch([good, bad], out_dir=str(tmp_path))
        assert list(summaries) == ['good']
        assert 'bad' in errors and 'ValueError' in errors['bad']


class TestCommandLine:
    def test_run(self, tmp_path, capsys):
        code = run_bench.main(['run', '--problem', 'test1', '--degree', '2', '--n', '4',
                               '--criteria', 'c1,c5', '--out-dir', str(tmp_path)])
        out = capsys.readouterr().out
        assert code == 0
        assert '[OK] test1_N2' in out
        assert os.path.exists(tmp_path / 'test1_N2' / 'summary.csv')

    def test_config_file_with_override(self, tmp_path, capsys):
        cfg = tmp_path / 'small.cfg'
        cfg.write_text("problem = test1\ndegree = 3\nn = 4\ncriteria = c5\n")
        code = run_bench.main(['run', '--config', str(cfg), '--degree', '2', '--name', 'small',
                               '--out-dir', str(tmp_path)])
        assert code == 0
        echo = (tmp_path / 'small' / 'config.echo').read_text()
        assert 'degree = 2\n' in echo

    def test_error_exit(self, capsys):
        code = run_bench.main(['run', '--problem', 'test1', '--tau', '2'])
        assert code == 1
        assert '[ERROR] ValueError' in capsys.readouterr().out

    def test_export(self, tmp_path):
        code = run_bench.main(['export-matrix', '--problem', 'test1', '--degree', '2', '--n', '2',
                               '--out-dir', str(tmp_path)])
        assert code == 0
        assert os.path.exists(tmp_path / 'test1_N2' / 'test1_N2_A.mtx')
        assert os.path.exists(tmp_path / 'test1_N2' / 'test1_N2_b.mtx')

    def test_needs_command(self):
        with pytest.raises(SystemExit):
            run_bench.parse_args([])


# ------------------------------------------------------------ reproduction

def _plateaus(err, length=20, drop=0.1):
    """Separate stretches where the error falls by less than ``drop`` over ``length`` iterations."""
    err = np.asarray(err)
    flat = err[length:] > (1.0 - drop) * err[:-length]
    return int(np.count_nonzero(np.diff(flat.astype(int)) == 1) + flat[0])


@pytest.mark.slow
def test_anisotropic_mesh_penalises_residual_estimator(tmp_path):
    result = run_experiment(ExperimentConfig.for_problem('test2', out_dir=str(tmp_path)), write=False)
    c1, c2, c5 = (result.verdict(c) for c in ('C1', 'C2', 'C5'))
    assert c1.quality_ratio > c2.quality_ratio
    assert c1.quality_ratio > c5.quality_ratio
    last = result.samples[-1]
    assert last.eta_R / result.e_dis > 5.0


@pytest.mark.slow
def test_high_contrast_needs_subdomain_criterion(tmp_path):
    config = ExperimentConfig.from_mapping(load_config(os.path.join(ROOT, 'configs', 'test3_2.cfg')),
                                           {'out_dir': str(tmp_path)})
    result = run_experiment(config, write=False)
    assert result.verdict('C5').quality_ratio > 2.0
    assert result.verdict('C6').quality_ratio <= 1.5
    assert _plateaus(result.trace.err_A) >= 2


@pytest.mark.slow
def test_recycling_repairs_global_residual_criterion(tmp_path):
    base = load_config(os.path.join(ROOT, 'configs', 'test4.cfg'))
    recycled = run_experiment(ExperimentConfig.from_mapping(base, {'out_dir': str(tmp_path)}),
                              write=False)
    plain = run_experiment(ExperimentConfig.from_mapping(
        dict(base, problem='test3_2'), {'out_dir': str(tmp_path)}), write=False)
    assert recycled.verdict('C5').quality_ratio <= 1.5
    assert recycled.verdict('C7:1e-08').k_star < plain.verdict('C7:1e-08').k_star


@pytest.mark.slow
def test_tau_sweep_first_point(tmp_path):
    config = ExperimentConfig.from_mapping(load_config(os.path.join(ROOT, 'configs', 'test1_n6.cfg')),
                                           {'out_dir': str(tmp_path)})
    _, table = sweep_tau(config, grid='3:30:10', write=False)
    c1 = table[table['criterion'] == 'C1'].sort_values('inv_tau')
    assert 1.2 <= c1['quality_ratio'].iloc[0] <= 1.6
    for _, group in table.dropna(subset=['quality_ratio']).groupby('criterion'):
        ratios = group.sort_values('inv_tau')['quality_ratio'].to_numpy()
        assert np.all(np.diff(ratios) <= 1e-12)


@pytest.mark.slow
def test_refinement_concentrates_at_corners():
    problem = build_problem(ExperimentConfig.for_problem('test3_1'))
    mesh = problem.mesh
    corners = [(0.0, 0.0)] + [(x, y) for x0, x1, y0, y1 in LSHAPE_REGIONS.values()
                              for x in (x0, x1) for y in (y0, y1)]
    centroids, areas = mesh.centroids(), mesh.areas()
    densities = []
    for cx, cy in corners:
        near = np.hypot(centroids[:, 0] - cx, centroids[:, 1] - cy) < 0.1
        if near.any():
            densities.append(areas.mean() / areas[near].mean())
    assert max(densities) >= 4.0


@pytest.mark.slow
def test_reference_ladder_is_consistent():
    problem = build_problem(ExperimentConfig.for_problem('test3_2', refine_passes=3))
    _, coarse = reference_solution(problem, levels=1)
    _, fine = reference_solution(problem, levels=2)
    assert abs(coarse - fine) <= 0.25 * fine


@pytest.mark.slow
def test_subdomain_criterion_fires_later(tmp_path):
    config = ExperimentConfig.from_mapping(load_config(os.path.join(ROOT, 'configs', 'test3_2.cfg')),
                                           {'out_dir': str(tmp_path)})
    result = run_experiment(config, write=False)
    assert result.verdict('C6').k_star >= result.verdict('C5').k_star


@pytest.mark.slow
def test_smooth_problem_quality_ratios(tmp_path):
    config = ExperimentConfig.for_problem('test1', degree=4, tau=1.0 / 20.0, out_dir=str(tmp_path))
    result = run_experiment(config, write=False)
    for label in ('C1', 'C2', 'C3', 'C4', 'C5'):
        assert result.verdict(label).quality_ratio <= 1.15, label
    assert result.verdict('C7:1e-10').quality_ratio <= 1.01
