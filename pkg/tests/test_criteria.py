import numpy as np
import pandas as pd
import pytest

from src.models import (CriteriaEngine, CriterionConfig, Decision, EstimatorSample, EstimatorSuite,
                        evaluate, ichol, pcg, quality_ratio, replay, score, summary_frame,
                        tau_sweep)
from src.models.assembly import energy_error
from src.models.criteria import parse_criteria, parse_grid

BASE = 'c1,c2,c3,c4,c5,c7:1e-6,c7:1e-8,c7:1e-10'


@pytest.fixture(scope='module')
def test1_run(test1_system, test1_reference):
    suite = EstimatorSuite(test1_system)
    configs = parse_criteria(BASE)
    engine = CriteriaEngine(configs, sampler=suite.sample, weights=suite.weights.norm)
    M = ichol(test1_system.A)
    trace = pcg(test1_system.A, test1_system.b, M, observer=engine, x_ref=test1_reference,
                hard_floor=1e-13)
    e_dis = energy_error(test1_system.space, test1_system.spec,
                         test1_system.expand(test1_reference))
    engine.finalize(trace.err_A, e_dis)
    return engine, trace, e_dis


def _sample(k=0, res_l2=1.0, res_w=1.0, **kwargs):
    return EstimatorSample(k=k, res_l2=res_l2, res_w=res_w, **kwargs)


class TestConfig:
    def test_parse(self):
        configs = parse_criteria('c1, C5 ,c7:1e-8', tau=0.1, delay=4)
        assert [c.kind for c in configs] == ['C1', 'C5', 'C7']
        assert configs[0].tau == 0.1 and configs[0].delay == 4
        assert configs[2].tol == 1e-8
        assert configs[2].label == 'C7:1e-08'
        assert configs[0].uses_eta_alg and not configs[1].uses_eta_alg

    @pytest.mark.parametrize('token', ['c8', 'c7', 'c1:3', 'c7:2'])
    def test_rejects(self, token):
        with pytest.raises(ValueError):
            CriterionConfig.parse(token)

    def test_tau_range(self):
        with pytest.raises(ValueError):
            CriterionConfig('C1', tau=1.0)
        with pytest.raises(ValueError):
            CriterionConfig('C1', delay=0)

    def test_grid(self):
        np.testing.assert_allclose(parse_grid('3:30:4'), [3, 12, 21, 30])
        with pytest.raises(ValueError):
            parse_grid('3-30')


class TestEvaluate:
    def test_c5_equality_holds(self):
        config = CriterionConfig('C5', tau=0.5)
        assert evaluate(config, _sample(res_w=1.0, eta_RF_w=2.0)) is Decision.FIRE
        assert evaluate(config, _sample(res_w=1.0, eta_RF_w=1.0)) is Decision.HOLD

    def test_missing_data_holds(self):
        assert evaluate(CriterionConfig('C1'), _sample(eta_R=1.0)) is Decision.HOLD
        assert evaluate(CriterionConfig('C1'), _sample(), eta_alg=0.0) is Decision.HOLD
        assert evaluate(CriterionConfig('C5'), _sample()) is Decision.HOLD
        assert evaluate(CriterionConfig('C6'), _sample()) is Decision.HOLD
        assert evaluate(CriterionConfig('C7', tol=1e-3), _sample()) is Decision.HOLD

    def test_c6_needs_every_subdomain(self):
        config = CriterionConfig('C6', tau=0.5)
        good = _sample(subdomains={'interior': (0.1, 1.0), 'overlap': (0.2, 1.0)})
        bad = _sample(subdomains={'interior': (0.1, 1.0), 'overlap': (0.6, 1.0)})
        assert evaluate(config, good) is Decision.FIRE
        assert evaluate(config, bad) is Decision.HOLD

    def test_c7(self):
        config = CriterionConfig('C7', tol=1e-3)
        assert evaluate(config, _sample(res_l2=1e-3), res0=1.0) is Decision.FIRE
        assert evaluate(config, _sample(res_l2=2e-3), res0=1.0) is Decision.HOLD


class TestQuality:
    def test_ratio(self):
        assert quality_ratio(1.0, 0.0) == 1.0
        assert quality_ratio(3.0, 4.0) == pytest.approx(5.0 / 3.0)
        assert quality_ratio(0.0, 0.0) == 1.0
        assert quality_ratio(0.0, 1.0) == float('inf')

    @pytest.mark.parametrize('ratio,expected', [(None, 0), (float('inf'), 0), (2.5, 0), (2.0, 1),
                                                (1.6, 1), (1.5, 2), (1.0, 2)])
    def test_score(self, ratio, expected):
        assert score(ratio) == expected


class TestEngine:
    def test_c7_fires_at_first_crossing(self, test1_run):
        engine, trace, _ = test1_run
        res = np.asarray(trace.res_l2)
        for verdict in engine.verdicts:
            if verdict.config.kind != 'C7' or not verdict.fired:
                continue
            expected = int(np.flatnonzero(res <= verdict.config.tol * res[0])[0])
            assert verdict.k_star == expected
            assert verdict.decided_at == expected

    def test_all_fire_on_test1(self, test1_run):
        engine, _, _ = test1_run
        assert all(v.fired for v in engine.verdicts)

    def test_delayed_decision(self, test1_run):
        engine, _, _ = test1_run
        c1 = engine.verdicts[0]
        assert c1.extra_delay_iters == 10
        assert c1.decided_at == c1.k_star + 10

    def test_bdm_criterion_is_tight(self, test1_run):
        engine, _, _ = test1_run
        c3 = next(v for v in engine.verdicts if v.config.kind == 'C3')
        assert 1.0 <= c3.quality_ratio <= 1.05

    def test_premature_stop_is_poor(self, test1_run):
        _, trace, e_dis = test1_run
        assert quality_ratio(e_dis, trace.err_A[1]) > 5.0

    def test_converged_ratio(self, test1_run):
        _, trace, e_dis = test1_run
        assert quality_ratio(e_dis, trace.err_A[-1]) == pytest.approx(1.0, abs=1e-6)

    def test_replay_agrees(self, test1_run):
        engine, trace, _ = test1_run
        verdicts = replay(engine.configs, engine.samples.values(), trace)
        assert [v.k_star for v in verdicts] == [v.k_star for v in engine.verdicts]

    def test_sample_frame(self, test1_run):
        engine, trace, _ = test1_run
        frame = engine.sample_frame()
        assert len(frame) == trace.n_iterations + 1
        assert frame['eta_alg'].iloc[:trace.last - 9].notna().all()
        assert frame['eta_alg'].iloc[trace.last - 9:].isna().all()

    def test_summary(self, test1_run):
        engine, _, _ = test1_run
        frame = summary_frame(engine.verdicts, degree=4)
        assert len(frame) == 8
        assert list(frame['criterion'])[-3:] == ['C7:1e-06', 'C7:1e-08', 'C7:1e-10']
        assert (frame['N'] == 4).all()

    def test_stops_when_all_fired(self, test1_system):
        suite = EstimatorSuite(test1_system, bdm_mode='off')
        engine = CriteriaEngine(parse_criteria('c1,c5'), sampler=suite.sample,
                                stop_when_all_fired=True)
        trace = pcg(test1_system.A, test1_system.b, observer=engine, hard_floor=1e-14)
        assert trace.reason == 'observer'
        assert trace.last == max(v.decided_at for v in engine.verdicts)

    def test_sparse_sampling(self, test1_system):
        suite = EstimatorSuite(test1_system, bdm_mode='off')
        engine = CriteriaEngine(parse_criteria('c1,c5'), sampler=suite.sample, sample_every=5)
        pcg(test1_system.A, test1_system.b, observer=engine, hard_floor=1e-12)
        for verdict in engine.verdicts:
            assert verdict.fired
            assert verdict.k_star % 5 == 0

    def test_unfired_has_no_ratio(self, test1_system):
        engine = CriteriaEngine([CriterionConfig('C7', tol=1e-30)])
        trace = pcg(test1_system.A, test1_system.b, observer=engine, max_iter=5)
        verdicts = engine.finalize(trace.err_A, 1.0)
        assert not verdicts[0].fired
        assert verdicts[0].quality_ratio is None and verdicts[0].decided_at is None
        assert pd.isna(summary_frame(verdicts, 4)['iterations'].iloc[0])


def test_tau_sweep_monotone(test1_run):
    engine, trace, e_dis = test1_run
    table = tau_sweep(engine.configs, list(engine.samples.values()), trace, trace.err_A, e_dis,
                      np.linspace(3, 30, 10))
    assert not (table['criterion'].str.startswith('C7')).any()
    assert len(table) == 10 * 5
    for _, group in table.groupby('criterion'):
        k = group.sort_values('inv_tau')['k_star'].to_numpy(dtype=float)
        fired = ~np.isnan(k)
        # once a tighter tau stops firing it never fires again
        assert np.all(np.diff(fired.astype(int)) <= 0)
        assert np.all(np.diff(k[fired]) >= 0)


def test_c7_tolerances_ordered(test1_run):
    engine, _, _ = test1_run
    k = [v.k_star for v in engine.verdicts if v.config.kind == 'C7']
    assert k == sorted(k)
