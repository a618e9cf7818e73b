import numpy as np
import pytest

from segzip.design import (Cluster, Dataset, Known, ModelSpec, Observation, Panel, ParamPack,
                           Random)
from segzip.errors import DomainError, EvaluationError, StructuralError
from segzip.segfit import (AlgorithmOptions, GridOptions, fit_known, fit_plain, fit_random,
                           grid_init, grid_points, predict, pseudo_step, working_fit)
from segzip.segfun import ChangepointBounds, SegKind, cp_derivative, cp_from_lambda, seg_value
from segzip.simulate import ScenarioConfig, gen_scenario, scenario_spec
import segzip.segfit as segfit

B148 = ChangepointBounds(1.0, 48.0)
SB = ChangepointBounds(0.0, 10.0)

# a small design where the changepoint is well identified
SMALL = ScenarioConfig.scenario1(n_clusters=40, m_per_cluster=15, bounds=(0.0, 10.0), lam=0.0,
                                 x_sd=2.0, delta=-0.8, beta1=0.3)


def _single(times, offset=1.0, kind=SegKind.LINEAR, q=0):
    spec = ModelSpec(p_count=1, p_zero=0, q_cluster=q, seg_kind=kind, cp_mode=Random(B148))
    obs = [Observation(0, float(t), offset, (1.0,), (), (1.0,) * q) for t in times]
    return Dataset([Cluster(0, obs)]), spec


@pytest.fixture(scope="module")
def small_fit():
    data, truth = gen_scenario(SMALL, 1)
    fit = fit_random(data, scenario_spec(SMALL), init_psi=4.0)
    return data, truth, fit


class TestPseudoStep:
    def test_after_changepoint(self):
        data, spec = _single([40.0])
        ps = pseudo_step([0.0], [0.2], data, spec)
        assert ps.psi[0] == pytest.approx(24.5, abs=1e-12)
        assert ps.u[0, 0] == pytest.approx(15.5, abs=1e-12)
        assert ps.v[0, 0] == pytest.approx(-11.75, abs=1e-12)
        assert ps.g_pc[0, 0] == pytest.approx(-2.35, abs=1e-12)
        assert ps.o_star[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_before_changepoint(self):
        data, spec = _single([10.0])
        ps = pseudo_step([0.0], [0.2], data, spec)
        assert (ps.u[0, 0], ps.v[0, 0], ps.g_pc[0, 0], ps.o_star[0, 0]) == (0.0, 0.0, 0.0, 0.0)

    @pytest.mark.parametrize("kind", list(SegKind))
    def test_first_order_exactness(self, kind):
        rng = np.random.default_rng(3)
        for _ in range(50):
            times = rng.uniform(1, 48, size=5)
            off = float(rng.uniform(0.1, 100))
            data, spec = _single(times, off, kind)
            lam, dlt = rng.normal(0, 3), rng.normal(0, 1)
            ps = pseudo_step([lam], [dlt], data, spec)
            lhs = ps.o_star + dlt * ps.u + lam * ps.g_pc
            rhs = np.log(off) + dlt * seg_value(kind, times, cp_from_lambda(lam, B148))
            assert np.allclose(lhs[0], rhs, rtol=0, atol=1e-12 * (1 + np.abs(rhs).max()))

    def test_input_checks(self):
        data, spec = _single([5.0])
        with pytest.raises(DomainError):
            pseudo_step([np.nan], [0.2], data, spec)
        with pytest.raises(StructuralError):
            pseudo_step([0.0, 1.0], [0.2, 0.1], data, spec)
        with pytest.raises(StructuralError):
            pseudo_step([0.0], [0.2], data, spec.known_version(3.0))


class TestGrid:
    def test_size(self):
        pts = grid_points(1.0, 48.0, 0.25)
        assert len(pts) == 189
        assert pts[0] == 1.0 and pts[-1] == 48.0

    def test_endpoint_appended(self):
        pts = grid_points(0.0, 1.0, 0.3)
        assert np.allclose(pts, [0.0, 0.3, 0.6, 0.9, 1.0])
        with pytest.raises(DomainError):
            grid_points(0.0, 1.0, 0.0)

    def test_ties_go_to_smallest(self, monkeypatch):
        data, _ = gen_scenario(ScenarioConfig.scenario1(n_clusters=5, m_per_cluster=6,
                                                        bounds=(3.0, 7.0)), 0)
        monkeypatch.setattr(segfit, "_mse", lambda fit, panel: 1.0)
        res = grid_init(data, scenario_spec(ScenarioConfig.scenario1(bounds=(3.0, 7.0))), step=2.0)
        assert list(res.candidates) == [3.0, 5.0, 7.0]
        assert res.psi0 == 3.0
        assert len(res.table()) == 3

    def test_grid_picks_minimum(self):
        data, _ = gen_scenario(SMALL, 1)
        res = grid_init(data, scenario_spec(SMALL), step=2.5)
        assert res.psi0 == res.candidates[int(np.argmin(res.mse))]
        assert np.all(np.isfinite(res.mse))


class TestFitKnown:
    def test_recovers_delta(self):
        cfg = ScenarioConfig.scenario1(n_clusters=40, m_per_cluster=15, bounds=(0.0, 10.0),
                                       lam=0.0, x_sd=2.0, delta=-0.8, beta1=0.3,
                                       re_sd=(0.1, 0.1, 0.1, 0.0))
        data, truth = gen_scenario(cfg, 2)
        spec = scenario_spec(cfg).known_version(5.0)
        fit = fit_known(data, spec)
        est, se = fit.param("delta")
        assert abs(est - cfg.delta) < 3 * se
        assert fit.known_psi == 5.0
        assert np.all(fit.cluster_changepoints == 5.0)
        assert np.isfinite(fit.mse)

    def test_changepoint_past_data_flags_zero_column(self):
        data, _ = gen_scenario(SMALL, 0)
        spec = scenario_spec(SMALL).known_version(100.0)
        fit = fit_known(data, spec)
        assert fit.flags.get("segment_column_zero")
        assert fit.param("delta")[0] == 0.0

    def test_changepoint_before_data_flags_rank(self):
        data, _ = gen_scenario(SMALL, 0)
        spec = scenario_spec(SMALL).known_version(-100.0)
        fit = fit_known(data, spec)
        assert fit.flags.get("rank_deficient")

    def test_needs_known_spec(self):
        data, _ = gen_scenario(SMALL, 0)
        with pytest.raises(StructuralError):
            fit_known(data, scenario_spec(SMALL))
        with pytest.raises(StructuralError):
            fit_plain(data, scenario_spec(SMALL))


class TestWorkingFit:
    def test_saturated_lambda_is_frozen(self):
        rng = np.random.default_rng(1)
        spec = ModelSpec(p_count=1, p_zero=1, q_cluster=1, cp_mode=Random(B148))
        clusters = [Cluster(i, [Observation(int(rng.poisson(2)), float(t), 1.0, (1.0,), (1.0,), (1.0,))
                                for t in range(1, 11)]) for i in range(8)]
        data = Dataset(clusters)
        ps = pseudo_step(np.full(8, 5.0), np.full(8, 0.2), data, spec)
        assert not np.any(ps.v)
        init = ParamPack(np.array([0.5, 0.2, 5.0]), np.array([-1.0]), np.array([np.log(0.3)]))
        raw = working_fit(data, spec, ps, init)
        assert raw.lambda_frozen
        assert raw.theta_hat[2] == 5.0

    def test_reproducible(self):
        data, _ = gen_scenario(SMALL, 0)
        spec = scenario_spec(SMALL)
        n = len(data.clusters)
        ps = pseudo_step(np.zeros(n), np.full(n, -0.8), data, spec)
        init = ParamPack(np.array([1.0, 0.3, -0.8, 0.0]), np.array([-0.5]),
                         np.array([np.log(0.1), 0, np.log(0.1), 0, 0, np.log(0.1), 0, 0, 0,
                                   np.log(0.1)]))
        a = working_fit(data, spec, ps, init)
        b = working_fit(data, spec, ps, init)
        assert a.loglik == b.loglik
        assert np.array_equal(a.theta_hat, b.theta_hat)


class TestFitRandom:
    def test_result_invariants(self, small_fit):
        data, truth, fit = small_fit
        l1, l2 = SMALL.bounds
        assert np.all((fit.cluster_changepoints > l1) & (fit.cluster_changepoints < l2))
        assert np.all(np.isfinite(fit.loglik_trace))
        assert fit.iterations == len(fit.loglik_trace)
        if fit.converged:
            tr = fit.loglik_trace
            assert abs(tr[-1] - tr[-2]) / abs(tr[-2]) < 1e-5
        assert fit.psi0 == 4.0

    def test_recovers_generator(self, small_fit):
        data, truth, fit = small_fit
        assert fit.converged
        lam, _ = fit.param("lambda")
        assert fit.population_changepoint == pytest.approx(cp_from_lambda(SMALL.lam, SB),
                                                           abs=0.5)
        assert fit.param("delta")[0] == pytest.approx(SMALL.delta, abs=0.2)
        assert np.isfinite(lam)

    def test_delta_method(self, small_fit):
        _, _, fit = small_fit
        lam, se = fit.param("lambda")
        expect = cp_derivative(lam, SB) * se
        if np.isfinite(expect):
            assert fit.population_changepoint_se == pytest.approx(expect, rel=1e-10)
        else:
            assert np.isnan(fit.population_changepoint_se)

    def test_initialisation_matches_known_fit(self, small_fit):
        data, _, fit = small_fit
        known = fit_known(data, scenario_spec(SMALL).known_version(fit.psi0))
        assert fit.init_loglik == pytest.approx(known.loglik, abs=1e-8)

    def test_deterministic(self, small_fit):
        data, _, fit = small_fit
        again = fit_random(data, scenario_spec(SMALL), init_psi=4.0)
        assert again.loglik_trace == fit.loglik_trace
        assert np.array_equal(again.estimate, fit.estimate)
        assert np.array_equal(again.cluster_changepoints, fit.cluster_changepoints)

    def test_no_changepoint_effect_terminates(self):
        cfg = ScenarioConfig.scenario1(n_clusters=20, m_per_cluster=10, bounds=(2.0, 8.0),
                                       delta=0.0, re_sd=(0.1, 0.1, 0.0, 0.1))
        data, _ = gen_scenario(cfg, 0)
        opts = AlgorithmOptions(max_iter=8, se=False)
        fit = fit_random(data, scenario_spec(cfg), init_psi=5.0, opts=opts)
        assert fit.iterations <= 8
        assert fit.converged or "best_iterate" in fit.flags

    def test_failed_iteration_keeps_best_iterate(self, monkeypatch):
        data, _ = gen_scenario(SMALL, 1)
        real = segfit.working_fit
        calls = []

        def flaky(*args, **kw):
            calls.append(1)
            if len(calls) == 3:
                raise EvaluationError("inner derivatives not finite in cluster 0")
            return real(*args, **kw)
        monkeypatch.setattr(segfit, "working_fit", flaky)
        fit = fit_random(data, scenario_spec(SMALL), init_psi=4.0,
                         opts=AlgorithmOptions(se=False))
        assert not fit.converged
        assert fit.flags["failed_iteration"] == 3
        assert fit.iterations == 2
        assert fit.flags["best_iterate"] in (1, 2)
        assert fit.loglik == max(fit.loglik_trace)

    def test_bad_inputs(self):
        data, _ = gen_scenario(SMALL, 0)
        with pytest.raises(DomainError):
            fit_random(data, scenario_spec(SMALL), init_psi=50.0)
        with pytest.raises(StructuralError):
            fit_random(data, scenario_spec(SMALL).known_version(3.0), init_psi=3.0)


class TestPredict:
    def test_no_zero_model(self):
        cfg = ScenarioConfig.scenario1(n_clusters=10, m_per_cluster=8)
        data, _ = gen_scenario(cfg, 0)
        spec = ModelSpec(p_count=2, p_zero=0, q_cluster=1, cp_mode=Known(5.0))
        data = Dataset([Cluster(c.id, [Observation(o.y, o.t, o.offset, o.x_row, (), (1.0,))
                                       for o in c.observations]) for c in data.clusters])
        fit = fit_known(data, spec)
        pr = predict(fit, data)
        yhat, mu, pi = pr.flat()
        assert np.all(pi == 0.0)
        assert np.array_equal(yhat, mu)
        assert np.all(yhat > 0)

    def test_positive_and_matches_mse(self, small_fit):
        data, _, fit = small_fit
        pr = predict(fit, data)
        yhat, mu, pi = pr.flat()
        assert np.all(yhat > 0)
        y = Panel.from_dataset(data, fit.spec).y[pr.mask]
        assert fit.mse == pytest.approx(np.mean((y - yhat) ** 2), rel=1e-12)

    def test_cluster_mismatch(self, small_fit):
        data, _, fit = small_fit
        with pytest.raises(StructuralError):
            predict(fit, Dataset(list(reversed(data.clusters))))

    def test_changepoint_model_beats_plain_fit(self, small_fit):
        data, _, fit = small_fit
        plain = fit_plain(data, scenario_spec(SMALL).without_changepoint())
        assert fit.mse <= plain.mse


def test_grid_options_default_step():
    assert GridOptions().step == 0.25
