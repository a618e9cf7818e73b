import numpy as np
import pytest
from scipy import stats

from segzip.design import Panel, ZetaMode
from segzip.errors import DomainError
from segzip.segfun import ChangepointBounds, SegKind, cp_from_lambda, seg_value
from segzip.simulate import (CrbsiConfig, ScenarioConfig, crbsi_spec, derive_seed, gen_crbsi,
                             gen_scenario, scenario_spec)
from segzip.zipdist import ZipParams, inv_logit, zip_logpmf


def _xy(data):
    x = np.array([[o.t for o in c.observations] for c in data.clusters])
    y = np.array([[o.y for o in c.observations] for c in data.clusters])
    return x, y


class TestScenarioConfig:
    def test_scenario1_defaults(self):
        t = ScenarioConfig.scenario1().truth()
        assert t == {"beta0": 1.0, "beta1": 0.2, "delta": 0.2, "lambda": 5.0, "gamma0": -0.5}
        assert ScenarioConfig.scenario1().seg_kind is SegKind.LINEAR

    def test_scenario2_defaults(self):
        cfg = ScenarioConfig.scenario2()
        assert cfg.truth() == {"beta0": 1.0, "beta1": -0.2, "delta": -0.2, "lambda": 2.0,
                               "gamma0": 0.5}
        assert cfg.seg_kind is SegKind.QUADRATIC

    @pytest.mark.parametrize("kw", [dict(n_clusters=0), dict(m_per_cluster=1),
                                    dict(re_sd=(0.1, -0.1, 0.1, 0.1)), dict(re_sd=(0.1,)),
                                    dict(bounds=(5.0, 5.0)), dict(x_sd=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(DomainError):
            ScenarioConfig(**kw)

    def test_spec_matches_generator(self):
        cfg = ScenarioConfig.scenario2(n_clusters=3, m_per_cluster=4)
        data, _ = gen_scenario(cfg)
        spec = scenario_spec(cfg)
        panel = Panel.from_dataset(data, spec)
        assert panel.n_clusters == 3 and panel.n_obs == 12
        assert spec.seg_kind is SegKind.QUADRATIC


class TestGenScenario:
    def test_structural_zero_fraction(self):
        cfg = ScenarioConfig.scenario1(n_clusters=5000, m_per_cluster=20)
        _, truth = gen_scenario(cfg, 3)
        s = truth["structural_zero"].ravel()
        p = float(inv_logit(-0.5))
        assert p == pytest.approx(0.37754, abs=1e-5)
        se = np.sqrt(p * (1 - p) / s.size)
        assert abs(s.mean() - p) < 3 * se

    def test_truth_record_reproduces_draws(self):
        cfg = ScenarioConfig.scenario2(n_clusters=50, m_per_cluster=8)
        data, truth = gen_scenario(cfg, 1)
        x, y = _xy(data)
        assert np.allclose(truth["l1"], x.min(axis=1)) and np.allclose(truth["l2"], x.max(axis=1))
        psi = cp_from_lambda(cfg.lam + truth["l"], (truth["l1"], truth["l2"]))
        assert np.array_equal(psi, truth["psi"])
        eta = ((cfg.beta0 + truth["b0"])[:, None] + (cfg.beta1 + truth["b1"])[:, None] * x
               + (cfg.delta + truth["d"])[:, None] * seg_value(cfg.seg_kind, x, psi[:, None]))
        assert np.allclose(np.exp(eta), truth["mu"], rtol=1e-14)
        assert np.all(y[truth["structural_zero"]] == 0)
        assert all(o.offset == 1.0 and o.w_row == (1.0,) for c in data.clusters
                   for o in c.observations)

    def test_per_cluster_bounds_rule(self):
        cfg = ScenarioConfig.scenario1(n_clusters=200, m_per_cluster=5, re_sd=(0.1, 0.1, 0.1, 3.0))
        _, truth = gen_scenario(cfg, 0)
        assert np.all((truth["psi"] > truth["l1"]) & (truth["psi"] < truth["l2"]))

    @pytest.mark.parametrize("point", range(10))
    def test_mean_matches_zip_mean(self, point):
        rng = np.random.default_rng(point)
        cfg = ScenarioConfig.scenario1(
            n_clusters=2000, m_per_cluster=50, re_sd=(0, 0, 0, 0), x_sd=0.0, bounds=(1.0, 10.0),
            beta0=float(rng.uniform(-1, 1.5)), beta1=float(rng.uniform(-0.2, 0.2)),
            delta=float(rng.uniform(-0.3, 0.3)), lam=float(rng.uniform(-3, 3)),
            gamma0=float(rng.uniform(-2, 1)), master_seed=100 + point)
        data, truth = gen_scenario(cfg, 0)
        _, y = _xy(data)
        psi = cp_from_lambda(cfg.lam, ChangepointBounds(1.0, 10.0))
        mu = np.exp(cfg.beta0 + cfg.beta1 * 5 + cfg.delta * seg_value(SegKind.LINEAR, 5.0, psi))
        pi = inv_logit(cfg.gamma0)
        mean = (1 - pi) * mu
        var = (1 - pi) * mu * (1 + pi * mu)
        assert abs(y.mean() - mean) < 3 * np.sqrt(var / y.size)

    def test_reproducible_per_replicate(self):
        cfg = ScenarioConfig.scenario1(n_clusters=4, m_per_cluster=3)
        a, _ = gen_scenario(cfg, 7)
        b, _ = gen_scenario(cfg, 7)
        c, _ = gen_scenario(cfg, 8)
        assert a.clusters == b.clusters
        assert a.clusters != c.clusters


class TestGenCrbsi:
    def test_degenerate_law_is_zip(self):
        cfg = CrbsiConfig(n_hospitals=400, n_months=48, G=((0,) * 4,) * 4, sigma2_zeta=0.0,
                          zeta_mode=ZetaMode.NONE, delta=0.0, beta1=0.0, p_private=0.0,
                          exposure_log_sd=0.0, beta0=np.log(2.0 / 300))
        data, truth = gen_crbsi(cfg, 0)
        y = np.array([o.y for c in data.clusters for o in c.observations])
        mu, pi = 2.0, float(inv_logit(cfg.gamma0))
        assert np.allclose(truth["mu"], mu)
        edges = np.arange(8)
        probs = np.array([np.exp(zip_logpmf(k, ZipParams(mu, pi))) for k in edges[:-1]])
        probs = np.append(probs, 1 - probs.sum())
        counts = np.array([np.sum(y == k) for k in edges[:-1]] + [np.sum(y >= 7)])
        _, p = stats.chisquare(counts, probs * y.size)
        assert p > 1e-3

    def test_changepoints_and_population_value(self):
        data, truth = gen_crbsi(CrbsiConfig(), 0)
        assert np.all((truth["psi"] > 1) & (truth["psi"] < 48))
        assert truth["population_psi"] == pytest.approx(27.70, abs=0.005)
        assert all(o.offset > 0 for c in data.clusters for o in c.observations)
        assert len(data.clusters) == 61

    def test_missingness_keeps_every_hospital(self):
        data, truth = gen_crbsi(CrbsiConfig(n_hospitals=20, missing_prob=0.9), 2)
        assert len(data.clusters) == 20
        assert all(len(c.observations) >= 1 for c in data.clusters)
        assert sum(len(c.observations) for c in data.clusters) == truth["observed"].sum()

    @pytest.mark.parametrize("mode", list(ZetaMode))
    def test_month_effect_modes(self, mode):
        data, truth = gen_crbsi(CrbsiConfig(n_hospitals=5, zeta_mode=mode), 0)
        z = truth["zeta"]
        if mode is ZetaMode.NONE:
            assert not z.any()
        elif mode is ZetaMode.SHARED:
            assert np.all(z == z[0])
        else:
            assert not np.all(z == z[0])
        Panel.from_dataset(data, crbsi_spec(CrbsiConfig(zeta_mode=mode)))

    def test_invalid(self):
        with pytest.raises(DomainError):
            CrbsiConfig(G=((1, 2, 0, 0), (2, 1, 0, 0), (0, 0, 1, 0), (0, 0, 0, 1)))
        with pytest.raises(DomainError):
            CrbsiConfig(bounds=(48.0, 1.0))
        with pytest.raises(DomainError):
            CrbsiConfig(missing_prob=1.0)


class TestDeriveSeed:
    def test_pure(self):
        assert derive_seed(123, 4) == derive_seed(123, 4)
        assert 0 <= derive_seed(123, 4) < 2 ** 64

    def test_distinct_replicates(self):
        rng = np.random.default_rng(0)
        for s in rng.integers(0, 2 ** 63, size=10_000):
            assert derive_seed(int(s), 1) != derive_seed(int(s), 2)

    def test_stream_hygiene(self):
        draws = np.array([np.random.default_rng(derive_seed(99, r)).random(100) for r in range(100)])
        flat = draws.ravel()
        assert abs(np.corrcoef(flat[:-1], flat[1:])[0, 1]) < 0.05
        first = draws[:, 0]
        assert abs(np.corrcoef(first[:-1], first[1:])[0, 1]) < 0.25
        assert abs(np.corrcoef(draws[:-1].ravel(), draws[1:].ravel())[0, 1]) < 0.05
