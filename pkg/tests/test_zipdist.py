import numpy as np
import pytest
from scipy import stats

from oracles import zip_logpmf_mp
from segzip.errors import DomainError
from segzip.zipdist import (ZipParams, inv_logit, logit, logpmf_derivs3_eta, logpmf_derivs_eta,
                            logpmf_eta, sample_zip, zip_logpmf, zip_mean, zip_sample, zip_var)
from scipy import special


class TestLogPmf:
    def test_zero_inflated_zero(self):
        # log(0.5 + 0.5 e^-1), frozen from the arbitrary-precision oracle
        assert zip_logpmf_mp(0, 1.0, 0.5) == pytest.approx(-0.3798854930417225, abs=1e-15)
        assert zip_logpmf(0, ZipParams(1.0, 0.5)) == pytest.approx(-0.3798855, abs=1e-7)

    def test_matches_arbitrary_precision(self):
        assert zip_logpmf(0, ZipParams(1.0, 0.5)) == pytest.approx(zip_logpmf_mp(0, 1.0, 0.5), abs=1e-14)
        for y, mu, pi in [(3, 2.0, 0.1), (0, 25.0, 1e-9), (17, 0.3, 0.7), (0, 1e-8, 0.2)]:
            assert zip_logpmf(y, ZipParams(mu, pi)) == pytest.approx(zip_logpmf_mp(y, mu, pi), rel=1e-12)

    def test_poisson_boundary(self):
        assert zip_logpmf(3, ZipParams(2.0, 0.0)) == pytest.approx(-1.7123179, abs=1e-7)
        for y in range(10):
            assert zip_logpmf(y, ZipParams(2.5, 0.0)) == pytest.approx(stats.poisson.logpmf(y, 2.5), abs=1e-14)

    def test_degenerate_mean(self):
        assert zip_logpmf(0, ZipParams(1e-12, 0.3)) == pytest.approx(0.0, abs=1e-11)

    def test_large_arguments_no_underflow(self):
        v = zip_logpmf(100000, ZipParams(1e4, 0.2))
        assert np.isfinite(v)
        assert v == pytest.approx(zip_logpmf_mp(100000, 1e4, 0.2), rel=1e-10)
        assert np.isfinite(zip_logpmf(0, ZipParams(1e4, 1e-300)))

    @pytest.mark.parametrize("mu,pi", [(0.0, 0.1), (-1.0, 0.1), (1.0, 1.0), (1.0, -0.1), (np.inf, 0.1)])
    def test_invalid_params(self, mu, pi):
        with pytest.raises(DomainError):
            ZipParams(mu, pi)

    def test_invalid_count(self):
        with pytest.raises(DomainError):
            zip_logpmf(-1, ZipParams(1.0, 0.2))
        with pytest.raises(DomainError):
            zip_logpmf(1.5, ZipParams(1.0, 0.2))
        with pytest.raises(DomainError):
            zip_mean((1.0, 0.2))


class TestMoments:
    def test_mean(self):
        assert zip_mean(ZipParams(2.0, 0.25)) == 1.5
        assert zip_mean(ZipParams(3.7, 0.0)) == 3.7

    def test_var(self):
        assert zip_var(ZipParams(2.0, 0.25)) == pytest.approx(2.25)
        assert zip_var(ZipParams(2.0, 0.0)) == 2.0
        assert zip_var(ZipParams(1.0, 0.5)) == pytest.approx(0.75)

    def test_monte_carlo(self):
        p = ZipParams(1.0, 0.5)
        y = zip_sample(p, np.random.default_rng(1), size=10 ** 6).astype(float)
        n = len(y)
        assert abs(y.mean() - zip_mean(p)) < 3 * np.sqrt(zip_var(p) / n)
        # SE of the sample variance from the fourth central moment
        m4 = np.mean((y - y.mean()) ** 4)
        se_var = np.sqrt((m4 - y.var() ** 2) / n)
        assert abs(y.var(ddof=1) - zip_var(p)) < 3 * se_var


class TestSampling:
    def test_near_certain_zero(self):
        y = zip_sample(ZipParams(5.0, 0.999999), np.random.default_rng(2), size=10 ** 5)
        assert np.mean(y == 0) >= 0.999

    def test_zero_fraction(self):
        n = 10 ** 5
        y = zip_sample(ZipParams(1.0, 0.5), np.random.default_rng(3), size=n)
        p0 = 0.5 + 0.5 * np.exp(-1)
        assert p0 == pytest.approx(0.6839, abs=1e-4)
        assert abs(np.mean(y == 0) - p0) < 3 * np.sqrt(p0 * (1 - p0) / n)

    def test_determinism(self):
        p = ZipParams(2.0, 0.3)
        a = zip_sample(p, np.random.default_rng(9), size=50)
        b = zip_sample(p, np.random.default_rng(9), size=50)
        assert np.array_equal(a, b)
        assert isinstance(zip_sample(p, np.random.default_rng(9)), int)

    def test_chi_square_goodness_of_fit(self):
        p = ZipParams(3.0, 0.3)
        n = 10 ** 5
        y = zip_sample(p, np.random.default_rng(4), size=n)
        probs = np.exp([zip_logpmf(k, p) for k in range(60)])
        exp_counts = n * probs
        # pool the tail so every bin expects at least 5
        last = int(np.max(np.flatnonzero(exp_counts >= 5)))
        obs = np.bincount(np.minimum(y, last), minlength=last + 1)[:last + 1]
        expct = np.append(exp_counts[:last], n - exp_counts[:last].sum())
        _, pval = stats.chisquare(obs, expct)
        assert pval > 0.001

    def test_structural_flags(self):
        rng = np.random.default_rng(5)
        y, s = sample_zip(np.full(1000, 4.0), np.full(1000, 0.4), rng)
        assert np.all(y[s] == 0)


class TestLinks:
    def test_values(self):
        assert inv_logit(0) == 0.5
        assert inv_logit(-0.5) == pytest.approx(0.3775407, abs=1e-7)
        assert logit(0.5) == 0.0

    def test_stable_extremes(self):
        assert inv_logit(700) == 1.0
        assert inv_logit(-700) > 0 and np.isfinite(inv_logit(-700))

    @pytest.mark.xfail(strict=True, reason="float64 cannot represent 1 - expit(x) finely "
                       "enough beyond x ~ 9; the round-trip error grows like eps * e^x")
    def test_round_trip_full_range(self):
        x = np.linspace(-30, 30, 601)
        assert np.max(np.abs(logit(inv_logit(x)) - x)) < 1e-12

    def test_round_trip_representable_range(self):
        x = np.linspace(-9, 9, 181)
        assert np.max(np.abs(logit(inv_logit(x)) - x)) < 1e-12
        xn = np.linspace(-30, 0, 301)
        assert np.max(np.abs(logit(inv_logit(xn)) - xn)) < 1e-12

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1, np.nan])
    def test_logit_domain(self, p):
        with pytest.raises(DomainError):
            logit(p)


class TestEtaKernels:
    """The vectorised kernels agree with the scalar pmf and with finite differences."""

    def setup_method(self):
        rng = np.random.default_rng(6)
        self.y = rng.poisson(2.0, size=200) * (rng.random(200) > 0.3)
        self.eta = rng.normal(0.5, 1.0, size=200)
        self.ez = rng.normal(-0.5, 1.0, size=200)
        self.lg = special.gammaln(self.y + 1.0)

    def test_logpmf_matches_scalar(self):
        v = logpmf_eta(self.y, self.eta, self.ez, self.lg)
        ref = [zip_logpmf(int(y), ZipParams(np.exp(e), special.expit(z)))
               for y, e, z in zip(self.y, self.eta, self.ez)]
        assert np.allclose(v, ref, rtol=1e-12, atol=1e-13)

    def test_derivatives_by_finite_difference(self):
        h = 1e-5
        f = lambda e: logpmf_eta(self.y, e, self.ez, self.lg)  # noqa: E731
        _, d1, d2 = logpmf_derivs_eta(self.y, self.eta, self.ez, self.lg)
        fd1 = (f(self.eta + h) - f(self.eta - h)) / (2 * h)
        assert np.allclose(d1, fd1, rtol=1e-6, atol=1e-8)
        a1, a2, a3, c1, c11, c21 = logpmf_derivs3_eta(self.y, self.eta, self.ez)
        g = lambda e: logpmf_derivs3_eta(self.y, e, self.ez)  # noqa: E731
        assert np.allclose(a1, d1, rtol=1e-12, atol=1e-12)
        assert np.allclose(a2, d2, rtol=1e-12, atol=1e-12)
        assert np.allclose(a2, (g(self.eta + h)[0] - g(self.eta - h)[0]) / (2 * h), rtol=1e-6, atol=1e-8)
        assert np.allclose(a3, (g(self.eta + h)[1] - g(self.eta - h)[1]) / (2 * h), rtol=1e-6, atol=1e-8)
        fz = lambda z: logpmf_eta(self.y, self.eta, z, self.lg)  # noqa: E731
        assert np.allclose(c1, (fz(self.ez + h) - fz(self.ez - h)) / (2 * h), rtol=1e-6, atol=1e-8)
        gz = lambda z: logpmf_derivs3_eta(self.y, self.eta, z)  # noqa: E731
        assert np.allclose(c11, (gz(self.ez + h)[0] - gz(self.ez - h)[0]) / (2 * h), rtol=1e-6, atol=1e-8)
        assert np.allclose(c21, (gz(self.ez + h)[1] - gz(self.ez - h)[1]) / (2 * h), rtol=1e-6, atol=1e-8)
