import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from segzip.design import (Cluster, Dataset, ModelSpec, Observation, ParamPack,  # noqa: E402
                           ZetaMode)
from segzip.zipdist import sample_zip  # noqa: E402


def ri_dataset(rng, n, m, beta0, pi, sigma, slope=0.0):
    """Random-intercept ZIP panel with a time slope; returns (data, eta0 list, ys)."""
    b = rng.normal(0, sigma, size=n)
    clusters, ys, etas = [], [], []
    for i in range(n):
        t = np.sort(rng.uniform(0, 2, size=m))
        eta0 = beta0 + slope * t
        y, _ = sample_zip(np.exp(eta0 + b[i]), np.full(m, pi), rng)
        obs = [Observation(int(y[j]), float(t[j]), 1.0, (1.0, float(t[j])), (1.0,), (1.0,))
               for j in range(m)]
        clusters.append(Cluster(i, obs))
        ys.append(y)
        etas.append(eta0)
    return Dataset(clusters), etas, ys


RI_SPEC = ModelSpec(p_count=2, p_zero=1, q_cluster=1)


def ri_params(beta0, slope, pi, sigma):
    return ParamPack(np.array([beta0, slope]), np.array([np.log(pi / (1 - pi))]),
                     np.array([np.log(sigma)]))


def random_instance(rng, zeta_mode=ZetaMode.NONE, n=4, m=6):
    """Random data, spec and parameters with a 2-D random effect."""
    spec = ModelSpec(p_count=2, p_zero=1, q_cluster=2, zeta_mode=zeta_mode)
    clusters = []
    for i in range(n):
        t = rng.choice(np.arange(8.0), size=m, replace=False)
        obs = [Observation(int(rng.poisson(2.0) * (rng.random() > 0.3)), float(tt),
                           float(rng.uniform(0.5, 2.0)), (1.0, tt / 8), (1.0,), (1.0, tt / 8))
               for tt in t]
        clusters.append(Cluster(i, obs))
    data = Dataset(clusters)
    params = ParamPack(rng.normal(0.3, 0.3, size=2), rng.normal(-0.5, 0.3, size=1),
                       rng.normal(-0.7, 0.3, size=3),
                       float(rng.normal(-1.0, 0.2)) if zeta_mode is not ZetaMode.NONE else None)
    return data, spec, params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance results, printed as one line per criterion at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
