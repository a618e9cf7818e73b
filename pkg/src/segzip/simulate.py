"""Data generators for the simulation scenarios and a CR-BSI-style panel.

Every generator takes a config with a ``master_seed`` plus a replicate
index; the pair determines the random stream through :func:`derive_seed`,
so any replicate can be regenerated on its own.
"""

from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from .design import Cluster, Dataset, ModelSpec, Observation, Random, ZetaMode
from .errors import DomainError
from .segfun import ChangepointBounds, SegKind, cp_from_lambda, seg_value
from .zipdist import inv_logit, sample_zip

__all__ = [
    "ScenarioConfig",
    "CrbsiConfig",
    "derive_seed",
    "gen_scenario",
    "gen_crbsi",
    "scenario_spec",
    "crbsi_spec",
]


def derive_seed(master, replicate):
    """64-bit seed for ``replicate`` of the stream rooted at ``master``.

    Uses numpy's ``SeedSequence`` hashing with the replicate index as spawn
    key, so distinct replicates get well-mixed, independent streams.
    """
    ss = np.random.SeedSequence(entropy=int(master) & ((1 << 64) - 1), spawn_key=(int(replicate),))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return (int(hi) << 32) | int(lo)


@dataclass(frozen=True)
class ScenarioConfig:
    """Segmented ZIP mixed model with covariate ``x ~ Normal(x_mean, x_sd)``.

    ``bounds`` is ``None`` for per-cluster ``(min x, max x)`` bounds, or a
    fixed ``(l1, l2)`` pair.  Random-effect SDs are for ``(b0, b1, d, l)``.
    """

    n_clusters: int = 300
    m_per_cluster: int = 20
    beta0: float = 1.0
    beta1: float = 0.2
    delta: float = 0.2
    lam: float = 5.0
    gamma0: float = -0.5
    re_sd: Tuple[float, float, float, float] = (0.1, 0.1, 0.1, 0.1)
    seg_kind: SegKind = SegKind.LINEAR
    bounds: Optional[Tuple[float, float]] = None
    x_mean: float = 5.0
    x_sd: float = 1.0
    master_seed: int = 20240101

    def __post_init__(self):
        object.__setattr__(self, "seg_kind", SegKind(self.seg_kind))
        object.__setattr__(self, "re_sd", tuple(float(s) for s in self.re_sd))
        if self.bounds is not None:
            object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))
        if self.n_clusters < 1 or self.m_per_cluster < 2:
            raise DomainError("need n_clusters >= 1 and m_per_cluster >= 2")
        if len(self.re_sd) != 4 or min(self.re_sd) < 0:
            raise DomainError("re_sd must hold four nonnegative SDs")
        if self.x_sd < 0:
            raise DomainError("x_sd must be nonnegative")
        if self.bounds is not None:
            ChangepointBounds(*self.bounds)

    @classmethod
    def scenario1(cls, **kw):
        return cls(**kw)

    @classmethod
    def scenario2(cls, **kw):
        base = dict(gamma0=0.5, beta1=-0.2, delta=-0.2, lam=2.0, seg_kind=SegKind.QUADRATIC)
        base.update(kw)
        return cls(**base)

    def truth(self):
        return {"beta0": self.beta0, "beta1": self.beta1, "delta": self.delta,
                "lambda": self.lam, "gamma0": self.gamma0}

    def to_dict(self):
        d = asdict(self)
        d["seg_kind"] = self.seg_kind.value
        return d


def scenario_spec(cfg):
    """Model specification matching a :class:`ScenarioConfig`."""
    bounds = None if cfg.bounds is None else ChangepointBounds(*cfg.bounds)
    return ModelSpec(p_count=2, p_zero=1, q_cluster=2, seg_kind=cfg.seg_kind,
                     cp_mode=Random(bounds), random_delta=True, random_lambda=True,
                     count_names=("beta0", "beta1"), zero_names=("gamma0",),
                     re_names=("b0", "b1"))


def gen_scenario(cfg, replicate=0):
    """Simulate one replicate; returns ``(Dataset, truth_record)``."""
    rng = np.random.default_rng(derive_seed(cfg.master_seed, replicate))
    n, m = cfg.n_clusters, cfg.m_per_cluster
    x = rng.normal(cfg.x_mean, cfg.x_sd, size=(n, m))
    re = rng.normal(size=(n, 4)) * np.asarray(cfg.re_sd)
    b0, b1, d, l = re.T
    if cfg.bounds is None:
        l1, l2 = x.min(axis=1), x.max(axis=1)
    else:
        l1 = np.full(n, cfg.bounds[0])
        l2 = np.full(n, cfg.bounds[1])
    psi = cp_from_lambda(cfg.lam + l, (l1, l2))
    seg = seg_value(cfg.seg_kind, x, psi[:, None])
    eta = (cfg.beta0 + b0)[:, None] + (cfg.beta1 + b1)[:, None] * x + (cfg.delta + d)[:, None] * seg
    mu = np.exp(eta)
    pi = np.full_like(mu, inv_logit(cfg.gamma0))
    y, structural = sample_zip(mu, pi, rng)
    clusters = []
    for i in range(n):
        obs = [Observation(y=int(y[i, j]), t=float(x[i, j]), offset=1.0,
                           x_row=(1.0, float(x[i, j])), w_row=(1.0,), z_row=(1.0, float(x[i, j])))
               for j in range(m)]
        clusters.append(Cluster(i, obs))
    truth = {
        "params": cfg.truth(),
        "b0": b0, "b1": b1, "d": d, "l": l,
        "l1": l1, "l2": l2, "psi": psi,
        "mu": mu, "pi": pi, "structural_zero": structural,
        "seed": derive_seed(cfg.master_seed, replicate),
    }
    return Dataset(clusters, meta={"generator": "scenario", "replicate": replicate}), truth


@dataclass(frozen=True)
class CrbsiConfig:
    """Hospital-by-month panel shaped like the random-changepoint application.

    ``G`` is the covariance of ``(b0, b1, d, l)``; ``exposure_median`` and
    ``exposure_log_sd`` parameterise log-normal catheter-day offsets.
    """

    n_hospitals: int = 61
    n_months: int = 48
    p_private: float = 0.5
    exposure_median: float = 300.0
    exposure_log_sd: float = 0.5
    missing_prob: float = 0.0
    beta0: float = -5.275
    beta1: float = -0.013
    beta2: float = -0.942
    delta: float = 0.022
    lam: float = 0.274
    gamma0: float = -5.564
    gamma1: float = 2.348
    G: Tuple[Tuple[float, ...], ...] = ((0.455, 0, 0, 0), (0, 0.0007, 0, 0),
                                        (0, 0, 0.004, 0), (0, 0, 0, 0.273))
    sigma2_zeta: float = 0.004
    zeta_mode: ZetaMode = ZetaMode.PER_CLUSTER
    seg_kind: SegKind = SegKind.LINEAR
    bounds: Tuple[float, float] = (1.0, 48.0)
    master_seed: int = 20240101

    def __post_init__(self):
        object.__setattr__(self, "zeta_mode", ZetaMode(self.zeta_mode))
        object.__setattr__(self, "seg_kind", SegKind(self.seg_kind))
        object.__setattr__(self, "G", tuple(tuple(float(v) for v in row) for row in self.G))
        ChangepointBounds(*self.bounds)
        G = np.asarray(self.G)
        if G.shape != (4, 4) or not np.allclose(G, G.T):
            raise DomainError("G must be a symmetric 4x4 matrix")
        if np.linalg.eigvalsh(G).min() < -1e-12:
            raise DomainError("G must be positive semidefinite")
        if not (0 <= self.p_private <= 1) or not (0 <= self.missing_prob < 1):
            raise DomainError("probabilities out of range")
        if self.n_hospitals < 1 or self.n_months < 2 or self.sigma2_zeta < 0:
            raise DomainError("invalid panel size or variance")

    def truth(self):
        return {"beta0": self.beta0, "beta1": self.beta1, "beta2": self.beta2,
                "delta": self.delta, "lambda": self.lam,
                "gamma0": self.gamma0, "gamma1": self.gamma1}


def crbsi_spec(cfg):
    return ModelSpec(p_count=3, p_zero=2, q_cluster=2, seg_kind=cfg.seg_kind,
                     cp_mode=Random(ChangepointBounds(*cfg.bounds)), random_delta=True,
                     random_lambda=True, zeta_mode=cfg.zeta_mode,
                     count_names=("beta0", "beta1", "beta2"), zero_names=("gamma0", "gamma1"),
                     re_names=("b0", "b1"))


def _mvn(rng, G, size):
    G = np.asarray(G, dtype=float)
    w, V = np.linalg.eigh(G)
    root = V * np.sqrt(np.clip(w, 0, None))
    return rng.normal(size=(size, len(G))) @ root.T


def gen_crbsi(cfg, replicate=0):
    """Simulate hospitals observed monthly with exposure offsets."""
    rng = np.random.default_rng(derive_seed(cfg.master_seed, replicate))
    n, K = cfg.n_hospitals, cfg.n_months
    months = np.arange(1, K + 1, dtype=float)
    private = (rng.random(n) < cfg.p_private).astype(float)
    re = _mvn(rng, cfg.G, n)
    b0, b1, d, l = re.T
    sz = np.sqrt(cfg.sigma2_zeta)
    if cfg.zeta_mode is ZetaMode.SHARED:
        zeta = np.broadcast_to(rng.normal(0, sz, size=K), (n, K)).copy()
    elif cfg.zeta_mode is ZetaMode.PER_CLUSTER:
        zeta = rng.normal(0, sz, size=(n, K))
    else:
        zeta = np.zeros((n, K))
    exposure = np.maximum(np.round(cfg.exposure_median * np.exp(
        rng.normal(0, cfg.exposure_log_sd, size=(n, K)))), 1.0)
    observed = rng.random((n, K)) >= cfg.missing_prob
    observed[:, 0] |= ~observed.any(axis=1)
    bounds = ChangepointBounds(*cfg.bounds)
    psi = cp_from_lambda(cfg.lam + l, bounds)
    seg = seg_value(cfg.seg_kind, months[None, :], psi[:, None])
    eta = (np.log(exposure) + (cfg.beta0 + b0)[:, None] + (cfg.beta1 + b1)[:, None] * months
           + (cfg.delta + d)[:, None] * seg + (cfg.beta2 * private)[:, None] + zeta)
    mu = np.exp(eta)
    pi = np.broadcast_to(inv_logit(cfg.gamma0 + cfg.gamma1 * private)[:, None], (n, K))
    y, structural = sample_zip(mu, pi, rng)
    clusters = []
    for i in range(n):
        obs = [Observation(y=int(y[i, k]), t=float(months[k]), offset=float(exposure[i, k]),
                           x_row=(1.0, months[k], private[i]), w_row=(1.0, private[i]),
                           z_row=(1.0, months[k]))
               for k in range(K) if observed[i, k]]
        clusters.append(Cluster(f"H{i + 1}", obs))
    truth = {
        "params": cfg.truth(),
        "G": np.asarray(cfg.G), "sigma2_zeta": cfg.sigma2_zeta,
        "private": private, "b0": b0, "b1": b1, "d": d, "l": l, "zeta": zeta,
        "psi": psi, "population_psi": float(cp_from_lambda(cfg.lam, bounds)),
        "exposure": exposure, "observed": observed,
        "mu": mu, "pi": np.asarray(pi), "structural_zero": structural,
        "seed": derive_seed(cfg.master_seed, replicate),
    }
    return Dataset(clusters, meta={"generator": "crbsi", "replicate": replicate}), truth
