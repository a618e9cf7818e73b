"""Longitudinal count panels, model specifications and parameter packing.

A :class:`Dataset` is the user-facing, immutable description of the data.
The numerical code works on a :class:`Panel`, which pads every cluster to
the longest cluster length so per-cluster quantities can be computed as
batched array operations.  Padded slots carry ``mask == False`` and zero
design rows.

Packed parameter layout (all unconstrained)::

    [ beta (n_beta) | gamma (p_zero) | log-Cholesky of G (q(q+1)/2) | log sigma_zeta ]

``beta`` holds the count-model coefficients followed by ``delta`` (when a
changepoint is modelled) and ``lambda`` (random changepoint only).  The
log-Cholesky block stores the lower triangle of ``L`` row by row with the
diagonal entries on the log scale, so ``G = L L^T`` is positive definite
for every real input.
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Union

import numpy as np
from scipy import special

from .errors import StructuralError, DomainError
from .segfun import ChangepointBounds, SegKind

__all__ = [
    "Observation",
    "Cluster",
    "Dataset",
    "ZetaMode",
    "Known",
    "Random",
    "ModelSpec",
    "ParamPack",
    "pack_params",
    "unpack_params",
    "cov_from_chol",
    "chol_from_cov",
    "cov_to_report",
    "eta_count",
    "eta_zero",
    "Panel",
]


@dataclass(frozen=True)
class Observation:
    y: int
    t: float
    offset: float = 1.0
    x_row: tuple = ()
    w_row: tuple = ()
    z_row: tuple = ()

    def __post_init__(self):
        if self.y < 0 or int(self.y) != self.y:
            raise DomainError(f"count must be a nonnegative integer, got {self.y!r}")
        if not (self.offset > 0 and np.isfinite(self.offset)):
            raise DomainError(f"offset must be positive, got {self.offset!r}")
        for name in ("x_row", "w_row", "z_row"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))


@dataclass(frozen=True)
class Cluster:
    id: object
    observations: tuple

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))
        if len(self.observations) < 1:
            raise StructuralError(f"cluster {self.id!r} has no observations")

    @property
    def m(self):
        return len(self.observations)

    @property
    def times(self):
        return np.array([o.t for o in self.observations])

    @property
    def bounds(self):
        """Per-cluster changepoint bounds ``(min t, max t)``."""
        t = self.times
        return ChangepointBounds(t.min(), t.max())


@dataclass(frozen=True)
class Dataset:
    clusters: tuple
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(self.clusters))
        ids = [c.id for c in self.clusters]
        if len(set(ids)) != len(ids):
            raise StructuralError("cluster ids must be unique")

    @property
    def time_levels(self):
        return np.unique(np.concatenate([c.times for c in self.clusters]))

    @property
    def n_obs(self):
        return sum(c.m for c in self.clusters)

    def __len__(self):
        return len(self.clusters)


class ZetaMode(str, Enum):
    NONE = "none"
    PER_CLUSTER = "per_cluster_month"
    SHARED = "shared_month"


@dataclass(frozen=True)
class Known:
    psi: float


@dataclass(frozen=True)
class Random:
    """Random changepoint; ``bounds=None`` means per-cluster (min t, max t)."""

    bounds: Optional[ChangepointBounds] = None


CpMode = Union[Known, Random, None]


@dataclass(frozen=True)
class ModelSpec:
    p_count: int
    p_zero: int
    q_cluster: int = 0
    seg_kind: SegKind = SegKind.LINEAR
    cp_mode: CpMode = None
    random_delta: bool = False
    random_lambda: bool = False
    zeta_mode: ZetaMode = ZetaMode.NONE
    count_names: Optional[tuple] = None
    zero_names: Optional[tuple] = None
    re_names: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "seg_kind", SegKind(self.seg_kind))
        object.__setattr__(self, "zeta_mode", ZetaMode(self.zeta_mode))
        if min(self.p_count, self.p_zero, self.q_cluster) < 0:
            raise StructuralError("dimensions must be nonnegative")
        if self.random_lambda and not isinstance(self.cp_mode, Random):
            raise StructuralError("random_lambda requires a random changepoint")
        if self.random_delta and self.cp_mode is None:
            raise StructuralError("random_delta requires a changepoint term")
        for attr, n in (("count_names", self.p_count), ("zero_names", self.p_zero),
                        ("re_names", self.q_cluster)):
            names = getattr(self, attr)
            if names is not None:
                names = tuple(names)
                object.__setattr__(self, attr, names)
                if len(names) != n:
                    raise StructuralError(f"{attr} has {len(names)} entries, expected {n}")

    @property
    def has_delta(self):
        return self.cp_mode is not None

    @property
    def has_lambda(self):
        return isinstance(self.cp_mode, Random)

    @property
    def n_beta(self):
        return self.p_count + int(self.has_delta) + int(self.has_lambda)

    @property
    def q_total(self):
        return self.q_cluster + int(self.random_delta) + int(self.random_lambda)

    @property
    def n_chol(self):
        q = self.q_total
        return q * (q + 1) // 2

    @property
    def has_zeta(self):
        return self.zeta_mode is not ZetaMode.NONE

    @property
    def n_params(self):
        return self.n_beta + self.p_zero + self.n_chol + int(self.has_zeta)

    def slices(self):
        """Index slices of each block in the packed vector."""
        a = self.n_beta
        b = a + self.p_zero
        c = b + self.n_chol
        return {
            "beta": slice(0, a),
            "gamma": slice(a, b),
            "chol": slice(b, c),
            "zeta": slice(c, c + int(self.has_zeta)),
        }

    def beta_names(self):
        names = list(self.count_names or (f"beta{k}" for k in range(self.p_count)))
        if self.has_delta:
            names.append("delta")
        if self.has_lambda:
            names.append("lambda")
        return names

    def gamma_names(self):
        return list(self.zero_names or (f"gamma{k}" for k in range(self.p_zero)))

    def random_names(self):
        names = list(self.re_names or (f"b{k}" for k in range(self.q_cluster)))
        if self.random_delta:
            names.append("d")
        if self.random_lambda:
            names.append("l")
        return names

    def param_names(self):
        """Names of every packed coordinate, in packing order."""
        re = self.random_names()
        chol = [f"chol[{re[i]},{re[j]}]" for i, j in zip(*np.tril_indices(self.q_total))]
        zeta = ["log_sigma_zeta"] if self.has_zeta else []
        return self.beta_names() + self.gamma_names() + chol + zeta

    def known_version(self, psi):
        """Same structure with a fixed changepoint and no lambda slot."""
        return replace(self, cp_mode=Known(float(psi)), random_lambda=False)

    def without_changepoint(self):
        return replace(self, cp_mode=None, random_delta=False, random_lambda=False)


@dataclass(frozen=True)
class ParamPack:
    beta: np.ndarray
    gamma: np.ndarray
    chol_g: np.ndarray
    log_sigma_zeta: Optional[float] = None

    def __eq__(self, other):
        if not isinstance(other, ParamPack):
            return NotImplemented
        return (np.array_equal(self.beta, other.beta)
                and np.array_equal(self.gamma, other.gamma)
                and np.array_equal(self.chol_g, other.chol_g)
                and self.log_sigma_zeta == other.log_sigma_zeta)

    @property
    def sigma_zeta(self):
        return None if self.log_sigma_zeta is None else float(np.exp(self.log_sigma_zeta))

    def G(self):
        q = int(round((np.sqrt(8 * len(self.chol_g) + 1) - 1) / 2))
        return cov_from_chol(self.chol_g, q)


def pack_params(params, spec):
    beta = np.asarray(params.beta, dtype=float).ravel()
    gamma = np.asarray(params.gamma, dtype=float).ravel()
    chol = np.asarray(params.chol_g, dtype=float).ravel()
    if len(beta) != spec.n_beta or len(gamma) != spec.p_zero or len(chol) != spec.n_chol:
        raise StructuralError(
            f"parameter blocks ({len(beta)}, {len(gamma)}, {len(chol)}) do not match "
            f"spec ({spec.n_beta}, {spec.p_zero}, {spec.n_chol})")
    if spec.has_zeta != (params.log_sigma_zeta is not None):
        raise StructuralError("log_sigma_zeta must be present exactly when zeta is modelled")
    zeta = [float(params.log_sigma_zeta)] if spec.has_zeta else []
    return np.concatenate([beta, gamma, chol, zeta])


def unpack_params(flat, spec):
    flat = np.asarray(flat, dtype=float)
    if flat.ndim != 1 or len(flat) != spec.n_params:
        raise StructuralError(f"flat vector has length {flat.size}, expected {spec.n_params}")
    s = spec.slices()
    return ParamPack(
        beta=flat[s["beta"]].copy(),
        gamma=flat[s["gamma"]].copy(),
        chol_g=flat[s["chol"]].copy(),
        log_sigma_zeta=float(flat[s["zeta"]][0]) if spec.has_zeta else None,
    )


def chol_factor(chol_g, q):
    chol_g = np.asarray(chol_g, dtype=float)
    if len(chol_g) != q * (q + 1) // 2:
        raise StructuralError(f"log-Cholesky vector of length {len(chol_g)} does not fit q={q}")
    L = np.zeros((q, q))
    L[np.tril_indices(q)] = chol_g
    di = np.diag_indices(q)
    L[di] = np.exp(L[di])
    return L


def cov_from_chol(chol_g, q):
    L = chol_factor(chol_g, q)
    return L @ L.T


def chol_from_cov(G):
    """Inverse of :func:`cov_from_chol` for a positive definite ``G``."""
    G = np.atleast_2d(np.asarray(G, dtype=float))
    L = np.linalg.cholesky(G)
    di = np.diag_indices(len(G))
    L[di] = np.log(L[di])
    return L[np.tril_indices(len(G))]


def cov_to_report(G):
    """Split a covariance matrix into variances and a correlation matrix."""
    G = np.asarray(G, dtype=float)
    var = np.diag(G).copy()
    sd = np.sqrt(var)
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = G / np.outer(sd, sd)
    np.fill_diagonal(corr, 1.0)
    return var, corr


def _randeff_parts(spec, randeff):
    """Split a per-observation random-effect vector (b, d, l, zeta_month)."""
    randeff = np.asarray(randeff, dtype=float).ravel()
    expected = spec.q_total + int(spec.has_zeta)
    if len(randeff) != expected:
        raise StructuralError(f"random-effect vector has length {len(randeff)}, expected {expected}")
    b = randeff[:spec.q_cluster]
    k = spec.q_cluster
    d = randeff[k] if spec.random_delta else 0.0
    k += int(spec.random_delta)
    k += int(spec.random_lambda)
    zeta = randeff[k] if spec.has_zeta else 0.0
    return b, d, zeta


def eta_count(spec, params, obs, randeff, seg_term):
    """Log of the Poisson mean for one observation.

    ``randeff`` is laid out as ``(b_i, d_i, l_i, zeta_month)`` with absent
    components omitted.  ``l_i`` affects ``seg_term`` only, which the caller
    evaluates at the cluster's changepoint.
    """
    x = np.asarray(obs.x_row, dtype=float)
    z = np.asarray(obs.z_row, dtype=float)
    if len(x) != spec.p_count or len(z) != spec.q_cluster:
        raise StructuralError("observation rows do not match the spec dimensions")
    beta = np.asarray(params.beta, dtype=float)
    b, d, zeta = _randeff_parts(spec, randeff)
    eta = np.log(obs.offset) + x @ beta[:spec.p_count] + z @ b + zeta
    if spec.has_delta:
        eta += (beta[spec.p_count] + d) * seg_term
    return float(eta)


def eta_zero(spec, params, obs):
    w = np.asarray(obs.w_row, dtype=float)
    if len(w) != spec.p_zero:
        raise StructuralError(f"w_row has length {len(w)}, expected {spec.p_zero}")
    return float(w @ np.asarray(params.gamma, dtype=float))


@dataclass(frozen=True)
class Panel:
    """Padded array view of a dataset (shape ``(n_clusters, max_m, ...)``).

    ``X``/``Z``/``log_off`` may be replaced (see :meth:`with_design`) to
    build working designs that share the response and masking arrays.
    """

    y: np.ndarray
    mask: np.ndarray
    lgam: np.ndarray
    t: np.ndarray
    log_off: np.ndarray
    X: np.ndarray
    W: np.ndarray
    Z: np.ndarray
    month: np.ndarray
    time_levels: np.ndarray
    ids: tuple
    l1: np.ndarray
    l2: np.ndarray

    @classmethod
    def from_dataset(cls, data, spec=None):
        n = len(data.clusters)
        M = max(c.m for c in data.clusters)
        first = data.clusters[0].observations[0]
        p, pz, qc = len(first.x_row), len(first.w_row), len(first.z_row)
        if spec is not None and (p, pz, qc) != (spec.p_count, spec.p_zero, spec.q_cluster):
            raise StructuralError(
                f"data rows have dimensions (x={p}, w={pz}, z={qc}); spec expects "
                f"({spec.p_count}, {spec.p_zero}, {spec.q_cluster})")
        levels = data.time_levels
        y = np.zeros((n, M))
        mask = np.zeros((n, M), dtype=bool)
        t = np.zeros((n, M))
        log_off = np.zeros((n, M))
        X = np.zeros((n, M, p))
        W = np.zeros((n, M, pz))
        Z = np.zeros((n, M, qc))
        for i, c in enumerate(data.clusters):
            for j, o in enumerate(c.observations):
                if (len(o.x_row), len(o.w_row), len(o.z_row)) != (p, pz, qc):
                    raise StructuralError(f"cluster {c.id!r} observation {j} has mismatched rows")
                y[i, j] = o.y
                mask[i, j] = True
                t[i, j] = o.t
                log_off[i, j] = np.log(o.offset)
                X[i, j] = o.x_row
                W[i, j] = o.w_row
                Z[i, j] = o.z_row
        month = np.where(mask, np.searchsorted(levels, t), 0)
        tmin = np.where(mask, t, np.inf).min(axis=1)
        tmax = np.where(mask, t, -np.inf).max(axis=1)
        return cls(y=y, mask=mask, lgam=special.gammaln(y + 1.0), t=t, log_off=log_off,
                   X=X, W=W, Z=Z, month=month, time_levels=levels,
                   ids=tuple(c.id for c in data.clusters), l1=tmin, l2=tmax)

    @property
    def n_clusters(self):
        return self.y.shape[0]

    @property
    def n_obs(self):
        return int(self.mask.sum())

    @property
    def n_months(self):
        return len(self.time_levels)

    def with_design(self, X=None, Z=None, log_off=None):
        kw = {}
        if X is not None:
            kw["X"] = np.where(self.mask[..., None], X, 0.0)
        if Z is not None:
            kw["Z"] = np.where(self.mask[..., None], Z, 0.0)
        if log_off is not None:
            kw["log_off"] = np.where(self.mask, log_off, 0.0)
        return replace(self, **kw)

    def subset(self, index):
        """Panel restricted to the clusters at ``index`` (order preserved)."""
        index = np.asarray(index)
        arrays = {k: getattr(self, k)[index] for k in
                  ("y", "mask", "lgam", "t", "log_off", "X", "W", "Z", "month", "l1", "l2")}
        return replace(self, ids=tuple(self.ids[i] for i in index), **arrays)
