"""Zero-inflated Poisson kernel: log-pmf, moments, links and sampling.

The scalar functions (``zip_logpmf`` and friends) validate their input and
are meant for callers working one observation at a time.  The ``*_eta``
helpers are the vectorised versions used by the likelihood code; they take
the two linear predictors directly and skip validation.
"""

from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import DomainError

__all__ = [
    "ZipParams",
    "zip_logpmf",
    "zip_mean",
    "zip_var",
    "zip_sample",
    "sample_zip",
    "inv_logit",
    "logit",
    "logpmf_eta",
    "logpmf_derivs_eta",
]


@dataclass(frozen=True)
class ZipParams:
    """Poisson mean ``mu`` and structural-zero probability ``pi``."""

    mu: float
    pi: float

    def __post_init__(self):
        mu, pi = float(self.mu), float(self.pi)
        if not (np.isfinite(mu) and mu > 0.0):
            raise DomainError(f"mu must be positive and finite, got {self.mu!r}")
        if not (0.0 <= pi < 1.0):
            raise DomainError(f"pi must lie in [0, 1), got {self.pi!r}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "pi", pi)


def _check(p):
    if not isinstance(p, ZipParams):
        raise DomainError(f"expected ZipParams, got {type(p).__name__}")
    return p


def zip_logpmf(y, p):
    """Log probability of count ``y`` under ZIP(mu, pi)."""
    p = _check(p)
    if y < 0 or int(y) != y:
        raise DomainError(f"count must be a nonnegative integer, got {y!r}")
    y = int(y)
    log1m_pi = np.log1p(-p.pi)
    if y == 0:
        log_pi = np.log(p.pi) if p.pi > 0.0 else -np.inf
        return float(np.logaddexp(log_pi, log1m_pi - p.mu))
    return float(log1m_pi + y * np.log(p.mu) - p.mu - special.gammaln(y + 1.0))


def zip_mean(p):
    p = _check(p)
    return (1.0 - p.pi) * p.mu


def zip_var(p):
    p = _check(p)
    return (1.0 - p.pi) * p.mu * (1.0 + p.pi * p.mu)


def zip_sample(p, rng, size=None):
    """Draw from ZIP(mu, pi) using ``rng`` (a ``numpy.random.Generator``).

    The structural-zero indicator is drawn first, then the Poisson variate,
    so a fixed seed yields a fixed sequence.
    """
    p = _check(p)
    y, _ = sample_zip(np.full(() if size is None else size, p.mu),
                      np.full(() if size is None else size, p.pi), rng)
    return int(y) if size is None else y


def sample_zip(mu, pi, rng):
    """Vectorised sampler returning ``(counts, structural_zero_flags)``."""
    mu = np.asarray(mu, dtype=float)
    pi = np.asarray(pi, dtype=float)
    structural = rng.random(mu.shape) < pi
    counts = rng.poisson(mu)
    y = np.where(structural, 0, counts).astype(np.int64)
    return y, structural


def inv_logit(x):
    return special.expit(x)


def logit(p):
    p_arr = np.asarray(p, dtype=float)
    if np.any((p_arr <= 0.0) | (p_arr >= 1.0)) or np.any(np.isnan(p_arr)):
        raise DomainError("logit requires p strictly inside (0, 1)")
    out = special.logit(p_arr)
    return float(out) if out.ndim == 0 else out


def logpmf_eta(y, eta, eta_zero, lgam):
    """Elementwise ZIP log-pmf with ``mu = exp(eta)``, ``pi = expit(eta_zero)``.

    ``lgam`` is ``gammaln(y + 1)``, precomputed by the caller.
    """
    mu = np.exp(eta)
    log_pi = special.log_expit(eta_zero)
    log1m_pi = special.log_expit(-eta_zero)
    zero = np.logaddexp(log_pi, log1m_pi - mu)
    pos = log1m_pi + y * eta - mu - lgam
    return np.where(y == 0, zero, pos)


def logpmf_derivs_eta(y, eta, eta_zero, lgam):
    """Log-pmf and its first two derivatives in ``eta`` (``pi`` held fixed).

    For ``y = 0`` the Poisson component enters through the posterior weight
    ``w0 = P(non-structural | y = 0) = expit(-(mu + eta_zero))`` which gives
    ``d1 = -mu*w0`` and ``d2 = -mu*w0 + mu**2*w0*(1 - w0)``.
    """
    mu = np.exp(eta)
    ll = logpmf_eta(y, eta, eta_zero, lgam)
    w0 = special.expit(-(mu + eta_zero))
    is_zero = y == 0
    d1 = np.where(is_zero, -mu * w0, y - mu)
    d2 = np.where(is_zero, -mu * w0 + mu * mu * w0 * (1.0 - w0), -mu)
    return ll, d1, d2


def logpmf_derivs3_eta(y, eta, eta_zero):
    """Derivatives used by the analytic Laplace gradient.

    Returns ``(a1, a2, a3, c1, c11, c21)``: the first three derivatives in
    ``eta`` and the ``eta_zero`` derivatives of ``ll``, ``a1`` and ``a2``.
    With ``k = mu + eta_zero`` and ``w0 = expit(-k)``, for ``y = 0``

        a3  = a2 + 2 mu^2 s - mu^3 s (1 - 2 w0),   s = w0 (1 - w0)
        c1  = (1 - pi) - w0
        c11 = mu s
        c21 = mu s (1 - mu (1 - 2 w0)).
    """
    mu = np.exp(eta)
    w0 = special.expit(-(mu + eta_zero))
    pi = special.expit(eta_zero)
    s = w0 * (1.0 - w0)
    is_zero = y == 0
    a1 = np.where(is_zero, -mu * w0, y - mu)
    z2 = -mu * w0 + mu * mu * s
    a2 = np.where(is_zero, z2, -mu)
    a3 = np.where(is_zero, z2 + 2.0 * mu * mu * s - mu ** 3 * s * (1.0 - 2.0 * w0), -mu)
    c1 = np.where(is_zero, (1.0 - pi) - w0, -pi)
    c11 = np.where(is_zero, mu * s, 0.0)
    c21 = np.where(is_zero, mu * s * (1.0 - mu * (1.0 - 2.0 * w0)), 0.0)
    return a1, a2, a3, c1, c11, c21
