"""Laplace-approximated marginal likelihood for ZIP mixed models.

The count model is ``log mu = log_off + X beta + Z u`` (plus a month effect
``zeta``) and the zero model is ``logit pi = W gamma``; random effects enter
the count model only.  For each independence block the joint negative
log-density ``h(u)`` is minimised by damped Newton and the integral is
replaced by

    log L_i ~= -h(u_hat) + (D/2) log(2 pi) - 1/2 log det H(u_hat).

Independence blocks are the clusters, except under ``ZetaMode.SHARED``
where the month effects are shared and every cluster belongs to one block.
That block's Hessian has an arrow structure (per-cluster blocks coupled
only through the month effects) and is factorised by Schur complement on
the month block, so the cost is ``O(n q^3 + K^3)``.

Under ``ZetaMode.PER_CLUSTER`` each cluster carries its own copy of the
month effects for every time level; levels a cluster never visits are
integrated out exactly by the Laplace formula (they contribute zero).
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .design import Dataset, ModelSpec, Panel, ZetaMode, chol_factor, pack_params, unpack_params
from .errors import EvaluationError, InitializationError, StructuralError
from .optim import GRAD_STEP, bfgs, fd_gradient, fd_hessian
from .zipdist import logpmf_derivs3_eta, logpmf_derivs_eta, logpmf_eta

__all__ = [
    "InnerResult",
    "RawFit",
    "FitOptions",
    "Inference",
    "prepare",
    "joint_negloglik",
    "joint_grad_hess",
    "inner_mode",
    "laplace_logmarg",
    "laplace_gradient",
    "outer_fit",
    "observed_info_se",
    "info_criteria",
]

LOG2PI = np.log(2.0 * np.pi)
ROUNDING = 1e-13


@dataclass
class InnerResult:
    """Random-effect modes at fixed parameters.

    ``mode`` (and ``zeta`` under a shared month effect) are on the natural
    scale; ``std``/``std_zeta`` are the standardised modes, and ``hessian``,
    ``h_at_mode`` and ``logdet`` refer to the standardised problem, whose
    Laplace value is ``-h_at_mode - logdet / 2``.  For independent blocks
    the per-block quantities have a leading cluster axis; under a shared
    month effect ``hessian`` holds the cluster-diagonal blocks and the
    scalars refer to the single joint block.
    """

    mode: np.ndarray
    hessian: np.ndarray
    h_at_mode: np.ndarray
    logdet: np.ndarray
    converged: np.ndarray
    iterations: int
    zeta: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    std_zeta: Optional[np.ndarray] = None

    def copy(self):
        def c(a):
            return None if a is None else np.copy(a)
        return InnerResult(c(self.mode), c(self.hessian), c(self.h_at_mode), c(self.logdet),
                           c(self.converged), self.iterations, c(self.zeta), c(self.std),
                           c(self.std_zeta))

    def start(self):
        """Warm start for :func:`inner_mode` (standardised coordinates)."""
        return (self.std, self.std_zeta)

    @property
    def laplace_terms(self):
        return -self.h_at_mode - 0.5 * self.logdet


@dataclass(frozen=True)
class Prepared:
    """Panel arrays arranged for a given spec (one-hot month designs etc.)."""

    panel: Panel
    spec: ModelSpec
    Zfull: np.ndarray      # (n, M, D) random design incl. per-cluster months
    onehot: Optional[np.ndarray]  # (n, M, K) for shared months
    w_mask: np.ndarray     # float mask
    D: int


def prepare(panel, spec):
    if isinstance(panel, Prepared):
        return panel
    if isinstance(panel, Dataset):
        panel = Panel.from_dataset(panel, spec)
    n, M = panel.y.shape
    if panel.X.shape[2] != spec.n_beta or panel.W.shape[2] != spec.p_zero \
            or panel.Z.shape[2] != spec.q_total:
        raise StructuralError(
            f"design has (X={panel.X.shape[2]}, W={panel.W.shape[2]}, Z={panel.Z.shape[2]}) "
            f"columns; spec expects ({spec.n_beta}, {spec.p_zero}, {spec.q_total})")
    K = panel.n_months
    onehot = None
    Zfull = panel.Z
    if spec.has_zeta:
        oh = np.zeros((n, M, K))
        ii, jj = np.nonzero(panel.mask)
        oh[ii, jj, panel.month[ii, jj]] = 1.0
        if spec.zeta_mode is ZetaMode.PER_CLUSTER:
            Zfull = np.concatenate([panel.Z, oh], axis=2)
        else:
            onehot = oh
    return Prepared(panel, spec, Zfull, onehot, panel.mask.astype(float), Zfull.shape[2])


@dataclass(frozen=True)
class _Theta:
    beta: np.ndarray
    gamma: np.ndarray
    L: np.ndarray
    sigma_zeta: Optional[float]


def _decode(theta, spec):
    if not hasattr(theta, "beta"):
        theta = unpack_params(theta, spec)
    L = chol_factor(theta.chol_g, spec.q_total)
    sz = None if theta.log_sigma_zeta is None else float(np.exp(theta.log_sigma_zeta))
    return _Theta(np.asarray(theta.beta, float), np.asarray(theta.gamma, float), L, sz)


def _prior(th, prep):
    """Precision matrix and log det of the per-block prior covariance."""
    q = prep.spec.q_total
    if q:
        Linv = np.linalg.inv(th.L)
        Pg = Linv.T @ Linv
        logdet_g = 2.0 * np.sum(np.log(np.diag(th.L)))
    else:
        Pg = np.zeros((0, 0))
        logdet_g = 0.0
    if prep.spec.zeta_mode is ZetaMode.PER_CLUSTER:
        K = prep.D - q
        P = np.zeros((prep.D, prep.D))
        P[:q, :q] = Pg
        P[q:, q:] = np.eye(K) / th.sigma_zeta ** 2
        return P, logdet_g + 2.0 * K * np.log(th.sigma_zeta)
    return Pg, logdet_g


def _fixed_parts(th, prep):
    p = prep.panel
    eta_fixed = p.log_off + p.X @ th.beta if p.X.shape[2] else p.log_off.copy()
    # no zero model means pi = 0, i.e. a pure Poisson count model
    eta_zero = p.W @ th.gamma if p.W.shape[2] else np.full_like(p.log_off, -np.inf)
    return eta_fixed, eta_zero


def _check_finite(eta, prep):
    bad = ~np.isfinite(eta) & prep.panel.mask
    if bad.any():
        i, j = (int(v) for v in np.argwhere(bad)[0])
        raise EvaluationError(f"non-finite linear predictor at cluster {i}, observation {j}",
                              index=(i, j))


# --- core pieces ----------------------------------------------------------
#
# The Newton solvers work on standardised effects v with u = L v (and
# zeta = sigma w), so the prior is N(0, I) and the Hessian I + L'Z'WZL stays
# well conditioned however small a variance component gets.  Then
#
#     log L_i ~= -hs(v_hat) - 1/2 log det Hs(v_hat),
#
# with hs the data part plus |v|^2 / 2; this equals the natural-scale formula
# exactly because det H_u = det Hs / det G.

def _eta_blocks(Z, eta_fixed, u):
    if Z.shape[2] == 0:
        return eta_fixed
    return eta_fixed + np.einsum("nmd,nd->nm", Z, u)


def _h_core(prep, Z, eta_fixed, eta_zero, u, P):
    p = prep.panel
    with np.errstate(over="ignore", invalid="ignore"):
        eta = _eta_blocks(Z, eta_fixed, u)
        ll = logpmf_eta(p.y, eta, eta_zero, p.lgam)
    data = -np.sum(np.where(p.mask, ll, 0.0), axis=1)
    if P is None:
        return data + 0.5 * np.einsum("nd,nd->n", u, u)
    return data + 0.5 * np.einsum("nd,de,ne->n", u, P, u)


def _gh_core(prep, Z, eta_fixed, eta_zero, u, P):
    p = prep.panel
    eta = _eta_blocks(Z, eta_fixed, u)
    _, d1, d2 = logpmf_derivs_eta(p.y, eta, eta_zero, p.lgam)
    d1 = d1 * prep.w_mask
    w = -d2 * prep.w_mask
    D = Z.shape[2]
    P = np.eye(D) if P is None else P
    g = -np.einsum("nmd,nm->nd", Z, d1) + u @ P
    H = np.einsum("nmd,nm,nme->nde", Z, w, Z) + P
    return g, H


def _h_blocks(prep, eta_fixed, eta_zero, u, P, logdet_prior):
    """Natural-scale joint negative log-density per cluster."""
    return _h_core(prep, prep.Zfull, eta_fixed, eta_zero, u, P) \
        + 0.5 * (prep.D * LOG2PI + logdet_prior)


def _grad_hess_blocks(prep, eta_fixed, eta_zero, u, P):
    return _gh_core(prep, prep.Zfull, eta_fixed, eta_zero, u, P)


def _std_scale(th, prep):
    """Block-diagonal factor mapping standardised to natural effects."""
    q = prep.spec.q_total
    if prep.spec.zeta_mode is ZetaMode.PER_CLUSTER:
        Lf = np.zeros((prep.D, prep.D))
        Lf[:q, :q] = th.L
        Lf[q:, q:] = th.sigma_zeta * np.eye(prep.D - q)
        return Lf
    return th.L


def _std_design(prep, th):
    q = prep.spec.q_total
    Zc = prep.panel.Z @ th.L if q else prep.panel.Z
    if prep.spec.zeta_mode is ZetaMode.PER_CLUSTER:
        return np.concatenate([Zc, th.sigma_zeta * prep.Zfull[..., q:]], axis=2)
    return Zc


def _safe_cholesky(H, tau0=1e-6):
    """Cholesky factors of each block, adding ``tau I`` where needed."""
    try:
        return np.linalg.cholesky(H), H
    except np.linalg.LinAlgError:
        pass
    H = H.copy()
    D = H.shape[-1]
    L = np.empty_like(H)
    for i in range(H.shape[0]):
        tau = tau0
        while True:
            try:
                L[i] = np.linalg.cholesky(H[i])
                break
            except np.linalg.LinAlgError:
                H[i] = H[i] + tau * np.eye(D)
                tau *= 10.0
    return L, H


def _newton_step(H, g):
    """Newton direction per block, with a ridge where ``H`` is not positive definite."""
    bad = ~(np.isfinite(H).all(axis=(-2, -1)) & np.isfinite(g).all(axis=-1))
    if bad.any():
        i = int(np.argmax(bad))
        raise EvaluationError(f"inner derivatives not finite in cluster {i}", index=(i,))
    _, Hd = _safe_cholesky(H)
    try:
        return np.linalg.solve(Hd, g[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise EvaluationError(f"inner Hessian is singular: {exc}") from exc


def _logdet_blocks(H):
    L = np.linalg.cholesky(H)
    return 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)


def _small(g, step, tol):
    """Gradient below ``tol`` or Newton decrement below ``tol**2``."""
    dec = np.einsum("...d,...d->...", g, step)
    return (np.abs(g).max(axis=-1) <= tol) | (np.abs(dec) <= tol * tol)


def _newton_blocks(prep, th, start, tol, max_iter):
    n = prep.panel.n_clusters
    D = prep.D
    Lf = _std_scale(th, prep)
    Zs = _std_design(prep, th)
    eta_fixed, eta_zero = _fixed_parts(th, prep)
    _check_finite(eta_fixed, prep)
    v = np.zeros((n, D)) if start is None else np.array(start, dtype=float).reshape(n, D)
    h = _h_core(prep, Zs, eta_fixed, eta_zero, v, None)
    if not np.all(np.isfinite(h)):
        if start is not None:
            v = np.zeros((n, D))
            h = _h_core(prep, Zs, eta_fixed, eta_zero, v, None)
        if not np.all(np.isfinite(h)):
            i = int(np.argmax(~np.isfinite(h)))
            raise EvaluationError(f"joint density not finite in cluster {i}", index=(i,))
    stuck = np.zeros(n, dtype=bool)
    it = 0
    g, H = _gh_core(prep, Zs, eta_fixed, eta_zero, v, None)
    for it in range(1, max_iter + 1):
        if not D:
            break
        step = _newton_step(H, g)
        done = _small(g, step, tol)
        if np.all(done | stuck):
            break
        alpha = np.where(done | stuck, 0.0, 1.0)
        moving = alpha > 0
        # predicted decrease below the rounding level of h: take the full step
        floor = np.einsum("nd,nd->n", g, step) < ROUNDING * (1.0 + np.abs(h))
        h_new = h.copy()
        v_new = v.copy()
        for _ in range(60):
            trial = v - alpha[:, None] * step
            h_try = _h_core(prep, Zs, eta_fixed, eta_zero, trial, None)
            ok = moving & np.isfinite(h_try) & ((h_try <= h) | floor)
            v_new[ok] = trial[ok]
            h_new[ok] = h_try[ok]
            moving &= ~ok
            if not moving.any():
                break
            alpha[moving] *= 0.5
        # no decrease possible along the Newton direction: at the noise floor
        stuck |= moving
        v, h = v_new, h_new
        g, H = _gh_core(prep, Zs, eta_fixed, eta_zero, v, None)
    if D:
        step = _newton_step(H, g)
        converged = _small(g, step, tol) | (stuck & _small(g, step, np.sqrt(tol)))
    else:
        converged = np.ones(n, dtype=bool)
    try:
        logdet = _logdet_blocks(H) if D else np.zeros(n)
    except np.linalg.LinAlgError:
        logdet = np.full(n, np.nan)
        for i in range(n):
            sgn, val = np.linalg.slogdet(H[i])
            logdet[i] = val if sgn > 0 else np.nan
        converged &= np.isfinite(logdet)
    return InnerResult(v @ Lf.T, H, h, logdet, converged, it, None, v, None)


def _laplace_grad_blocks(prep, th, res):
    """Exact gradient of the block Laplace log-likelihood in the packed parameters.

    With ``l(theta) = sum_i [-hs_i(v_i) - 1/2 log det Hs_i]`` at the modes,
    differentiating through the mode (``dv/dtheta = -Hs^-1 dg/dtheta``) gives
    per observation three weights: ``A`` multiplies ``d eta / d theta``,
    ``B`` multiplies ``d eta_zero / d theta`` and the vector ``C``
    multiplies the derivative of the standardised design row.
    """
    p = prep.panel
    spec = prep.spec
    q = spec.q_total
    D = prep.D
    Zs = _std_design(prep, th)
    eta_fixed, eta_zero = _fixed_parts(th, prep)
    v = res.std
    eta = _eta_blocks(Zs, eta_fixed, v)
    a1, a2, a3, c1, c11, c21 = logpmf_derivs3_eta(p.y, eta, eta_zero)
    wm = prep.w_mask
    a1, a2, a3, c1, c11, c21 = (x * wm for x in (a1, a2, a3, c1, c11, c21))
    grad = np.zeros(spec.n_params)
    sl = spec.slices()
    if D:
        Hinv = np.linalg.inv(res.hessian)
        P = np.einsum("nde,nme->nmd", Hinv, Zs)
        lev = np.einsum("nmd,nmd->nm", Zs, P)
        r = 0.5 * np.einsum("nm,nm,nmd->nd", a3, lev, Zs)
        m = np.einsum("nde,ne->nd", Hinv, r)
        mz = np.einsum("nd,nmd->nm", m, Zs)
        A = a1 + 0.5 * a3 * lev + a2 * mz
        B = c1 + 0.5 * c21 * lev + c11 * mz
        C = A[..., None] * v[:, None, :] + a2[..., None] * P + a1[..., None] * m[:, None, :]
    else:
        A, B, C = a1, c1, None
    if spec.n_beta:
        grad[sl["beta"]] = np.einsum("nm,nmk->k", A, p.X)
    if spec.p_zero:
        grad[sl["gamma"]] = np.einsum("nm,nmk->k", B, p.W)
    if q:
        M = np.einsum("nmr,nmc->rc", p.Z, C[..., :q])
        rows, cols = np.tril_indices(q)
        fac = np.where(rows == cols, th.L[rows, cols], 1.0)
        grad[sl["chol"]] = M[rows, cols] * fac
    if spec.zeta_mode is ZetaMode.PER_CLUSTER:
        grad[sl["zeta"]] = th.sigma_zeta * np.sum(C[..., q:] * prep.Zfull[..., q:])
    return grad


# --- shared month effects ---------------------------------------------------

def _shared_eta(Z, OH, eta_fixed, b, zeta):
    eta = eta_fixed + np.einsum("nmk,k->nm", OH, zeta)
    if b.shape[1]:
        eta = eta + np.einsum("nmq,nq->nm", Z, b)
    return eta


def _h_arrow(prep, Z, OH, eta_fixed, eta_zero, b, zeta, Pg, s2):
    p = prep.panel
    with np.errstate(over="ignore", invalid="ignore"):
        eta = _shared_eta(Z, OH, eta_fixed, b, zeta)
        ll = logpmf_eta(p.y, eta, eta_zero, p.lgam)
    val = -np.sum(np.where(p.mask, ll, 0.0))
    return val + 0.5 * np.einsum("nd,de,ne->", b, Pg, b) + 0.5 * zeta @ zeta / s2


def _gh_arrow(prep, Z, OH, eta_fixed, eta_zero, b, zeta, Pg, s2):
    p = prep.panel
    eta = _shared_eta(Z, OH, eta_fixed, b, zeta)
    _, d1, d2 = logpmf_derivs_eta(p.y, eta, eta_zero, p.lgam)
    d1 = d1 * prep.w_mask
    w = -d2 * prep.w_mask
    gb = -np.einsum("nmq,nm->nq", Z, d1) + b @ Pg
    gz = -np.einsum("nmk,nm->k", OH, d1) + zeta / s2
    A = np.einsum("nmq,nm,nmr->nqr", Z, w, Z) + Pg
    B = np.einsum("nmq,nm,nmk->nqk", Z, w, OH)
    C = np.einsum("nmk,nm,nmk->k", OH, w, OH) + 1.0 / s2
    return gb, gz, A, B, C


def _h_shared(prep, th, eta_fixed, eta_zero, b, zeta, Pg, logdet_g):
    """Natural-scale joint negative log-density of the shared block."""
    n, q = b.shape
    K = len(zeta)
    s2 = th.sigma_zeta ** 2
    val = _h_arrow(prep, prep.Zfull, prep.onehot, eta_fixed, eta_zero, b, zeta, Pg, s2)
    return val + 0.5 * n * (q * LOG2PI + logdet_g) + 0.5 * K * (LOG2PI + np.log(s2))


def _grad_hess_shared(prep, th, eta_fixed, eta_zero, b, zeta, Pg):
    return _gh_arrow(prep, prep.Zfull, prep.onehot, eta_fixed, eta_zero, b, zeta, Pg,
                     th.sigma_zeta ** 2)


def _schur(A, B, C, tau=0.0):
    """Factor the arrow Hessian; returns (A, A^-1 B, S, logdet) or raises."""
    q = A.shape[-1]
    if tau:
        A = A + tau * np.eye(q)
        C = C + tau
    La = np.linalg.cholesky(A)
    AinvB = np.linalg.solve(A, B)
    S = np.diag(C) - np.einsum("nqk,nql->kl", B, AinvB)
    Ls = np.linalg.cholesky(S)
    logdet = 2.0 * np.sum(np.log(np.diagonal(La, axis1=1, axis2=2))) \
        + 2.0 * np.sum(np.log(np.diag(Ls)))
    return A, AinvB, S, logdet


def _newton_shared(prep, th, start, tol, max_iter):
    p = prep.panel
    n = p.n_clusters
    q = prep.spec.q_total
    K = p.n_months
    Zs = p.Z @ th.L if q else p.Z
    OHs = th.sigma_zeta * prep.onehot
    eye = np.eye(q)
    eta_fixed, eta_zero = _fixed_parts(th, prep)
    _check_finite(eta_fixed, prep)

    def hval(b, z):
        return _h_arrow(prep, Zs, OHs, eta_fixed, eta_zero, b, z, eye, 1.0)

    if start is None or start[0] is None:
        v, w = np.zeros((n, q)), np.zeros(K)
    else:
        v = np.array(start[0], dtype=float).reshape(n, q)
        w = np.zeros(K) if start[1] is None else np.array(start[1], dtype=float)
    h = hval(v, w)
    if not np.isfinite(h):
        v, w = np.zeros((n, q)), np.zeros(K)
        h = hval(v, w)
        if not np.isfinite(h):
            raise EvaluationError("joint density not finite in the shared block", index=("shared",))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        gb, gz, A, B, C = _gh_arrow(prep, Zs, OHs, eta_fixed, eta_zero, v, w, eye, 1.0)
        gmax = max(np.abs(gb).max(initial=0.0), np.abs(gz).max(initial=0.0))
        if not (np.isfinite(gmax) and np.isfinite(A).all() and np.isfinite(C).all()):
            raise EvaluationError("inner derivatives not finite in the shared block", index=("shared",))
        if gmax <= tol:
            converged = True
            break
        tau = 0.0
        while True:
            try:
                Ad, AinvB, S, _ = _schur(A, B, C, tau)
                break
            except np.linalg.LinAlgError:
                tau = 1e-6 if tau == 0.0 else tau * 10.0
        try:
            Ainv_gb = np.linalg.solve(Ad, gb[..., None])[..., 0]
            dz = np.linalg.solve(S, gz - np.einsum("nqk,nq->k", B, Ainv_gb))
        except np.linalg.LinAlgError as exc:
            raise EvaluationError(f"inner Hessian is singular: {exc}") from exc
        db = Ainv_gb - np.einsum("nqk,k->nq", AinvB, dz)
        dec = abs(np.sum(gb * db) + gz @ dz)
        if dec <= tol * tol:
            converged = True
            break
        alpha = 1.0
        accepted = False
        floor = dec < ROUNDING * (1.0 + abs(h))
        for _ in range(60):
            v_try, w_try = v - alpha * db, w - alpha * dz
            h_try = hval(v_try, w_try)
            if np.isfinite(h_try) and (h_try <= h or floor):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            converged = gmax <= np.sqrt(tol) or dec <= tol
            break
        v, w, h = v_try, w_try, h_try
    gb, gz, A, B, C = _gh_arrow(prep, Zs, OHs, eta_fixed, eta_zero, v, w, eye, 1.0)
    try:
        _, _, _, logdet = _schur(A, B, C)
    except np.linalg.LinAlgError:
        logdet, converged = np.nan, False
    return InnerResult(v @ th.L.T, A, np.float64(h), np.float64(logdet), np.bool_(converged),
                       it, th.sigma_zeta * w, v, w)


# --- public API --------------------------------------------------------------

def joint_negloglik(params, panel, spec, u, zeta=None):
    """Joint negative log-density ``h(u)`` of data and random effects.

    Returns one value per cluster, or the total of the single shared block
    when ``spec.zeta_mode`` is ``SHARED`` (then ``u`` holds the cluster
    parts and ``zeta`` the shared month effects).
    """
    prep = prepare(panel, spec)
    th = _decode(params, spec)
    P, logdet_prior = _prior(th, prep)
    eta_fixed, eta_zero = _fixed_parts(th, prep)
    _check_finite(eta_fixed, prep)
    u = np.asarray(u, dtype=float).reshape(prep.panel.n_clusters, -1)
    if spec.zeta_mode is ZetaMode.SHARED:
        return float(_h_shared(prep, th, eta_fixed, eta_zero, u, np.asarray(zeta, float),
                               P, logdet_prior))
    if u.shape[1] != prep.D:
        raise StructuralError(f"random-effect vector has {u.shape[1]} entries, expected {prep.D}")
    eta = _eta_blocks(prep.Zfull, eta_fixed, u)
    _check_finite(eta, prep)
    return _h_blocks(prep, eta_fixed, eta_zero, u, P, logdet_prior)


def joint_grad_hess(params, panel, spec, u, zeta=None):
    """Analytic gradient and Hessian of :func:`joint_negloglik` in ``u``.

    Under a shared month effect the dense gradient and Hessian of the whole
    block are assembled, ordered as ``(b_1, ..., b_n, zeta)``.
    """
    prep = prepare(panel, spec)
    th = _decode(params, spec)
    P, _ = _prior(th, prep)
    eta_fixed, eta_zero = _fixed_parts(th, prep)
    u = np.asarray(u, dtype=float).reshape(prep.panel.n_clusters, -1)
    if spec.zeta_mode is not ZetaMode.SHARED:
        return _grad_hess_blocks(prep, eta_fixed, eta_zero, u, P)
    zeta = np.asarray(zeta, dtype=float)
    gb, gz, A, B, C = _grad_hess_shared(prep, th, eta_fixed, eta_zero, u, zeta, P)
    n, q = u.shape
    K = len(zeta)
    H = np.zeros((n * q + K, n * q + K))
    for i in range(n):
        sl = slice(i * q, (i + 1) * q)
        H[sl, sl] = A[i]
        H[sl, n * q:] = B[i]
        H[n * q:, sl] = B[i].T
    H[n * q:, n * q:] = np.diag(C)
    return np.concatenate([gb.ravel(), gz]), H


def inner_mode(params, panel, spec, tol=1e-8, max_iter=100, start=None):
    """Newton mode of the random effects for every independence block.

    ``start`` is a previous result's :meth:`InnerResult.start` (standardised
    coordinates).  Never raises for non-convergence; inspect ``converged``.
    """
    prep = prepare(panel, spec)
    th = _decode(params, spec)
    if spec.zeta_mode is ZetaMode.SHARED:
        return _newton_shared(prep, th, start, tol, max_iter)
    if isinstance(start, tuple):
        start = start[0]
    return _newton_blocks(prep, th, start, tol, max_iter)


def _logmarg_from_inner(prep, res):
    return float(np.sum(res.laplace_terms))


def laplace_logmarg(params, panel, spec, start=None, tol=1e-8, max_iter=100,
                    return_inner=False):
    """Laplace approximation to the marginal log-likelihood."""
    prep = prepare(panel, spec)
    res = inner_mode(params, prep, spec, tol=tol, max_iter=max_iter, start=start)
    if not np.all(res.converged):
        bad = np.flatnonzero(~np.atleast_1d(res.converged))
        raise EvaluationError(f"inner mode did not converge in block(s) {bad.tolist()}",
                              index=tuple(bad.tolist()))
    value = _logmarg_from_inner(prep, res)
    if not np.isfinite(value):
        raise EvaluationError("Laplace log-likelihood is not finite")
    return (value, res) if return_inner else value


def laplace_gradient(params, panel, spec, start=None, tol=1e-8, max_iter=100):
    """Laplace log-likelihood and its exact gradient in the packed parameters.

    Available for independent blocks; raises ``StructuralError`` under a
    shared month effect (use finite differences there).
    """
    prep = prepare(panel, spec)
    if spec.zeta_mode is ZetaMode.SHARED:
        raise StructuralError("analytic gradient is not available for shared month effects")
    value, res = laplace_logmarg(params, prep, spec, start=start, tol=tol, max_iter=max_iter,
                                 return_inner=True)
    return value, _laplace_grad_blocks(prep, _decode(params, spec), res)


@dataclass
class FitOptions:
    ftol: float = 1e-8
    gtol: float = 1e-4
    max_iter: int = 500
    inner_tol: float = 1e-8
    inner_max_iter: int = 100
    hessian: bool = True
    frozen: tuple = ()


@dataclass
class RawFit:
    theta_hat: np.ndarray
    loglik: float
    outer_hessian: Optional[np.ndarray]
    converged: bool
    n_outer_iterations: int
    modes: InnerResult
    spec: ModelSpec
    frozen: tuple = ()
    message: str = ""
    trace: list = field(default_factory=list)

    @property
    def params(self):
        return unpack_params(self.theta_hat, self.spec)


class _Objective:
    """Negative Laplace log-likelihood over the free coordinates."""

    def __init__(self, prep, theta0, free, opts):
        self.prep = prep
        self.theta0 = np.asarray(theta0, dtype=float)
        self.free = free
        self.opts = opts
        self.warm = None
        self.warm_z = None
        self.analytic = prep.spec.zeta_mode is not ZetaMode.SHARED

    def full(self, z):
        theta = self.theta0.copy()
        theta[self.free] = z
        return theta

    def evaluate(self, z, start=None):
        theta = self.full(z)
        res = inner_mode(theta, self.prep, self.prep.spec, tol=self.opts.inner_tol,
                         max_iter=self.opts.inner_max_iter, start=start)
        if not np.all(res.converged):
            return np.inf, res
        value = _logmarg_from_inner(self.prep, res)
        return (-value if np.isfinite(value) else np.inf), res

    def __call__(self, z):
        start = None if self.warm is None else self.warm.start()
        try:
            return self.evaluate(z, start)[0]
        except (EvaluationError, FloatingPointError, np.linalg.LinAlgError):
            return np.inf

    def accept(self, z):
        """Store the inner solution at an accepted point as the next warm start."""
        _, self.warm = self.evaluate(z, self.warm.start())
        self.warm_z = np.array(z, dtype=float)

    def grad(self, z, fz=None):
        if not self.analytic:
            return fd_gradient(self, z, f0=fz)
        z = np.asarray(z, dtype=float)
        if self.warm_z is not None and np.array_equal(z, self.warm_z):
            res = self.warm
        else:
            try:
                f, res = self.evaluate(z, None if self.warm is None else self.warm.start())
            except (EvaluationError, FloatingPointError, np.linalg.LinAlgError):
                return np.full(len(z), np.nan)
            if not np.isfinite(f):
                return np.full(len(z), np.nan)
        theta = self.full(z)
        g = _laplace_grad_blocks(self.prep, _decode(theta, self.prep.spec), res)
        return -g[self.free]

    def hessian(self, z):
        """Observed information over the free coordinates."""
        if not self.analytic:
            return fd_hessian(self, z, f0=self(z))
        n = len(z)
        H = np.empty((n, n))
        for k in range(n):
            h = GRAD_STEP * (1.0 + abs(z[k]))
            zp = np.array(z, dtype=float)
            zm = zp.copy()
            zp[k] += h
            zm[k] -= h
            H[:, k] = (self.grad(zp) - self.grad(zm)) / (zp[k] - zm[k])
        return 0.5 * (H + H.T)


def outer_fit(data, spec, init, opts=None):
    """Maximise the Laplace log-likelihood by BFGS.

    Gradients are exact for independent blocks and finite differences under
    a shared month effect; the observed information is a central difference
    of the gradient (or of the function, for shared month effects).
    """
    opts = opts or FitOptions()
    prep = prepare(data, spec)
    theta0 = pack_params(init, spec) if hasattr(init, "beta") else np.asarray(init, float).copy()
    if len(theta0) != spec.n_params:
        raise StructuralError(f"initial vector has length {len(theta0)}, expected {spec.n_params}")
    frozen = tuple(sorted(set(int(k) for k in opts.frozen)))
    free = np.setdiff1d(np.arange(spec.n_params), frozen)
    obj = _Objective(prep, theta0, free, opts)
    try:
        f0, res0 = obj.evaluate(theta0[free])
    except EvaluationError as exc:
        raise InitializationError(f"objective cannot be evaluated at the initial values: {exc}") from exc
    if not np.isfinite(f0):
        raise InitializationError("objective is not finite at the initial values")
    obj.warm = res0
    obj.warm_z = theta0[free].copy()

    opt = bfgs(obj, theta0[free], grad=obj.grad, ftol=opts.ftol, gtol=opts.gtol,
               max_iter=opts.max_iter, callback=lambda z, f: obj.accept(z))
    theta_hat = obj.full(opt.x)
    f_hat, modes = obj.evaluate(opt.x, obj.warm.start())
    hess = None
    if opts.hessian:
        hess = np.full((spec.n_params, spec.n_params), np.nan)
        if len(free):
            obj.warm, obj.warm_z = modes, np.array(opt.x, dtype=float)
            hess[np.ix_(free, free)] = obj.hessian(opt.x)
    return RawFit(theta_hat=theta_hat, loglik=-f_hat, outer_hessian=hess,
                  converged=bool(opt.converged), n_outer_iterations=opt.n_iter,
                  modes=modes, spec=spec, frozen=frozen, message=opt.message,
                  trace=[-v for v in opt.trace])


@dataclass
class Inference:
    names: list
    estimate: np.ndarray
    se: np.ndarray
    z: np.ndarray
    p_value: np.ndarray
    cov: np.ndarray
    variances: Optional[np.ndarray] = None
    variances_se: Optional[np.ndarray] = None
    sigma2_zeta: Optional[float] = None
    sigma2_zeta_se: Optional[float] = None


def wald_p_value(z):
    return 2.0 * stats.norm.sf(np.abs(z))


def _invert_information(H):
    """Inverse of the observed information; NaN where it is not identified."""
    n = len(H)
    cov = np.full((n, n), np.nan)
    ok = np.all(np.isfinite(H), axis=1)
    idx = np.flatnonzero(ok)
    if not len(idx):
        return cov
    Hs = 0.5 * (H + H.T)
    scale = max(np.abs(np.linalg.eigvalsh(Hs[np.ix_(idx, idx)])).max(), 1.0)
    # drop, one at a time, the coordinate loading most on the weakest direction
    # (a flat changepoint or a collapsed variance) until the rest is well conditioned
    keep = list(idx)
    while keep:
        sub = Hs[np.ix_(keep, keep)]
        evals, evecs = np.linalg.eigh(sub)
        if evals[0] > 1e-10 * scale:
            cov[np.ix_(keep, keep)] = np.linalg.inv(sub)
            break
        keep.pop(int(np.argmax(np.abs(evecs[:, 0]))))
    return cov


def observed_info_se(raw):
    """Wald standard errors and p-values from the numerical observed information.

    Variance components keep their log-Cholesky SEs in ``se``; delta-method
    SEs of the implied variances are returned separately.
    """
    spec = raw.spec
    if raw.outer_hessian is None:
        raise ValueError("fit was run without an observed-information matrix")
    cov = _invert_information(raw.outer_hessian)
    se = np.sqrt(np.where(np.diag(cov) > 0, np.diag(cov), np.nan))
    est = np.asarray(raw.theta_hat, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = est / se
    out = Inference(spec.param_names(), est, se, z, wald_p_value(z), cov)
    q = spec.q_total
    sl = spec.slices()
    if q:
        chol = est[sl["chol"]]
        rows, cols = np.tril_indices(q)
        L = chol_factor(chol, q)
        # dG_kk / d chol_j: 2 L_kc * dL_kc/dchol_j
        J = np.zeros((q, len(chol)))
        for j, (r, c) in enumerate(zip(rows, cols)):
            dL = L[r, c]  # diagonal entries are exp(stored); derivative equals the value
            J[r, j] = 2.0 * L[r, c] * (dL if r == c else 1.0)
        cg = cov[sl["chol"], sl["chol"]]
        out.variances = np.diag(L @ L.T)
        out.variances_se = np.full(q, np.nan)
        for k in range(q):
            idx = np.flatnonzero(J[k])
            v = J[k, idx] @ cg[np.ix_(idx, idx)] @ J[k, idx]
            if np.isfinite(v) and v >= 0:
                out.variances_se[k] = np.sqrt(v)
    if spec.has_zeta:
        k = sl["zeta"].start
        s2 = float(np.exp(2 * est[k]))
        out.sigma2_zeta = s2
        out.sigma2_zeta_se = float(2.0 * s2 * se[k])
    return out


def info_criteria(loglik, p, n):
    if p < 1 or n < 1:
        raise ValueError("parameter and observation counts must be positive")
    deviance = -2.0 * loglik
    return {"aic": deviance + 2.0 * p, "bic": deviance + p * np.log(n), "deviance": deviance}
