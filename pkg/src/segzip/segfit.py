"""Fitting drivers for segmented ZIP mixed models.

``fit_known`` handles a fixed changepoint: the hinge term becomes one more
covariate and a single Laplace fit does the rest.

``fit_random`` estimates cluster-specific changepoints ``psi_i = g(lam +
l_i)`` by repeatedly linearising the hinge around the current ``lam_i``:

* the hinge value ``U = f(t, psi_i)`` and its slope in ``lam``,
  ``V = f'(t, psi_i) * g'(lam_i)``, become pseudo-covariates;
* ``G_pc = delta_i * V`` carries the coefficient ``lam`` (with random part
  ``l_i``) and the offset absorbs ``-lam_i * G_pc``;
* the resulting working model is an ordinary ZIP mixed model, refitted
  until the relative change of its log-likelihood drops below ``tol``.

The start value ``psi0`` is either supplied or picked by a grid search on
prediction MSE (:func:`grid_init`).  Reported standard errors come from the
last working model and ignore the linearisation step.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import special

from .design import (ModelSpec, Panel, ParamPack, Random, ZetaMode, chol_factor,
                     cov_to_report, pack_params, unpack_params)
from .errors import DomainError, SegZipError, StructuralError
from .laplace import FitOptions, info_criteria, observed_info_se, outer_fit
from .segfun import (LAMBDA_SATURATION, cp_derivative, cp_from_lambda,
                     lambda_from_cp, seg_dpsi, seg_value)

log = logging.getLogger(__name__)

__all__ = [
    "PseudoCovariates",
    "SegFitResult",
    "GridOptions",
    "GridResult",
    "AlgorithmOptions",
    "Prediction",
    "cluster_bounds",
    "fit_known",
    "pseudo_step",
    "working_fit",
    "fit_random",
    "grid_points",
    "grid_init",
    "predict",
]

NUDGE = 1e-6


@dataclass
class PseudoCovariates:
    u: np.ndarray
    v: np.ndarray
    g_pc: np.ndarray
    o_star: np.ndarray
    psi: np.ndarray
    lam_hat: np.ndarray
    delta_tilde: np.ndarray


@dataclass
class SegFitResult:
    spec: ModelSpec
    names: list
    estimate: np.ndarray
    se: np.ndarray
    p_value: np.ndarray
    variances: Optional[np.ndarray]
    correlations: Optional[np.ndarray]
    sigma2_zeta: Optional[float]
    cluster_ids: tuple
    cluster_modes: np.ndarray
    zeta_modes: Optional[np.ndarray]
    cluster_changepoints: np.ndarray
    population_changepoint: Optional[float]
    population_changepoint_se: Optional[float]
    loglik: float
    loglik_trace: list
    iterations: int
    converged: bool
    mse: float
    criteria: dict
    n_obs: int
    n_params: int
    psi0: Optional[float] = None
    init_loglik: Optional[float] = None
    flags: dict = field(default_factory=dict)
    raw: object = field(default=None, repr=False, compare=False)
    known_psi: Optional[float] = None
    delta_i: Optional[np.ndarray] = None

    def param(self, name):
        k = self.names.index(name)
        return self.estimate[k], self.se[k]

    def fixed_table(self):
        """Rows ``(name, estimate, se, p_value)`` for the fixed effects."""
        nfix = self.spec.n_beta + self.spec.p_zero
        return [(self.names[k], float(self.estimate[k]), float(self.se[k]),
                 float(self.p_value[k])) for k in range(nfix)]

    def to_dict(self):
        def arr(a):
            return None if a is None else np.asarray(a, dtype=float).tolist()
        return {
            "model": {
                "p_count": self.spec.p_count, "p_zero": self.spec.p_zero,
                "q_cluster": self.spec.q_cluster, "seg_kind": self.spec.seg_kind.value,
                "changepoint": _cp_mode_dict(self.spec),
                "random_delta": self.spec.random_delta, "random_lambda": self.spec.random_lambda,
                "zeta_mode": self.spec.zeta_mode.value,
            },
            "fixed": [{"name": nm, "estimate": est, "se": se, "p_value": p}
                      for nm, est, se, p in self.fixed_table()],
            "parameters": {"names": list(self.names), "estimate": arr(self.estimate),
                           "se": arr(self.se), "p_value": arr(self.p_value)},
            "vcov_components": {
                "names": self.spec.random_names(),
                "variances": arr(self.variances),
                "correlations": arr(self.correlations),
                "sigma2_zeta": self.sigma2_zeta,
            },
            "cluster_ids": [str(c) for c in self.cluster_ids],
            "cluster_modes": arr(self.cluster_modes),
            "zeta_modes": arr(self.zeta_modes),
            "cluster_changepoints": arr(self.cluster_changepoints),
            "population_changepoint": self.population_changepoint,
            "population_changepoint_se": self.population_changepoint_se,
            "known_psi": self.known_psi,
            "psi0": self.psi0,
            "loglik": self.loglik,
            "init_loglik": self.init_loglik,
            "loglik_trace": [float(v) for v in self.loglik_trace],
            "iterations": self.iterations,
            "converged": self.converged,
            "mse": self.mse,
            "criteria": self.criteria,
            "n_obs": self.n_obs,
            "n_params": self.n_params,
            "flags": self.flags,
        }


def _cp_mode_dict(spec):
    mode = spec.cp_mode
    if mode is None:
        return None
    if isinstance(mode, Random):
        b = mode.bounds
        return {"kind": "random", "bounds": None if b is None else [b.l1, b.l2]}
    return {"kind": "known", "psi": mode.psi}


def _panel(data, spec):
    if isinstance(data, Panel):
        return data
    return Panel.from_dataset(data, spec)


def cluster_bounds(panel, spec):
    """Per-cluster ``(l1, l2)`` arrays for a random-changepoint spec."""
    mode = spec.cp_mode
    if isinstance(mode, Random) and mode.bounds is not None:
        n = panel.n_clusters
        return np.full(n, mode.bounds.l1), np.full(n, mode.bounds.l2)
    if np.any(panel.l2 <= panel.l1):
        raise DomainError("per-cluster bounds need at least two distinct times per cluster")
    return panel.l1.copy(), panel.l2.copy()


def _rms(col, mask):
    v = col[mask]
    return float(np.sqrt(np.mean(v * v))) if v.size else 1.0


def default_init(panel, spec, opts=None):
    """Starting values: a fixed-effects ZIP fit plus small random-effect SDs.

    Random-effect SDs start at 0.3 divided by the RMS of their design
    column so slopes on long time axes start on a sensible scale.
    """
    fixed_spec = replace(spec, q_cluster=0, random_delta=False, random_lambda=False,
                         zeta_mode=ZetaMode.NONE, re_names=None)
    fp = panel.with_design(Z=np.zeros(panel.Z.shape[:2] + (0,)))
    beta = np.zeros(spec.n_beta)
    gamma = np.zeros(spec.p_zero)
    start = ParamPack(beta, gamma, np.zeros(0), None)
    try:
        raw = outer_fit(fp, fixed_spec, start, FitOptions(hessian=False, max_iter=200))
        beta, gamma = raw.params.beta, raw.params.gamma
    except SegZipError:
        log.warning("fixed-effects start failed; using zeros")
    q = spec.q_total
    chol = np.zeros(spec.n_chol)
    di = [k * (k + 3) // 2 for k in range(q)]
    for k, pos in enumerate(di):
        chol[pos] = np.log(0.3 / max(_rms(panel.Z[..., k], panel.mask), 1e-8))
    lsz = np.log(0.2) if spec.has_zeta else None
    return ParamPack(beta, gamma, chol, lsz)


def _column_degenerate(col, mask):
    return not np.any(np.abs(col[mask]) > 0.0)


def _design_rank_deficient(X, mask):
    rows = X[mask]
    if rows.shape[1] == 0:
        return False
    return np.linalg.matrix_rank(rows) < rows.shape[1]


def _known_design(panel, spec, psi):
    seg = np.where(panel.mask, seg_value(spec.seg_kind, panel.t, psi), 0.0)
    X = np.concatenate([panel.X, seg[..., None]], axis=2)
    Z = panel.Z
    if spec.random_delta:
        Z = np.concatenate([Z, seg[..., None]], axis=2)
    return panel.with_design(X=X, Z=Z), seg


def _chol_row_indices(q, row):
    start = row * (row + 1) // 2
    return list(range(start, start + row + 1))


def _assemble(raw, spec, panel, *, known_psi=None, lam_i=None, psi_i=None, trace=None,
              iterations=1, converged=None, psi0=None, init_loglik=None, flags=None,
              pop_bounds=None, delta_i=None):
    inf = observed_info_se(raw) if raw.outer_hessian is not None else None
    names = spec.param_names()
    est = np.asarray(raw.theta_hat, dtype=float)
    if inf is None:
        se = np.full(len(est), np.nan)
        pv = np.full(len(est), np.nan)
    else:
        se, pv = inf.se, inf.p_value
    q = spec.q_total
    variances = correlations = None
    if q:
        G = chol_factor(est[spec.slices()["chol"]], q)
        G = G @ G.T
        variances, correlations = cov_to_report(G)
    sigma2_zeta = float(np.exp(2 * est[spec.slices()["zeta"]][0])) if spec.has_zeta else None
    modes = raw.modes
    if spec.zeta_mode is ZetaMode.PER_CLUSTER:
        cluster_modes = modes.mode[:, :q]
        zeta_modes = modes.mode[:, q:]
    elif spec.zeta_mode is ZetaMode.SHARED:
        cluster_modes = modes.mode
        zeta_modes = modes.zeta
    else:
        cluster_modes = modes.mode
        zeta_modes = None
    pop = pop_se = None
    if spec.has_lambda and pop_bounds is not None:
        k = spec.n_beta - 1
        pop = float(cp_from_lambda(est[k], pop_bounds))
        pop_se = float(cp_derivative(est[k], pop_bounds) * se[k])
    n_obs = panel.n_obs
    crit = info_criteria(raw.loglik, spec.n_params, n_obs)
    result = SegFitResult(
        spec=spec, names=names, estimate=est, se=se, p_value=pv,
        variances=variances, correlations=correlations, sigma2_zeta=sigma2_zeta,
        cluster_ids=panel.ids, cluster_modes=np.asarray(cluster_modes),
        zeta_modes=None if zeta_modes is None else np.asarray(zeta_modes),
        cluster_changepoints=(np.full(panel.n_clusters, known_psi) if psi_i is None
                              else np.asarray(psi_i)),
        population_changepoint=pop if known_psi is None else float(known_psi),
        population_changepoint_se=pop_se,
        loglik=float(raw.loglik), loglik_trace=list(trace or [raw.loglik]),
        iterations=iterations, converged=raw.converged if converged is None else converged,
        mse=np.nan, criteria=crit, n_obs=n_obs, n_params=spec.n_params,
        psi0=psi0, init_loglik=init_loglik, flags=dict(flags or {}), raw=raw,
        known_psi=known_psi, delta_i=delta_i,
    )
    return result


def _fit_known_panel(panel, kspec, psi, init=None, opts=None):
    """Known-changepoint fit on a prepared panel; returns (RawFit, flags, design)."""
    opts = opts or FitOptions()
    design, seg = _known_design(panel, kspec, psi)
    flags = {}
    frozen = list(opts.frozen)
    if kspec.has_delta and _column_degenerate(seg, panel.mask):
        flags["segment_column_zero"] = True
        frozen.append(kspec.p_count)
        if kspec.random_delta:
            row = kspec.q_cluster
            frozen += [kspec.n_beta + kspec.p_zero + k for k in _chol_row_indices(kspec.q_total, row)]
    if _design_rank_deficient(design.X, panel.mask):
        flags["rank_deficient"] = True
    init = init if init is not None else default_init(design, kspec)
    if flags.get("segment_column_zero"):
        init = unpack_params(pack_params(init, kspec), kspec)
        init.beta[kspec.p_count] = 0.0
    raw = outer_fit(design, kspec, init, replace(opts, frozen=tuple(sorted(set(frozen)))))
    return raw, flags, design


def fit_known(data, spec, init=None, opts=None):
    """Fit with the changepoint fixed at ``spec.cp_mode.psi``."""
    from .design import Known
    if not isinstance(spec.cp_mode, Known) or spec.random_lambda:
        raise StructuralError("fit_known needs a Known changepoint and no lambda slot")
    panel = _panel(data, spec)
    psi = spec.cp_mode.psi
    raw, flags, _ = _fit_known_panel(panel, spec, psi, init, opts)
    res = _assemble(raw, spec, panel, known_psi=psi, flags=flags)
    res.mse = _mse(res, panel)
    return res


def fit_plain(data, spec, init=None, opts=None):
    """ZIP mixed model without any changepoint term."""
    if spec.cp_mode is not None:
        raise StructuralError("fit_plain needs a spec without a changepoint")
    panel = _panel(data, spec)
    init = init if init is not None else default_init(panel, spec)
    raw = outer_fit(panel, spec, init, opts or FitOptions())
    res = _assemble(raw, spec, panel)
    res.cluster_changepoints = np.full(panel.n_clusters, np.nan)
    res.mse = _mse(res, panel)
    return res


def pseudo_step(lambda_hat_i, delta_tilde_i, data, spec):
    """Pseudo-covariates and pseudo-offset for the working model."""
    if not isinstance(spec.cp_mode, Random):
        raise StructuralError("pseudo_step needs a random-changepoint spec")
    panel = _panel(data, spec)
    lam = np.asarray(lambda_hat_i, dtype=float).reshape(-1)
    dlt = np.asarray(delta_tilde_i, dtype=float).reshape(-1)
    if lam.shape != (panel.n_clusters,) or dlt.shape != lam.shape:
        raise StructuralError("need one lambda and one delta per cluster")
    if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(dlt))):
        raise DomainError("pseudo_step inputs must be finite")
    lam = np.clip(lam, -LAMBDA_SATURATION, LAMBDA_SATURATION)
    l1, l2 = cluster_bounds(panel, spec)
    psi = cp_from_lambda(lam, (l1, l2))
    t = panel.t
    u = seg_value(spec.seg_kind, t, psi[:, None])
    v = seg_dpsi(spec.seg_kind, t, psi[:, None]) * cp_derivative(lam, (l1, l2))[:, None]
    g_pc = dlt[:, None] * v
    o_star = panel.log_off - lam[:, None] * g_pc
    m = panel.mask
    return PseudoCovariates(u=np.where(m, u, 0.0), v=np.where(m, v, 0.0),
                            g_pc=np.where(m, g_pc, 0.0), o_star=np.where(m, o_star, 0.0),
                            psi=psi, lam_hat=lam, delta_tilde=dlt)


def _working_design(panel, spec, pseudo):
    X = np.concatenate([panel.X, pseudo.u[..., None], pseudo.g_pc[..., None]], axis=2)
    zcols = [panel.Z]
    if spec.random_delta:
        zcols.append(pseudo.u[..., None])
    if spec.random_lambda:
        zcols.append(pseudo.g_pc[..., None])
    return panel.with_design(X=X, Z=np.concatenate(zcols, axis=2), log_off=pseudo.o_star)


def working_fit(data, spec, pseudo, init, opts=None):
    """Fit the linearised working model; returns a ``RawFit``.

    An all-zero ``G_pc`` column (every cluster saturated or before its
    changepoint) leaves ``lambda`` unidentified; it is then frozen at its
    starting value, as is the ``l_i`` row of the covariance factor.
    """
    opts = opts or FitOptions()
    panel = _panel(data, spec)
    design = _working_design(panel, spec, pseudo)
    frozen = list(opts.frozen)
    degenerate = _column_degenerate(pseudo.g_pc, panel.mask)
    if degenerate:
        frozen.append(spec.n_beta - 1)
        if spec.random_lambda:
            off = spec.n_beta + spec.p_zero
            frozen += [off + k for k in _chol_row_indices(spec.q_total, spec.q_total - 1)]
    raw = outer_fit(design, spec, init, replace(opts, frozen=tuple(sorted(set(frozen)))))
    raw.lambda_frozen = degenerate
    return raw


@dataclass
class GridOptions:
    step: float = 0.25
    fit: FitOptions = field(default_factory=lambda: FitOptions(hessian=False, ftol=1e-6,
                                                                 gtol=1e-2, max_iter=100))


@dataclass
class GridResult:
    psi0: float
    candidates: np.ndarray
    mse: np.ndarray
    loglik: np.ndarray
    failures: list

    def table(self):
        return [{"psi": float(p), "mse": float(m), "loglik": float(l)}
                for p, m, l in zip(self.candidates, self.mse, self.loglik)]


@dataclass
class AlgorithmOptions:
    tol: float = 1e-5
    max_iter: int = 50
    fit: FitOptions = field(default_factory=FitOptions)
    se: bool = True
    initial_l_sd: float = 0.1
    damping: float = 1.0
    max_step: Optional[float] = None


def grid_points(l1, l2, step):
    if step <= 0:
        raise DomainError("grid step must be positive")
    k = int(np.floor((l2 - l1) / step + 1e-9))
    pts = l1 + step * np.arange(k + 1)
    if l2 - pts[-1] > 1e-9 * max(1.0, abs(l2)):
        pts = np.append(pts, l2)
    return pts


def _grid_range(panel, spec):
    l1, l2 = cluster_bounds(panel, spec)
    return float(l1.min()), float(l2.max())


def grid_init(data, spec, step=0.25, fit_budget=None):
    """Choose ``psi0`` minimising prediction MSE over an equally spaced grid.

    Each candidate runs the initialisation (known-changepoint) fit, warm
    started from the previous candidate.  Ties go to the smallest ``psi``.
    """
    panel = _panel(data, spec)
    gopts = GridOptions(step=step) if fit_budget is None else GridOptions(step, fit_budget)
    lo, hi = _grid_range(panel, spec)
    cands = grid_points(lo, hi, gopts.step)
    mse = np.full(len(cands), np.inf)
    ll = np.full(len(cands), np.nan)
    failures = []
    init = None
    for k, psi in enumerate(cands):
        kspec = spec.known_version(psi)
        try:
            raw, _, _ = _fit_known_panel(panel, kspec, psi, init, gopts.fit)
        except SegZipError as exc:
            failures.append((float(psi), str(exc)))
            continue
        res = _assemble(raw, kspec, panel, known_psi=psi)
        mse[k] = _mse(res, panel)
        ll[k] = raw.loglik
        init = raw.params
    if not np.isfinite(mse).any():
        raise SegZipError(f"every grid candidate failed: {failures}")
    best = int(np.argmin(mse))
    return GridResult(float(cands[best]), cands, mse, ll, failures)


def _extend_with_lambda(params, kspec, spec, lam0, l_sd):
    """Initialisation-model parameters extended by the lambda / l_i slots."""
    beta = np.append(params.beta, lam0)
    chol = np.asarray(params.chol_g, dtype=float)
    if spec.random_lambda:
        q = spec.q_total
        chol = np.concatenate([chol, np.zeros(q - 1), [np.log(l_sd)]])
    return ParamPack(beta, np.asarray(params.gamma), chol, params.log_sigma_zeta)


def _split_cluster_effects(raw, spec):
    """Per-cluster ``(d_i, l_i)`` modes (zeros when not random)."""
    q = spec.q_total
    modes = raw.modes.mode[:, :q]
    n = modes.shape[0]
    d = modes[:, spec.q_cluster] if spec.random_delta else np.zeros(n)
    l = modes[:, q - 1] if spec.random_lambda else np.zeros(n)
    return d, l


def fit_random(data, spec, init_psi=None, opts=None, grid=None):
    """Random-changepoint fit by iterative linearisation.

    ``init_psi`` is a starting changepoint; when ``None`` a grid search with
    ``grid`` (a :class:`GridOptions`) picks it.
    """
    if not isinstance(spec.cp_mode, Random):
        raise StructuralError("fit_random needs a Random changepoint spec")
    opts = opts or AlgorithmOptions()
    panel = _panel(data, spec)
    l1, l2 = cluster_bounds(panel, spec)
    grid_result = None
    if init_psi is None:
        grid = grid or GridOptions()
        grid_result = grid_init(panel, spec, grid.step, grid.fit)
        init_psi = grid_result.psi0
    psi0 = float(init_psi)
    lo, hi = _grid_range(panel, spec)
    if not (lo <= psi0 <= hi):
        raise DomainError(f"initial changepoint {psi0} outside [{lo}, {hi}]")

    kspec = spec.known_version(psi0)
    init_opts = replace(opts.fit, hessian=False)
    raw0, flags0, _ = _fit_known_panel(panel, kspec, psi0, None, init_opts)
    p0 = raw0.params
    width = l2 - l1
    psi_c = np.clip(psi0, l1 + NUDGE * width, l2 - NUDGE * width)
    lam_i = lambda_from_cp(psi_c, (l1, l2))
    d0 = raw0.modes.mode[:, kspec.q_cluster] if kspec.random_delta else 0.0
    delta_i = p0.beta[kspec.p_count] + d0 * np.ones(panel.n_clusters)
    theta = _extend_with_lambda(p0, kspec, spec, float(np.mean(lam_i)), opts.initial_l_sd)

    trace = []
    history = []
    converged = False
    flags = {}
    fit_opts = replace(opts.fit, hessian=False)
    for r in range(1, opts.max_iter + 1):
        pseudo = pseudo_step(lam_i, delta_i, panel, spec)
        try:
            raw = working_fit(panel, spec, pseudo, theta, fit_opts)
        except SegZipError as exc:
            if not history:
                raise
            # a later working model failed: report the best completed iterate
            log.warning("iteration %d failed (%s); keeping the best iterate", r, exc)
            flags["failed_iteration"] = r
            flags["failure"] = f"{type(exc).__name__}: {exc}"
            break
        trace.append(raw.loglik)
        history.append((raw, pseudo))
        est = raw.params
        d_i, l_i = _split_cluster_effects(raw, spec)
        lam_hat = est.beta[spec.n_beta - 1]
        target = np.clip(lam_hat + l_i, -LAMBDA_SATURATION, LAMBDA_SATURATION)
        move = opts.damping * (target - lam_i)
        if opts.max_step is not None:
            move = np.clip(move, -opts.max_step, opts.max_step)
        lam_i = lam_i + move
        delta_i = est.beta[spec.n_beta - 2] + d_i
        theta = est
        log.debug("iteration %d: loglik %.6f delta %.4f lambda %.4f", r, raw.loglik,
                  est.beta[spec.n_beta - 2], lam_hat)
        if getattr(raw, "lambda_frozen", False):
            flags["lambda_frozen"] = True
        if r >= 2:
            rel = abs(trace[-1] - trace[-2]) / abs(trace[-2])
            if rel < opts.tol:
                converged = True
                break
    if not converged:
        best = int(np.argmax(trace))
        raw, pseudo = history[best]
        est = raw.params
        d_i, l_i = _split_cluster_effects(raw, spec)
        lam_i = np.clip(est.beta[spec.n_beta - 1] + l_i, -LAMBDA_SATURATION, LAMBDA_SATURATION)
        delta_i = est.beta[spec.n_beta - 2] + d_i
        flags["best_iterate"] = best + 1
    else:
        # report the changepoints implied by the last working fit
        lam_i = np.clip(est.beta[spec.n_beta - 1] + l_i, -LAMBDA_SATURATION, LAMBDA_SATURATION)
    raw_final = raw
    if opts.se:
        try:
            raw_final = working_fit(panel, spec, pseudo, raw.params,
                                    replace(opts.fit, hessian=True, max_iter=0))
        except SegZipError as exc:
            log.warning("standard errors unavailable: %s", exc)
            flags["se_failed"] = f"{type(exc).__name__}: {exc}"
    flags.update({f"init_{k}": v for k, v in flags0.items()})
    psi_i = cp_from_lambda(lam_i, (l1, l2))
    pop_bounds = spec.cp_mode.bounds
    res = _assemble(raw_final, spec, panel, lam_i=lam_i, psi_i=psi_i, trace=trace,
                    iterations=len(trace), converged=converged, psi0=psi0,
                    init_loglik=raw0.loglik, flags=flags, pop_bounds=pop_bounds,
                    delta_i=delta_i)
    res.loglik = float(trace[flags.get("best_iterate", len(trace)) - 1])
    res.criteria = info_criteria(res.loglik, spec.n_params, panel.n_obs)
    res.grid = grid_result
    res.mse = _mse(res, panel)
    return res


@dataclass
class Prediction:
    yhat: np.ndarray
    mu: np.ndarray
    pi: np.ndarray
    mask: np.ndarray

    def flat(self):
        return self.yhat[self.mask], self.mu[self.mask], self.pi[self.mask]


def predict(fit, data):
    """Fitted means ``(1 - pi) mu`` at the fixed estimates and random-effect modes.

    Random-changepoint fits evaluate the hinge at each cluster's estimated
    changepoint (not the linearised working model).
    """
    spec = fit.spec
    panel = _panel(data, spec)
    if tuple(panel.ids) != tuple(fit.cluster_ids):
        raise StructuralError("data clusters do not match the fitted clusters")
    est = unpack_params(fit.estimate, spec)
    p = spec.p_count
    eta = panel.log_off + (panel.X @ est.beta[:p] if p else 0.0)
    modes = fit.cluster_modes
    qc = spec.q_cluster
    if qc:
        eta = eta + np.einsum("nmq,nq->nm", panel.Z, modes[:, :qc])
    if spec.has_delta:
        d = modes[:, qc] if spec.random_delta else 0.0
        delta = est.beta[p] + d
        psi = np.asarray(fit.cluster_changepoints, dtype=float)
        seg = seg_value(spec.seg_kind, panel.t, psi[:, None])
        eta = eta + np.asarray(delta).reshape(-1, 1) * seg if np.ndim(delta) else eta + delta * seg
    if spec.zeta_mode is ZetaMode.PER_CLUSTER:
        eta = eta + np.take_along_axis(fit.zeta_modes, panel.month, axis=1)
    elif spec.zeta_mode is ZetaMode.SHARED:
        eta = eta + fit.zeta_modes[panel.month]
    mu = np.exp(eta)
    pi = special.expit(panel.W @ est.gamma) if spec.p_zero else np.zeros_like(mu)
    yhat = (1.0 - pi) * mu
    m = panel.mask
    return Prediction(np.where(m, yhat, np.nan), np.where(m, mu, np.nan),
                      np.where(m, pi, np.nan), m)


def _mse(fit, panel):
    pr = predict(fit, panel)
    r = panel.y[panel.mask] - pr.yhat[panel.mask]
    return float(np.mean(r * r))
