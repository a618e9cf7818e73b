"""Replicate harness, Table-style summaries and residual diagnostics.

A replicate is fully determined by ``(config, master_seed, replicate)``,
so replicates can run in any order or in parallel and still give the same
table.  In deterministic mode the wall-time column is written as zero so
exports are bit-identical between runs.
"""

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .design import Panel
from .errors import DomainError, SegZipError, StructuralError
from .laplace import FitOptions
from .segfit import AlgorithmOptions, GridOptions, fit_known, fit_random, predict
from .segfun import cp_from_lambda
from .simulate import derive_seed, gen_scenario, scenario_spec

log = logging.getLogger(__name__)

__all__ = [
    "FitRecipe",
    "ReplicateRow",
    "ReplicateInfo",
    "ReplicateTable",
    "ParamSummary",
    "DiagnosticsBundle",
    "run_replicate",
    "run_replicates",
    "summarize",
    "residuals",
    "mahalanobis_qq",
    "diagnose",
    "arb_percent",
    "residual_arrays",
    "qq_slope",
]

SD_SCALE_NOTE = ("sd is unscaled; published tables print sd multiplied by 10, "
                 "assumed uniform across all cluster sizes")


@dataclass(frozen=True)
class FitRecipe:
    """How each replicate is fitted.

    ``method`` is ``"random"`` (grid search unless ``init_psi`` is given,
    then the iterative algorithm) or ``"known"`` (changepoint fixed at
    ``known_psi``).
    """

    method: str = "random"
    grid_step: float = 0.25
    init_psi: Optional[float] = None
    known_psi: Optional[float] = None
    tol: float = 1e-5
    max_iter: int = 50
    se: bool = True

    def __post_init__(self):
        if self.method not in ("random", "known"):
            raise DomainError(f"unknown fit method {self.method!r}")
        if self.method == "known" and self.known_psi is None:
            raise DomainError("the known recipe needs known_psi")
        if self.grid_step <= 0 or self.tol <= 0 or self.max_iter < 1:
            raise DomainError("grid_step and tol must be positive, max_iter at least 1")

    def algorithm(self):
        return AlgorithmOptions(tol=self.tol, max_iter=self.max_iter, se=self.se)

    def grid(self):
        return GridOptions(step=self.grid_step)


@dataclass(frozen=True)
class ReplicateRow:
    replicate: int
    param: str
    truth: float
    estimate: float
    se: float
    converged: bool
    iterations: int
    wall_time: float


@dataclass(frozen=True)
class ReplicateInfo:
    """Per-replicate record beyond the parameter rows."""

    replicate: int
    seed: int
    psi0: Optional[float]
    psi_truth: Optional[float]
    loglik_trace: tuple
    converged: bool
    iterations: int
    error: Optional[str] = None

    @property
    def final_rel_change(self):
        tr = self.loglik_trace
        if len(tr) < 2:
            return float("nan")
        return abs(tr[-1] - tr[-2]) / abs(tr[-2])


@dataclass
class ReplicateTable:
    rows: list
    infos: list
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, ReplicateTable):
            return NotImplemented
        return (_rows_equal(self.rows, other.rows) and self.infos == other.infos
                and self.meta == other.meta)

    @property
    def params(self):
        seen = []
        for r in self.rows:
            if r.param not in seen:
                seen.append(r.param)
        return seen

    @property
    def n_replicates(self):
        return len(self.infos)

    def column(self, param, name, converged_only=False):
        return np.array([getattr(r, name) for r in self.rows
                         if r.param == param and (r.converged or not converged_only)], dtype=float)

    def to_records(self):
        return [asdict(r) for r in self.rows]

    def to_dict(self):
        return {"meta": self.meta, "rows": self.to_records(),
                "replicates": [_info_dict(i) for i in self.infos]}

    @classmethod
    def from_dict(cls, d):
        rows = [ReplicateRow(**r) for r in d["rows"]]
        infos = [ReplicateInfo(**{**i, "loglik_trace": tuple(i["loglik_trace"])})
                 for i in d["replicates"]]
        return cls(rows, infos, dict(d.get("meta", {})))


def _same(a, b):
    if isinstance(a, float) and isinstance(b, float):
        return a == b or (np.isnan(a) and np.isnan(b))
    return a == b


def _rows_equal(a, b):
    if len(a) != len(b):
        return False
    return all(all(_same(getattr(x, f), getattr(y, f)) for f in x.__dataclass_fields__)
               for x, y in zip(a, b))


def _info_dict(info):
    d = asdict(info)
    d["loglik_trace"] = list(info.loglik_trace)
    return d


def _config_dict(cfg):
    return cfg.to_dict() if hasattr(cfg, "to_dict") else asdict(cfg)


def _generator_changepoint(cfg, truth):
    """Cluster-average of ``g(lambda)`` under each cluster's bounds."""
    return float(np.mean(cp_from_lambda(np.full(len(truth["l1"]), cfg.lam),
                                        (truth["l1"], truth["l2"]))))


def run_replicate(cfg, replicate, recipe=None, deterministic=True):
    """Generate and fit one replicate; returns ``(rows, info)``.

    A failed fit yields NaN estimates with ``converged=False`` and the error
    text in ``info.error``.
    """
    recipe = recipe or FitRecipe()
    data, truth = gen_scenario(cfg, replicate)
    spec = scenario_spec(cfg)
    truth_params = cfg.truth()
    seed = derive_seed(cfg.master_seed, replicate)
    psi_truth = _generator_changepoint(cfg, truth)
    t0 = time.perf_counter()
    fit, err = None, None
    try:
        if recipe.method == "random":
            fit = fit_random(data, spec, init_psi=recipe.init_psi, opts=recipe.algorithm(),
                             grid=recipe.grid())
        else:
            fit = fit_known(data, spec.known_version(recipe.known_psi),
                            opts=FitOptions(hessian=recipe.se))
    except (SegZipError, np.linalg.LinAlgError, FloatingPointError) as exc:
        err = f"{type(exc).__name__}: {exc}"
        log.warning("replicate %d failed: %s", replicate, err)
    wall = 0.0 if deterministic else time.perf_counter() - t0
    names = [] if fit is None else fit.names
    rows = []
    for name, value in truth_params.items():
        if fit is not None and name not in names:
            continue
        if fit is None and recipe.method == "known" and name == "lambda":
            continue
        if fit is None:
            est = se = float("nan")
        else:
            est, se = (float(v) for v in fit.param(name))
        rows.append(ReplicateRow(
            replicate=int(replicate), param=name, truth=float(value), estimate=est, se=se,
            converged=bool(fit is not None and fit.converged),
            iterations=0 if fit is None else int(fit.iterations), wall_time=float(wall)))
    info = ReplicateInfo(
        replicate=int(replicate), seed=int(seed),
        psi0=None if fit is None or fit.psi0 is None else float(fit.psi0),
        psi_truth=psi_truth,
        loglik_trace=() if fit is None else tuple(float(v) for v in fit.loglik_trace),
        converged=bool(fit is not None and fit.converged),
        iterations=0 if fit is None else int(fit.iterations), error=err)
    return rows, info


def _run_one(args):
    cfg, r, recipe, deterministic = args
    return run_replicate(cfg, r, recipe, deterministic)


def _meta(cfg, recipe, deterministic):
    meta = {"config": _config_dict(cfg), "recipe": asdict(recipe),
            "deterministic": bool(deterministic), "sd_note": SD_SCALE_NOTE}
    # JSON normal form, so metadata read back from a checkpoint compares equal
    return json.loads(json.dumps(meta))


def _load_checkpoint(path, meta):
    done = {}
    if not path or not os.path.exists(path):
        return done
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("meta") != meta:
                raise DomainError(f"checkpoint {path} was written for a different configuration")
            rows = [ReplicateRow(**r) for r in rec["rows"]]
            info = rec["info"]
            info = ReplicateInfo(**{**info, "loglik_trace": tuple(info["loglik_trace"])})
            done[info.replicate] = (rows, info)
    return done


def _append_checkpoint(path, meta, rows, info):
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps({"meta": meta, "rows": [asdict(r) for r in rows],
                             "info": _info_dict(info)}) + "\n")


def run_replicates(cfg, R, recipe=None, workers=1, deterministic=True, start=0,
                   checkpoint=None, progress=None):
    """Run replicates ``start .. start+R-1`` and collect a :class:`ReplicateTable`.

    ``workers > 1`` uses a process pool; rows are ordered by replicate index
    whatever the completion order.  ``checkpoint`` names a JSON-lines file
    that receives each finished replicate and is read back on restart.
    """
    if R < 1:
        raise DomainError("need at least one replicate")
    recipe = recipe or FitRecipe()
    meta = _meta(cfg, recipe, deterministic)
    done = _load_checkpoint(checkpoint, meta)
    todo = [r for r in range(start, start + R) if r not in done]
    jobs = [(cfg, r, recipe, deterministic) for r in todo]

    def record(out):
        rows, info = out
        done[info.replicate] = out
        if checkpoint:
            _append_checkpoint(checkpoint, meta, rows, info)
        if progress is not None:
            progress(info)

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for out in pool.map(_run_one, jobs):
                record(out)
    else:
        for job in jobs:
            record(_run_one(job))
    rows, infos = [], []
    for r in range(start, start + R):
        rr, info = done[r]
        rows.extend(rr)
        infos.append(info)
    if all(i.error is not None for i in infos):
        raise SegZipError(f"all {R} replicates failed; first error: {infos[0].error}")
    return ReplicateTable(rows, infos, meta)


@dataclass(frozen=True)
class ParamSummary:
    param: str
    truth: float
    mean: float
    median: float
    sd: float
    arb_percent: Optional[float]
    abs_bias: float
    n_used: int
    n_excluded: int
    flags: tuple = ()


def arb_percent(mean, truth):
    """Absolute relative bias in percent; ``None`` when ``truth == 0``."""
    if truth == 0:
        return None
    return 100.0 * abs(mean - truth) / abs(truth)


def summarize(table, params=None):
    """Per-parameter mean, median, SD and ARB over converged replicates."""
    out = {}
    for name in params or table.params:
        rows = [r for r in table.rows if r.param == name]
        if not rows:
            raise DomainError(f"no rows for parameter {name!r}")
        truth = rows[0].truth
        used = np.array([r.estimate for r in rows if r.converged and np.isfinite(r.estimate)])
        if len(used) < 2:
            raise DomainError(f"{name}: need at least two converged replicates, got {len(used)}")
        mean = float(np.mean(used))
        arb = arb_percent(mean, truth)
        out[name] = ParamSummary(
            param=name, truth=truth, mean=mean, median=float(np.median(used)),
            sd=float(np.std(used, ddof=1)), arb_percent=arb, abs_bias=abs(mean - truth),
            n_used=len(used), n_excluded=len(rows) - len(used),
            flags=("arb_undefined_truth_zero",) if arb is None else ())
    return out


@dataclass
class DiagnosticsBundle:
    fitted: np.ndarray
    pearson: np.ndarray
    working: np.ndarray
    mahalanobis: Optional[np.ndarray]
    chi2_quantiles: Optional[np.ndarray]
    flags: dict = field(default_factory=dict)

    def to_dict(self):
        def arr(a):
            return None if a is None else np.asarray(a, dtype=float).tolist()
        return {"fitted": arr(self.fitted), "pearson": arr(self.pearson),
                "working": arr(self.working), "mahalanobis": arr(self.mahalanobis),
                "chi2_quantiles": arr(self.chi2_quantiles), "flags": self.flags}


def residual_arrays(y, mu, pi, eps=1e-300):
    """Pearson and working residuals of counts ``y`` on the ZIP mixture mean.

    Pearson: ``(y - yhat) / sqrt((1 - pi) mu (1 + pi mu))``.
    Working: ``(y - yhat) / yhat``.  Returns ``(yhat, pearson, working,
    n_guarded)`` where ``n_guarded`` counts fitted means floored at ``eps``.
    """
    y, mu, pi = (np.asarray(a, dtype=float) for a in (y, mu, pi))
    yhat = (1.0 - pi) * mu
    var = yhat * (1.0 + pi * mu)
    small = yhat < eps
    den_w = np.where(small, eps, yhat)
    den_p = np.sqrt(np.where(var < eps, eps, var))
    return yhat, (y - yhat) / den_p, (y - yhat) / den_w, int(small.sum())


def residuals(fit, data):
    """Pearson and working residuals against fitted values (observed cells only)."""
    panel = data if isinstance(data, Panel) else Panel.from_dataset(data, fit.spec)
    pr = predict(fit, panel)
    y = panel.y[panel.mask]
    _, mu, pi = pr.flat()
    yhat, pearson, working, guarded = residual_arrays(y, mu, pi)
    flags = {"yhat_floored": guarded} if guarded else {}
    return DiagnosticsBundle(yhat, pearson, working, None, None, flags)


def _fit_covariance(fit):
    q = fit.spec.q_total
    if not q or fit.variances is None:
        raise StructuralError("fit has no cluster random effects")
    sd = np.sqrt(np.asarray(fit.variances, dtype=float))
    C = np.asarray(fit.correlations, dtype=float) if fit.correlations is not None else np.eye(q)
    return C * np.outer(sd, sd)


def mahalanobis_qq(fit, rel_tol=1e-10):
    """Sorted squared Mahalanobis distances of cluster modes and chi-square quantiles."""
    G = _fit_covariance(fit)
    q = G.shape[0]
    names = fit.spec.random_names()
    w, V = np.linalg.eigh(0.5 * (G + G.T))
    bad = w <= rel_tol * max(w.max(), 0.0) if w.max() > 0 else np.ones(q, dtype=bool)
    if bad.any():
        dirs = []
        for k in np.flatnonzero(bad):
            load = " + ".join(f"{V[j, k]:.3g}*{names[j]}" for j in range(q) if abs(V[j, k]) > 1e-3)
            dirs.append(load)
        raise DomainError("random-effect covariance is singular along: " + "; ".join(dirs))
    B = np.asarray(fit.cluster_modes, dtype=float)[:, :q]
    sol = np.linalg.solve(G, B.T)
    d2 = np.sort(np.einsum("ij,ji->i", B, sol))
    n = len(d2)
    qs = stats.chi2.ppf((np.arange(1, n + 1) - 0.5) / n, df=q)
    return d2, qs


def diagnose(fit, data):
    """Residual channels plus the random-effect QQ pairs when available."""
    bundle = residuals(fit, data)
    try:
        bundle.mahalanobis, bundle.chi2_quantiles = mahalanobis_qq(fit)
    except (StructuralError, DomainError) as exc:
        bundle.flags["mahalanobis"] = str(exc)
    return bundle


def qq_slope(d2, quantiles):
    """Least-squares slope of sorted distances on chi-square quantiles."""
    return float(np.polyfit(quantiles, d2, 1)[0])
