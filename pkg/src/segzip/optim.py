"""Finite-difference derivatives and a BFGS minimiser.

Kept deliberately small: the objectives here are expensive (each call
solves one inner problem per cluster) and noisy at the 1e-11 level, so the
minimiser uses a backtracking Armijo search and central-difference
gradients with the step ``h_k = eps**(1/3) * (1 + |x_k|)``.
"""

from dataclasses import dataclass, field

import numpy as np

EPS = np.finfo(float).eps
GRAD_STEP = EPS ** (1.0 / 3.0)
HESS_STEP = EPS ** (1.0 / 4.0)
STALL_WINDOW = 10


def fd_gradient(f, x, step=GRAD_STEP, f0=None):
    """Central differences; falls back to a one-sided difference when one
    side of the stencil is not finite (and to zero when both are not)."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for k in range(len(x)):
        h = step * (1.0 + abs(x[k]))
        xp = x.copy()
        xm = x.copy()
        xp[k] += h
        xm[k] -= h
        fp, fm = f(xp), f(xm)
        if np.isfinite(fp) and np.isfinite(fm):
            g[k] = (fp - fm) / (xp[k] - xm[k])
            continue
        f0 = f(x) if f0 is None else f0
        if np.isfinite(fp):
            g[k] = (fp - f0) / (xp[k] - x[k])
        elif np.isfinite(fm):
            g[k] = (f0 - fm) / (x[k] - xm[k])
        else:
            g[k] = 0.0
    return g


def fd_hessian(f, x, step=HESS_STEP, f0=None):
    """Symmetric central-difference Hessian from function values only."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    h = step * (1.0 + np.abs(x))
    f0 = f(x) if f0 is None else f0
    H = np.empty((n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = h[k]
        H[k, k] = (f(x + 2 * e) - 2 * f0 + f(x - 2 * e)) / (4 * h[k] ** 2)
        for m in range(k):
            d = np.zeros(n)
            d[m] = h[m]
            H[k, m] = H[m, k] = (f(x + e + d) - f(x + e - d) - f(x - e + d) + f(x - e - d)) / (
                4 * h[k] * h[m])
    return H


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    converged: bool
    n_iter: int
    message: str
    trace: list = field(default_factory=list)


def bfgs(fun, x0, grad=None, ftol=1e-8, gtol=1e-4, max_iter=500, callback=None):
    """Minimise ``fun`` from ``x0``.

    Stops when the relative change in ``fun`` falls below ``ftol`` *and* the
    gradient max-norm falls below ``gtol``, or when the objective has moved
    by less than ``STALL_WINDOW * ftol`` (relative) over the last
    ``STALL_WINDOW`` steps.  ``fun`` may return ``inf`` to
    reject a trial point.  ``grad(x, f_x)`` defaults to central differences.
    The returned point is always the best one seen.
    """
    x = np.asarray(x0, dtype=float).copy()
    n = len(x)
    f = fun(x)
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the starting point")
    if grad is None:
        def grad(z, fz=None):
            return fd_gradient(fun, z, f0=fz)
    g = grad(x, f)
    trace = [f]
    if n == 0:
        return OptimResult(x, f, g, True, 0, "no free parameters", trace)
    Hinv = np.eye(n) / max(1.0, np.abs(g).max())
    fresh = True
    message = "maximum iterations reached"
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.abs(g).max() < gtol * 1e-2:
            converged, message = True, "gradient vanished"
            break
        p = -Hinv @ g
        slope = g @ p
        if slope >= 0:
            Hinv = np.eye(n) / max(1.0, np.abs(g).max())
            p = -Hinv @ g
            slope = g @ p
            fresh = True
        alpha = 1.0
        accepted = False
        while alpha > 1e-12:
            x_new = x + alpha * p
            f_new = fun(x_new)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            if not fresh:
                Hinv = np.eye(n) / max(1.0, np.abs(g).max())
                fresh = True
                continue
            message = "line search failed"
            break
        if callback is not None:
            callback(x_new, f_new)
        g_new = grad(x_new, f_new)
        if not np.all(np.isfinite(g_new)):
            g_new = fd_gradient(fun, x_new, f0=f_new)
        s = x_new - x
        yv = g_new - g
        sy = s @ yv
        rel = abs(f_new - f) / max(abs(f), 1.0)
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(yv):
            if fresh:
                Hinv = np.eye(n) * (sy / (yv @ yv))
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, yv)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
            fresh = False
        if rel < ftol and np.abs(g).max() < gtol:
            converged, message = True, "converged"
            break
        # slow drift along flat directions (e.g. a variance heading to zero)
        if len(trace) > STALL_WINDOW and rel < ftol:
            past = trace[-STALL_WINDOW - 1]
            if abs(past - f) / max(abs(f), 1.0) < STALL_WINDOW * ftol:
                converged, message = True, "converged (objective stalled)"
                break
    return OptimResult(x, f, g, converged, it, message, trace)
