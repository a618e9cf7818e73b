"""Segmentation (hinge) functions and the bounded logistic changepoint map.

The changepoint is parameterised as ``psi = l1 + (l2 - l1) * expit(lam)``,
which is algebraically ``(l1 + l2*e^lam) / (1 + e^lam)`` but never forms
``e^lam`` and so cannot overflow.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import special

from .errors import DomainError

__all__ = [
    "SegKind",
    "ChangepointBounds",
    "seg_value",
    "seg_dpsi",
    "cp_from_lambda",
    "cp_derivative",
    "lambda_from_cp",
]

# expit(+-36) is within 2.3e-16 of its limit; beyond that the map is flat
LAMBDA_SATURATION = 36.0


class SegKind(str, Enum):
    LINEAR = "linear"
    QUADRATIC = "quadratic"


@dataclass(frozen=True)
class ChangepointBounds:
    l1: float
    l2: float

    def __post_init__(self):
        l1, l2 = float(self.l1), float(self.l2)
        if not (np.isfinite(l1) and np.isfinite(l2) and l1 < l2):
            raise DomainError(f"changepoint bounds need l1 < l2, got ({self.l1}, {self.l2})")
        object.__setattr__(self, "l1", l1)
        object.__setattr__(self, "l2", l2)

    @property
    def width(self):
        return self.l2 - self.l1


def _kind(kind):
    return kind if isinstance(kind, SegKind) else SegKind(kind)


def _scalar_or_array(x):
    return float(x) if np.ndim(x) == 0 else x


def seg_value(kind, t, psi):
    """``(t - psi)_+`` for linear, ``(t - psi)_+**2`` for quadratic."""
    h = np.maximum(np.asarray(t, dtype=float) - psi, 0.0)
    if _kind(kind) is SegKind.QUADRATIC:
        h = h * h
    return _scalar_or_array(h)


def seg_dpsi(kind, t, psi):
    """Derivative of :func:`seg_value` in ``psi``; zero at ``t == psi``."""
    diff = np.asarray(t, dtype=float) - psi
    after = diff > 0.0
    if _kind(kind) is SegKind.QUADRATIC:
        d = np.where(after, -2.0 * diff, 0.0)
    else:
        d = np.where(after, -1.0, 0.0)
    return _scalar_or_array(d)


def _bounds_arrays(bounds):
    """Accept one ChangepointBounds or a sequence of them (one per element)."""
    if isinstance(bounds, ChangepointBounds):
        return bounds.l1, bounds.l2
    if isinstance(bounds, tuple) and len(bounds) == 2 and np.ndim(bounds[0]) > 0:
        l1, l2 = (np.asarray(b, dtype=float) for b in bounds)
        if np.any(~(l1 < l2)):
            raise DomainError("changepoint bounds need l1 < l2")
        return l1, l2
    raise DomainError("bounds must be ChangepointBounds or a (l1_array, l2_array) pair")


def cp_from_lambda(lam, bounds):
    l1, l2 = _bounds_arrays(bounds)
    lam = np.clip(np.asarray(lam, dtype=float), -700.0, 700.0)
    return _scalar_or_array(l1 + (l2 - l1) * special.expit(lam))


def cp_derivative(lam, bounds):
    """``d psi / d lam = (l2 - l1) e^lam / (1 + e^lam)^2``."""
    l1, l2 = _bounds_arrays(bounds)
    lam = np.asarray(lam, dtype=float)
    return _scalar_or_array((l2 - l1) * special.expit(lam) * special.expit(-lam))


def lambda_from_cp(psi, bounds):
    l1, l2 = _bounds_arrays(bounds)
    psi = np.asarray(psi, dtype=float)
    if np.any(~((psi > l1) & (psi < l2))):
        raise DomainError("changepoint must lie strictly inside (l1, l2)")
    return _scalar_or_array(np.log(psi - l1) - np.log(l2 - psi))
