"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from .nn import NumericalError

DEFAULT_FLOOR = 1e-2


def relative_error(analytic, numeric, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise.

    The floor keeps near-zero components from turning rounding noise into a
    large ratio; above it the measure is purely relative.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f, x: np.ndarray, eps: float = 1e-3, coords=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (``x`` is restored afterwards).

    ``coords`` limits the evaluation to a list of flat indices; other entries
    of the result are left at zero.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    flat = x.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    indices = range(flat.size) if coords is None else coords
    for i in indices:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite function value at coordinate {i}")
        # divide by the step actually taken after rounding to x.dtype
        step = float(np.asarray(orig + eps, dtype=x.dtype)) - float(np.asarray(orig - eps, dtype=x.dtype))
        out[i] = (fp - fm) / step
    return out.reshape(x.shape)


def grad_check(f, x: np.ndarray, analytic: np.ndarray, eps: float = 1e-3, coords=None,
               floor: float = DEFAULT_FLOOR) -> float:
    """Max relative error between ``analytic`` and central differences of ``f``.

    ``f`` maps ``x`` (mutated in place during probing) to a scalar.
    """
    if not np.all(np.isfinite(analytic)):
        raise NumericalError("analytic gradient has non-finite entries")
    num = numeric_grad(f, x, eps, coords)
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = num.reshape(-1)
    if coords is not None:
        idx = np.asarray(list(coords), dtype=np.int64)
        a, n = a[idx], n[idx]
    if a.size == 0:
        return 0.0
    return float(relative_error(a, n, floor).max())
